"""Multi-head self-attention blocks with causal and padding masks.

A block applies h parallel scaled dot-product heads (each with its own
C x C query/key/value projections), concatenates them to width h*C,
projects back to C, then runs the post-norm residual recipe:
``y = LN(x + Drop(MHSA(x)))`` and ``out = LN(y + Drop(FFN(y)))`` where FFN
is two C x C layers with a ReLU between.  Masks are additive: disallowed
logits get a penalty large enough that their softmax weight underflows to
exactly zero, which is what makes the causality guarantees bit-exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError
from .tensor import MASK_PENALTY, Tensor, concat_last, dropout, layer_norm, softmax_last


@dataclass
class AttentionMask:
    """Boolean attend-permission matrix plus the query-row presence mask.

    ``allowed[..., t, s]`` permits position t to read position s.  Padded
    query rows can still have allowed columns under a causal mask, so the
    rows to zero out downstream are tracked separately in ``query_real``.
    """

    allowed: np.ndarray  # (..., T, T) bool
    query_real: np.ndarray  # (..., T) bool


def build_masks(presence: np.ndarray, causal: bool) -> AttentionMask:
    """Disallow attending to padded steps; optionally restrict to s <= t."""
    presence = np.asarray(presence, dtype=bool)
    seq_len = presence.shape[-1]
    allowed = np.broadcast_to(presence[..., None, :], presence.shape + (seq_len,)).copy()
    if causal:
        allowed &= np.tril(np.ones((seq_len, seq_len), dtype=bool))
    return AttentionMask(allowed, presence)


class AttentionRecorder:
    """Collects per-layer, per-head attention weights for offline inspection."""

    def __init__(self):
        self.entries: list[dict] = []

    def record(self, layer: str, head: int, weights: np.ndarray):
        self.entries.append({"layer": layer, "head": head, "weights": weights.tolist()})

    def to_json(self) -> list[dict]:
        return self.entries


class MHSABParams:
    """Weights of one attention block at token width C with h heads."""

    def __init__(self, width: int, n_heads: int, dropout_rate: float, rng: np.random.Generator):
        if width < 2 or n_heads < 1:
            raise DimensionError(f"need width >= 2 and heads >= 1, got {width}, {n_heads}")
        bound = 1.0 / np.sqrt(width)

        def weight(*shape: int) -> Tensor:
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        self.width = width
        self.n_heads = n_heads
        self.dropout_rate = dropout_rate
        self.heads = [
            {"wq": weight(width, width), "wk": weight(width, width), "wv": weight(width, width)}
            for _ in range(n_heads)
        ]
        self.w_concat = weight(n_heads * width, width)
        self.ffn_w1 = weight(width, width)
        self.ffn_b1 = Tensor(np.zeros(width), requires_grad=True)
        self.ffn_w2 = weight(width, width)
        self.ffn_b2 = Tensor(np.zeros(width), requires_grad=True)
        self.ln1_gain = Tensor(np.ones(width), requires_grad=True)
        self.ln1_bias = Tensor(np.zeros(width), requires_grad=True)
        self.ln2_gain = Tensor(np.ones(width), requires_grad=True)
        self.ln2_bias = Tensor(np.zeros(width), requires_grad=True)

    def named_parameters(self, prefix: str = "block") -> dict[str, Tensor]:
        out = {}
        for i, head in enumerate(self.heads):
            for key, tensor in head.items():
                out[f"{prefix}.h{i}.{key}"] = tensor
        out[f"{prefix}.concat"] = self.w_concat
        for key in ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            out[f"{prefix}.{key}"] = getattr(self, key)
        return out


def _check_width(x: Tensor, params: MHSABParams):
    if x.data.shape[-1] != params.width:
        raise DimensionError(
            f"token width {x.data.shape[-1]} does not match block width {params.width}"
        )


def mhsa(
    x: Tensor,
    params: MHSABParams,
    mask: AttentionMask,
    recorder: Optional[AttentionRecorder] = None,
    layer_tag: str = "",
) -> Tensor:
    """Masked multi-head self-attention over the second-to-last axis."""
    _check_width(x, params)
    scale = 1.0 / np.sqrt(params.width)
    penalty = Tensor(np.where(mask.allowed, 0.0, MASK_PENALTY))
    head_outs = []
    for i, head in enumerate(params.heads):
        q = x.matmul(head["wq"])
        k = x.matmul(head["wk"])
        v = x.matmul(head["wv"])
        weights = softmax_last(q.matmul(k.transpose_last2()) * scale + penalty)
        if recorder is not None:
            recorder.record(layer_tag, i, np.array(weights.data))
        head_outs.append(weights.matmul(v))
    concat = head_outs[0] if len(head_outs) == 1 else concat_last(head_outs)
    out = concat.matmul(params.w_concat)
    return out * Tensor(mask.query_real[..., None].astype(float))


def mhsab(
    x: Tensor,
    params: MHSABParams,
    mask: AttentionMask,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    recorder: Optional[AttentionRecorder] = None,
    layer_tag: str = "",
) -> Tensor:
    """One full block: attention and FFN sublayers with residual/dropout/LN."""
    _check_width(x, params)
    keep = Tensor(mask.query_real[..., None].astype(float))
    attended = mhsa(x, params, mask, recorder, layer_tag)
    y = layer_norm(x + dropout(attended, params.dropout_rate, training, rng), params.ln1_gain, params.ln1_bias)
    y = y * keep
    hidden = (y.matmul(params.ffn_w1) + params.ffn_b1).relu()
    ffn = hidden.matmul(params.ffn_w2) + params.ffn_b2
    out = layer_norm(y + dropout(ffn, params.dropout_rate, training, rng), params.ln2_gain, params.ln2_bias)
    return out * keep


def make_stack(
    width: int, heads_per_layer: Sequence[int], dropout_rate: float, rng: np.random.Generator
) -> list[MHSABParams]:
    return [MHSABParams(width, h, dropout_rate, rng) for h in heads_per_layer]


def stack(
    x: Tensor,
    blocks: Sequence[MHSABParams],
    mask: AttentionMask,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    recorder: Optional[AttentionRecorder] = None,
    stack_tag: str = "stack",
) -> Tensor:
    """Apply blocks in order; an empty stack is the identity (with a warning)."""
    if not blocks:
        warnings.warn(f"{stack_tag}: empty block list, applying identity")
        return x
    for depth, block in enumerate(blocks):
        x = mhsab(x, block, mask, training, rng, recorder, f"{stack_tag}.{depth}")
    return x


def stack_parameters(blocks: Sequence[MHSABParams], prefix: str) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for depth, block in enumerate(blocks):
        out.update(block.named_parameters(f"{prefix}.{depth}"))
    return out
