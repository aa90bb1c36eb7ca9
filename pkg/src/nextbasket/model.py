"""The full next-basket model: branches, attention stacks, fusion, scoring, loss.

Three input branches (items, categorical attributes, numerical attributes)
each run their own causal attention stack over time.  Per time step, the
item branch is then refined by attention across its basket slots and the
categorical branch across its attribute slots, both order-free within the
step.  The surviving branch vectors concatenate into a small fusion network
whose D-wide output is dotted against the shared item embedding table to
score every catalog item.  Ablation flags switch each mechanism off.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attention import AttentionRecorder, MHSABParams, build_masks, make_stack, stack, stack_parameters
from .data import AttributeSchema, ChronoSplit, Dataset, UserSequence, baskets_in
from .encoder import PADDING_MODES, EmbeddingTables, EncodedSequence, SequenceLayout, encode_sequences, time_aware_pad
from .errors import CheckpointError, ConfigError, ContractError
from .tensor import Tensor, concat_last

VARIANT_TAGS = ("Full", "P", "B", "B-", "T", "I")

CHECKPOINT_MAGIC = b"NBCKPT01"


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and ablation switches; fully determines the parameter set."""

    schema: AttributeSchema
    catalog_size: int
    v_max: int
    dim: int = 8
    seq_len: int = 16
    period: int = 7
    time_heads: tuple[int, ...] = (1,)
    intra_heads: tuple[int, ...] = (1,)
    dropout: float = 0.0
    use_periodic: bool = True
    use_attributes: bool = True
    use_intra_basket: bool = True
    use_intra_attribute: bool = True
    use_time_level: bool = True
    padding_mode: str = "time_aware"

    def __post_init__(self):
        if self.catalog_size < 1 or self.v_max < 1 or self.seq_len < 1:
            raise ConfigError("catalog_size, v_max and seq_len must be >= 1")
        if self.dim < 2:
            raise ConfigError(f"embedding dim must be >= 2, got {self.dim}")
        if self.period < 1:
            raise ConfigError(f"period must be >= 1, got {self.period}")
        if not self.time_heads or any(h < 1 for h in self.time_heads):
            raise ConfigError(f"time_heads needs at least one layer of >= 1 heads, got {self.time_heads}")
        if any(h < 1 for h in self.intra_heads):
            raise ConfigError(f"intra head counts must be >= 1, got {self.intra_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.padding_mode not in PADDING_MODES:
            raise ConfigError(f"padding_mode must be one of {PADDING_MODES}")

    # -- derived shape helpers -------------------------------------------------

    @property
    def index_parts(self) -> int:
        return 2 if self.use_periodic else 1

    @property
    def has_cat_branch(self) -> bool:
        return self.use_attributes and self.schema.n_cat_attrs > 0

    @property
    def has_num_branch(self) -> bool:
        return self.use_attributes and self.schema.n_num > 0

    @property
    def width_items(self) -> int:
        return (self.v_max + self.index_parts) * self.dim

    @property
    def width_cats(self) -> int:
        return (self.schema.n_cat_attrs + self.index_parts) * self.dim

    @property
    def width_nums(self) -> int:
        return self.schema.n_num + self.index_parts * self.dim

    @property
    def fusion_width(self) -> int:
        width = self.width_items
        if self.has_cat_branch:
            width += self.width_cats
        if self.has_num_branch:
            width += self.width_nums
        return width

    def to_json(self) -> dict:
        obj = dataclasses.asdict(self)
        obj["schema"] = self.schema.to_json()
        obj["time_heads"] = list(self.time_heads)
        obj["intra_heads"] = list(self.intra_heads)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["schema"] = AttributeSchema.from_json(obj["schema"])
        obj["time_heads"] = tuple(obj["time_heads"])
        obj["intra_heads"] = tuple(obj["intra_heads"])
        return cls(**obj)

    @classmethod
    def from_dataset(cls, dataset: Dataset, split: ChronoSplit, **overrides) -> "ModelConfig":
        """Fill data-dependent fields; v_max is the largest training basket."""
        sizes = [
            len(b.item_ids)
            for user in dataset.users
            for b in baskets_in(user, split.train)
        ]
        if not sizes:
            raise ContractError("no training-range baskets to size the model from")
        fields = {
            "schema": dataset.schema,
            "catalog_size": dataset.catalog_size,
            "v_max": max(sizes),
        }
        fields.update(overrides)
        return cls(**fields)


def make_variant(config: ModelConfig, tag: str) -> ModelConfig:
    """Flag combinations for the standard ablation variants."""
    changes = {
        "Full": {},
        "P": {"use_periodic": False},
        "B": {"use_attributes": False},
        "B-": {"use_attributes": False, "use_intra_basket": False},
        "T": {"use_intra_basket": False, "use_intra_attribute": False},
        "I": {"use_time_level": False},
    }
    if tag not in changes:
        raise ConfigError(f"unknown variant tag {tag!r}; expected one of {VARIANT_TAGS}")
    return dataclasses.replace(config, **changes[tag])


class ModelParams:
    """All learnable tensors for a config, addressable by stable names."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        schema = config.schema
        self.tables = EmbeddingTables(
            config.catalog_size,
            schema.n_cat_values if config.has_cat_branch else 0,
            config.seq_len,
            config.period if config.use_periodic else 0,
            config.dim,
            rng,
        )
        self.time_stacks: dict[str, list[MHSABParams]] = {}
        if config.use_time_level:
            self.time_stacks["items"] = make_stack(config.width_items, config.time_heads, config.dropout, rng)
            if config.has_cat_branch:
                self.time_stacks["cats"] = make_stack(config.width_cats, config.time_heads, config.dropout, rng)
            if config.has_num_branch:
                self.time_stacks["nums"] = make_stack(config.width_nums, config.time_heads, config.dropout, rng)
        self.intra_basket_stack: list[MHSABParams] = []
        if config.use_intra_basket and config.intra_heads:
            self.intra_basket_stack = make_stack(config.dim, config.intra_heads, config.dropout, rng)
        self.intra_attr_stack: list[MHSABParams] = []
        if config.use_intra_attribute and config.intra_heads and config.has_cat_branch:
            self.intra_attr_stack = make_stack(config.dim, config.intra_heads, config.dropout, rng)

        bound = 1.0 / np.sqrt(config.fusion_width)
        self.fuse_w1 = Tensor(rng.uniform(-bound, bound, (config.fusion_width, config.dim)), requires_grad=True)
        self.fuse_b1 = Tensor(np.zeros(config.dim), requires_grad=True)
        bound = 1.0 / np.sqrt(config.dim)
        self.fuse_w2 = Tensor(rng.uniform(-bound, bound, (config.dim, config.dim)), requires_grad=True)
        self.fuse_b2 = Tensor(np.zeros(config.dim), requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.tables.named_parameters())
        for branch, blocks in self.time_stacks.items():
            out.update(stack_parameters(blocks, f"time.{branch}"))
        out.update(stack_parameters(self.intra_basket_stack, "intra_basket"))
        out.update(stack_parameters(self.intra_attr_stack, "intra_attr"))
        out.update(
            {
                "fuse.w1": self.fuse_w1,
                "fuse.b1": self.fuse_b1,
                "fuse.w2": self.fuse_w2,
                "fuse.b2": self.fuse_b2,
            }
        )
        return out

    @property
    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())


class NextBasketModel:
    """Config + parameters + the forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = ModelParams(config, np.random.default_rng(seed))

    # -- encoding ----------------------------------------------------------------

    def layout(
        self,
        user: UserSequence,
        end_step: Optional[int] = None,
        slot_rng: Optional[np.random.Generator] = None,
    ) -> SequenceLayout:
        return time_aware_pad(
            user,
            self.config.seq_len,
            self.config.v_max,
            self.config.schema,
            self.config.padding_mode,
            end_step,
            slot_rng,
        )

    def encode_layouts(self, layouts: Sequence[SequenceLayout]) -> EncodedSequence:
        return encode_sequences(
            layouts,
            self.params.tables,
            use_periodic=self.config.use_periodic,
            with_attributes=self.config.use_attributes,
        )

    def encode(self, users: Sequence[UserSequence]) -> tuple[list[SequenceLayout], EncodedSequence]:
        layouts = [self.layout(u) for u in users]
        return layouts, self.encode_layouts(layouts)

    # -- forward -----------------------------------------------------------------

    def _check_encoded(self, encoded: EncodedSequence):
        cfg = self.config
        if encoded.items.data.shape[-1] != cfg.width_items:
            raise ContractError(
                f"encoded item width {encoded.items.data.shape[-1]} does not match "
                f"config width {cfg.width_items}"
            )
        if cfg.has_cat_branch and encoded.cats is None:
            raise ContractError("config expects a categorical branch but encoding has none")
        if cfg.has_num_branch and encoded.nums is None:
            raise ContractError("config expects a numerical branch but encoding has none")

    def _intra_refine(
        self,
        tokens: Tensor,
        blocks: list[MHSABParams],
        token_real: np.ndarray,
        training: bool,
        rng,
        recorder,
        tag: str,
    ) -> Tensor:
        """Attention across within-step slots; identity when the stack is empty."""
        if not blocks:
            return tokens
        shape = tokens.data.shape
        n_tok = token_real.shape[-1]
        split = tokens.reshape(shape[:-1] + (n_tok, self.config.dim))
        mask = build_masks(token_real, causal=False)
        refined = stack(split, blocks, mask, training, rng, recorder, tag)
        return refined.reshape(shape)

    def forward_logits(
        self,
        encoded: EncodedSequence,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        recorder: Optional[AttentionRecorder] = None,
    ) -> Tensor:
        """Per-step, per-item relevance logits, shape (B, T, |V|)."""
        self._check_encoded(encoded)
        cfg = self.config
        time_mask = build_masks(encoded.presence, causal=True)
        idx = cfg.index_parts

        branches = {"items": encoded.items}
        if cfg.has_cat_branch:
            branches["cats"] = encoded.cats
        if cfg.has_num_branch:
            branches["nums"] = encoded.nums

        if cfg.use_time_level:
            for name, tokens in branches.items():
                branches[name] = stack(
                    tokens, self.params.time_stacks[name], time_mask, training, rng, recorder, f"time.{name}"
                )

        if self.params.intra_basket_stack:
            slot_real = np.concatenate(
                [encoded.slot_mask, np.repeat(encoded.presence[..., None], idx, axis=-1)], axis=-1
            )
            branches["items"] = self._intra_refine(
                branches["items"], self.params.intra_basket_stack, slot_real, training, rng, recorder, "intra_basket"
            )
        if "cats" in branches and self.params.intra_attr_stack:
            attr_real = np.concatenate(
                [
                    np.repeat(encoded.record_mask[..., None], cfg.schema.n_cat_attrs, axis=-1),
                    np.repeat(encoded.presence[..., None], idx, axis=-1),
                ],
                axis=-1,
            )
            branches["cats"] = self._intra_refine(
                branches["cats"], self.params.intra_attr_stack, attr_real, training, rng, recorder, "intra_attr"
            )

        fused = self.fuse(list(branches.values()))
        return fused.matmul(self.params.tables.Q.transpose_last2())

    def fuse(self, branch_steps: list[Tensor]) -> Tensor:
        """Concatenate enabled branch vectors and map them to width D."""
        if not branch_steps:
            raise ContractError("fusion needs at least one enabled branch")
        joined = branch_steps[0] if len(branch_steps) == 1 else concat_last(branch_steps)
        if joined.data.shape[-1] != self.config.fusion_width:
            raise ContractError(
                f"fusion input width {joined.data.shape[-1]} does not match "
                f"config width {self.config.fusion_width}"
            )
        hidden = (joined.matmul(self.params.fuse_w1) + self.params.fuse_b1).relu()
        return hidden.matmul(self.params.fuse_w2) + self.params.fuse_b2

    def forward(
        self,
        encoded: EncodedSequence,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        recorder: Optional[AttentionRecorder] = None,
    ) -> Tensor:
        """Sigmoid relevance scores, shape (B, T, |V|)."""
        return self.forward_logits(encoded, training, rng, recorder).sigmoid()

    @property
    def n_parameters(self) -> int:
        return self.params.n_parameters


# -- training targets and loss ---------------------------------------------------


def build_targets(layouts: Sequence[SequenceLayout], catalog_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Next-step multi-hot targets and the valid-step mask.

    Step t is valid when it is observed and the next layout step carries a
    basket; the final step never has a successor inside the window.
    """
    n_batch = len(layouts)
    seq_len = layouts[0].seq_len
    targets = np.zeros((n_batch, seq_len, catalog_size))
    valid = np.zeros((n_batch, seq_len), dtype=bool)
    for bi, layout in enumerate(layouts):
        exists = layout.basket_exists
        for t in range(seq_len - 1):
            if layout.presence[t] and exists[t + 1]:
                valid[bi, t] = True
                ids = layout.item_ids[t + 1][layout.slot_mask[t + 1]]
                targets[bi, t, ids] = 1.0
    return targets, valid


def bce_loss(
    logits: Tensor, targets: np.ndarray, valid: np.ndarray, normalize: str = "none"
) -> Tensor:
    """Binary cross-entropy over the whole catalog at every valid step.

    Positives are the next step's basket; every other catalog item is a
    negative (no sampling).  ``normalize="steps"`` divides by the number of
    valid steps; ``normalize="users"`` sums per user and averages over the
    batch, which is what the trainer uses.
    """
    if targets.shape != logits.data.shape:
        raise ContractError(
            f"targets shape {targets.shape} does not match logits shape {logits.data.shape}"
        )
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("no valid steps: every step lacks an observed successor basket")
    mask = Tensor(valid[..., None].astype(float))
    y = Tensor(targets)
    per_item = y * logits.log_sigmoid() + Tensor(1.0 - targets) * (-logits).log_sigmoid()
    total = -((per_item * mask).sum())
    if normalize == "steps":
        return total * (1.0 / n_valid)
    if normalize == "users":
        if logits.data.ndim != 3:
            raise ContractError("normalize='users' needs batched (B, T, V) logits")
        return total * (1.0 / logits.data.shape[0])
    if normalize != "none":
        raise ContractError(f"unknown normalize mode {normalize!r}")
    return total


# -- checkpoint format -------------------------------------------------------------


def save_checkpoint(path: str | Path, model: NextBasketModel, extra: Optional[dict] = None) -> None:
    """Versioned binary: magic, JSON header, then flat float32 LE arrays."""
    named = model.params.named_parameters()
    manifest = []
    blobs = []
    for name, tensor in named.items():
        blob = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        manifest.append(
            {"name": name, "shape": list(tensor.data.shape), "crc32": zlib.crc32(blob)}
        )
        blobs.append(blob)
    header = {
        "format": 1,
        "config": model.config.to_json(),
        "manifest": manifest,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(
    path: str | Path, expected_config: Optional[ModelConfig] = None
) -> tuple[NextBasketModel, dict]:
    """Rebuild a model from a checkpoint, verifying structure and checksums."""
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if offset + header_len > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[offset : offset + header_len].decode())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    offset += header_len

    config = ModelConfig.from_json(header["config"])
    if expected_config is not None:
        mine = expected_config.to_json()
        theirs = config.to_json()
        for key in mine:
            if mine[key] != theirs.get(key):
                raise ContractError(
                    f"checkpoint config mismatch on {key!r}: "
                    f"checkpoint has {theirs.get(key)!r}, expected {mine[key]!r}"
                )
    model = NextBasketModel(config, seed=0)
    named = model.params.named_parameters()
    manifest_names = [entry["name"] for entry in header["manifest"]]
    if manifest_names != list(named.keys()):
        raise CheckpointError(f"{path}: parameter manifest does not match the config's parameter set")
    for entry in header["manifest"]:
        tensor = named[entry["name"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated at parameter {entry['name']!r}")
        blob = raw[offset : offset + nbytes]
        if zlib.crc32(blob) != entry["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch at parameter {entry['name']!r}")
        if shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: shape {shape} for {entry['name']!r} does not match config shape {tensor.data.shape}"
            )
        tensor.data[:] = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after parameters")
    return model, header.get("extra", {})
