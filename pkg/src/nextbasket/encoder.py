"""Branch input encoding: embedding lookups, time-aware padding, index embeddings.

Each user becomes three token sequences over a fixed window of T calendar
steps: an item branch (padded basket embeddings), a categorical-attribute
branch, and a numerical branch.  Missing calendar steps stay in the layout
as zero tokens so the gap structure survives; every real step additionally
carries a positional embedding p_t and a periodic embedding m_{t mod T'}.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import AttributeSchema, UserSequence
from .errors import ContractError
from .tensor import Tensor, concat_last, concat_rows, gather_rows, zeros

PADDING_MODES = ("time_aware", "left")


class EmbeddingTables:
    """Learnable lookup tables.

    Q holds item embeddings (also used by the scoring head), R categorical
    attribute values, P positional indices, and M periodic indices.
    """

    def __init__(
        self,
        catalog_size: int,
        n_cat_values: int,
        seq_len: int,
        period: int,
        dim: int,
        rng: np.random.Generator,
    ):
        if min(catalog_size, seq_len, dim) < 1 or min(n_cat_values, period) < 0:
            raise ContractError("table sizes must be positive (value/period rows may be zero)")
        bound = 1.0 / np.sqrt(dim)

        def table(rows: int) -> Tensor:
            return Tensor(rng.uniform(-bound, bound, size=(rows, dim)), requires_grad=True)

        self.Q = table(catalog_size)
        self.R = table(n_cat_values) if n_cat_values else zeros((0, dim))
        self.P = table(seq_len)
        self.M = table(period) if period else zeros((0, dim))
        self.dim = dim
        self.period = max(period, 1)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed.item": self.Q, "embed.position": self.P}
        if self.M.data.size:
            out["embed.period"] = self.M
        if self.R.data.size:
            out["embed.value"] = self.R
        return out


def concat_lookup(ids: Sequence[int] | np.ndarray, table: Tensor) -> Tensor:
    """Stack table rows for the given ids: output row i is table[ids[i]]."""
    return gather_rows(table, np.asarray(ids, dtype=int))


def pad_basket(basket_embeddings: Tensor, v_max: int) -> tuple[Tensor, np.ndarray]:
    """Pad a k x D embedding block to v_max rows with zeros and a slot mask.

    Oversized blocks keep their first v_max rows (ascending-id order puts
    the lowest ids first) with a warning.
    """
    k, dim = basket_embeddings.data.shape
    if k > v_max:
        warnings.warn(f"basket of size {k} truncated to the {v_max}-slot layout")
        return basket_embeddings[:v_max], np.ones(v_max, dtype=bool)
    mask = np.arange(v_max) < k
    if k == v_max:
        return basket_embeddings, mask
    return concat_rows([basket_embeddings, zeros((v_max - k, dim))]), mask


def attach_position_period(tokens: Tensor, t: int, P: Tensor, M: Tensor, period: int) -> Tensor:
    """Append p_t and m_{t mod period} along the feature axis."""
    if not 0 <= t < P.data.shape[0]:
        raise ContractError(f"layout index {t} outside the {P.data.shape[0]}-step window")
    return concat_last([tokens, P[t], M[t % period]])


@dataclass
class SequenceLayout:
    """Dense per-step arrays for one user's window of T calendar steps.

    Padded ids are 0 with their mask entry false, so lookups stay in range
    and masking removes their contribution.
    """

    calendar_steps: np.ndarray  # (T,) calendar step per slot, -1 for leading pad
    presence: np.ndarray  # (T,) bool, step observed (basket or record)
    item_ids: np.ndarray  # (T, v_max) int
    slot_mask: np.ndarray  # (T, v_max) bool
    cat_ids: np.ndarray  # (T, n_cat) int
    record_mask: np.ndarray  # (T,) bool, attribute record present
    num_values: np.ndarray  # (T, n_num) float

    @property
    def basket_exists(self) -> np.ndarray:
        return self.slot_mask.any(axis=-1)

    @property
    def seq_len(self) -> int:
        return len(self.presence)


def time_aware_pad(
    user: UserSequence,
    seq_len: int,
    v_max: int,
    schema: Optional[AttributeSchema] = None,
    padding: str = "time_aware",
    end_step: Optional[int] = None,
    slot_rng: Optional[np.random.Generator] = None,
) -> SequenceLayout:
    """Lay one user out over the last T calendar steps they were observed.

    ``time_aware`` keeps missing calendar steps as zero tokens; ``left``
    is the ablation that compacts observed steps to the right and pads on
    the left, discarding gap lengths.  ``end_step`` anchors the window at a
    later step than the final observation (e.g. the step being predicted),
    leaving the trailing slots empty.

    Baskets are sets, so the assignment of items to slots is an arbitrary
    convention.  Passing ``slot_rng`` randomizes that assignment, which
    training uses so no parameter can bind behavior to a slot position.
    """
    if seq_len < 1:
        raise ContractError(f"window length must be >= 1, got {seq_len}")
    if padding not in PADDING_MODES:
        raise ContractError(f"padding must be one of {PADDING_MODES}, got {padding!r}")
    schema = schema or AttributeSchema()
    observed = sorted(
        {b.time_index for b in user.baskets} | {r.time_index for r in user.attribute_records}
    )
    if not observed:
        raise ContractError(f"user {user.user_id} has no observations to encode")
    if end_step is None:
        end_step = observed[-1]
    elif end_step < observed[-1]:
        raise ContractError(
            f"end_step {end_step} precedes the final observation at {observed[-1]}"
        )

    if padding == "time_aware":
        steps = np.arange(end_step - seq_len + 1, end_step + 1)
    else:
        tail = [] if end_step == observed[-1] else [end_step]
        take = seq_len - len(tail)
        kept = observed[-take:] if take > 0 else []
        steps = np.concatenate(
            [np.full(seq_len - len(kept) - len(tail), -1, dtype=int), kept, tail]
        ).astype(int)

    layout = SequenceLayout(
        calendar_steps=steps,
        presence=np.zeros(seq_len, dtype=bool),
        item_ids=np.zeros((seq_len, v_max), dtype=int),
        slot_mask=np.zeros((seq_len, v_max), dtype=bool),
        cat_ids=np.zeros((seq_len, schema.n_cat_attrs), dtype=int),
        record_mask=np.zeros(seq_len, dtype=bool),
        num_values=np.zeros((seq_len, schema.n_num)),
    )
    observed_set = set(observed)
    baskets = {b.time_index: b for b in user.baskets}
    records = {r.time_index: r for r in user.attribute_records}
    for slot, step in enumerate(steps):
        if step < 0 or step not in observed_set:
            continue
        layout.presence[slot] = True
        basket = baskets.get(step)
        if basket is not None:
            ids = basket.item_ids
            if len(ids) > v_max:
                warnings.warn(
                    f"user {user.user_id} basket at step {step} has {len(ids)} items; "
                    f"keeping the {v_max} lowest ids"
                )
                ids = ids[:v_max]
            if slot_rng is not None and len(ids) > 1:
                ids = tuple(int(x) for x in slot_rng.permutation(ids))
            layout.item_ids[slot, : len(ids)] = ids
            layout.slot_mask[slot, : len(ids)] = True
        record = records.get(step)
        if record is not None:
            layout.record_mask[slot] = True
            layout.cat_ids[slot] = record.cat_value_ids
            layout.num_values[slot] = record.num_values
    return layout


@dataclass
class EncodedSequence:
    """Batched branch tokens plus the masks attention and training need."""

    items: Tensor  # (B, T, C_V)
    cats: Optional[Tensor]  # (B, T, C_cat)
    nums: Optional[Tensor]  # (B, T, C_num)
    presence: np.ndarray  # (B, T)
    slot_mask: np.ndarray  # (B, T, v_max)
    record_mask: np.ndarray  # (B, T)

    @property
    def basket_exists(self) -> np.ndarray:
        return self.slot_mask.any(axis=-1)


def encode_sequences(
    layouts: Sequence[SequenceLayout],
    tables: EmbeddingTables,
    use_periodic: bool = True,
    with_attributes: bool = True,
) -> EncodedSequence:
    """Turn layouts into the three branch token tensors, batched over users."""
    if not layouts:
        raise ContractError("need at least one layout to encode")
    seq_len = layouts[0].seq_len
    presence = np.stack([l.presence for l in layouts])
    slot_mask = np.stack([l.slot_mask for l in layouts])
    record_mask = np.stack([l.record_mask for l in layouts])
    item_ids = np.stack([l.item_ids for l in layouts])
    n_batch, _, v_max = item_ids.shape
    dim = tables.dim

    pos_idx = np.arange(seq_len)
    p_rows = gather_rows(tables.P, pos_idx) * Tensor(presence[:, :, None])
    index_parts = [p_rows]
    if use_periodic:
        m_rows = gather_rows(tables.M, pos_idx % tables.period) * Tensor(presence[:, :, None])
        index_parts.append(m_rows)

    item_emb = gather_rows(tables.Q, item_ids) * Tensor(slot_mask[:, :, :, None])
    items = concat_last([item_emb.reshape((n_batch, seq_len, v_max * dim))] + index_parts)

    cats = nums = None
    if with_attributes:
        n_cat = layouts[0].cat_ids.shape[1]
        if n_cat:
            cat_ids = np.stack([l.cat_ids for l in layouts])
            cat_emb = gather_rows(tables.R, cat_ids) * Tensor(record_mask[:, :, None, None])
            cats = concat_last([cat_emb.reshape((n_batch, seq_len, n_cat * dim))] + index_parts)
        n_num = layouts[0].num_values.shape[1]
        if n_num:
            num_vals = np.stack([l.num_values for l in layouts]) * record_mask[:, :, None]
            nums = concat_last([Tensor(num_vals)] + index_parts)

    return EncodedSequence(items, cats, nums, presence, slot_mask, record_mask)


def branch_widths(
    v_max: int, schema: AttributeSchema, dim: int, use_periodic: bool = True
) -> dict[str, int]:
    """Token widths per branch: content slots plus index embeddings."""
    extra = 2 * dim if use_periodic else dim
    widths = {"items": v_max * dim + extra}
    if schema.n_cat_attrs:
        widths["cats"] = schema.n_cat_attrs * dim + extra
    if schema.n_num:
        widths["nums"] = schema.n_num + extra
    return widths
