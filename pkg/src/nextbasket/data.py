"""Dataset model, CSV ingestion, chronological splitting, and normalization.

Users are sequences of baskets (sets of item ids) and attribute records
(one categorical value per attribute plus raw numerical values), both laid
out on a shared integer calendar grid: ``time_index`` counts whole periods
(days or months) since the dataset epoch, so gaps between observations stay
visible to the encoder.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ParseError, TableLookupError, VocabularyError

GRANULARITIES = ("day", "month")
_EPOCH_DATE = dt.date(2000, 1, 1)  # used when serializing synthetic time indices


@dataclass(frozen=True)
class AttributeSchema:
    """Names and vocabularies of the per-step user attributes.

    ``categorical`` maps attribute name -> ordered value vocabulary; values
    from all attributes share one global id space (offsets in declaration
    order).  ``numerical`` lists the real-valued attribute names.
    """

    categorical: dict[str, tuple[str, ...]] = field(default_factory=dict)
    numerical: tuple[str, ...] = ()

    def __post_init__(self):
        names = list(self.categorical) + list(self.numerical)
        if len(set(names)) != len(names):
            raise ContractError(f"attribute names must be unique, got {names}")
        for name, vocab in self.categorical.items():
            if not vocab:
                raise ContractError(f"categorical attribute {name!r} has an empty vocabulary")
            if len(set(vocab)) != len(vocab):
                raise ContractError(f"duplicate values in vocabulary of {name!r}")

    @property
    def n_cat_attrs(self) -> int:
        return len(self.categorical)

    @property
    def n_cat_values(self) -> int:
        return sum(len(v) for v in self.categorical.values())

    @property
    def n_num(self) -> int:
        return len(self.numerical)

    @property
    def n_attributes(self) -> int:
        return self.n_cat_attrs + self.n_num

    def value_offset(self, attr: str) -> int:
        off = 0
        for name, vocab in self.categorical.items():
            if name == attr:
                return off
            off += len(vocab)
        raise VocabularyError(f"unknown categorical attribute {attr!r}")

    def value_id(self, attr: str, value: str) -> int:
        vocab = self.categorical.get(attr)
        if vocab is None:
            raise VocabularyError(f"unknown categorical attribute {attr!r}")
        try:
            return self.value_offset(attr) + vocab.index(value)
        except ValueError:
            raise VocabularyError(f"value {value!r} not in vocabulary of {attr!r}") from None

    def to_json(self) -> dict:
        return {
            "categorical": {k: list(v) for k, v in self.categorical.items()},
            "numerical": list(self.numerical),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AttributeSchema":
        return cls(
            categorical={k: tuple(v) for k, v in obj.get("categorical", {}).items()},
            numerical=tuple(obj.get("numerical", ())),
        )


@dataclass(frozen=True)
class Basket:
    """Items a user interacted with at one calendar step."""

    time_index: int
    item_ids: tuple[int, ...]

    def __post_init__(self):
        if self.time_index < 0:
            raise ContractError(f"negative time_index {self.time_index}")
        if not self.item_ids:
            raise ContractError("baskets must contain at least one item")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise ContractError(f"duplicate item ids in basket: {self.item_ids}")
        object.__setattr__(self, "item_ids", tuple(sorted(self.item_ids)))


@dataclass(frozen=True)
class AttributeRecord:
    """Attribute values of a user at one calendar step.

    ``cat_value_ids`` holds exactly one global value id per categorical
    attribute, in schema declaration order.
    """

    time_index: int
    cat_value_ids: tuple[int, ...] = ()
    num_values: tuple[float, ...] = ()

    def __post_init__(self):
        if any(not np.isfinite(v) for v in self.num_values):
            raise ContractError(f"non-finite numerical attribute at t={self.time_index}")


@dataclass
class UserSequence:
    """One user's time-ordered baskets and attribute records.

    Baskets and attribute records share the calendar grid but need not be
    aligned step-for-step.
    """

    user_id: str
    baskets: list[Basket] = field(default_factory=list)
    attribute_records: list[AttributeRecord] = field(default_factory=list)

    def __post_init__(self):
        for seq, label in ((self.baskets, "baskets"), (self.attribute_records, "attribute records")):
            times = [x.time_index for x in seq]
            if any(b >= a for b, a in zip(times, times[1:])):
                raise ContractError(f"{label} of user {self.user_id} not strictly increasing in time")

    def basket_at(self, t: int) -> Optional[Basket]:
        for b in self.baskets:
            if b.time_index == t:
                return b
        return None


@dataclass
class Dataset:
    users: list[UserSequence]
    schema: AttributeSchema
    catalog_size: int
    granularity: str = "day"

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ContractError(f"granularity must be one of {GRANULARITIES}")

    @property
    def max_time_index(self) -> int:
        last = 0
        for u in self.users:
            for seq in (u.baskets, u.attribute_records):
                if seq:
                    last = max(last, seq[-1].time_index)
        return last


# -- chronological splitting ---------------------------------------------------


@dataclass(frozen=True)
class ChronoSplit:
    """Disjoint, ordered calendar ranges [start, end) for train/val/test."""

    train: tuple[int, int]
    validation: tuple[int, int]
    test: tuple[int, int]

    def __post_init__(self):
        ranges = [self.train, self.validation, self.test]
        for lo, hi in ranges:
            if lo >= hi:
                raise ContractError(f"empty or inverted range ({lo}, {hi})")
        for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
            if lo < hi:
                raise ContractError(f"split ranges overlap or are out of order: {ranges}")

    def part_of(self, t: int) -> Optional[str]:
        for name, (lo, hi) in (("train", self.train), ("validation", self.validation), ("test", self.test)):
            if lo <= t < hi:
                return name
        return None

    def range(self, part: str) -> tuple[int, int]:
        return {"train": self.train, "validation": self.validation, "test": self.test}[part]

    def to_json(self) -> dict:
        return {"train": list(self.train), "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_json(cls, obj: dict) -> "ChronoSplit":
        return cls(tuple(obj["train"]), tuple(obj["validation"]), tuple(obj["test"]))


def chronological_split(dataset: Dataset, split: ChronoSplit) -> ChronoSplit:
    """Validate split boundaries against the dataset's time span."""
    if split.test[0] > dataset.max_time_index:
        raise ContractError(
            f"test range starts at {split.test[0]} but data ends at {dataset.max_time_index}"
        )
    return split


def baskets_in(user: UserSequence, window: tuple[int, int]) -> list[Basket]:
    lo, hi = window
    return [b for b in user.baskets if lo <= b.time_index < hi]


def records_in(user: UserSequence, window: tuple[int, int]) -> list[AttributeRecord]:
    lo, hi = window
    return [r for r in user.attribute_records if lo <= r.time_index < hi]


def context_before(user: UserSequence, t: int) -> UserSequence:
    """All baskets and records strictly before calendar step t."""
    return UserSequence(
        user.user_id,
        [b for b in user.baskets if b.time_index < t],
        [r for r in user.attribute_records if r.time_index < t],
    )


# -- numerical normalization ------------------------------------------------------


@dataclass
class MinMaxScaler:
    """Per-attribute min/max learned from the training range only.

    Transform maps train min -> -1 and train max -> +1; anything outside is
    clamped so attention inputs stay bounded.  Constant attributes map to 0.
    """

    mins: np.ndarray
    maxs: np.ndarray

    def transform(self, values: Sequence[float]) -> tuple[float, ...]:
        out = []
        for v, lo, hi in zip(values, self.mins, self.maxs):
            if hi == lo:
                out.append(0.0)
            else:
                out.append(float(np.clip(2.0 * (v - lo) / (hi - lo) - 1.0, -1.0, 1.0)))
        return tuple(out)


def fit_transform_numerical(dataset: Dataset, split: ChronoSplit) -> tuple[Dataset, MinMaxScaler]:
    """Fit min/max on the train range and rescale every record in place."""
    n = dataset.schema.n_num
    if n == 0:
        return dataset, MinMaxScaler(np.zeros(0), np.zeros(0))
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    seen = False
    for user in dataset.users:
        for rec in records_in(user, split.train):
            seen = True
            vals = np.asarray(rec.num_values)
            lo = np.minimum(lo, vals)
            hi = np.maximum(hi, vals)
    if not seen:
        raise ContractError("no training-range attribute records to fit the scaler on")
    for a, name in enumerate(dataset.schema.numerical):
        if lo[a] == hi[a]:
            warnings.warn(f"numerical attribute {name!r} is constant on the training range; mapping to 0")
    scaler = MinMaxScaler(lo, hi)
    users = []
    for user in dataset.users:
        recs = [
            AttributeRecord(r.time_index, r.cat_value_ids, scaler.transform(r.num_values))
            for r in user.attribute_records
        ]
        users.append(UserSequence(user.user_id, user.baskets, recs))
    return Dataset(users, dataset.schema, dataset.catalog_size, dataset.granularity), scaler


# -- indicator vectors --------------------------------------------------------------


def multi_hot(ids: Iterable[int], vocab_size: int) -> np.ndarray:
    """Indicator vector with exactly one 1 per distinct id."""
    vec = np.zeros(vocab_size)
    for i in ids:
        if not 0 <= i < vocab_size:
            raise TableLookupError(f"id {i} outside vocabulary of size {vocab_size}")
        vec[i] = 1.0
    return vec


# -- CSV ingestion -------------------------------------------------------------------


def _parse_date(text: str, line: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise ParseError(f"bad ISO date {text!r}", line) from None


def _time_index(date: dt.date, epoch: dt.date, granularity: str) -> int:
    if granularity == "day":
        return (date - epoch).days
    return (date.year - epoch.year) * 12 + (date.month - epoch.month)


def _index_to_date(t: int, granularity: str) -> dt.date:
    if granularity == "day":
        return _EPOCH_DATE + dt.timedelta(days=t)
    year, month = divmod(_EPOCH_DATE.month - 1 + t, 12)
    return dt.date(_EPOCH_DATE.year + year, month + 1, 1)


def load_csv(
    interactions_path: str | Path,
    schema: AttributeSchema,
    granularity: str,
    catalog_size: int,
    attributes_path: str | Path | None = None,
) -> list[UserSequence]:
    """Group interaction and attribute rows into per-user sequences.

    Interactions columns: user_id, time_stamp (ISO date), item_id.
    Attributes columns: user_id, time_stamp, then one column per attribute.
    The epoch is the earliest date present in either file; output is ordered
    by user id, then time.
    """
    if granularity not in GRANULARITIES:
        raise ContractError(f"granularity must be one of {GRANULARITIES}")

    inter_rows = _read_rows(interactions_path, ("user_id", "time_stamp", "item_id"))
    attr_cols = ("user_id", "time_stamp") + tuple(schema.categorical) + tuple(schema.numerical)
    attr_rows = _read_rows(attributes_path, attr_cols) if attributes_path else []

    dates = [r["_date"] for r in inter_rows] + [r["_date"] for r in attr_rows]
    if not dates:
        raise ParseError("no data rows found", 1)
    epoch = min(dates)

    baskets: dict[str, dict[int, set[int]]] = {}
    for row in inter_rows:
        t = _time_index(row["_date"], epoch, granularity)
        try:
            item = int(row["item_id"])
        except ValueError:
            raise ParseError(f"non-integer item_id {row['item_id']!r}", row["_line"]) from None
        if not 0 <= item < catalog_size:
            raise VocabularyError(
                f"line {row['_line']}: item id {item} not in catalog of size {catalog_size}"
            )
        baskets.setdefault(row["user_id"], {}).setdefault(t, set()).add(item)

    records: dict[str, dict[int, AttributeRecord]] = {}
    for row in attr_rows:
        t = _time_index(row["_date"], epoch, granularity)
        cat_ids = tuple(schema.value_id(a, row[a].strip()) for a in schema.categorical)
        try:
            nums = tuple(float(row[a]) for a in schema.numerical)
        except ValueError:
            raise ParseError("non-numeric attribute value", row["_line"]) from None
        records.setdefault(row["user_id"], {})[t] = AttributeRecord(t, cat_ids, nums)

    users = []
    for uid in sorted(set(baskets) | set(records)):
        bs = [Basket(t, tuple(items)) for t, items in sorted(baskets.get(uid, {}).items())]
        rs = [records[uid][t] for t in sorted(records.get(uid, {}))]
        users.append(UserSequence(uid, bs, rs))
    return users


def _read_rows(path: str | Path, expected: tuple[str, ...]) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if [h.strip() for h in header] != list(expected):
            raise ParseError(f"expected columns {list(expected)}, got {header}", 1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise ParseError(f"expected {len(expected)} fields, got {len(row)}", line_no)
            rec = dict(zip(expected, row))
            rec["user_id"] = rec["user_id"].strip()
            rec["_date"] = _parse_date(rec["time_stamp"], line_no)
            rec["_line"] = line_no
            rows.append(rec)
    return rows


# -- dataset directory round trip ------------------------------------------------------


def save_dataset(dataset: Dataset, split: ChronoSplit, out_dir: str | Path) -> dict[str, Path]:
    """Write interactions.csv / attributes.csv / dataset.json into a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inter = out / "interactions.csv"
    with open(inter, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "time_stamp", "item_id"])
        for user in dataset.users:
            for b in user.baskets:
                date = _index_to_date(b.time_index, dataset.granularity).isoformat()
                for item in b.item_ids:
                    w.writerow([user.user_id, date, item])
    paths = {"interactions": inter}

    if dataset.schema.n_attributes:
        attrs = out / "attributes.csv"
        with open(attrs, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_id", "time_stamp"] + list(dataset.schema.categorical) + list(dataset.schema.numerical))
            names = list(dataset.schema.categorical)
            vocab_flat = [v for vs in dataset.schema.categorical.values() for v in vs]
            for user in dataset.users:
                for r in user.attribute_records:
                    date = _index_to_date(r.time_index, dataset.granularity).isoformat()
                    cats = [vocab_flat[i] for i in r.cat_value_ids]
                    w.writerow([user.user_id, date] + cats + [repr(v) for v in r.num_values])
        paths["attributes"] = attrs

    cfg = out / "dataset.json"
    with open(cfg, "w") as fh:
        json.dump(
            {
                "catalog_size": dataset.catalog_size,
                "granularity": dataset.granularity,
                "schema": dataset.schema.to_json(),
                "split": split.to_json(),
            },
            fh,
            indent=2,
        )
    paths["config"] = cfg
    return paths


def load_dataset(dir_path: str | Path) -> tuple[Dataset, ChronoSplit]:
    """Load a dataset directory written by ``save_dataset``."""
    root = Path(dir_path)
    with open(root / "dataset.json") as fh:
        cfg = json.load(fh)
    schema = AttributeSchema.from_json(cfg["schema"])
    attrs = root / "attributes.csv"
    users = load_csv(
        root / "interactions.csv",
        schema,
        cfg["granularity"],
        cfg["catalog_size"],
        attributes_path=attrs if attrs.exists() else None,
    )
    dataset = Dataset(users, schema, cfg["catalog_size"], cfg["granularity"])
    return dataset, ChronoSplit.from_json(cfg["split"])
