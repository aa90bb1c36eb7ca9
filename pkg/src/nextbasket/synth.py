"""Seeded synthetic datasets with planted, recoverable structure.

Three patterns, assignable per user:

* ``periodic``: a favorite item recurs every ``period`` calendar steps at a
  per-user phase; everything else is noise.  The last recurrence is the test
  target, so a model that tracks periodicity can rank the item first.
* ``copurchase``: fixed item pairs co-occur inside baskets and imply one
  specific follow-up item in the next step's basket.  Pair components also
  appear alone as negative evidence, so only the conjunction predicts.
* ``attribute_switch``: a categorical attribute flips once at a random step
  and the user's preferred item cluster flips with it; attribute records
  continue through a shopping pause around the switch, so the attribute
  stream is the only timely evidence.

Generation is a pure function of (config, seed) and emits ground-truth
metadata for diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import AttributeSchema, AttributeRecord, Basket, ChronoSplit, Dataset, UserSequence
from .errors import ContractError

PATTERNS = ("periodic", "copurchase", "attribute_switch")


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs: population size, catalog, timeline, planted patterns."""

    n_users: int = 500
    catalog_size: int = 60
    n_steps: int = 30
    patterns: tuple[str, ...] = ("periodic",)
    period: int = 7
    obs_rate: float = 0.6
    granularity: str = "day"

    def __post_init__(self):
        if self.n_users < 1 or self.catalog_size < 2 or self.n_steps < 2:
            raise ContractError("n_users, catalog_size and n_steps must be positive (catalog >= 2)")
        unknown = [p for p in self.patterns if p not in PATTERNS]
        if unknown or not self.patterns:
            raise ContractError(f"patterns must be a non-empty subset of {PATTERNS}, got {self.patterns}")
        if self.period < 2:
            raise ContractError(f"repetition period must be >= 2, got {self.period}")
        if self.period > self.n_steps:
            raise ContractError(
                f"repetition period {self.period} exceeds the {self.n_steps}-step timeline"
            )
        if "copurchase" in self.patterns and (self.catalog_size < 15 or self.n_steps < 10):
            raise ContractError("copurchase pattern needs >= 15 items and >= 10 steps")
        if "attribute_switch" in self.patterns and (self.n_steps < 12 or self.catalog_size < 4):
            raise ContractError("attribute_switch pattern needs >= 12 steps and >= 4 items")
        if not 0.0 < self.obs_rate <= 1.0:
            raise ContractError(f"obs_rate must be in (0, 1], got {self.obs_rate}")

    def to_json(self) -> dict:
        return {
            "n_users": self.n_users,
            "catalog_size": self.catalog_size,
            "n_steps": self.n_steps,
            "patterns": list(self.patterns),
            "period": self.period,
            "obs_rate": self.obs_rate,
            "granularity": self.granularity,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        obj = dict(obj)
        if "patterns" in obj:
            obj["patterns"] = tuple(obj["patterns"])
        return cls(**obj)


@dataclass
class SynthResult:
    dataset: Dataset
    split: ChronoSplit
    metadata: dict = field(default_factory=dict)


def synth_generate(config: SynthConfig, seed: int) -> SynthResult:
    """Build a dataset with the configured planted patterns.

    The returned split reserves the tail of the timeline so every user's
    planted target falls in the test range.
    """
    rng = np.random.default_rng(seed)
    n = config.n_steps
    if "periodic" in config.patterns:
        # test range long enough to contain the last recurrence of any phase
        test_len = config.period
    else:
        test_len = 2
    if n < test_len + 3:
        raise ContractError(f"{n}-step timeline too short to split around the planted pattern")
    split = ChronoSplit((0, n - test_len - 2), (n - test_len - 2, n - test_len), (n - test_len, n))

    schema = AttributeSchema()
    clusters: Optional[tuple[list[int], list[int]]] = None
    if "attribute_switch" in config.patterns:
        schema = AttributeSchema(categorical={"segment": ("s0", "s1")}, numerical=("activity",))
        # quarter-catalog clusters leave room for items outside either
        # preference pool, so cluster membership is worth learning
        quarter = max(2, config.catalog_size // 4)
        clusters = (list(range(quarter)), list(range(quarter, 2 * quarter)))

    pairs = None
    if "copurchase" in config.patterns:
        # pair components live in a ring so every component has two partners
        n_pairs = min(20, config.catalog_size // 3)
        pairs = [(i, (i + 1) % n_pairs, 2 * n_pairs + i) for i in range(n_pairs)]

    users = []
    meta_users = {}
    for i in range(config.n_users):
        pattern = config.patterns[i % len(config.patterns)]
        uid = f"u{i:04d}"
        if pattern == "periodic":
            user, info = _periodic_user(uid, config, rng)
        elif pattern == "copurchase":
            user, info = _copurchase_user(uid, config, pairs, rng)
        else:
            user, info = _switch_user(uid, config, clusters, rng)
        users.append(user)
        meta_users[uid] = info

    metadata = {"config": config.to_json(), "seed": seed, "users": meta_users}
    if pairs is not None:
        metadata["pairs"] = [list(p) for p in pairs]
    if clusters is not None:
        metadata["clusters"] = [clusters[0], clusters[1]]
    dataset = Dataset(users, schema, config.catalog_size, config.granularity)
    return SynthResult(dataset, split, metadata)


def _noise_basket(rng: np.random.Generator, pool: np.ndarray, max_size: int = 3) -> tuple[int, ...]:
    size = int(rng.integers(1, max_size + 1))
    return tuple(int(x) for x in rng.choice(pool, size=min(size, len(pool)), replace=False))


def _periodic_user(uid: str, cfg: SynthConfig, rng: np.random.Generator):
    fav = int(rng.integers(0, cfg.catalog_size))
    phase = int(rng.integers(0, cfg.period))
    recurs = list(range(phase, cfg.n_steps, cfg.period))
    target = recurs[-1]
    pool = np.array([i for i in range(cfg.catalog_size) if i != fav])

    baskets = {}
    for s in recurs:
        # skip purchases often enough that the lag back to the previous
        # sighting alternates between one and two whole cycles
        if s == target or rng.random() < 0.55:
            baskets[s] = (fav,)
    witnesses = [s for s in (target - cfg.period, target - 2 * cfg.period) if s >= 0]
    if witnesses and not any(s in baskets for s in witnesses):
        # the target must stay predictable from the recent cycle history
        baskets[int(rng.choice(witnesses))] = (fav,)
    for s in recurs:
        # guarantee a visit right before each recurrence, mirroring how the
        # final recurrence is reached from the step preceding it
        if s - 1 >= 0 and s - 1 not in baskets:
            baskets[s - 1] = _noise_basket(rng, pool)
    for s in range(target):
        if s in baskets or s in recurs:
            continue
        if rng.random() < cfg.obs_rate:
            baskets[s] = _noise_basket(rng, pool)
    seq = UserSequence(uid, [Basket(t, items) for t, items in sorted(baskets.items())])
    return seq, {"pattern": "periodic", "item": fav, "phase": phase, "target_step": target}


def _copurchase_user(uid: str, cfg: SynthConfig, pairs, rng: np.random.Generator):
    n_pairs = len(pairs)
    comps = np.arange(n_pairs)
    noise_pool = np.arange(n_pairs, 2 * n_pairs)
    n = cfg.n_steps

    def neighbours(item: int) -> tuple[int, int]:
        return (item + 1) % n_pairs, (item - 1) % n_pairs

    def pair_basket(idx: int) -> set[int]:
        # one to three filler items, so pair baskets are not set apart by size
        a, b, _ = pairs[idx]
        extra = rng.choice(noise_pool, size=int(rng.integers(1, 4)), replace=False)
        return {a, b} | {int(x) for x in extra}

    def single_basket() -> set[int]:
        # components and noise, never two adjacent components together
        items: set[int] = set()
        for x in rng.choice(np.concatenate([comps, noise_pool]), size=int(rng.integers(1, 5)), replace=False):
            x = int(x)
            if x < n_pairs and any(nb in items for nb in neighbours(x)):
                continue
            items.add(x)
        return items or {int(noise_pool[0])}

    baskets: dict[int, set[int]] = {}
    for s in range(n - 6):
        if rng.random() >= cfg.obs_rate:
            continue
        if rng.random() < 0.3:
            idx = int(rng.integers(0, n_pairs))
            baskets.setdefault(s, set()).update(pair_basket(idx))
            baskets.setdefault(s + 1, set()).add(pairs[idx][2])
        else:
            baskets.setdefault(s, set()).update(single_basket())

    val_pair = int(rng.integers(0, n_pairs))
    test_pair = int(rng.integers(0, n_pairs))
    baskets[n - 4] = pair_basket(val_pair)
    baskets[n - 3] = {pairs[val_pair][2]}
    baskets[n - 2] = pair_basket(test_pair)
    baskets[n - 1] = {pairs[test_pair][2]}

    seq = UserSequence(uid, [Basket(t, tuple(items)) for t, items in sorted(baskets.items())])
    info = {
        "pattern": "copurchase",
        "val_pair": val_pair,
        "test_pair": test_pair,
        "target_step": n - 1,
        "target_item": pairs[test_pair][2],
    }
    return seq, info


def _switch_user(uid: str, cfg: SynthConfig, clusters, rng: np.random.Generator):
    n = cfg.n_steps
    first = int(rng.integers(0, 2))
    switch = int(rng.integers(8, n - 2))
    pools = (np.array(clusters[first]), np.array(clusters[1 - first]))

    def cluster_basket(pool: np.ndarray) -> tuple[int, ...]:
        size = int(rng.integers(3, 6))
        return tuple(int(x) for x in rng.choice(pool, size=min(size, len(pool)), replace=False))

    baskets = {}
    for s in range(switch):
        if rng.random() < 0.55:
            baskets[s] = cluster_basket(pools[0])
    if not baskets:
        baskets[int(rng.integers(0, switch))] = cluster_basket(pools[0])
    # the shopping pause right after the switch leaves the attribute record
    # as the only timely evidence of the flip until the target basket
    for s in range(switch + 4, n - 1):
        if rng.random() < 0.55:
            baskets[s] = cluster_basket(pools[1])
    baskets[n - 1] = cluster_basket(pools[1])

    records = [
        AttributeRecord(t, (first if t < switch else 1 - first,), (float(rng.uniform(0, 10)),))
        for t in range(n)
    ]
    seq = UserSequence(uid, [Basket(t, items) for t, items in sorted(baskets.items())], records)
    info = {
        "pattern": "attribute_switch",
        "initial_value": first,
        "switch_step": switch,
        "target_step": n - 1,
    }
    return seq, info
