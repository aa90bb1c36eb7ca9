"""Full-catalog ranking evaluation: HR@K, NDCG@K, MAP, and a popularity baseline.

Each evaluation case is one (context, target basket) pair: the context is
everything the user did strictly before the target step, the model ranks
the whole catalog from its scores at the last context step, and metrics
compare the ranking against the target basket.  Ties always break toward
the lower item id so results are deterministic.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import ChronoSplit, Dataset, UserSequence, baskets_in, context_before
from .errors import ContractError
from .model import NextBasketModel

EVAL_MODES = ("final", "all")


@dataclass(frozen=True)
class EvalCase:
    user_id: str
    context: UserSequence
    target_step: int
    ground_truth: frozenset

    def __post_init__(self):
        if not self.ground_truth:
            raise ContractError(f"user {self.user_id}: empty ground truth at step {self.target_step}")


@dataclass(frozen=True)
class RankingResult:
    user_id: str
    step: int
    ranked: tuple  # permutation of the catalog, best first
    ground_truth: frozenset


def build_eval_cases(
    dataset: Dataset, split: ChronoSplit, part: str = "test", mode: str = "final"
) -> tuple[list[EvalCase], list[dict]]:
    """Pair each user's evaluation baskets with their strict-past contexts.

    ``final`` keeps only the last basket in the range per user; ``all``
    yields one case per basket.  Users without a basket in the range, or
    without any prior observation, are skipped with a log entry.
    """
    if mode not in EVAL_MODES:
        raise ContractError(f"mode must be one of {EVAL_MODES}, got {mode!r}")
    window = split.range(part)
    cases: list[EvalCase] = []
    skipped: list[dict] = []
    for user in dataset.users:
        in_range = baskets_in(user, window)
        if not in_range:
            skipped.append({"user_id": user.user_id, "reason": f"no basket in {part} range"})
            continue
        targets = in_range if mode == "all" else in_range[-1:]
        for target in targets:
            context = context_before(user, target.time_index)
            if not context.baskets and not context.attribute_records:
                skipped.append({"user_id": user.user_id, "reason": "no context before target"})
                continue
            cases.append(
                EvalCase(user.user_id, context, target.time_index, frozenset(target.item_ids))
            )
    return cases, skipped


def rank_full_catalog(scores: np.ndarray) -> tuple:
    """Descending score order; equal scores break toward the lower item id."""
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return tuple(int(i) for i in order)


def rank_cases(
    model: NextBasketModel, cases: Sequence[EvalCase], batch_size: int = 128
) -> list[RankingResult]:
    """Score each case at its last real context step, batched over users.

    The window is anchored at the target step (trailing slots empty) so the
    scoring position belongs to the same class the trainer optimized; when
    the whole context predates the window, it falls back to anchoring at
    the last observation.
    """
    results = []
    seq_len = model.config.seq_len
    for lo in range(0, len(cases), batch_size):
        chunk = cases[lo : lo + batch_size]
        layouts = []
        for c in chunk:
            last_obs = max(
                [b.time_index for b in c.context.baskets]
                + [r.time_index for r in c.context.attribute_records]
            )
            end = c.target_step if c.target_step - last_obs < seq_len else last_obs
            layouts.append(model.layout(c.context, end_step=end))
        encoded = model.encode_layouts(layouts)
        scores = model.forward_logits(encoded).data
        for i, case in enumerate(chunk):
            last_real = int(np.nonzero(layouts[i].presence)[0][-1])
            results.append(
                RankingResult(
                    case.user_id,
                    case.target_step,
                    rank_full_catalog(scores[i, last_real]),
                    case.ground_truth,
                )
            )
    return results


# -- metrics -------------------------------------------------------------------


def hr_at_k(result: RankingResult, k: int) -> float:
    """Top-K recall normalized by min(K, |ground truth|)."""
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    hits = len(set(result.ranked[:k]) & result.ground_truth)
    return hits / min(k, len(result.ground_truth))


def ndcg_at_k(result: RankingResult, k: int) -> float:
    """Binary-gain DCG@K against the ideal prefix of min(K, |GT|) hits."""
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    dcg = sum(
        1.0 / np.log2(pos + 1)
        for pos, item in enumerate(result.ranked[:k], start=1)
        if item in result.ground_truth
    )
    ideal = sum(1.0 / np.log2(pos + 1) for pos in range(1, min(k, len(result.ground_truth)) + 1))
    return dcg / ideal


def average_precision(result: RankingResult) -> float:
    """Precision at each hit rank over the full ranking, averaged over |GT|."""
    hits = 0
    total = 0.0
    for pos, item in enumerate(result.ranked, start=1):
        if item in result.ground_truth:
            hits += 1
            total += hits / pos
    return total / len(result.ground_truth)


def map_metric(results: Sequence[RankingResult]) -> float:
    if not results:
        raise ContractError("MAP needs at least one ranking result")
    return float(np.mean([average_precision(r) for r in results]))


# -- reports --------------------------------------------------------------------


@dataclass
class MetricReport:
    """Per-user metric values plus their means, ready for JSON/CSV export."""

    variant: str
    ks: tuple
    user_ids: list
    per_user: dict  # metric name -> list of per-user values
    means: dict  # metric name -> float
    n_skipped: int = 0
    config_echo: dict = field(default_factory=dict)

    @classmethod
    def from_results(
        cls,
        results: Sequence[RankingResult],
        ks: Sequence[int] = (5,),
        variant: str = "Full",
        n_skipped: int = 0,
        config_echo: Optional[dict] = None,
    ) -> "MetricReport":
        if not results:
            raise ContractError("cannot build a report from zero ranking results")
        per_user: dict[str, list] = {}
        for k in ks:
            per_user[f"hr@{k}"] = [hr_at_k(r, k) for r in results]
            per_user[f"ndcg@{k}"] = [ndcg_at_k(r, k) for r in results]
        per_user["ap"] = [average_precision(r) for r in results]
        means = {name: float(np.mean(vals)) for name, vals in per_user.items()}
        means["map"] = means.pop("ap")
        return cls(
            variant=variant,
            ks=tuple(ks),
            user_ids=[r.user_id for r in results],
            per_user=per_user,
            means=means,
            n_skipped=n_skipped,
            config_echo=config_echo or {},
        )

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "ks": list(self.ks),
            "means": self.means,
            "n_users": len(self.user_ids),
            "n_skipped": self.n_skipped,
            "config": self.config_echo,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        names = list(self.per_user)
        writer.writerow(["user_id"] + names)
        for i, uid in enumerate(self.user_ids):
            writer.writerow([uid] + [repr(self.per_user[name][i]) for name in names])
        return buf.getvalue()

    def save(self, json_path, csv_path=None):
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
        if csv_path is not None:
            with open(csv_path, "w") as fh:
                fh.write(self.to_csv())


def evaluate_model(
    model: NextBasketModel,
    dataset: Dataset,
    split: ChronoSplit,
    part: str = "test",
    ks: Sequence[int] = (5,),
    mode: str = "final",
    variant: str = "Full",
    batch_size: int = 128,
) -> MetricReport:
    cases, skipped = build_eval_cases(dataset, split, part, mode)
    if not cases:
        raise ContractError(f"no evaluable users in the {part} range")
    results = rank_cases(model, cases, batch_size)
    return MetricReport.from_results(
        results, ks, variant, len(skipped), model.config.to_json()
    )


# -- popularity baseline ------------------------------------------------------------


class PopRecBaseline:
    """Static ranking by training-range basket frequency; no sequence modeling."""

    def __init__(self, dataset: Dataset, split: ChronoSplit):
        counts = np.zeros(dataset.catalog_size)
        seen = False
        for user in dataset.users:
            for basket in baskets_in(user, split.train):
                seen = True
                for item in basket.item_ids:
                    counts[item] += 1
        if not seen:
            raise ContractError("empty training range: popularity undefined")
        self.counts = counts
        self.ranked = rank_full_catalog(counts)

    def rank_cases(self, cases: Sequence[EvalCase]) -> list[RankingResult]:
        return [
            RankingResult(c.user_id, c.target_step, self.ranked, c.ground_truth) for c in cases
        ]


def evaluate_poprec(
    dataset: Dataset,
    split: ChronoSplit,
    part: str = "test",
    ks: Sequence[int] = (5,),
    mode: str = "final",
) -> MetricReport:
    cases, skipped = build_eval_cases(dataset, split, part, mode)
    if not cases:
        raise ContractError(f"no evaluable users in the {part} range")
    baseline = PopRecBaseline(dataset, split)
    return MetricReport.from_results(
        baseline.rank_cases(cases), ks, "PopRec", len(skipped), {"baseline": "popularity"}
    )
