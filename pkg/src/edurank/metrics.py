"""Ranking metrics: Precision@K, NDCG@K, MRR_1st and MRR_2nd."""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from typing import Hashable, Sequence

logger = logging.getLogger(__name__)

PRECISION_KS = (10, 20, 50, 100)
NDCG_KS = (1, 3, 5)


def precision_at_k(predicted_top: Sequence[Hashable], oracle_top, K: int) -> float:
    """Share of the first ``K`` predictions found in ``oracle_top``.

    For filtering, pass bottom-K lists (least salient first).
    """
    if K <= 0:
        raise ValueError("K must be positive")
    if len(predicted_top) < K:
        raise ValueError(f"need at least {K} predictions, got {len(predicted_top)}")
    oracle = set(oracle_top)
    if len(oracle) != K:
        raise ValueError(f"oracle set must have exactly {K} items, got {len(oracle)}")
    return len(set(predicted_top[:K]) & oracle) / K


def _gain_table(oracle_ranking: Sequence[Hashable], gain: str | Sequence[float]) -> dict:
    n = len(oracle_ranking)
    if isinstance(gain, str):
        if gain == "linear":
            values = [float(n - r) for r in range(n)]
        elif gain == "exponential":
            values = [2.0 ** (n - r) - 1.0 for r in range(n)]
        else:
            raise ValueError(f"unknown gain {gain!r}")
    else:
        values = [float(g) for g in gain]
        if len(values) != n:
            raise ValueError("one gain per oracle rank is required")
    return {doc: values[r] for r, doc in enumerate(oracle_ranking)}


def ndcg_at_k(
    predicted: Sequence[Hashable],
    oracle_ranking: Sequence[Hashable],
    K: int,
    gain: str | Sequence[float] = "linear",
) -> float:
    """NDCG@K with gains indexed by oracle rank (linear ``n - rank`` by default)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    K = min(K, len(oracle_ranking))
    table = _gain_table(oracle_ranking, gain)
    dcg = sum(table.get(doc, 0.0) / math.log2(p + 2) for p, doc in enumerate(predicted[:K]))
    ideal = sorted(table.values(), reverse=True)
    idcg = sum(g / math.log2(p + 2) for p, g in enumerate(ideal[:K]))
    return dcg / idcg if idcg > 0 else 0.0


def reciprocal_rank(predicted: Sequence[Hashable], target: Hashable) -> float:
    try:
        return 1.0 / (list(predicted).index(target) + 1)
    except ValueError:
        return 0.0


def mrr_first(predicted: Sequence[Hashable], oracle_ranking: Sequence[Hashable]) -> float:
    return reciprocal_rank(predicted, oracle_ranking[0])


def mrr_second(predicted: Sequence[Hashable], oracle_ranking: Sequence[Hashable]) -> float | None:
    """Reciprocal rank of the oracle's second document; ``None`` when n < 2."""
    if len(oracle_ranking) < 2:
        logger.warning("mrr_second undefined for a single-document set; skipped")
        return None
    return reciprocal_rank(predicted, oracle_ranking[1])


class MetricsAccumulator:
    """Per-set metric values folded into a corpus-level report.

    A Precision@K value is only recorded for sets holding at least K EDUs.
    """

    def __init__(self, precision_ks: Sequence[int] = PRECISION_KS, ndcg_ks: Sequence[int] = NDCG_KS):
        self.precision_ks = tuple(precision_ks)
        self.ndcg_ks = tuple(ndcg_ks)
        self._values: dict[str, list[float]] = defaultdict(list)
        self.num_sets = 0

    def add_edu_ranking(self, predicted_order: Sequence[int], oracle_order: Sequence[int]) -> None:
        """Both arguments list flat EDU positions, most salient first."""
        total = len(oracle_order)
        for K in self.precision_ks:
            if K > total:
                continue
            self._values[f"precision_at/{K}"].append(
                precision_at_k(predicted_order, oracle_order[:K], K))
            self._values[f"filter_precision_at/{K}"].append(
                precision_at_k(list(predicted_order)[::-1], list(oracle_order)[::-1][:K], K))

    def add_doc_ranking(self, predicted: Sequence[int], oracle_ranking: Sequence[int]) -> None:
        self.num_sets += 1
        for K in self.ndcg_ks:
            self._values[f"ndcg_at/{K}"].append(ndcg_at_k(predicted, oracle_ranking, K))
        self._values["mrr_1st"].append(mrr_first(predicted, oracle_ranking))
        second = mrr_second(predicted, oracle_ranking)
        if second is not None:
            self._values["mrr_2nd"].append(second)

    def mean(self, key: str) -> float | None:
        vals = self._values.get(key)
        return sum(vals) / len(vals) if vals else None

    def report(self) -> dict:
        return {
            "precision_at": {str(K): self.mean(f"precision_at/{K}") for K in self.precision_ks},
            "filter_precision_at": {str(K): self.mean(f"filter_precision_at/{K}") for K in self.precision_ks},
            "ndcg_at": {str(K): self.mean(f"ndcg_at/{K}") for K in self.ndcg_ks},
            "mrr_1st": self.mean("mrr_1st"),
            "mrr_2nd": self.mean("mrr_2nd"),
            "num_sets": self.num_sets,
        }
