"""Ground-truth EDU salience and document ranking from the reference summary."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backends import SemanticEmbedder
from .corpus import SegmentedSet

logger = logging.getLogger(__name__)

AGGREGATIONS = ("mean", "max", "sum")
DEFAULT_K_Q = 10
DEFAULT_FILTER_FRACTION = 0.2


class LabelError(ValueError):
    pass


class UndefinedSimilarityError(LabelError):
    pass


@dataclass(frozen=True)
class OracleLabels:
    """Oracle supervision for one set.

    ``edu_salience`` is aligned with ``edu_ids``, which lists EDUs in
    (doc_index, edu_index) order. ``query_set`` and ``filter_set`` hold flat
    EDU positions, best-first and worst-first respectively.
    """

    set_id: str
    edu_ids: tuple[tuple[int, int], ...]
    edu_salience: np.ndarray
    doc_ranking: tuple[int, ...]
    query_set: tuple[int, ...]
    filter_set: tuple[int, ...]
    embedder_id: str = ""

    @property
    def k_q(self) -> int:
        return len(self.query_set)

    @property
    def k_f(self) -> int:
        return len(self.filter_set)

    @property
    def salience_map(self) -> dict[tuple[int, int], float]:
        return {eid: float(s) for eid, s in zip(self.edu_ids, self.edu_salience)}

    @property
    def ranked_pairs(self) -> list[tuple[int, int]]:
        """All (above, below) document pairs implied by ``doc_ranking``."""
        r = self.doc_ranking
        return [(r[a], r[b]) for a in range(len(r)) for b in range(a + 1, len(r))]

    def edu_order(self) -> list[int]:
        """Flat EDU positions, most salient first; ties by (doc, edu)."""
        return salience_order(self.edu_salience)

    def top_edus(self, k: int) -> list[int]:
        return self.edu_order()[:k]

    def bottom_edus(self, k: int) -> list[int]:
        return self.edu_order()[::-1][:k]


def salience_order(scores: Sequence[float]) -> list[int]:
    """Indices by descending score, ascending index on ties."""
    scores = np.asarray(scores, dtype=float)
    return list(np.lexsort((np.arange(len(scores)), -scores)))


def score_edu(edu_vec, summary_vec) -> float:
    a = np.asarray(edu_vec, dtype=float)
    b = np.asarray(summary_vec, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def edu_similarities(seg: SegmentedSet, embedder: SemanticEmbedder) -> np.ndarray:
    """Cosine similarity of every EDU to the reference summary, flat order."""
    if seg.base.reference_summary is None:
        raise LabelError(f"set {seg.set_id!r} has no reference summary")
    texts = [e.text for e in seg.edus]
    vecs = embedder.embed(texts + [seg.base.reference_summary])
    summary_vec = vecs[-1]
    sims = np.empty(len(texts))
    for i, (eid, v) in enumerate(zip(seg.edu_ids, vecs[:-1])):
        try:
            sims[i] = score_edu(v, summary_vec)
        except UndefinedSimilarityError as exc:
            raise UndefinedSimilarityError(f"set {seg.set_id!r} EDU {eid}: {exc}") from None
    return sims


def aggregate_documents(sims: np.ndarray, edu_counts: Sequence[int], aggregation: str = "mean") -> np.ndarray:
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    fn = {"mean": np.mean, "max": np.max, "sum": np.sum}[aggregation]
    out, pos = [], 0
    for m in edu_counts:
        if m < 1:
            raise LabelError("every document needs at least one EDU")
        out.append(fn(sims[pos:pos + m]))
        pos += m
    return np.asarray(out)


def rank_by_score(scores: Sequence[float]) -> tuple[int, ...]:
    return tuple(int(i) for i in salience_order(scores))


def rank_documents_oracle(seg: SegmentedSet, embedder: SemanticEmbedder, aggregation: str = "mean") -> tuple[int, ...]:
    sims = edu_similarities(seg, embedder)
    return rank_by_score(aggregate_documents(sims, seg.edu_counts, aggregation))


def default_k_f(total_edus: int) -> int:
    return max(1, math.floor(DEFAULT_FILTER_FRACTION * total_edus))


def build_labels(
    seg: SegmentedSet,
    embedder: SemanticEmbedder,
    k_q: int = DEFAULT_K_Q,
    k_f: int | None = None,
    aggregation: str = "mean",
) -> OracleLabels:
    total = seg.num_edus
    if k_f is None:
        k_f = default_k_f(total)
    if k_q < 1 or k_f < 1:
        raise LabelError("k_q and k_f must be >= 1")
    if k_q > total:
        logger.warning("set %s: k_q=%d exceeds %d EDUs, clipping", seg.set_id, k_q, total)
        k_q = total
    if k_q + k_f > total:
        logger.warning("set %s: k_q + k_f exceeds %d EDUs, shrinking k_f to keep sets disjoint", seg.set_id, total)
        k_f = total - k_q

    sims = edu_similarities(seg, embedder)
    order = salience_order(sims)
    doc_ranking = rank_by_score(aggregate_documents(sims, seg.edu_counts, aggregation))
    return OracleLabels(
        set_id=seg.set_id,
        edu_ids=tuple(seg.edu_ids),
        edu_salience=sims,
        doc_ranking=doc_ranking,
        query_set=tuple(int(i) for i in order[:k_q]),
        filter_set=tuple(int(i) for i in order[::-1][:k_f]),
        embedder_id=getattr(embedder, "embedder_id", ""),
    )


def labels_to_record(labels: OracleLabels) -> dict:
    return {
        "set_id": labels.set_id,
        "edu_salience": [[d, e, float(s)] for (d, e), s in zip(labels.edu_ids, labels.edu_salience)],
        "doc_ranking": list(labels.doc_ranking),
        "k_q": labels.k_q,
        "k_f": labels.k_f,
        "embedder_id": labels.embedder_id,
    }


def labels_from_record(rec: dict) -> OracleLabels:
    triples = rec["edu_salience"]
    ids = tuple((int(d), int(e)) for d, e, _ in triples)
    sims = np.array([float(s) for _, _, s in triples])
    order = salience_order(sims)
    k_q, k_f = int(rec["k_q"]), int(rec["k_f"])
    return OracleLabels(
        set_id=rec["set_id"],
        edu_ids=ids,
        edu_salience=sims,
        doc_ranking=tuple(int(i) for i in rec["doc_ranking"]),
        query_set=tuple(int(i) for i in order[:k_q]),
        filter_set=tuple(int(i) for i in order[::-1][:k_f]),
        embedder_id=rec.get("embedder_id", ""),
    )


def write_labels(path: str | Path, labels: Iterable[OracleLabels]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labels:
            fh.write(json.dumps(labels_to_record(lab), sort_keys=True))
            fh.write("\n")
            n += 1
    return n


def read_labels(path: str | Path) -> list[OracleLabels]:
    with open(path, encoding="utf-8") as fh:
        return [labels_from_record(json.loads(line)) for line in fh if line.strip()]
