"""Joint EDU filtering and document ranking trained by EM.

E-step: the k most salient EDUs of the current forward pass become latent
queries (hard selection, no gradient through the indices). M-step: one Adam
step on ``rank_loss + lam * filter_loss``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import SegmentedSet
from .encoder import DTYPE, GatedPooler, SetFeatures, SpanPooler, encode_set, featurize, uniform_
from .metrics import MetricsAccumulator
from .oracle import OracleLabels, rank_by_score, salience_order

logger = logging.getLogger(__name__)

DEFAULT_K = 10
DEFAULT_LAMBDA = 1.0


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


class CrossAttn(nn.Module):
    """Single-head scaled dot-product attention; EDU rows query the document rows.

    With ``residual=True`` the attended vector is added to the input EDU row;
    ``layer_norm=True`` normalises the result (post-norm block).
    """

    def __init__(
        self,
        d: int,
        generator: torch.Generator | None = None,
        residual: bool = False,
        layer_norm: bool = False,
    ):
        super().__init__()
        self.d = d
        self.residual = residual
        self.norm = nn.LayerNorm(d, dtype=DTYPE) if layer_norm else None
        self.Wq, self.Wk, self.Wv, self.Wo = (nn.Parameter(torch.zeros(d, d, dtype=DTYPE)) for _ in range(4))
        if generator is not None:
            for p in (self.Wq, self.Wk, self.Wv, self.Wo):
                uniform_(p, d ** -0.5, generator)

    def forward(self, E: torch.Tensor, D: torch.Tensor, return_weights: bool = False):
        if E.shape[-1] != self.d or D.shape[-1] != self.d:
            raise ValueError(f"expected width {self.d}, got E {tuple(E.shape)} and D {tuple(D.shape)}")
        q, k, v = E @ self.Wq.T, D @ self.Wk.T, D @ self.Wv.T
        attn = torch.softmax(q @ k.T / math.sqrt(self.d), dim=-1)
        out = (attn @ v) @ self.Wo.T
        if self.residual:
            out = out + E
        if self.norm is not None:
            out = self.norm(out)
        return (out, attn) if return_weights else out


class FilterHead(nn.Module):
    """Two-class classifier per EDU; class 1 is "salient"."""

    def __init__(self, d: int, generator: torch.Generator | None = None):
        super().__init__()
        self.W = nn.Parameter(torch.zeros(2, d, dtype=DTYPE))
        self.b = nn.Parameter(torch.zeros(2, dtype=DTYPE))
        if generator is not None:
            uniform_(self.W, d ** -0.5, generator)

    def logits(self, E: torch.Tensor) -> torch.Tensor:
        return E @ self.W.T + self.b

    def forward(self, E: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(E), dim=-1)[:, 1]


class RetrieverModel(nn.Module):
    def __init__(
        self,
        d: int,
        d_h: int | None = None,
        k: int = DEFAULT_K,
        seed: int = 0,
        residual: bool = True,
        layer_norm: bool = True,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.d = d
        self.k = k
        self.span_pooler = SpanPooler(d, d_h, gen)
        self.gated_pooler = GatedPooler(d, gen)
        self.cross_attn = CrossAttn(d, gen, residual=residual, layer_norm=layer_norm)
        self.filter_head = FilterHead(d, gen)

    @property
    def d_h(self) -> int:
        return self.span_pooler.d_h

    @property
    def residual(self) -> bool:
        return self.cross_attn.residual

    @property
    def layer_norm(self) -> bool:
        return self.cross_attn.norm is not None

    def config(self) -> dict:
        return {"d": self.d, "d_h": self.d_h, "k": self.k, "residual": self.residual, "layer_norm": self.layer_norm}

    def forward(self, feats: SetFeatures, k: int | None = None) -> "SetForward":
        E, D, a, beta = encode_set(feats, self.span_pooler, self.gated_pooler)
        E_ref = self.cross_attn(E, D)
        salience = self.filter_head(E_ref)
        queries = select_queries(salience, E_ref, self.k if k is None else k)
        relevance = score_relevance(D, queries)
        return SetForward(E, D, E_ref, salience, queries, relevance, a, beta)


@dataclass
class LatentQuerySet:
    vectors: torch.Tensor
    indices: tuple[int, ...]
    source_edu_ids: tuple[tuple[int, int], ...] = ()

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class RelevanceScores:
    per_query: torch.Tensor   # (n, k), columns are distributions over documents
    aggregate: torch.Tensor   # (n,)


@dataclass
class SetForward:
    E: torch.Tensor
    D: torch.Tensor
    E_refined: torch.Tensor
    salience: torch.Tensor
    queries: LatentQuerySet
    relevance: RelevanceScores
    span_weights: torch.Tensor
    gate_weights: torch.Tensor


def refine_edus(E: torch.Tensor, D: torch.Tensor, attn: CrossAttn) -> torch.Tensor:
    return attn(E, D)


def score_salience(E_refined: torch.Tensor, head: FilterHead) -> torch.Tensor:
    return head(E_refined)


def select_queries(
    salience: torch.Tensor | Sequence[float],
    E_refined: torch.Tensor,
    k: int,
    edu_ids: Sequence[tuple[int, int]] | None = None,
) -> LatentQuerySet:
    """Top-k EDUs by salience, ties to the lower flat position."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = salience.detach().cpu().numpy() if isinstance(salience, torch.Tensor) else np.asarray(salience)
    idx = tuple(int(i) for i in salience_order(scores)[:k])
    sources = tuple(edu_ids[i] for i in idx) if edu_ids is not None else ()
    return LatentQuerySet(E_refined[list(idx)], idx, sources)


def score_relevance(D: torch.Tensor, Q: LatentQuerySet | torch.Tensor) -> RelevanceScores:
    q = Q.vectors if isinstance(Q, LatentQuerySet) else Q
    if D.ndim != 2 or q.ndim != 2 or D.shape[1] != q.shape[1]:
        raise ValueError(f"shape mismatch D {tuple(D.shape)} vs Q {tuple(q.shape)}")
    per_query = torch.softmax(D @ q.T, dim=0)
    return RelevanceScores(per_query, per_query.mean(dim=1))


# --------------------------------------------------------------------------
# losses


class PairSampler:
    """Uniform pair sampler with a per-term budget; ``max_pairs=None`` uses every pair."""

    def __init__(self, max_pairs: int | None = 64, rng: np.random.Generator | None = None):
        self.max_pairs = max_pairs
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def pairs(self, first: Sequence[int], second: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        first, second = np.asarray(first, dtype=np.int64), np.asarray(second, dtype=np.int64)
        if self.max_pairs is None or first.size * second.size <= self.max_pairs:
            i, j = np.meshgrid(first, second, indexing="ij")
            return i.ravel(), j.ravel()
        return (self.rng.choice(first, self.max_pairs), self.rng.choice(second, self.max_pairs))


FULL_PAIRS = PairSampler(None)


def bpr(scores: torch.Tensor, i: np.ndarray, j: np.ndarray) -> torch.Tensor:
    if len(i) == 0:
        return scores.new_zeros(())
    i, j = torch.from_numpy(i), torch.from_numpy(j)
    return -F.logsigmoid(scores[i] - scores[j]).mean()


def filtering_loss(salience: torch.Tensor, labels: OracleLabels, sampler: PairSampler = FULL_PAIRS) -> torch.Tensor:
    """Query EDUs above the rest, plus the rest above the filtered EDUs."""
    m = salience.shape[0]
    loss = salience.new_zeros(())
    for name, top, positive in (("query", labels.query_set, True), ("filter", labels.filter_set, False)):
        members = np.asarray(top, dtype=np.int64)
        others = np.setdiff1d(np.arange(m), members)
        if members.size == 0 or others.size == 0:
            logger.warning("set %s: empty %s term, contributes 0", labels.set_id, name)
            continue
        i, j = sampler.pairs(members, others) if positive else sampler.pairs(others, members)
        loss = loss + bpr(salience, i, j)
    return loss


def ranking_loss(r: torch.Tensor, labels: OracleLabels, sampler: PairSampler = FULL_PAIRS) -> torch.Tensor:
    pairs = labels.ranked_pairs
    if not pairs:
        return r.new_zeros(())
    if sampler.max_pairs is not None and len(pairs) > sampler.max_pairs:
        pick = sampler.rng.choice(len(pairs), sampler.max_pairs)
        pairs = [pairs[p] for p in pick]
    i = np.array([p[0] for p in pairs], dtype=np.int64)
    j = np.array([p[1] for p in pairs], dtype=np.int64)
    return bpr(r, i, j)


def total_loss(rank_l, filter_l, lam: float = DEFAULT_LAMBDA):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return rank_l + lam * filter_l


# --------------------------------------------------------------------------
# training


@dataclass
class TrainingConfig:
    lam: float = DEFAULT_LAMBDA
    k: int = DEFAULT_K
    k_q: int = 10
    k_f: int | None = None
    learning_rate: float = 3e-5
    batch_size: int = 16
    epochs: int = 10
    pair_samples_per_set: int | None = 64
    seed: int = 0
    train_backend: bool = False
    eval_k: int = 10
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingItem:
    feats: SetFeatures
    labels: OracleLabels


@dataclass
class TrainResult:
    model: RetrieverModel
    history: list[dict] = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = None
    epochs_done: int = 0


def prepare_items(data: Iterable[tuple[SegmentedSet, OracleLabels]], backend, chunk_size: int = 1024) -> list[TrainingItem]:
    items = []
    for seg, labels in data:
        if labels.set_id != seg.set_id or len(labels.edu_ids) != seg.num_edus:
            raise ValueError(f"labels do not match set {seg.set_id!r}")
        items.append(TrainingItem(featurize(seg, backend, chunk_size), labels))
    return items


def set_losses(model: RetrieverModel, item: TrainingItem, sampler: PairSampler, k: int):
    out = model(item.feats, k)
    return ranking_loss(out.relevance.aggregate, item.labels, sampler), filtering_loss(out.salience, item.labels, sampler)


def make_optimizer(model: RetrieverModel, cfg: TrainingConfig) -> torch.optim.Optimizer:
    """Adam, or AdamW when ``weight_decay`` is positive."""
    if cfg.weight_decay > 0:
        return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)


def em_train(
    items: Sequence[TrainingItem],
    model: RetrieverModel,
    cfg: TrainingConfig,
    validation: Sequence[TrainingItem] | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    start_epoch: int = 0,
    on_epoch: Callable[[dict, RetrieverModel, torch.optim.Optimizer], None] | None = None,
) -> TrainResult:
    """Run epochs ``start_epoch .. cfg.epochs - 1``.

    Shuffling and pair sampling draw from ``default_rng([seed, epoch])`` so a
    resumed run replays the same trajectory.
    """
    if cfg.train_backend:
        raise NotImplementedError("token encoder backends in this package are frozen feature maps")
    model.k = cfg.k
    opt = optimizer or make_optimizer(model, cfg)
    history: list[dict] = []
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        sampler = PairSampler(cfg.pair_samples_per_set, rng)
        order = rng.permutation(len(items))
        sums = {"rank_loss": 0.0, "filter_loss": 0.0, "total": 0.0}
        model.train()
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            opt.zero_grad()
            losses = []
            for item in batch:
                rl, fl = set_losses(model, item, sampler, cfg.k)
                tl = total_loss(rl, fl, cfg.lam)
                if not torch.isfinite(tl):
                    raise TrainingDivergence("non-finite loss", {
                        "epoch": epoch, "batch": b, "set_id": item.labels.set_id,
                        "rank_loss": rl.item(), "filter_loss": fl.item(),
                    })
                sums["rank_loss"] += rl.item()
                sums["filter_loss"] += fl.item()
                sums["total"] += tl.item()
                losses.append(tl)
            torch.stack(losses).mean().backward()
            opt.step()
        record = {key: val / max(len(items), 1) for key, val in sums.items()}
        record["epoch"] = epoch + 1
        record.update(evaluate_items(model, validation if validation else items, cfg.eval_k))
        record["wall_seconds"] = time.perf_counter() - t0
        history.append(record)
        logger.info("epoch %d total=%.4f P@%d=%.3f ndcg@3=%.3f", epoch + 1, record["total"],
                    cfg.eval_k, record["precision_at_k"], record["ndcg_at_3"])
        if on_epoch is not None:
            on_epoch(record, model, opt)
    return TrainResult(model, history, opt, max(cfg.epochs, start_epoch))


# --------------------------------------------------------------------------
# inference


@dataclass
class InferenceResult:
    edu_salience: np.ndarray
    doc_relevance: np.ndarray
    queries: LatentQuerySet

    @property
    def edu_order(self) -> list[int]:
        return [int(i) for i in salience_order(self.edu_salience)]

    @property
    def doc_order(self) -> tuple[int, ...]:
        return rank_by_score(self.doc_relevance)


def infer_scores(
    model: RetrieverModel,
    seg: SegmentedSet | SetFeatures,
    backend=None,
    chunk_size: int = 1024,
    k: int | None = None,
) -> InferenceResult:
    feats = seg if isinstance(seg, SetFeatures) else featurize(seg, backend, chunk_size)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(feats, k)
    model.train(was_training)
    q = out.queries
    if isinstance(seg, SegmentedSet):
        ids = seg.edu_ids
        q = LatentQuerySet(q.vectors, q.indices, tuple(ids[i] for i in q.indices))
    return InferenceResult(out.salience.numpy().copy(), out.relevance.aggregate.numpy().copy(), q)


def evaluate_items(model: RetrieverModel, items: Sequence[TrainingItem], eval_k: int = 10) -> dict:
    acc = MetricsAccumulator(precision_ks=(eval_k,), ndcg_ks=(3,))
    for item in items:
        res = infer_scores(model, item.feats)
        oracle = item.labels.edu_order()
        if len(oracle) >= eval_k:
            acc.add_edu_ranking(res.edu_order, oracle)
        acc.add_doc_ranking(res.doc_order, item.labels.doc_ranking)
    rep = acc.report()
    return {
        "precision_at_k": rep["precision_at"][str(eval_k)],
        "filter_precision_at_k": rep["filter_precision_at"][str(eval_k)],
        "ndcg_at_3": rep["ndcg_at"]["3"],
        "mrr_1st": rep["mrr_1st"],
    }
