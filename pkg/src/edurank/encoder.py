"""Token, EDU and document embeddings.

Tokens of a whole set are stacked into one matrix; EDUs and documents are
ragged segments of it, so both pooling stages run as segment softmaxes
without Python loops.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import DEFAULT_CHUNK_SIZE, Document, EduSpan, SegmentedSet, chunk_document

DTYPE = torch.float64


class EncoderContractError(RuntimeError):
    pass


def uniform_(param: torch.Tensor, scale: float, generator: torch.Generator) -> None:
    with torch.no_grad():
        param.copy_((torch.rand(param.shape, generator=generator, dtype=param.dtype) * 2 - 1) * scale)


def segment_softmax(logits: torch.Tensor, segment_ids: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of ``logits`` within each segment (max-subtracted)."""
    peak = torch.full((num_segments,), -torch.inf, dtype=logits.dtype)
    peak = peak.scatter_reduce(0, segment_ids, logits.detach(), reduce="amax", include_self=True)
    ex = torch.exp(logits - peak[segment_ids])
    denom = torch.zeros(num_segments, dtype=logits.dtype).index_add(0, segment_ids, ex)
    return ex / denom[segment_ids]


def segment_weighted_sum(weights: torch.Tensor, rows: torch.Tensor, segment_ids: torch.Tensor, num_segments: int):
    out = torch.zeros(num_segments, rows.shape[1], dtype=rows.dtype)
    return out.index_add(0, segment_ids, weights[:, None] * rows)


class SpanPooler(nn.Module):
    """Self-attentive span pooling: score each token with a one-hidden-layer MLP,
    softmax the scores within the span, and take the weighted sum of token rows."""

    def __init__(self, d: int, d_h: int | None = None, generator: torch.Generator | None = None):
        super().__init__()
        d_h = d if d_h is None else d_h
        if d_h < 1:
            raise ValueError("d_h must be >= 1")
        self.d, self.d_h = d, d_h
        self.W1 = nn.Parameter(torch.zeros(d_h, d, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.zeros(d_h, dtype=DTYPE))
        self.W2 = nn.Parameter(torch.zeros(d_h, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.zeros((), dtype=DTYPE))
        if generator is not None:
            uniform_(self.W1, d ** -0.5, generator)
            uniform_(self.W2, d_h ** -0.5, generator)

    def scores(self, T: torch.Tensor) -> torch.Tensor:
        return torch.relu(T @ self.W1.T + self.b1) @ self.W2 + self.b2

    def forward(self, T: torch.Tensor, segment_ids: torch.Tensor, num_segments: int):
        a = segment_softmax(self.scores(T), segment_ids, num_segments)
        return segment_weighted_sum(a, T, segment_ids, num_segments), a


class FeedForward(nn.Module):
    def __init__(self, d: int, generator: torch.Generator | None = None):
        super().__init__()
        self.hidden = nn.Linear(d, d, dtype=DTYPE)
        self.out = nn.Linear(d, d, dtype=DTYPE)
        for lin in (self.hidden, self.out):
            nn.init.zeros_(lin.bias)
            if generator is not None:
                uniform_(lin.weight, d ** -0.5, generator)

    def forward(self, x):
        return self.out(torch.relu(self.hidden(x)))


class GatedPooler(nn.Module):
    """``d_i = sum_j beta_j g(e_j)`` with ``beta = softmax_j(w . g(e_j))``."""

    def __init__(self, d: int, generator: torch.Generator | None = None, g: nn.Module | None = None):
        super().__init__()
        self.d = d
        self.g = g if g is not None else FeedForward(d, generator)
        self.w = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        if generator is not None:
            uniform_(self.w, d ** -0.5, generator)

    def forward(self, E: torch.Tensor, segment_ids: torch.Tensor, num_segments: int):
        G = self.g(E)
        beta = segment_softmax(G @ self.w, segment_ids, num_segments)
        return segment_weighted_sum(beta, G, segment_ids, num_segments), beta


# --------------------------------------------------------------------------
# single-unit helpers


def encode_tokens(doc: Document, backend, c: int = DEFAULT_CHUNK_SIZE) -> np.ndarray:
    """Encode chunk by chunk and concatenate; one row per token."""
    parts = []
    for ch in chunk_document(doc, c):
        rows = np.asarray(backend.encode(doc.tokens[ch.start:ch.end]), dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != ch.size:
            raise EncoderContractError(
                f"backend returned {rows.shape[0] if rows.ndim else 0} rows for a {ch.size}-token chunk of {doc.id!r}"
            )
        parts.append(rows)
    if not parts:
        return np.zeros((0, backend.dim))
    return np.concatenate(parts, axis=0)


def pool_edu(toks, span: EduSpan | tuple[int, int], pooler: SpanPooler, return_weights: bool = False):
    start, end = (span.start, span.end) if isinstance(span, EduSpan) else span
    T = torch.as_tensor(toks, dtype=DTYPE)
    if end - start < 1:
        raise ValueError("EDU span must contain at least one token")
    if start < 0 or end > T.shape[0]:
        raise ValueError(f"span [{start}, {end}) outside a {T.shape[0]}-row matrix")
    rows = T[start:end]
    e, a = pooler(rows, torch.zeros(end - start, dtype=torch.long), 1)
    return (e[0], a) if return_weights else e[0]


def pool_document(edus: Sequence | torch.Tensor, pooler: GatedPooler, return_weights: bool = False):
    E = torch.as_tensor(np.asarray(edus) if not isinstance(edus, torch.Tensor) else edus, dtype=DTYPE)
    if E.ndim != 2 or E.shape[0] < 1:
        raise ValueError("need at least one EDU vector")
    d, beta = pooler(E, torch.zeros(E.shape[0], dtype=torch.long), 1)
    return (d[0], beta) if return_weights else d[0]


# --------------------------------------------------------------------------
# whole-set features


@dataclass
class SetFeatures:
    """Token matrix of a set plus the index maps the pooling stages need."""

    set_id: str
    tokens: torch.Tensor        # (total_tokens, d)
    token_edu: torch.Tensor     # EDU id of each token row
    edu_doc: torch.Tensor       # document id of each EDU
    edu_lengths: torch.Tensor
    num_docs: int

    @property
    def num_edus(self) -> int:
        return int(self.edu_doc.shape[0])


def featurize(seg: SegmentedSet, backend, c: int = DEFAULT_CHUNK_SIZE) -> SetFeatures:
    if any(m == 0 for m in seg.edu_counts):
        raise EncoderContractError(f"set {seg.set_id!r} has a document without EDUs")
    blocks = [encode_tokens(doc, backend, c) for doc in seg.base.documents]
    token_edu = np.empty(seg.total_tokens, dtype=np.int64)
    edu_doc, lengths = [], []
    offset, eid = 0, 0
    for i, doc_spans in enumerate(seg.spans):
        for span in doc_spans:
            token_edu[offset + span.start:offset + span.end] = eid
            edu_doc.append(i)
            lengths.append(span.length)
            eid += 1
        offset += len(seg.base.documents[i])
    return SetFeatures(
        set_id=seg.set_id,
        tokens=torch.from_numpy(np.concatenate(blocks, axis=0)),
        token_edu=torch.from_numpy(token_edu),
        edu_doc=torch.tensor(edu_doc, dtype=torch.long),
        edu_lengths=torch.tensor(lengths, dtype=torch.long),
        num_docs=seg.n,
    )


def encode_set(feats: SetFeatures, span_pooler: SpanPooler, gated_pooler: GatedPooler):
    """Return ``(E, D, span_weights, gate_weights)`` for one set."""
    E, a = span_pooler(feats.tokens, feats.token_edu, feats.num_edus)
    D, beta = gated_pooler(E, feats.edu_doc, feats.num_docs)
    return E, D, a, beta
