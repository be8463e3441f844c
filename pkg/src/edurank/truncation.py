"""Budget-respecting assembly of a document set for a downstream summarizer.

A plan records, for every EDU, how many of its leading tokens survive. Whole
EDUs are kept or dropped by the salience-driven plans; tail truncation and
the degraded single-EDU case can cut one EDU short.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import DEFAULT_TOKENIZER, SegmentedSet, Tokenizer
from .oracle import rank_by_score

DEFAULT_SEPARATOR = "<doc-sep>"
VARIANTS = ("full", "no_rank", "no_filter", "no_both", "even")
SCOPES = ("global", "lower_ranked")


class EmptyPlanError(ValueError):
    pass


class PlanMismatchError(ValueError):
    pass


class BudgetViolation(AssertionError):
    pass


@dataclass(frozen=True)
class TruncationPlan:
    set_id: str
    doc_order: tuple[int, ...]
    kept_tokens: tuple[tuple[int, ...], ...]   # per doc, per EDU: leading tokens kept
    edu_lengths: tuple[tuple[int, ...], ...]
    budget: int
    separator: str = DEFAULT_SEPARATOR
    separator_tokens: tuple[str, ...] = (DEFAULT_SEPARATOR,)
    variant: str = "full"
    degraded: bool = False

    def __post_init__(self):
        if self.used_tokens > self.budget:
            raise BudgetViolation(f"plan for {self.set_id!r} uses {self.used_tokens} > budget {self.budget}")

    @property
    def kept(self) -> tuple[tuple[bool, ...], ...]:
        """True where an EDU survives in full."""
        return tuple(tuple(k == n for k, n in zip(ks, ns)) for ks, ns in zip(self.kept_tokens, self.edu_lengths))

    @property
    def nonempty_docs(self) -> list[int]:
        return [i for i in self.doc_order if sum(self.kept_tokens[i]) > 0]

    @property
    def separator_count(self) -> int:
        return max(len(self.nonempty_docs) - 1, 0)

    @property
    def used_tokens(self) -> int:
        body = sum(sum(ks) for ks in self.kept_tokens)
        return body + self.separator_count * len(self.separator_tokens)

    @property
    def dropped_edus(self) -> list[tuple[int, int]]:
        return [(i, j) for i, ks in enumerate(self.kept_tokens) for j, k in enumerate(ks) if k == 0]

    @property
    def partial_edus(self) -> list[tuple[int, int, int]]:
        return [(i, j, k) for i, (ks, ns) in enumerate(zip(self.kept_tokens, self.edu_lengths))
                for j, (k, n) in enumerate(zip(ks, ns)) if 0 < k < n]


@dataclass(frozen=True)
class AssembledInput:
    set_id: str
    tokens: tuple[str, ...]
    text: str


def _separator_tokens(separator: str | None, tokenizer: Tokenizer) -> tuple[str, ...]:
    if not separator:
        return ()
    return tuple(t for t, _, _ in tokenizer.tokenize(separator))


def _lengths(seg: SegmentedSet) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(s.length for s in doc_spans) for doc_spans in seg.spans)


def _check_scores(seg: SegmentedSet, doc_relevance, edu_salience) -> tuple[np.ndarray, np.ndarray]:
    rel = np.asarray(doc_relevance, dtype=float)
    sal = np.asarray(edu_salience, dtype=float)
    if rel.shape != (seg.n,):
        raise ValueError(f"need {seg.n} document scores, got shape {rel.shape}")
    if sal.shape != (seg.num_edus,):
        raise ValueError(f"need {seg.num_edus} EDU scores, got shape {sal.shape}")
    return rel, sal


def _check_budget(budget: int) -> None:
    if budget < 1:
        raise EmptyPlanError(f"budget {budget} leaves no room for any token")


def drop_order(
    seg: SegmentedSet,
    doc_order: Sequence[int],
    edu_salience,
    scope: str = "global",
) -> list[tuple[int, int]]:
    """EDUs in the order they are removed.

    ``global``: ascending salience; ties drop the EDU of the lower-ranked
    document first, then the later EDU. ``lower_ranked``: empties the
    lowest-ranked document first, each document in ascending salience.
    """
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    sal = np.asarray(edu_salience, dtype=float)
    rank_pos = {d: p for p, d in enumerate(doc_order)}
    keyed = []
    for flat, (i, j) in enumerate(seg.edu_ids):
        if scope == "global":
            key = (sal[flat], -rank_pos[i], -j)
        else:
            key = (-rank_pos[i], sal[flat], -j)
        keyed.append((key, (i, j)))
    keyed.sort(key=lambda kv: kv[0])
    return [eid for _, eid in keyed]


def filter_plan(
    seg: SegmentedSet,
    doc_order: Sequence[int],
    edu_salience,
    budget: int,
    separator: str | None = DEFAULT_SEPARATOR,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    scope: str = "global",
    variant: str = "full",
) -> TruncationPlan:
    """Drop EDUs greedily in :func:`drop_order` until the set fits."""
    _check_budget(budget)
    sep = _separator_tokens(separator, tokenizer)
    lengths = _lengths(seg)
    kept = [list(ls) for ls in lengths]
    doc_tokens = [sum(ls) for ls in lengths]
    nonempty = sum(1 for t in doc_tokens if t > 0)
    used = sum(doc_tokens) + max(nonempty - 1, 0) * len(sep)
    order = drop_order(seg, doc_order, edu_salience, scope)
    degraded = False
    for pos, (i, j) in enumerate(order):
        if used <= budget:
            break
        if pos == len(order) - 1:
            # only one EDU left and it alone is too long: keep its head
            kept[i][j] = budget
            degraded = True
            break
        used -= kept[i][j]
        doc_tokens[i] -= kept[i][j]
        kept[i][j] = 0
        if doc_tokens[i] == 0:
            nonempty -= 1
            if nonempty >= 1:
                used -= len(sep)
    return TruncationPlan(
        set_id=seg.set_id,
        doc_order=tuple(int(d) for d in doc_order),
        kept_tokens=tuple(tuple(k) for k in kept),
        edu_lengths=lengths,
        budget=budget,
        separator=separator or "",
        separator_tokens=sep,
        variant=variant,
        degraded=degraded,
    )


def tail_plan(
    seg: SegmentedSet,
    doc_order: Sequence[int],
    budget: int,
    separator: str | None = DEFAULT_SEPARATOR,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    variant: str = "no_filter",
) -> TruncationPlan:
    """Concatenate documents in ``doc_order`` and cut the sequence at ``budget``."""
    _check_budget(budget)
    sep = _separator_tokens(separator, tokenizer)
    lengths = _lengths(seg)
    kept = [[0] * len(ls) for ls in lengths]
    used, started = 0, False
    for i in doc_order:
        cost = len(sep) if started else 0
        room = budget - used - cost
        if room <= 0:
            break
        took = 0
        for j, n in enumerate(lengths[i]):
            take = min(n, room - took)
            if take <= 0:
                break
            kept[i][j] = take
            took += take
        if took:
            used += cost + took
            started = True
    return TruncationPlan(
        set_id=seg.set_id,
        doc_order=tuple(int(d) for d in doc_order),
        kept_tokens=tuple(tuple(k) for k in kept),
        edu_lengths=lengths,
        budget=budget,
        separator=separator or "",
        separator_tokens=sep,
        variant=variant,
    )


def relevance_order(doc_relevance) -> tuple[int, ...]:
    """Descending relevance, ascending index on ties."""
    return rank_by_score(np.asarray(doc_relevance, dtype=float))


def seeded_permutation(n: int, seed: int) -> tuple[int, ...]:
    return tuple(int(i) for i in np.random.default_rng(seed).permutation(n))


def build_plan(
    seg: SegmentedSet,
    doc_relevance,
    edu_salience,
    budget: int,
    separator: str | None = DEFAULT_SEPARATOR,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    scope: str = "global",
) -> TruncationPlan:
    rel, sal = _check_scores(seg, doc_relevance, edu_salience)
    return filter_plan(seg, relevance_order(rel), sal, budget, separator, tokenizer, scope, "full")


def even_truncation(
    seg: SegmentedSet,
    budget: int,
    separator: str | None = DEFAULT_SEPARATOR,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> TruncationPlan:
    """Equal head quota per document, original order, leftovers unassigned.

    The quota is ``(budget - separator tokens) // n``; without a separator
    this is ``budget // n``.
    """
    sep = _separator_tokens(separator, tokenizer)
    n = seg.n
    overhead = (n - 1) * len(sep)
    quota = (budget - overhead) // n if budget > overhead else 0
    if quota < 1:
        raise EmptyPlanError(f"budget {budget} cannot give each of {n} documents a token")
    lengths = _lengths(seg)
    kept = []
    for ls in lengths:
        left, row = quota, []
        for length in ls:
            take = min(length, left)
            row.append(take)
            left -= take
        kept.append(tuple(row))
    return TruncationPlan(
        set_id=seg.set_id,
        doc_order=tuple(range(n)),
        kept_tokens=tuple(kept),
        edu_lengths=lengths,
        budget=budget,
        separator=separator or "",
        separator_tokens=sep,
        variant="even",
    )


def ablation_plan(
    seg: SegmentedSet,
    doc_relevance,
    edu_salience,
    budget: int,
    variant: str = "full",
    seed: int = 0,
    separator: str | None = DEFAULT_SEPARATOR,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    scope: str = "global",
) -> TruncationPlan:
    """``no_rank`` and ``no_both`` order documents by ``default_rng(seed).permutation(n)``;
    ``no_filter`` and ``no_both`` cut the concatenation's tail instead of dropping EDUs."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if variant == "even":
        return even_truncation(seg, budget, separator, tokenizer)
    rel, sal = _check_scores(seg, doc_relevance, edu_salience)
    order = seeded_permutation(seg.n, seed) if variant in ("no_rank", "no_both") else relevance_order(rel)
    if variant in ("full", "no_rank"):
        return filter_plan(seg, order, sal, budget, separator, tokenizer, scope, variant)
    return tail_plan(seg, order, budget, separator, tokenizer, variant)


def assemble_input(plan: TruncationPlan, seg: SegmentedSet) -> AssembledInput:
    if plan.set_id != seg.set_id or plan.edu_lengths != _lengths(seg):
        raise PlanMismatchError(f"plan for {plan.set_id!r} does not describe set {seg.set_id!r}")
    tokens: list[str] = []
    doc_texts: list[str] = []
    for i in plan.nonempty_docs:
        doc = seg.base.documents[i]
        if doc_texts:
            tokens.extend(plan.separator_tokens)
        pieces = []
        for span, k in zip(seg.spans[i], plan.kept_tokens[i]):
            if k:
                tokens.extend(doc.tokens[span.start:span.start + k])
                pieces.append(doc.char_slice(span.start, span.start + k))
        doc_texts.append(" ".join(pieces))
    if len(tokens) != plan.used_tokens:
        raise PlanMismatchError("assembled length disagrees with the plan's accounting")
    joiner = f" {plan.separator} " if plan.separator_tokens else " "
    return AssembledInput(seg.set_id, tuple(tokens), joiner.join(doc_texts))


# --------------------------------------------------------------------------
# export


def plan_to_record(plan: TruncationPlan) -> dict:
    return {
        "set_id": plan.set_id,
        "doc_order": list(plan.doc_order),
        "dropped_edus": [list(e) for e in plan.dropped_edus],
        "partial_edus": [list(e) for e in plan.partial_edus],
        "used_tokens": plan.used_tokens,
        "budget": plan.budget,
        "variant": plan.variant,
        "degraded": plan.degraded,
        "separator": plan.separator,
    }


def write_plans(path: str | Path, plans: Iterable[TruncationPlan]) -> int:
    """One JSON object per set, sorted by set id."""
    rows = sorted(plans, key=lambda p: p.set_id)
    with open(path, "w", encoding="utf-8") as fh:
        for plan in rows:
            fh.write(json.dumps(plan_to_record(plan), sort_keys=True, ensure_ascii=False) + "\n")
    return len(rows)


def write_inputs(path: str | Path, inputs: Iterable[AssembledInput]) -> int:
    rows = sorted(inputs, key=lambda a: a.set_id)
    with open(path, "w", encoding="utf-8") as fh:
        for item in rows:
            fh.write(json.dumps({"set_id": item.set_id, "input_text": item.text}, sort_keys=True, ensure_ascii=False) + "\n")
    return len(rows)
