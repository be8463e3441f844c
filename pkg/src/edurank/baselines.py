"""Lexical baselines: BM25 ranking with RAKE keyword queries or a gold-EDU query."""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import SegmentedSet
from .oracle import OracleLabels, salience_order

_WORD = re.compile(r"\w+")
_FRAGMENT = re.compile(r"[^\w\s]+")
MAX_PHRASE_WORDS = 4
RAKE_QUERY_PHRASES = 5

ENGLISH_STOPWORDS = frozenset("""
a about above after again against all also am an and any are as at be because been before being below
between both but by can could did do does doing down during each either few for from further had has
have having he her here hers herself him himself his how however i if in into is it its itself just
me more most my myself no nor not now of off on once only or other our ours ourselves out over own
same she should so some such than that the their theirs them themselves then there these they this
those through to too under until up upon us very was we were what when where which while who whom
why will with within without would you your yours yourself yourselves
""".split())


def load_stopwords(path: str | Path) -> frozenset[str]:
    """One word per line; blank lines and ``#`` comments ignored."""
    words = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip().lower()
            if line:
                words.append(line)
    return frozenset(words)


def terms(text: str) -> list[str]:
    """Lower-cased word tokens used by both baselines."""
    return _WORD.findall(text.lower())


# --------------------------------------------------------------------------
# RAKE


def candidate_phrases(text: str, stopwords: frozenset[str] | set[str]) -> list[tuple[str, ...]]:
    """Maximal stopword-free runs inside punctuation-free fragments, split into pieces of at most four words."""
    out = []
    for fragment in _FRAGMENT.split(text.lower()):
        run: list[str] = []
        for word in terms(fragment) + [None]:
            if word is None or word in stopwords:
                for s in range(0, len(run), MAX_PHRASE_WORDS):
                    out.append(tuple(run[s:s + MAX_PHRASE_WORDS]))
                run = []
            else:
                run.append(word)
    return out


def rake_keywords(texts: Sequence[str] | str, stopwords: Iterable[str] = ENGLISH_STOPWORDS) -> list[tuple[str, float]]:
    """Phrases ranked by summed word degree/frequency; ties in lexicographic order."""
    if isinstance(texts, str):
        texts = [texts]
    stop = frozenset(w.lower() for w in stopwords)
    phrases = [p for t in texts for p in candidate_phrases(t, stop)]
    freq: Counter[str] = Counter()
    degree: Counter[str] = Counter()
    for p in phrases:
        for w in p:
            freq[w] += 1
            degree[w] += len(p)
    word_score = {w: degree[w] / freq[w] for w in freq}
    scored = {" ".join(p): sum(word_score[w] for w in p) for p in set(phrases)}
    return sorted(scored.items(), key=lambda kv: (-kv[1], kv[0]))


def rake_query(texts: Sequence[str], stopwords: Iterable[str] = ENGLISH_STOPWORDS, top: int = RAKE_QUERY_PHRASES) -> list[str]:
    """Query terms: the words of the ``top`` best RAKE phrases, in rank order."""
    return [w for phrase, _ in rake_keywords(texts, stopwords)[:top] for w in phrase.split()]


# --------------------------------------------------------------------------
# BM25


@dataclass
class Bm25Index:
    tf: list[Counter]
    lengths: list[int]
    df: Counter
    k1: float = 1.2
    b: float = 0.75

    @classmethod
    def from_units(cls, units: Sequence[Sequence[str]], k1: float = 1.2, b: float = 0.75) -> "Bm25Index":
        if not units:
            raise ValueError("BM25 index needs at least one unit")
        tf = [Counter(u) for u in units]
        df: Counter = Counter()
        for c in tf:
            df.update(c.keys())
        return cls(tf, [len(u) for u in units], df, k1, b)

    @classmethod
    def from_texts(cls, texts: Sequence[str], k1: float = 1.2, b: float = 0.75) -> "Bm25Index":
        return cls.from_units([terms(t) for t in texts], k1, b)

    @property
    def num_units(self) -> int:
        return len(self.tf)

    @property
    def avg_length(self) -> float:
        return sum(self.lengths) / len(self.lengths)

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log((self.num_units - df + 0.5) / (df + 0.5) + 1.0)


def bm25_score(index: Bm25Index, query_terms: Sequence[str], unit_id: int) -> float:
    """Okapi BM25 with the non-negative idf; repeated query terms count repeatedly."""
    if not 0 <= unit_id < index.num_units:
        raise IndexError(f"unit {unit_id} not in a {index.num_units}-unit index")
    avg = index.avg_length
    if avg == 0:
        return 0.0
    tf = index.tf[unit_id]
    norm = index.k1 * (1 - index.b + index.b * index.lengths[unit_id] / avg)
    total = 0.0
    for t in query_terms:
        f = tf.get(t, 0)
        if f:
            total += index.idf(t) * f * (index.k1 + 1) / (f + norm)
    return total


def bm25_scores(index: Bm25Index, query_terms: Sequence[str]) -> np.ndarray:
    return np.array([bm25_score(index, query_terms, u) for u in range(index.num_units)])


def bm25_rank(index: Bm25Index, query_terms: Sequence[str], k: int | None = None) -> list[int]:
    """Top-k unit ids by descending score, ascending id on ties."""
    if k is not None and k < 1:
        raise ValueError("k must be >= 1")
    order = salience_order(bm25_scores(index, query_terms))
    return [int(u) for u in order[:k]]


# --------------------------------------------------------------------------
# queries over a segmented set


def gold_query(labels: OracleLabels | None, seg: SegmentedSet) -> str:
    """Text of the EDU closest to the reference summary (first on ties)."""
    if labels is None:
        raise ValueError(f"gold query for {seg.set_id!r} needs oracle labels")
    if len(labels.edu_ids) != seg.num_edus:
        raise ValueError("labels do not match the set")
    return seg.edus[int(salience_order(labels.edu_salience)[0])].text


@dataclass(frozen=True)
class BaselineScores:
    edu_scores: np.ndarray
    doc_scores: np.ndarray
    query_terms: tuple[str, ...]


def score_set(seg: SegmentedSet, query_terms: Sequence[str], k1: float = 1.2, b: float = 0.75) -> BaselineScores:
    """BM25 with EDUs as units and, separately, documents as units."""
    edu_index = Bm25Index.from_texts([e.text for e in seg.edus], k1, b)
    doc_index = Bm25Index.from_texts([d.raw_text for d in seg.base.documents], k1, b)
    return BaselineScores(bm25_scores(edu_index, query_terms), bm25_scores(doc_index, query_terms), tuple(query_terms))


def rake_baseline(seg: SegmentedSet, stopwords: Iterable[str] = ENGLISH_STOPWORDS) -> BaselineScores:
    return score_set(seg, rake_query([d.raw_text for d in seg.base.documents], stopwords))


def gold_baseline(seg: SegmentedSet, labels: OracleLabels) -> BaselineScores:
    return score_set(seg, terms(gold_query(labels, seg)))
