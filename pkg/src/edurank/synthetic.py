"""Planted-signal benchmark with a known oracle.

The vocabulary has cue words, topical "aspects" (groups of four words) and
filler. Each set picks two aspects; its reference summary is the words of
those aspects plus every cue word. Every EDU has six distinct words and
falls in one tier:

* salient: four words of one chosen aspect, one cue, one filler
* on-topic: one chosen-aspect word, one cue, four filler
* off-topic: one word of an unchosen aspect, one cue, four filler
* junk: six filler

Words never share a bucket of the hash embedder, so the cosine to the
summary is exactly 5, 2, 1 and 0 over ``sqrt(6 * |summary|)`` for the four
tiers (``neutral_aspect_words`` raises the on-topic count). Aspect and cue words never share a hash-encoder bucket with filler or
punctuation.

Every document holds one salient EDU per chosen aspect and a distinct number
of on-topic EDUs, which fixes the oracle document ranking. Which aspect an
on-topic EDU belongs to is random, so a query drawn from one aspect sees only
part of the ranking signal. The salient tier is recognisable from word
classes alone; the ranking is not, because whether an aspect word is on-topic
depends on the set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backends import HashEmbedder, HashTokenEncoder
from .corpus import DocumentSet

WORDS_PER_EDU = 6
ASPECT_SIZE = 4
_SYLLABLES = ["ba", "ke", "ri", "mo", "tu", "sa", "ne", "lo", "vi", "da", "pe", "zu", "ga", "fo", "hi", "ju"]


@dataclass(frozen=True)
class Vocabulary:
    aspects: tuple[tuple[str, ...], ...]
    cues: tuple[str, ...]
    filler: tuple[str, ...]

    @property
    def aspect_words(self) -> frozenset[str]:
        return frozenset(w for a in self.aspects for w in a)


def build_vocabulary(
    n_aspects: int = 6,
    n_cues: int = 4,
    n_filler: int = 80,
    encoder: HashTokenEncoder | None = None,
    embedder: HashEmbedder | None = None,
    seed: int = 0,
) -> Vocabulary:
    encoder = encoder or HashTokenEncoder(64)
    embedder = embedder or HashEmbedder(256)
    n_marked = n_aspects * ASPECT_SIZE + n_cues
    if n_marked + n_filler > embedder.dim:
        raise ValueError("vocabulary larger than the embedder's bucket count")
    if n_marked + 2 >= encoder.dim:
        raise ValueError("encoder too narrow for the marked vocabulary")
    rng = np.random.default_rng(seed)
    punct = {encoder.feature(p)[0] for p in (",", ".")}
    used_emb: set[int] = set()
    used_enc: set[int] = set()
    seen: set[str] = set()

    def fresh():
        while True:
            w = "".join(rng.choice(_SYLLABLES, size=rng.integers(2, 4)))
            if w not in seen:
                seen.add(w)
                return w

    marked: list[str] = []
    while len(marked) < n_marked:
        w = fresh()
        eb, tb = embedder.feature(w)[0], encoder.feature(w)[0]
        if eb in used_emb or tb in used_enc or tb in punct:
            continue
        marked.append(w)
        used_emb.add(eb)
        used_enc.add(tb)
    filler: list[str] = []
    while len(filler) < n_filler:
        w = fresh()
        eb, tb = embedder.feature(w)[0], encoder.feature(w)[0]
        if eb in used_emb or tb in used_enc:
            continue
        filler.append(w)
        used_emb.add(eb)
    n_asp = n_aspects * ASPECT_SIZE
    aspects = tuple(tuple(marked[i:i + ASPECT_SIZE]) for i in range(0, n_asp, ASPECT_SIZE))
    return Vocabulary(aspects, tuple(marked[n_asp:]), tuple(filler))


def on_topic_counts(n_docs: int, neutral_slots: int) -> np.ndarray:
    """Evenly spaced, distinct on-topic counts, largest first."""
    if n_docs == 1:
        return np.array([neutral_slots // 2])
    return np.round(np.linspace(neutral_slots - 4, 2, n_docs)).astype(int)


def make_planted_set(
    set_id: str,
    rng: np.random.Generator,
    vocab: Vocabulary,
    n_docs: int = 5,
    edus_per_doc: int = 30,
    aspects_per_set: int = 2,
    junk_per_doc: int = 2,
    neutral_aspect_words: int = 1,
) -> DocumentSet:
    chosen = [int(a) for a in rng.choice(len(vocab.aspects), size=aspects_per_set, replace=False)]
    others = [a for a in range(len(vocab.aspects)) if a not in chosen]
    neutral_slots = edus_per_doc - aspects_per_set - junk_per_doc
    if neutral_slots < 6:
        raise ValueError("edus_per_doc too small for the tier layout")
    on_topic = rng.permutation(on_topic_counts(n_docs, neutral_slots))
    filler = np.array(vocab.filler)
    cues = vocab.cues

    def edu_words(tier: str) -> list[str]:
        if tier == "junk":
            words: list[str] = []
        else:
            words = [cues[int(rng.integers(len(cues)))]]
            if tier.startswith("salient:"):
                words += list(vocab.aspects[int(tier.split(":")[1])])
            else:
                a = int(tier.split(":")[1]) if tier.startswith("on:") else others[int(rng.integers(len(others)))]
                words += list(rng.choice(vocab.aspects[a], size=neutral_aspect_words, replace=False))
        words += list(rng.choice(filler, size=WORDS_PER_EDU - len(words), replace=False))
        return [words[p] for p in rng.permutation(len(words))]

    docs = []
    for i in range(n_docs):
        tiers = [f"salient:{a}" for a in chosen] + ["junk"] * junk_per_doc
        tiers += [f"on:{chosen[int(rng.integers(len(chosen)))]}" for _ in range(int(on_topic[i]))]
        tiers += ["off"] * (edus_per_doc - len(tiers))
        tiers = [tiers[t] for t in rng.permutation(len(tiers))]
        pieces = []
        for j, tier in enumerate(tiers):
            end = "." if (j % 3 == 2 or j == len(tiers) - 1) else ","
            pieces.append(" ".join(edu_words(tier)) + end)
        docs.append(" ".join(pieces))
    summary_words = [w for a in chosen for w in vocab.aspects[a]] + list(cues)
    summary = " ".join(summary_words[p] for p in rng.permutation(len(summary_words))) + "."
    return DocumentSet.from_texts(set_id, docs, summary)


def make_benchmark(
    n_sets: int,
    seed: int = 0,
    prefix: str = "syn",
    vocab: Vocabulary | None = None,
    **kwargs,
) -> list[DocumentSet]:
    vocab = vocab or build_vocabulary()
    rng = np.random.default_rng(seed)
    return [make_planted_set(f"{prefix}-{i:04d}", rng, vocab, **kwargs) for i in range(n_sets)]


def planted_salient_edus(doc_set: DocumentSet, vocab: Vocabulary) -> list[tuple[int, int]]:
    """(doc, edu) ids of salient-tier EDUs under the fallback segmenter."""
    aspect_words = vocab.aspect_words
    out = []
    for i, doc in enumerate(doc_set.documents):
        edus = [e for e in doc.raw_text.replace(".", ",").split(",") if e.strip()]
        for j, text in enumerate(edus):
            if sum(w in aspect_words for w in text.split()) == ASPECT_SIZE:
                out.append((i, j))
    return out
