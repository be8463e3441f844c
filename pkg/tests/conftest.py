from __future__ import annotations

import numpy as np
import pytest
import torch

from edurank.corpus import DocumentSet, segment_set
from edurank.encoder import DTYPE, SetFeatures
from edurank.oracle import OracleLabels, rank_by_score, salience_order

ACCEPTANCE: dict[int, tuple[bool, str]] = {}

WORDS = ["alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "theta", "lambda", "zeta", "rho", "tau"]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record_acceptance():
    def record(num: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[num] = (bool(ok), detail)
        print(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
    return record


def random_text(rng: np.random.Generator, n_edus: int, max_words: int = 6) -> str:
    pieces = []
    for j in range(n_edus):
        words = rng.choice(WORDS, size=int(rng.integers(3, max_words + 1)))
        pieces.append(" ".join(words) + ("." if j % 2 else ","))
    return " ".join(pieces)


def random_segmented(rng: np.random.Generator, n_docs: int, max_edus: int = 4, set_id: str = "r", max_words: int = 6):
    texts = [random_text(rng, int(rng.integers(1, max_edus + 1)), max_words) for _ in range(n_docs)]
    summary = " ".join(rng.choice(WORDS, size=5))
    return segment_set(DocumentSet.from_texts(set_id, texts, summary))


def random_features(rng: np.random.Generator, n_docs: int, edus_per_doc: list[int] | None = None,
                    d: int = 6, max_len: int = 4) -> SetFeatures:
    if edus_per_doc is None:
        edus_per_doc = [int(rng.integers(1, 4)) for _ in range(n_docs)]
    lengths = [int(rng.integers(1, max_len + 1)) for _ in range(sum(edus_per_doc))]
    edu_doc = np.repeat(np.arange(n_docs), edus_per_doc)
    token_edu = np.repeat(np.arange(len(lengths)), lengths)
    return SetFeatures(
        set_id="rand",
        tokens=torch.as_tensor(rng.normal(size=(sum(lengths), d)), dtype=DTYPE),
        token_edu=torch.as_tensor(token_edu),
        edu_doc=torch.as_tensor(edu_doc),
        edu_lengths=torch.as_tensor(lengths),
        num_docs=n_docs,
    )


def labels_from_scores(edu_ids, salience, doc_scores, k_q: int, k_f: int, set_id: str = "rand") -> OracleLabels:
    sal = np.asarray(salience, dtype=float)
    order = salience_order(sal)
    return OracleLabels(
        set_id=set_id,
        edu_ids=tuple(edu_ids),
        edu_salience=sal,
        doc_ranking=rank_by_score(doc_scores),
        query_set=tuple(int(i) for i in order[:k_q]),
        filter_set=tuple(int(i) for i in order[::-1][:k_f]),
    )


def edu_ids_of(feats: SetFeatures) -> list[tuple[int, int]]:
    out, seen = [], {}
    for doc in feats.edu_doc.tolist():
        out.append((doc, seen.get(doc, 0)))
        seen[doc] = seen.get(doc, 0) + 1
    return out


class PrefixSegmenter:
    """Groups tokens named ``e<j>x<k>`` into one EDU per ``j``."""

    segmenter_id = "prefix"

    def segment(self, doc):
        spans, start = [], 0
        for pos in range(1, len(doc.tokens) + 1):
            if pos == len(doc.tokens) or doc.tokens[pos].split("x")[0] != doc.tokens[start].split("x")[0]:
                spans.append((start, pos))
                start = pos
        return spans


def set_with_lengths(lengths_per_doc, set_id: str = "L"):
    """A segmented set whose EDU token counts are exactly ``lengths_per_doc``."""
    texts = [" ".join(f"e{j}x{k}d{i}" for j, n in enumerate(ls) for k in range(n))
             for i, ls in enumerate(lengths_per_doc)]
    return segment_set(DocumentSet.from_texts(set_id, texts, "summary"), PrefixSegmenter())
