"""Document sets, EDU segmentation and chunking.

Every offset in this module lives in token space: a span ``[start, end)``
indexes the token sequence produced by the tokenizer of the active encoder
backend, so EDU spans line up with the rows of the token embedding matrix.
"""
from __future__ import annotations

import bisect
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol, Sequence

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 1024
MIN_FALLBACK_EDU = 3
_SPLIT_AFTER = frozenset({".", "!", "?", ",", ";"})


class CorpusError(Exception):
    """Base class for corpus problems."""


class CorpusFormatError(CorpusError):
    """The file as a whole is unusable (fatal)."""


class CorpusRecordError(CorpusError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class SegmentationError(CorpusError):
    def __init__(self, doc_id: str, message: str):
        super().__init__(f"document {doc_id!r}: {message}")
        self.doc_id = doc_id


class SpanValidationError(CorpusError):
    pass


class ConfigurationError(ValueError):
    pass


# --------------------------------------------------------------------------
# tokenization


class Tokenizer(Protocol):
    tokenizer_id: str

    def tokenize(self, text: str) -> list[tuple[str, int, int]]:
        """Return ``(token, char_start, char_end)`` triples."""


class RegexTokenizer:
    """Words, single punctuation marks, and ``<marker>`` tags as tokens."""

    tokenizer_id = "regex-word-v1"
    _pattern = re.compile(r"<[\w-]+>|\w+|[^\w\s]")

    def tokenize(self, text: str) -> list[tuple[str, int, int]]:
        return [(m.group(), m.start(), m.end()) for m in self._pattern.finditer(text)]


DEFAULT_TOKENIZER = RegexTokenizer()


# --------------------------------------------------------------------------
# data model


@dataclass(frozen=True)
class Document:
    id: str
    raw_text: str
    tokens: tuple[str, ...]
    offsets: tuple[tuple[int, int], ...] = field(default=(), repr=False, compare=False)

    @classmethod
    def from_text(cls, doc_id: str, text: str, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> "Document":
        triples = tokenizer.tokenize(text)
        return cls(
            id=doc_id,
            raw_text=text,
            tokens=tuple(t for t, _, _ in triples),
            offsets=tuple((s, e) for _, s, e in triples),
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def char_slice(self, start: int, end: int) -> str:
        """Source text covering tokens ``[start, end)``."""
        if start >= end:
            return ""
        if not self.offsets:
            return " ".join(self.tokens[start:end])
        return self.raw_text[self.offsets[start][0]:self.offsets[end - 1][1]]


@dataclass(frozen=True)
class DocumentSet:
    set_id: str
    documents: tuple[Document, ...]
    reference_summary: str | None = None

    def __post_init__(self):
        if not self.documents:
            raise CorpusError(f"set {self.set_id!r} has no documents")
        ids = [d.id for d in self.documents]
        if len(set(ids)) != len(ids):
            raise CorpusError(f"set {self.set_id!r} has duplicate document ids")

    @property
    def n(self) -> int:
        return len(self.documents)

    @classmethod
    def from_texts(
        cls,
        set_id: str,
        texts: Sequence[str],
        summary: str | None = None,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    ) -> "DocumentSet":
        docs = tuple(Document.from_text(f"{set_id}/{i}", t, tokenizer) for i, t in enumerate(texts))
        return cls(set_id, docs, summary)


@dataclass(frozen=True)
class EduSpan:
    doc_index: int
    edu_index: int
    start: int
    end: int
    text: str = ""

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class Chunk:
    doc_index: int
    chunk_index: int
    start: int
    end: int

    @property
    def size(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class SegmentedSet:
    base: DocumentSet
    spans: tuple[tuple[EduSpan, ...], ...]
    chunks: tuple[tuple[Chunk, ...], ...]

    def __post_init__(self):
        if len(self.spans) != self.base.n or len(self.chunks) != self.base.n:
            raise SpanValidationError("spans/chunks must be given for every document")
        for i, doc in enumerate(self.base.documents):
            validate_spans([(s.start, s.end) for s in self.spans[i]], len(doc))
            validate_spans([(c.start, c.end) for c in self.chunks[i]], len(doc))

    @property
    def set_id(self) -> str:
        return self.base.set_id

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def edus(self) -> list[EduSpan]:
        """All EDUs in (doc_index, edu_index) order."""
        return [s for doc_spans in self.spans for s in doc_spans]

    @property
    def edu_ids(self) -> list[tuple[int, int]]:
        return [(s.doc_index, s.edu_index) for s in self.edus]

    @property
    def num_edus(self) -> int:
        return sum(len(s) for s in self.spans)

    @property
    def edu_counts(self) -> list[int]:
        return [len(s) for s in self.spans]

    @property
    def total_tokens(self) -> int:
        return sum(len(d) for d in self.base.documents)


# --------------------------------------------------------------------------
# validation helpers


def validate_spans(spans: Sequence[tuple[int, int]], num_tokens: int) -> None:
    """Spans must be sorted, non-empty, non-overlapping and cover ``[0, num_tokens)``."""
    if num_tokens == 0:
        if spans:
            raise SpanValidationError("spans given for an empty token sequence")
        return
    if not spans:
        raise SpanValidationError("no spans for a non-empty token sequence")
    pos = 0
    for start, end in spans:
        if end <= start:
            raise SpanValidationError(f"empty or inverted span [{start}, {end})")
        if start != pos:
            kind = "overlapping" if start < pos else "gap before"
            raise SpanValidationError(f"{kind} span [{start}, {end}) at token {pos}")
        pos = end
    if pos != num_tokens:
        raise SpanValidationError(f"spans end at {pos}, document has {num_tokens} tokens")


# --------------------------------------------------------------------------
# segmentation


class SegmenterBackend(Protocol):
    segmenter_id: str

    def segment(self, doc: Document) -> Sequence[tuple[int, int]]:
        """Token-offset spans for ``doc``."""


def fallback_spans(tokens: Sequence[str]) -> list[tuple[int, int]]:
    if not tokens:
        return []
    pieces: list[list[int]] = []
    start = 0
    for i, tok in enumerate(tokens):
        if tok in _SPLIT_AFTER:
            pieces.append([start, i + 1])
            start = i + 1
    if start < len(tokens):
        pieces.append([start, len(tokens)])

    merged: list[list[int]] = []
    for piece in pieces:
        if merged and piece[1] - piece[0] < MIN_FALLBACK_EDU:
            merged[-1][1] = piece[1]
        else:
            merged.append(piece)
    # a short leading piece has no left neighbour
    if len(merged) > 1 and merged[0][1] - merged[0][0] < MIN_FALLBACK_EDU:
        merged[1][0] = merged[0][0]
        merged.pop(0)
    return [(s, e) for s, e in merged]


def fallback_segment(doc: Document, doc_index: int = 0) -> list[EduSpan]:
    """Clause-like segmentation at ``. ! ? , ;`` with a 3-token minimum."""
    return _make_spans(doc, doc_index, fallback_spans(doc.tokens))


class FallbackSegmenter:
    segmenter_id = "fallback-punct-v1"

    def segment(self, doc: Document) -> list[tuple[int, int]]:
        return fallback_spans(doc.tokens)


class CharSpanSegmenter:
    """Adapter for external segmenters (e.g. an RST parser) that emit character spans.

    ``split`` maps raw text to character ``(start, end)`` pairs. Each internal EDU
    boundary is snapped to the nearest token boundary; boundaries that collapse
    onto each other are merged.
    """

    def __init__(self, split: Callable[[str], Sequence[tuple[int, int]]], segmenter_id: str = "charspan"):
        self.split = split
        self.segmenter_id = segmenter_id

    def segment(self, doc: Document) -> list[tuple[int, int]]:
        char_spans = sorted(self.split(doc.raw_text))
        n = len(doc.tokens)
        if n == 0:
            return []
        starts = [s for s, _ in doc.offsets]
        cuts = set()
        for cs, _ in char_spans[1:]:
            cuts.add(_nearest_boundary(starts, cs))
        bounds = [0] + sorted(c for c in cuts if 0 < c < n) + [n]
        return [(a, b) for a, b in zip(bounds, bounds[1:])]


def _nearest_boundary(starts: Sequence[int], char_pos: int) -> int:
    j = bisect.bisect_left(starts, char_pos)
    if j == 0:
        return 0
    if j == len(starts):
        return len(starts)
    return j if starts[j] - char_pos <= char_pos - starts[j - 1] else j - 1


def segment_edus(doc: Document, segmenter: SegmenterBackend, doc_index: int = 0) -> list[EduSpan]:
    if not doc.tokens:
        raise SegmentationError(doc.id, "document has no tokens")
    try:
        raw = segmenter.segment(doc)
    except Exception as exc:
        raise SegmentationError(doc.id, f"segmenter {getattr(segmenter, 'segmenter_id', '?')} failed: {exc}") from exc
    spans = [(int(s), int(e)) for s, e in raw]
    validate_spans(spans, len(doc))
    return _make_spans(doc, doc_index, spans)


def _make_spans(doc: Document, doc_index: int, spans: Iterable[tuple[int, int]]) -> list[EduSpan]:
    return [EduSpan(doc_index, j, s, e, doc.char_slice(s, e)) for j, (s, e) in enumerate(spans)]


# --------------------------------------------------------------------------
# chunking


def chunk_document(doc: Document, c: int = DEFAULT_CHUNK_SIZE, doc_index: int = 0) -> list[Chunk]:
    if c < 1:
        raise ConfigurationError(f"chunk size must be >= 1, got {c}")
    n = len(doc)
    return [Chunk(doc_index, j, s, min(s + c, n)) for j, s in enumerate(range(0, n, c))]


def segment_set(
    doc_set: DocumentSet,
    segmenter: SegmenterBackend | None = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> SegmentedSet:
    segmenter = segmenter or FallbackSegmenter()
    spans = tuple(tuple(segment_edus(d, segmenter, i)) for i, d in enumerate(doc_set.documents))
    chunks = tuple(tuple(chunk_document(d, chunk_size, i)) for i, d in enumerate(doc_set.documents))
    return SegmentedSet(doc_set, spans, chunks)


# --------------------------------------------------------------------------
# I/O


def load_corpus(
    path: str | Path,
    format: str = "jsonl",
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    id_prefix: str = "set",
) -> Iterator[DocumentSet]:
    """Stream ``DocumentSet`` records from a JSON Lines corpus.

    Lines without an ``id`` get ``{id_prefix}-{lineno:06d}``.
    """
    if format != "jsonl":
        raise CorpusFormatError(f"unsupported corpus format {format!r}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusRecordError(lineno, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise CorpusRecordError(lineno, "record is not an object")
            if "docs" not in rec:
                raise CorpusFormatError(f"line {lineno}: missing required field 'docs'")
            docs = rec["docs"]
            if not isinstance(docs, list) or not all(isinstance(d, str) for d in docs):
                raise CorpusRecordError(lineno, "'docs' must be a list of strings")
            if not docs:
                raise CorpusRecordError(lineno, "'docs' is empty")
            summary = rec.get("summary")
            if summary is not None and not isinstance(summary, str):
                raise CorpusRecordError(lineno, "'summary' must be a string")
            set_id = str(rec.get("id") or f"{id_prefix}-{lineno:06d}")
            try:
                yield DocumentSet.from_texts(set_id, docs, summary, tokenizer)
            except CorpusError as exc:
                raise CorpusRecordError(lineno, str(exc)) from exc


def segmented_to_record(seg: SegmentedSet, tokenizer_id: str) -> dict:
    return {
        "id": seg.set_id,
        "docs": [d.raw_text for d in seg.base.documents],
        "summary": seg.base.reference_summary,
        "edu_spans": [[[s.start, s.end] for s in doc_spans] for doc_spans in seg.spans],
        "tokenizer_id": tokenizer_id,
    }


def write_segmented_cache(path: str | Path, sets: Iterable[SegmentedSet], tokenizer_id: str) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for seg in sets:
            fh.write(json.dumps(segmented_to_record(seg, tokenizer_id), ensure_ascii=False, sort_keys=True))
            fh.write("\n")
            count += 1
    return count


def read_segmented_cache(
    path: str | Path,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> list[SegmentedSet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("tokenizer_id") != tokenizer.tokenizer_id:
                raise CorpusFormatError(
                    f"line {lineno}: cache built with tokenizer {rec.get('tokenizer_id')!r}, "
                    f"active tokenizer is {tokenizer.tokenizer_id!r}"
                )
            base = DocumentSet.from_texts(rec["id"], rec["docs"], rec.get("summary"), tokenizer)
            spans = []
            for i, (doc, doc_spans) in enumerate(zip(base.documents, rec["edu_spans"])):
                pairs = [(int(s), int(e)) for s, e in doc_spans]
                try:
                    validate_spans(pairs, len(doc))
                except SpanValidationError as exc:
                    raise CorpusRecordError(lineno, f"doc {i}: {exc}") from exc
                spans.append(tuple(_make_spans(doc, i, pairs)))
            chunks = tuple(tuple(chunk_document(d, chunk_size, i)) for i, d in enumerate(base.documents))
            out.append(SegmentedSet(base, tuple(spans), chunks))
    return out
