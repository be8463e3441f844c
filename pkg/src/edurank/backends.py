"""Token encoder and sentence embedder backends.

The hash backends are frozen and deterministic, so the whole pipeline can be
exercised without downloading model weights. The transformer adapters import
their heavy dependencies lazily.
"""
from __future__ import annotations

import hashlib
import re
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from .corpus import DEFAULT_TOKENIZER, Tokenizer


class BackendError(RuntimeError):
    """A backend is unavailable or violated its contract."""


class TokenEncoderBackend(Protocol):
    backend_id: str
    dim: int
    tokenizer: Tokenizer

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        """One ``dim``-vector per token."""


class SemanticEmbedder(Protocol):
    embedder_id: str
    dim: int
    deterministic: bool

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        ...


@lru_cache(maxsize=200_000)
def hash_feature(token: str, dim: int, salt: str) -> tuple[int, float]:
    """Bucket index and sign of ``token`` under a salted blake2b hash."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=salt.encode("utf-8")).digest()
    h = int.from_bytes(digest, "little")
    return h % dim, (1.0 if (h >> 63) & 1 else -1.0)


class HashTokenEncoder:
    """Signed one-hot feature hashing of lowercased tokens."""

    salt = "tok"

    def __init__(self, dim: int = 64, tokenizer: Tokenizer = DEFAULT_TOKENIZER):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.tokenizer = tokenizer
        self.backend_id = f"hash-{dim}"

    def feature(self, token: str) -> tuple[int, float]:
        return hash_feature(token.lower(), self.dim, self.salt)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(tokens), self.dim))
        for row, tok in enumerate(tokens):
            b, s = self.feature(tok)
            out[row, b] = s
        return out


class HashEmbedder:
    """Bag of lowercased word unigrams hashed into ``dim`` buckets, L2-normalised."""

    deterministic = True
    salt = "emb"
    _words = re.compile(r"\w+")

    def __init__(self, dim: int = 256):
        self.dim = dim
        self.embedder_id = f"hash-emb-{dim}"

    def feature(self, word: str) -> tuple[int, float]:
        return hash_feature(word.lower(), self.dim, self.salt)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for row, text in enumerate(texts):
            for w in self._words.findall(text.lower()):
                b, s = self.feature(w)
                out[row, b] += s
            norm = np.linalg.norm(out[row])
            if norm > 0:
                out[row] /= norm
        return out


class HFTokenizer:
    """Wraps a fast Hugging Face tokenizer so offsets come from the encoder's own vocabulary."""

    def __init__(self, hf_tokenizer, tokenizer_id: str):
        self._tok = hf_tokenizer
        self.tokenizer_id = tokenizer_id

    def tokenize(self, text: str) -> list[tuple[str, int, int]]:
        enc = self._tok(text, add_special_tokens=False, return_offsets_mapping=True)
        toks = self._tok.convert_ids_to_tokens(enc["input_ids"])
        return [(t, s, e) for t, (s, e) in zip(toks, enc["offset_mapping"])]


class TransformerTokenEncoder:
    """Frozen long-context encoder (Longformer by default); chunks are encoded independently."""

    def __init__(self, model_name: str = "allenai/longformer-base-4096"):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise BackendError(f"transformers is required for {model_name}: {exc}") from exc
        self._torch = torch
        hf_tok = AutoTokenizer.from_pretrained(model_name)
        self._model = AutoModel.from_pretrained(model_name).eval()
        self.tokenizer = HFTokenizer(hf_tok, f"hf:{model_name}")
        self._hf_tok = hf_tok
        self.dim = int(self._model.config.hidden_size)
        self.backend_id = f"hf:{model_name}"

    def encode(self, tokens: Sequence[str]) -> np.ndarray:  # pragma: no cover - needs weights
        ids = self._hf_tok.convert_tokens_to_ids(list(tokens))
        with self._torch.no_grad():
            out = self._model(input_ids=self._torch.tensor([ids])).last_hidden_state[0]
        return out.double().numpy()


class SentenceTransformerEmbedder:
    deterministic = True

    def __init__(self, model_name: str = "multi-qa-mpnet-base-cos-v1"):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise BackendError(f"sentence-transformers is required for {model_name}: {exc}") from exc
        self._model = SentenceTransformer(model_name)
        self.dim = int(self._model.get_sentence_embedding_dimension())
        self.embedder_id = f"st:{model_name}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:  # pragma: no cover - needs weights
        return np.asarray(self._model.encode(list(texts), convert_to_numpy=True), dtype=np.float64)


def make_encoder(backend_id: str) -> TokenEncoderBackend:
    """Resolve ``hash-<dim>`` or ``hf:<model>`` to a token encoder."""
    if backend_id.startswith("hash-"):
        try:
            return HashTokenEncoder(int(backend_id.split("-", 1)[1]))
        except ValueError as exc:
            raise BackendError(f"bad encoder id {backend_id!r}") from exc
    if backend_id.startswith("hf:"):
        return TransformerTokenEncoder(backend_id[3:])
    raise BackendError(f"unknown encoder backend {backend_id!r}")


def make_embedder(embedder_id: str) -> SemanticEmbedder:
    """Resolve ``hash-emb-<dim>`` or ``st:<model>`` to a semantic embedder."""
    if embedder_id.startswith("hash-emb-"):
        try:
            return HashEmbedder(int(embedder_id.rsplit("-", 1)[1]))
        except ValueError as exc:
            raise BackendError(f"bad embedder id {embedder_id!r}") from exc
    if embedder_id.startswith("st:"):
        return SentenceTransformerEmbedder(embedder_id[3:])
    raise BackendError(f"unknown embedder {embedder_id!r}")
