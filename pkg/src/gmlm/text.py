"""Text branch: tokenizer, compact transformer encoder, pooled node embeddings."""
from __future__ import annotations

import csv
import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, ValidationError
from .nn import LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Tensor, parameter

PAD, UNK, CLS = 0, 1, 2
_SPECIALS = ("[PAD]", "[UNK]", "[CLS]")
_WORD = re.compile(r"[^\W_]+", re.UNICODE)


def split_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: dict

    def __post_init__(self):
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValidationError("vocabulary ids must be dense in [0, V)")
        for i, tok in enumerate(_SPECIALS):
            if self.token_to_id.get(tok) != i:
                raise ValidationError(f"special token {tok} must have id {i}")

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def __len__(self):
        return self.size

    def lookup(self, word: str) -> int:
        return self.token_to_id.get(word, UNK)

    @classmethod
    def build(cls, texts, min_count: int = 1, max_size: int | None = None) -> Vocabulary:
        counts = Counter(w for t in texts for w in split_words(t))
        words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        if max_size is not None:
            words = words[: max(0, max_size - len(_SPECIALS))]
        mapping = {tok: i for i, tok in enumerate(_SPECIALS)}
        for w in words:
            mapping[w] = len(mapping)
        return cls(mapping)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.token_to_id))

    @classmethod
    def load(cls, path) -> Vocabulary:
        return cls({str(k): int(v) for k, v in json.loads(Path(path).read_text()).items()})


@dataclass(frozen=True)
class TokenBatch:
    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.ids.shape != self.mask.shape:
            raise ContractError("ids and attention mask shapes differ")
        if len(self.mask) and (self.mask.sum(axis=-1) < 1).any():
            raise ContractError("every sequence needs at least one real token")

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, idx) -> TokenBatch:
        return TokenBatch(self.ids[idx], self.mask[idx])


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Word-level ids padded to ``max_len``; text without words becomes ``[CLS]``."""
    if max_len < 2:
        raise ContractError("max_len must be at least 2")
    ids = [vocab.lookup(w) for w in split_words(text)][:max_len] or [CLS]
    row = np.full(max_len, PAD, dtype=np.int64)
    row[: len(ids)] = ids
    mask = np.zeros(max_len)
    mask[: len(ids)] = 1.0
    return row, mask


def tokenize_batch(texts, vocab: Vocabulary, max_len: int) -> TokenBatch:
    rows = [tokenize(t, vocab, max_len) for t in texts]
    if not rows:
        return TokenBatch(np.zeros((0, max_len), dtype=np.int64), np.zeros((0, max_len)))
    return TokenBatch(np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows]))


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    d_model: int = 128
    num_layers: int = 2
    heads: int = 2
    max_len: int = 32
    d_ff: int = 256


class TransformerBlock(Module):
    """Pre-norm block: self-attention then a GELU feed-forward, each residual."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(d, d_ff, rng)
        self.ff2 = Linear(d_ff, d, rng)

    def __call__(self, x: Tensor, pad_keys: np.ndarray) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, key_mask=pad_keys)
        return x + self.ff2(T.gelu(self.ff1(self.ln2(x))))


class TextEncoder(Module):
    def __init__(self, config: TextEncoderConfig, rng: np.random.Generator):
        self._config = config
        self.token_embedding = parameter(rng.normal(size=(config.vocab_size, config.d_model)))
        self.position_embedding = parameter(rng.normal(size=(config.max_len, config.d_model)))
        self.blocks = [
            TransformerBlock(config.d_model, config.heads, config.d_ff, rng)
            for _ in range(config.num_layers)
        ]

    @property
    def config(self) -> TextEncoderConfig:
        return self._config

    def __call__(self, batch: TokenBatch) -> Tensor:
        return encode_texts(batch, self)


def encode_texts(batch: TokenBatch, params: TextEncoder) -> Tensor:
    """Last hidden states ``B x L x d``; PAD keys are excluded from attention."""
    cfg = params.config
    ids = np.asarray(batch.ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ContractError(f"token ids must be B x L, got {ids.shape}")
    if ids.size and (ids.max() >= cfg.vocab_size or ids.min() < 0):
        raise ContractError(f"token id {int(ids.max())} outside vocabulary of size {cfg.vocab_size}")
    L = ids.shape[1]
    if L > cfg.max_len:
        raise ContractError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    x = params.token_embedding[ids] + params.position_embedding[:L]
    pad_keys = np.asarray(batch.mask) == 0
    for block in params.blocks:
        x = block(x, pad_keys)
    return x


def masked_mean_pool(O, a) -> Tensor:
    """``sum_j o_j a_j / sum_j a_j`` over the token axis (second to last)."""
    O = T.as_tensor(O)
    a = np.asarray(a, dtype=np.float64)
    denom = a.sum(axis=-1, keepdims=True)
    if (denom < 1).any():
        raise ContractError("attention mask has no real tokens")
    return T.tsum(O * a[..., None], axis=-2) / denom


def assemble_text_matrix(source, active, encoder: TextEncoder, vocab: Vocabulary | None = None,
                         micro_batch: int = 32) -> Tensor:
    """Pooled embeddings for active nodes; inactive rows are exact zeros.

    ``source`` is a :class:`TokenBatch` with one row per node, or anything
    with node texts (a graph or a list of strings) plus ``vocab``.
    """
    if isinstance(source, TokenBatch):
        tokens = source
    else:
        if vocab is None:
            raise ContractError("raw texts need a vocabulary")
        texts = getattr(source, "texts", source)
        tokens = tokenize_batch(texts, vocab, encoder.config.max_len)
    if micro_batch < 1:
        raise ContractError("micro_batch must be >= 1")
    active = np.asarray(active, dtype=bool)
    n = len(tokens)
    d = encoder.config.d_model
    idx = np.flatnonzero(active)
    if not len(idx):
        return Tensor(np.zeros((n, d)))
    pooled = []
    for start in range(0, len(idx), micro_batch):
        chunk = tokens[idx[start:start + micro_batch]]
        pooled.append(masked_mean_pool(encode_texts(chunk, encoder), chunk.mask))
    rows = pooled[0] if len(pooled) == 1 else T.concat(pooled, axis=0)
    return T.index_add_rows(rows, idx, n)


def gate_rows(matrix, active) -> Tensor:
    """Zero the rows of inactive nodes in a precomputed embedding matrix."""
    active = np.asarray(active, dtype=bool)
    return T.masked_fill(matrix, ~active[:, None], 0.0)


def save_embeddings(matrix: np.ndarray, path) -> None:
    path = Path(path)
    matrix = np.asarray(matrix, dtype=np.float64)
    if path.suffix == ".csv":
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in matrix])
    else:
        path.write_text(json.dumps(matrix.tolist()))


def load_precomputed_embeddings(path, num_nodes: int) -> np.ndarray:
    """Read an ``N x d`` matrix from CSV (one row per line) or a JSON array of rows."""
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    else:
        rows = json.loads(path.read_text())
    try:
        widths = {len(r) for r in rows}
        matrix = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: non-numeric embedding entry ({exc})") from None
    if len(widths) > 1:
        raise ValidationError(f"{path}: rows have unequal widths {sorted(widths)}")
    if len(rows) != num_nodes:
        raise ValidationError(f"{path}: {len(rows)} embedding rows for {num_nodes} nodes")
    return matrix.reshape(num_nodes, -1)
