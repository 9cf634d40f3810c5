"""Character n-gram CNN word encoder with positional encoding and attention.

A word is mapped to a vector r = [r_2, r_3, r_4, r_5, r_6]: for each n-gram
order, character embeddings are convolved with width-n filters, a trainable
positional table is added row-wise, and a softmax attention over positions
pools the feature map into one vector per order.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import (Parameter, PreconditionError, Rng, ShapeError, Tensor,
                       tensor)

PAD = 0
UNK = 1

DEFAULT_NGRAM_ORDERS = (2, 3, 4, 5, 6)


class CharVocab:
    """Codepoint -> index map with reserved PAD=0 and UNK=1 slots."""

    def __init__(self, chars=()):
        self._index: dict[str, int] = {}
        for ch in chars:
            self.add(ch)

    def add(self, ch: str) -> int:
        if ch not in self._index:
            self._index[ch] = len(self._index) + 2
        return self._index[ch]

    def index(self, ch: str) -> int:
        return self._index.get(ch, UNK)

    def __len__(self):
        return len(self._index) + 2

    def __contains__(self, ch):
        return ch in self._index

    @classmethod
    def from_words(cls, words) -> "CharVocab":
        vocab = cls()
        for w in words:
            for ch in unicodedata.normalize("NFC", w):
                vocab.add(ch)
        return vocab

    def save(self, path):
        """One codepoint per line; line number = index - 2."""
        ordered = sorted(self._index, key=self._index.get)
        with open(path, "w", encoding="utf-8") as f:
            for ch in ordered:
                f.write(ch + "\n")

    @classmethod
    def load(cls, path) -> "CharVocab":
        with open(path, encoding="utf-8") as f:
            chars = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(chars)


@dataclass
class EncoderConfig:
    char_dim: int = 64
    filters_per_n: int = 64
    ngram_orders: tuple = DEFAULT_NGRAM_ORDERS
    max_word_len: int = 40
    positional: bool = True

    def __post_init__(self):
        if self.max_word_len < max(self.ngram_orders):
            raise ValueError("max_word_len must cover the largest n-gram order")

    @property
    def encoding_dim(self) -> int:
        return len(self.ngram_orders) * self.filters_per_n


@dataclass
class WordEncoding:
    """Pooled representation plus per-order attention weights (diagnostic)."""
    r: np.ndarray
    attention: dict[int, np.ndarray] = field(default_factory=dict)


def normalize_word(raw: str, vocab: CharVocab, config: EncoderConfig) -> list[int]:
    """NFC-normalize, map codepoints (unknown -> UNK), pad and truncate.

    Right-pads with PAD up to the largest n-gram order and truncates at
    max_word_len.
    """
    if not raw:
        raise PreconditionError("cannot encode an empty word")
    s = unicodedata.normalize("NFC", raw)
    idx = [vocab.index(ch) for ch in s][: config.max_word_len]
    min_len = max(config.ngram_orders)
    if len(idx) < min_len:
        idx = idx + [PAD] * (min_len - len(idx))
    return idx


def init_encoder_params(vocab_size: int, config: EncoderConfig, rng: Rng,
                        prefix: str = "encoder") -> dict[str, Parameter]:
    """Fresh encoder parameters, uniform +-1/sqrt(fan_in)."""
    d, f = config.char_dim, config.filters_per_n
    params: dict[str, Parameter] = {}

    def put(p: Parameter):
        params[p.name] = p

    put(nm.uniform_param(f"{prefix}/char_emb", (vocab_size, d), d, rng))
    for n in config.ngram_orders:
        put(nm.uniform_param(f"{prefix}/conv{n}/filters", (f, n, d), n * d, rng))
        put(nm.uniform_param(f"{prefix}/conv{n}/bias", (f,), n * d, rng))
        pos_rows = config.max_word_len - n + 1
        put(nm.uniform_param(f"{prefix}/pos{n}", (pos_rows, f), f, rng))
        put(nm.uniform_param(f"{prefix}/attn{n}/w", (f, 1), f, rng))
        put(nm.uniform_param(f"{prefix}/attn{n}/b", (1,), f, rng))
    return params


def encoder_param_names(config: EncoderConfig, prefix: str = "encoder") -> list[str]:
    names = [f"{prefix}/char_emb"]
    for n in config.ngram_orders:
        names += [f"{prefix}/conv{n}/filters", f"{prefix}/conv{n}/bias",
                  f"{prefix}/pos{n}", f"{prefix}/attn{n}/w", f"{prefix}/attn{n}/b"]
    return names


def ngram_features(seq, n: int, params: dict[str, Parameter],
                   prefix: str = "encoder") -> Tensor:
    """Embedding lookup + width-n convolution. ``seq`` is [T] or [B, T]."""
    idx = np.asarray(seq)
    if idx.shape[-1] < n:
        raise PreconditionError(f"sequence length {idx.shape[-1]} < n-gram order {n}")
    emb = nm.gather_rows(params[f"{prefix}/char_emb"].value, idx)
    return nm.conv1d(emb, params[f"{prefix}/conv{n}/filters"].value,
                     params[f"{prefix}/conv{n}/bias"].value)


def add_position(feature_map: Tensor, n: int, params: dict[str, Parameter],
                 prefix: str = "encoder") -> Tensor:
    """Add the trainable positional table row-wise to the feature map."""
    table = params[f"{prefix}/pos{n}"].value
    rows = feature_map.shape[-2]
    if rows > table.shape[0]:
        raise ShapeError(f"feature map has {rows} rows > positional table {table.shape[0]}")
    return feature_map + table[:rows]


def attend(feature_map: Tensor, n: int, params: dict[str, Parameter],
           prefix: str = "encoder") -> tuple[Tensor, Tensor]:
    """Softmax attention over positions; returns (pooled r, weights a).

    ``feature_map`` is [L, f] or [B, L, f]; scores are tanh(F w + b),
    normalized over positions, and r is the weighted sum of rows.
    """
    squeeze = feature_map.ndim == 2
    F = nm.reshape(feature_map, (1,) + feature_map.shape) if squeeze else feature_map
    w = params[f"{prefix}/attn{n}/w"].value
    b = params[f"{prefix}/attn{n}/b"].value
    scores = nm.tanh(nm.matmul(F, w) + b)        # [B, L, 1]
    a = nm.softmax(nm.reshape(scores, scores.shape[:2]), axis=1)  # [B, L]
    weighted = F * nm.reshape(a, (a.shape[0], a.shape[1], 1))
    r = nm.tsum(weighted, axis=1)                # [B, f]
    if squeeze:
        return nm.reshape(r, (r.shape[1],)), nm.reshape(a, (a.shape[1],))
    return r, a


def encode_batch(words: list[str], params: dict[str, Parameter],
                 vocab: CharVocab, config: EncoderConfig,
                 prefix: str = "encoder",
                 return_attention: bool = False):
    """Encode a batch of words to [B, encoding_dim].

    Every sequence is padded to max_word_len so an encoding never depends on
    which batch the word appeared in.
    """
    T = config.max_word_len
    idx = np.full((len(words), T), PAD, dtype=np.int64)
    for i, w in enumerate(words):
        seq = normalize_word(w, vocab, config)
        idx[i, :len(seq)] = seq
    parts = []
    attn: dict[int, np.ndarray] = {}
    for n in config.ngram_orders:
        fmap = ngram_features(idx, n, params, prefix)
        if config.positional:
            fmap = add_position(fmap, n, params, prefix)
        r_n, a_n = attend(fmap, n, params, prefix)
        parts.append(r_n)
        if return_attention:
            attn[n] = a_n.data
    r = nm.concat(parts, axis=1)
    if return_attention:
        return r, attn
    return r


def encode(word: str, params: dict[str, Parameter], vocab: CharVocab,
           config: EncoderConfig, prefix: str = "encoder") -> WordEncoding:
    """Encode a single word; returns plain arrays (no graph retained)."""
    r, attn = encode_batch([word], params, vocab, config, prefix,
                           return_attention=True)
    return WordEncoding(r=r.data[0].copy(),
                        attention={n: a[0].copy() for n, a in attn.items()})
