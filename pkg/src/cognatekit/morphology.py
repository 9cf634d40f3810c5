"""Siamese morphology pretraining of the shared word encoder.

Monolingual (lemma, inflection) pairs are encoded by one shared encoder,
projected by a fully connected head, and trained to minimize the mean
squared distance between the two projections. The trained encoder weights
are what transfers to the cognate detector; the projection head is
discarded by default.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .encoder import CharVocab, EncoderConfig, encode_batch, encoder_param_names
from .numerics import (NumericError, Parameter, PreconditionError, Rng,
                       load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

COLLAPSE_WARN_THRESHOLD = 0.99


@dataclass(frozen=True)
class MorphPair:
    word1: str
    word2: str
    language: str = ""

    def __post_init__(self):
        if not self.word1 or not self.word2:
            raise ValueError("morphology pair words must be non-empty")


@dataclass
class ParseReport:
    kept: int = 0
    skipped: int = 0
    deduplicated: int = 0


def pairs_from_unimorph(stream, language: str = "") -> tuple[list[MorphPair], ParseReport]:
    """Parse lemma<TAB>inflected[<TAB>features] lines into (lemma, inflected) pairs.

    The feature column, when present, is ignored. Blank or malformed lines
    are skipped and counted; exact duplicate pairs are removed and counted.
    """
    pairs: list[MorphPair] = []
    seen: set[tuple[str, str]] = set()
    report = ParseReport()
    for line in stream:
        line = line.rstrip("\n")
        if not line.strip():
            report.skipped += 1
            continue
        cols = line.split("\t")
        if len(cols) < 2 or not cols[0].strip() or not cols[1].strip():
            report.skipped += 1
            continue
        key = (cols[0].strip(), cols[1].strip())
        if key in seen:
            report.deduplicated += 1
            continue
        seen.add(key)
        pairs.append(MorphPair(key[0], key[1], language))
        report.kept += 1
    return pairs, report


@dataclass
class MorphTrainConfig:
    lr: float = 2e-3
    epochs: int = 20
    batch_size: int = 32
    decay: float = 0.95
    proj_dim: int = 128
    weight_decay: float = 1e-5
    holdout_frac: float = 0.1
    seed: int = 0
    keep_head: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class MorphTrainResult:
    params: dict[str, Parameter]
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def init_morph_head(enc_config: EncoderConfig, proj_dim: int, rng: Rng) -> dict[str, Parameter]:
    dim = enc_config.encoding_dim
    return {
        p.name: p for p in (
            nm.uniform_param("morph/proj/W", (dim, proj_dim), dim, rng),
            nm.uniform_param("morph/proj/b", (proj_dim,), dim, rng),
        )
    }


def _project(r, params):
    return nm.matmul(r, params["morph/proj/W"].value) + params["morph/proj/b"].value


def morph_loss(batch: list[MorphPair], params: dict[str, Parameter],
               vocab: CharVocab, enc_config: EncoderConfig):
    """MSE between the two projected branch encodings."""
    z_l = _project(encode_batch([p.word1 for p in batch], params, vocab, enc_config), params)
    z_r = _project(encode_batch([p.word2 for p in batch], params, vocab, enc_config), params)
    return nm.mse(z_l, z_r)


def collapse_metric(params, vocab, enc_config, rng: Rng, n_words: int = 100) -> float:
    """Mean pairwise cosine of random word encodings; near 1 means collapse."""
    chars = [ch for ch in vocab._index]
    if not chars:
        return 0.0
    words = []
    for _ in range(n_words):
        length = int(rng.integers(3, max(4, enc_config.max_word_len // 2)))
        words.append("".join(rng.choice(chars) for _ in range(length)))
    r = encode_batch(words, params, vocab, enc_config).data
    norms = np.linalg.norm(r, axis=1, keepdims=True)
    unit = r / np.maximum(norms, 1e-12)
    sims = unit @ unit.T
    n = len(words)
    return float((sims.sum() - n) / (n * (n - 1)))


def _copy_values(params: dict[str, Parameter]) -> dict[str, np.ndarray]:
    return {k: p.value.data.copy() for k, p in params.items()}


def _restore_values(params: dict[str, Parameter], snap: dict[str, np.ndarray]):
    for k, arr in snap.items():
        params[k].value.data[...] = arr


def train_morphology(pairs: list[MorphPair], encoder_params: dict[str, Parameter],
                     vocab: CharVocab, enc_config: EncoderConfig,
                     config: MorphTrainConfig,
                     log_stream=None) -> MorphTrainResult:
    """Train encoder + FC head on morphology pairs with early stopping.

    Returns the parameter set restored to the best held-out epoch, plus a
    per-epoch history (loss, holdout loss, collapse metric).
    """
    if not pairs:
        raise PreconditionError("no morphology pairs to train on")
    for name in encoder_params:
        if not name.startswith("encoder/"):
            raise ValueError(f"non-encoder parameter {name!r} passed to morphology trainer")
    rng = Rng(config.seed)
    params = dict(encoder_params)
    params.update(init_morph_head(enc_config, config.proj_dim, rng))

    order = rng.permutation(len(pairs))
    n_hold = int(len(pairs) * config.holdout_frac)
    hold = [pairs[i] for i in order[:n_hold]]
    train = [pairs[i] for i in order[n_hold:]] or list(pairs)

    history: list[dict] = []
    best = (np.inf, 0, _copy_values(params))
    for epoch in range(config.epochs):
        idx = rng.permutation(len(train))
        losses = []
        for s in range(0, len(train), config.batch_size):
            batch = [train[i] for i in idx[s:s + config.batch_size]]
            try:
                loss = morph_loss(batch, params, vocab, enc_config)
            except NumericError as e:
                raise NumericError(f"morphology training diverged at epoch {epoch}: {e}") from e
            loss.backward()
            nm.sgd_step(params, config.lr, epoch=epoch, decay=config.decay,
                        weight_decay=config.weight_decay)
            losses.append(loss.item())
        hold_loss = (morph_loss(hold, params, vocab, enc_config).item()
                     if hold else float(np.mean(losses)))
        collapse = collapse_metric(params, vocab, enc_config, rng.spawn(epoch))
        if collapse > COLLAPSE_WARN_THRESHOLD:
            warnings.warn(f"encoder collapse metric {collapse:.4f} at epoch {epoch}")
        rec = {"epoch": epoch, "loss": float(np.mean(losses)),
               "holdout_loss": hold_loss, "collapse": collapse}
        history.append(rec)
        if log_stream is not None:
            log_stream.write(json.dumps(rec) + "\n")
        if hold_loss < best[0]:
            best = (hold_loss, epoch, _copy_values(params))
    _restore_values(params, best[2])
    if not config.keep_head:
        params = {k: v for k, v in params.items() if k.startswith("encoder/")}
    return MorphTrainResult(params=params, history=history, best_epoch=best[1])


def export_encoder(params: dict[str, Parameter], path, include_head: bool = False):
    """Write encoder (optionally + head) weights as a WSCD1 checkpoint."""
    arrays = {}
    for name, p in params.items():
        if name.startswith("encoder/") or (include_head and name.startswith("morph/")):
            arrays[name] = p.value.data
    save_checkpoint(path, arrays)


def import_encoder(path, enc_config: EncoderConfig,
                   trainable: bool = True) -> dict[str, Parameter]:
    """Load encoder weights; shapes are validated against the config."""
    arrays = load_checkpoint(path)
    expected = set(encoder_param_names(enc_config))
    have = {n for n in arrays if n.startswith("encoder/")}
    missing = expected - have
    if missing:
        raise nm.CheckpointError(f"checkpoint missing encoder parameters: {sorted(missing)}")
    params: dict[str, Parameter] = {}
    f, d = enc_config.filters_per_n, enc_config.char_dim
    for n in enc_config.ngram_orders:
        shape = arrays[f"encoder/conv{n}/filters"].shape
        if shape != (f, n, d):
            raise nm.CheckpointError(
                f"checkpoint conv{n} filters {shape} incompatible with config {(f, n, d)}")
        pos = arrays[f"encoder/pos{n}"].shape
        if pos != (enc_config.max_word_len - n + 1, f):
            raise nm.CheckpointError(f"checkpoint pos{n} table {pos} incompatible with config")
    for name, arr in arrays.items():
        params[name] = Parameter(name, nm.tensor(arr, requires_grad=trainable), trainable)
    return params
