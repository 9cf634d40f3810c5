"""Siamese cognate detector: supervised, unsupervised, and weakly-supervised.

A candidate pair is encoded by the shared word encoder, projected to u and v,
combined with their cosine similarity through a sense layer into z, and read
out either by a 2-class softmax head (supervised / clustering pretraining) or
by Student-t soft assignment against trainable centroids refined with
KL-divergence self-training. Weak supervision means only that the encoder is
initialized from a morphology checkpoint; labels are never read outside the
supervised path.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from sklearn.cluster import MiniBatchKMeans

from . import numerics as nm
from .encoder import CharVocab, EncoderConfig, encode_batch
from .numerics import (NumericError, Parameter, PreconditionError, Rng,
                       Tensor, tensor)

log = logging.getLogger(__name__)

N_CLASSES = 2


@dataclass(frozen=True)
class CandidatePair:
    """Cross-lingual word pair; label is present only on supervised/eval paths."""
    word1: str
    word2: str
    label: Optional[int] = None


@dataclass
class DetectorConfig:
    proj_dim: int = 128
    lr: float = 1e-2
    epochs: int = 10
    batch_size: int = 32
    decay: float = 0.95
    sense_tanh: bool = True
    update_interval: int = 1       # target refresh period, in epochs
    tol: float = 0.001             # assignment-change stop fraction
    max_self_epochs: int = 50
    kmeans_batch: int = 256
    kmeans_epochs: int = 20
    seed: int = 0


def init_detector_params(enc_config: EncoderConfig, config: DetectorConfig,
                         rng: Rng) -> dict[str, Parameter]:
    dim = enc_config.encoding_dim
    K = config.proj_dim
    sense_in = 2 * K + 1
    plist = [
        nm.uniform_param("detector/proj/W", (dim, K), dim, rng),
        nm.uniform_param("detector/proj/b", (K,), dim, rng),
        nm.uniform_param("detector/sense/W", (sense_in, K), sense_in, rng),
        nm.uniform_param("detector/sense/b", (K,), sense_in, rng),
        nm.uniform_param("detector/class/W", (K, N_CLASSES), K, rng),
        nm.uniform_param("detector/class/b", (N_CLASSES,), K, rng),
        nm.uniform_param("detector/centroids", (N_CLASSES, K), K, rng),
    ]
    return {p.name: p for p in plist}


@dataclass
class PairForward:
    u: Tensor
    v: Tensor
    cos: Tensor
    z: Tensor
    p: Tensor


def forward_pairs(words1: list[str], words2: list[str],
                  params: dict[str, Parameter], vocab: CharVocab,
                  enc_config: EncoderConfig, config: DetectorConfig) -> PairForward:
    """Full forward pass for a batch of candidate pairs."""
    r1 = encode_batch(words1, params, vocab, enc_config)
    r2 = encode_batch(words2, params, vocab, enc_config)
    Wp, bp = params["detector/proj/W"].value, params["detector/proj/b"].value
    u = nm.matmul(r1, Wp) + bp
    v = nm.matmul(r2, Wp) + bp
    cos = nm.cosine_rows(u, v)                       # [N, 1]
    joint = nm.concat([u, v, cos], axis=1)           # [N, 2K+1]
    z = nm.matmul(joint, params["detector/sense/W"].value) + params["detector/sense/b"].value
    if config.sense_tanh:
        z = nm.tanh(z)
    logits = nm.matmul(z, params["detector/class/W"].value) + params["detector/class/b"].value
    p = nm.softmax_rows(logits)
    return PairForward(u=u, v=v, cos=cos, z=z, p=p)


def forward_pair(pair: CandidatePair, params, vocab, enc_config, config) -> PairForward:
    return forward_pairs([pair.word1], [pair.word2], params, vocab, enc_config, config)


def loss_unsupervised(p: Tensor) -> Tensor:
    """Confidence-maximizing clustering loss with a collapse penalty.

    L = max_j[(1/N) sum_i p_ij^2] - (1/N) sum_i max_j p_ij: the first term
    penalizes piling all mass onto one class, the second rewards confident
    per-sample assignments. Minimized; subgradients at argmax ties.
    """
    if p.ndim != 2:
        raise nm.ShapeError("loss_unsupervised expects [N, K] probabilities")
    if p.shape[0] < 2:
        warnings.warn("single-row batch: collapse term of the unsupervised loss is degenerate")
    confidence = nm.tmean(nm.tmax(p, axis=1))
    mass = nm.tmax(nm.tmean(nm.square(p), axis=0), axis=0)
    return mass - confidence


def _strip_labels(pairs) -> tuple[list[str], list[str]]:
    w1, w2 = [], []
    for pr in pairs:
        if isinstance(pr, CandidatePair):
            w1.append(pr.word1)
            w2.append(pr.word2)
        else:
            w1.append(pr[0])
            w2.append(pr[1])
    return w1, w2


@dataclass
class PretrainResult:
    params: dict[str, Parameter]
    z: np.ndarray
    history: list[dict] = field(default_factory=list)


def pretrain_unsupervised(pairs, params: dict[str, Parameter], vocab: CharVocab,
                          enc_config: EncoderConfig, config: DetectorConfig,
                          log_stream=None) -> PretrainResult:
    """Minimize the unsupervised clustering loss; labels are never read."""
    if not pairs:
        raise PreconditionError("no pairs to pretrain on")
    words1, words2 = _strip_labels(pairs)
    rng = Rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        idx = rng.permutation(len(words1))
        losses = []
        for s in range(0, len(words1), config.batch_size):
            sel = idx[s:s + config.batch_size]
            if len(sel) < 2:
                continue
            fw = forward_pairs([words1[i] for i in sel], [words2[i] for i in sel],
                               params, vocab, enc_config, config)
            try:
                loss = loss_unsupervised(fw.p)
                loss.backward()
            except NumericError as e:
                raise NumericError(f"unsupervised pretraining diverged at epoch {epoch}: {e}") from e
            nm.sgd_step(params, config.lr, epoch=epoch, decay=config.decay)
            losses.append(loss.item())
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        history.append(rec)
        if log_stream is not None:
            log_stream.write(json.dumps(rec) + "\n")
    z = embed_pairs(pairs, params, vocab, enc_config, config)
    return PretrainResult(params=params, z=z, history=history)


def embed_pairs(pairs, params, vocab, enc_config, config,
                batch_size: int = 256) -> np.ndarray:
    """z vectors for all pairs, computed without keeping graphs around."""
    words1, words2 = _strip_labels(pairs)
    outs = []
    for s in range(0, len(words1), batch_size):
        fw = forward_pairs(words1[s:s + batch_size], words2[s:s + batch_size],
                           params, vocab, enc_config, config)
        outs.append(fw.z.data)
    return np.concatenate(outs, axis=0)


def init_centroids(z: np.ndarray, k: int, seed: int = 0,
                   batch_size: int = 256, epochs: int = 20) -> np.ndarray:
    """Minibatch k-means (k-means++ seeding) over the embedding matrix."""
    if len(z) < k:
        raise PreconditionError(f"need at least {k} points to place {k} centroids")
    km = MiniBatchKMeans(n_clusters=k, init="k-means++", n_init=3,
                         batch_size=min(batch_size, len(z)),
                         max_iter=epochs, random_state=seed)
    km.fit(np.asarray(z, dtype=np.float64))
    return km.cluster_centers_.astype(z.dtype, copy=True)


def soft_assign(z: Tensor, centroids: Tensor) -> Tensor:
    """Student-t (df=1) soft assignment q_ij of each z row to each centroid."""
    N, K = z.shape
    k = centroids.shape[0]
    diff = nm.reshape(z, (N, 1, K)) - nm.reshape(centroids, (1, k, K))
    d2 = nm.tsum(nm.square(diff), axis=2)                    # [N, k]
    one = tensor(np.ones((), dtype=z.data.dtype))
    sim = one / (one + d2)
    return sim / nm.tsum(sim, axis=1, keepdims=True)


def soft_assign_np(z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    sim = 1.0 / (1.0 + d2)
    return sim / sim.sum(axis=1, keepdims=True)


TARGET_EPS = 1e-10


def target_distribution(q: np.ndarray) -> np.ndarray:
    """Sharpened auxiliary targets: square q, normalize by cluster frequency."""
    f = q.sum(axis=0)
    empty = f <= 0
    if empty.any():
        warnings.warn("empty cluster in target distribution; epsilon-clamped")
        f = np.maximum(f, TARGET_EPS)
    w = (q ** 2) / f
    return w / w.sum(axis=1, keepdims=True)


@dataclass
class SelfTrainResult:
    params: dict[str, Parameter]
    hard: np.ndarray
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def dec_refine(embed_fn: Callable[[np.ndarray], Tensor],
               params: dict[str, Parameter], n_items: int,
               config: DetectorConfig, log_stream=None) -> SelfTrainResult:
    """Generic DEC loop: refresh targets, minimize KL(P||Q) by SGD.

    ``embed_fn(indices)`` must rebuild the z graph for those items from the
    current parameters. ``params`` must contain "detector/centroids". Stops
    when fewer than ``tol`` of hard assignments change between consecutive
    target refreshes, otherwise returns the best-KL state with a warning.
    """
    centroids = params["detector/centroids"].value
    rng = Rng(config.seed)
    all_idx = np.arange(n_items)

    def full_q() -> np.ndarray:
        zs = [embed_fn(all_idx[s:s + 256]).data for s in range(0, n_items, 256)]
        return soft_assign_np(np.concatenate(zs, axis=0), centroids.data)

    q = full_q()
    hard_prev = q.argmax(axis=1)
    history: list[dict] = []
    best_kl = np.inf
    best_state = None
    stopped = False
    for epoch in range(config.max_self_epochs):
        if epoch % config.update_interval == 0:
            q = full_q()
            hard = q.argmax(axis=1)
            change = float(np.mean(hard != hard_prev))
            p_target = target_distribution(q)
            kl_total = float(np.where(p_target > 0,
                                      p_target * np.log(p_target / np.maximum(q, TARGET_EPS)),
                                      0.0).sum())
            rec = {"epoch": epoch, "kl": kl_total, "assignment_change": change}
            history.append(rec)
            if log_stream is not None:
                log_stream.write(json.dumps(rec) + "\n")
            if kl_total < best_kl:
                best_kl = kl_total
                best_state = ({k: p.value.data.copy() for k, p in params.items()}, hard.copy())
            if epoch > 0 and change < config.tol:
                hard_prev = hard
                stopped = True
                break
            hard_prev = hard
        order = rng.permutation(n_items)
        for s in range(0, n_items, config.batch_size):
            sel = order[s:s + config.batch_size]
            z = embed_fn(sel)
            qb = soft_assign(z, centroids)
            pb = tensor(p_target[sel].astype(z.data.dtype))
            loss = nm.kl_div(pb, qb)
            loss.backward()
            nm.sgd_step(params, config.lr, epoch=epoch, decay=config.decay)
    if not stopped:
        warnings.warn("self-training hit the epoch cap; restoring best-KL state")
        if best_state is not None:
            snap, hard_prev = best_state
            for k, arr in snap.items():
                params[k].value.data[...] = arr
    return SelfTrainResult(params=params, hard=hard_prev, history=history,
                           stopped_early=stopped)


def self_train(pairs, params: dict[str, Parameter], vocab: CharVocab,
               enc_config: EncoderConfig, config: DetectorConfig,
               log_stream=None) -> SelfTrainResult:
    """DEC self-training over candidate pairs (labels never read)."""
    words1, words2 = _strip_labels(pairs)

    def embed_fn(indices: np.ndarray) -> Tensor:
        fw = forward_pairs([words1[i] for i in indices],
                           [words2[i] for i in indices],
                           params, vocab, enc_config, config)
        return fw.z

    return dec_refine(embed_fn, params, len(words1), config, log_stream)


def train_supervised(pairs: list[CandidatePair], params: dict[str, Parameter],
                     vocab: CharVocab, enc_config: EncoderConfig,
                     config: DetectorConfig, log_stream=None) -> list[dict]:
    """Cross-entropy training on labeled pairs."""
    if not pairs:
        raise PreconditionError("no labeled pairs to train on")
    labels = np.array([p.label for p in pairs])
    if None in set(labels.tolist()):
        raise PreconditionError("supervised training requires labels on every pair")
    if len(set(labels.tolist())) < 2:
        warnings.warn("supervised training data contains a single class")
    words1 = [p.word1 for p in pairs]
    words2 = [p.word2 for p in pairs]
    rng = Rng(config.seed)
    history = []
    eye = np.eye(N_CLASSES, dtype=np.float32)
    for epoch in range(config.epochs):
        idx = rng.permutation(len(pairs))
        losses = []
        for s in range(0, len(pairs), config.batch_size):
            sel = idx[s:s + config.batch_size]
            fw = forward_pairs([words1[i] for i in sel], [words2[i] for i in sel],
                               params, vocab, enc_config, config)
            onehot = tensor(eye[labels[sel]])
            logp = nm.log(fw.p + tensor(np.float32(1e-12)))
            loss = -nm.tmean(nm.tsum(logp * onehot, axis=1))
            try:
                loss.backward()
            except NumericError as e:
                raise NumericError(f"supervised training diverged at epoch {epoch}: {e}") from e
            nm.sgd_step(params, config.lr, epoch=epoch, decay=config.decay)
            losses.append(loss.item())
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        history.append(rec)
        if log_stream is not None:
            log_stream.write(json.dumps(rec) + "\n")
    return history


def predict(pairs, params: dict[str, Parameter], vocab: CharVocab,
            enc_config: EncoderConfig, config: DetectorConfig,
            mode: str = "supervised") -> tuple[np.ndarray, np.ndarray]:
    """Predicted labels (supervised) or raw cluster ids (unsupervised).

    Returns (ids, probabilities) where probabilities are the class softmax
    for supervised mode and the soft assignments q for unsupervised mode.
    """
    words1, words2 = _strip_labels(pairs)
    ids, probs = [], []
    for s in range(0, len(words1), 256):
        fw = forward_pairs(words1[s:s + 256], words2[s:s + 256],
                           params, vocab, enc_config, config)
        if mode == "supervised":
            pr = fw.p.data
        else:
            pr = soft_assign_np(fw.z.data, params["detector/centroids"].value.data)
        probs.append(pr)
        ids.append(pr.argmax(axis=1))
    return np.concatenate(ids), np.concatenate(probs, axis=0)
