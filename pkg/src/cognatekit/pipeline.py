"""Cross-validated experiment wiring used by the CLI and the test suite.

A run takes a cognate dataset (and, for knowledge-transfer modes, a
morphology corpus or checkpoint), trains the requested detector variant per
fold, and scores held-out folds with the evaluation module. Unsupervised and
weakly-supervised folds never see pair labels during training; labels on the
train fold are used only to map cluster ids to classes before scoring.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import detector as det
from . import evaluation as ev
from . import morphology as morph
from .data import CognateDataset, stratified_kfold
from .detector import CandidatePair, DetectorConfig
from .encoder import CharVocab, EncoderConfig, init_encoder_params
from .morphology import MorphPair, MorphTrainConfig
from .numerics import Parameter, Rng, tensor

log = logging.getLogger(__name__)

MODES = ("supervised", "weakly", "unsupervised", "baseline")


@dataclass
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    morphology: MorphTrainConfig = field(default_factory=MorphTrainConfig)
    folds: int = 5


def build_vocab(dataset: CognateDataset | None,
                morph_pairs: list[MorphPair] | None) -> CharVocab:
    """Character vocabulary over every word the run can touch."""
    words: list[str] = []
    if dataset is not None:
        for p in dataset.pairs:
            words += [p.word1, p.word2]
    if morph_pairs:
        for m in morph_pairs:
            words += [m.word1, m.word2]
    return CharVocab.from_words(words)


def train_morph_encoder(morph_pairs: list[MorphPair], vocab: CharVocab,
                        config: ExperimentConfig, seed: int,
                        log_stream=None) -> dict[str, Parameter]:
    """Morphology-pretrained encoder parameters (head discarded)."""
    rng = Rng(seed)
    enc_params = init_encoder_params(len(vocab), config.encoder, rng)
    mcfg = replace(config.morphology, seed=seed)
    result = morph.train_morphology(morph_pairs, enc_params, vocab,
                                    config.encoder, mcfg, log_stream=log_stream)
    return result.params


def _clone_params(params: dict[str, Parameter]) -> dict[str, Parameter]:
    return {k: Parameter(k, tensor(p.value.data.copy(), requires_grad=p.trainable),
                         p.trainable) for k, p in params.items()}


def run_fold(dataset: CognateDataset, train_idx, test_idx, mode: str,
             vocab: CharVocab, config: ExperimentConfig, seed: int,
             init_encoder: dict[str, Parameter] | None = None) -> ev.ConfusionCounts:
    """Train one detector variant on the train split, score the test split."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    train_pairs = [dataset.pairs[i] for i in train_idx]
    test_pairs = [dataset.pairs[i] for i in test_idx]
    train_labels = np.array([p.label for p in train_pairs])
    test_labels = np.array([p.label for p in test_pairs])

    if mode == "baseline":
        threshold = ev.fit_threshold(train_pairs, train_labels)
        preds = ev.orthographic_baseline(test_pairs, threshold)
        return ev.ConfusionCounts.from_predictions(preds, test_labels)

    rng = Rng(seed)
    dcfg = replace(config.detector, seed=seed)
    if init_encoder is not None:
        params = _clone_params(init_encoder)
    else:
        params = init_encoder_params(len(vocab), config.encoder, rng)
    params.update(det.init_detector_params(config.encoder, dcfg, rng))

    if mode == "supervised":
        det.train_supervised(train_pairs, params, vocab, config.encoder, dcfg)
        preds, _ = det.predict(test_pairs, params, vocab, config.encoder, dcfg,
                               mode="supervised")
        return ev.ConfusionCounts.from_predictions(preds, test_labels)

    # unsupervised / weakly: strip labels before anything trains
    unlabeled = [(p.word1, p.word2) for p in train_pairs]
    pre = det.pretrain_unsupervised(unlabeled, params, vocab, config.encoder, dcfg)
    centers = det.init_centroids(pre.z, det.N_CLASSES, seed=seed,
                                 batch_size=dcfg.kmeans_batch,
                                 epochs=dcfg.kmeans_epochs)
    params["detector/centroids"].value.data[...] = centers
    st = det.self_train(unlabeled, params, vocab, config.encoder, dcfg)
    mapping = ev.map_clusters(st.hard, train_labels)
    cluster_ids, _ = det.predict(test_pairs, params, vocab, config.encoder, dcfg,
                                 mode="unsupervised")
    preds = ev.apply_mapping(cluster_ids, mapping)
    return ev.ConfusionCounts.from_predictions(preds, test_labels)


def run_experiment(dataset: CognateDataset, mode: str, config: ExperimentConfig,
                   seed: int, vocab: CharVocab | None = None,
                   morph_pairs: list[MorphPair] | None = None,
                   init_encoder: dict[str, Parameter] | None = None,
                   eval_folds: list[int] | None = None,
                   with_knowledge: bool = False) -> ev.EvalReport:
    """Stratified k-fold evaluation of one mode under one seed.

    ``with_knowledge`` (supervised) and mode "weakly" require either a
    pretrained ``init_encoder`` or ``morph_pairs`` to train one here.
    ``eval_folds`` restricts scoring to a subset of folds (default: all).
    """
    if vocab is None:
        vocab = build_vocab(dataset, morph_pairs)
    needs_knowledge = mode == "weakly" or (mode == "supervised" and with_knowledge)
    if needs_knowledge and init_encoder is None:
        if not morph_pairs:
            raise ValueError(f"mode {mode!r} with knowledge requires morphology input")
        init_encoder = train_morph_encoder(morph_pairs, vocab, config, seed)
    if not needs_knowledge:
        init_encoder = None

    plan = stratified_kfold(dataset.labels, config.folds, seed)
    tag = mode + ("_withknowledge" if mode == "supervised" and with_knowledge else "")
    report = ev.EvalReport(mode=tag, seed=seed)
    for fold in (eval_folds if eval_folds is not None else range(config.folds)):
        train_idx, test_idx = plan.split(fold)
        counts = run_fold(dataset, train_idx, test_idx, mode, vocab, config,
                          seed=seed * 1000 + fold, init_encoder=init_encoder)
        report.add_fold(fold, counts)
    return report
