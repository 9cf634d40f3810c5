"""Corpus construction: cognate TSV loading, shuffled negatives, stratified
folds, synthetic sound-shift corpora, and morphology resampling.

All generators are pure functions of (inputs, seed) and reproduce
byte-identically.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .detector import CandidatePair
from .morphology import MorphPair
from .numerics import PreconditionError, Rng

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    """Input data file is malformed or inconsistent with its manifest."""


@dataclass
class CognateDataset:
    pairs: list[CandidatePair]
    language_pair: tuple[str, str] = ("A", "B")
    source: str = "real"

    def __post_init__(self):
        keys = [(p.word1, p.word2) for p in self.pairs]
        if len(set(keys)) != len(keys):
            raise DataError("duplicate (word1, word2) pairs in dataset")

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.pairs])

    def counts(self) -> dict[str, int]:
        labs = [p.label for p in self.pairs]
        return {"cognates": sum(1 for l in labs if l == 1),
                "non_cognates": sum(1 for l in labs if l == 0)}

    def manifest(self) -> dict:
        return {"language_pair": list(self.language_pair), "source": self.source,
                **self.counts()}


@dataclass
class FoldPlan:
    k: int
    folds: list[list[int]]
    seed: int

    def split(self, fold: int) -> tuple[list[int], list[int]]:
        """(train indices, test indices) for one fold."""
        test = self.folds[fold]
        train = [i for f in range(self.k) if f != fold for i in self.folds[f]]
        return train, test


def build_negatives(cognates: list[CandidatePair], ratio: float,
                    rng: Rng) -> list[CandidatePair]:
    """Non-cognates by shuffling word1/word2 across different cognate pairs.

    ``ratio`` is negatives per positive. A generated pair never coincides
    with a known cognate and never repeats. When the target count cannot be
    reached without duplicates the result is best-effort with a warning.
    """
    if len(cognates) < 2:
        raise PreconditionError("need at least 2 cognate pairs to shuffle negatives")
    target = int(round(len(cognates) * ratio))
    positives = {(p.word1, p.word2) for p in cognates}
    seen: set[tuple[str, str]] = set()
    negatives: list[CandidatePair] = []
    n = len(cognates)
    attempts = 0
    max_attempts = max(50 * target, 1000)
    while len(negatives) < target and attempts < max_attempts:
        attempts += 1
        i = int(rng.integers(0, n))
        j = int(rng.integers(0, n))
        if i == j:
            continue
        cand = (cognates[i].word1, cognates[j].word2)
        if cand in positives or cand in seen:
            continue
        seen.add(cand)
        negatives.append(CandidatePair(cand[0], cand[1], label=0))
    if len(negatives) < target:
        warnings.warn(f"only {len(negatives)}/{target} negatives without duplicates")
    return negatives


def stratified_kfold(labels, k: int, seed: int) -> FoldPlan:
    """Shuffle within each class, deal round-robin; per-fold class counts
    differ from the stratified ideal by at most 1."""
    labels = np.asarray(labels)
    rng = Rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < k:
            raise PreconditionError(
                f"class {cls} has {len(idx)} members, fewer than k={k}")
        idx = idx[rng.permutation(len(idx))]
        for pos, i in enumerate(idx):
            folds[pos % k].append(int(i))
    for f in folds:
        f.sort()
    return FoldPlan(k=k, folds=folds, seed=seed)


@dataclass
class SyntheticSpec:
    """Desk-scale sound-shift corpus specification."""
    lexicon_size: int = 120
    word_len: tuple[int, int] = (5, 10)
    shift_map: dict[str, str] = field(default_factory=dict)
    edit_budget: int = 1
    cognate_ratio: float = 0.4      # fraction of the dataset that is cognate
    alphabet: str = "abcdefghij"
    suffixes: tuple[str, ...] = ("a", "en", "ite", "os")
    scramble: bool = False          # reorder partner characters after the shift
    suffix_partner: bool = False    # partner additionally takes a random suffix

    def __post_init__(self):
        if self.edit_budget < 0:
            raise ValueError("edit budget must be nonnegative")
        for src, dst in self.shift_map.items():
            if src not in self.alphabet:
                raise ValueError(f"shift map source {src!r} outside alphabet")


def disjoint_cipher_spec(**overrides) -> SyntheticSpec:
    """Spec whose shift map sends every character to a disjoint alphabet,
    removing all surface overlap between a word and its cognate partner."""
    src = "abcdefghij"
    dst = "klmnopqrst"
    spec = SyntheticSpec(alphabet=src,
                         shift_map={s: d for s, d in zip(src, dst)})
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


def _apply_shift(word: str, shift: dict[str, str]) -> str:
    return "".join(shift.get(ch, ch) for ch in word)


def _random_edits(word: str, budget: int, alphabet: str, rng: Rng) -> str:
    chars = list(word)
    n_edits = int(rng.integers(0, budget + 1)) if budget else 0
    for _ in range(n_edits):
        if not chars:
            break
        op = int(rng.integers(0, 3))
        pos = int(rng.integers(0, len(chars)))
        if op == 0:                                    # substitute
            chars[pos] = str(rng.choice(list(alphabet)))
        elif op == 1 and len(chars) > 2:               # delete
            del chars[pos]
        else:                                          # insert
            chars.insert(pos, str(rng.choice(list(alphabet))))
    return "".join(chars)


def gen_synthetic(spec: SyntheticSpec, rng: Rng) -> tuple[CognateDataset, list[MorphPair]]:
    """Random lexicon + sound-shifted cognates + shuffled negatives, plus a
    suffixation morphology corpus for the source language."""
    lo, hi = spec.word_len
    lexicon: list[str] = []
    seen = set()
    while len(lexicon) < spec.lexicon_size:
        length = int(rng.integers(lo, hi + 1))
        w = "".join(str(rng.choice(list(spec.alphabet))) for _ in range(length))
        if w not in seen:
            seen.add(w)
            lexicon.append(w)
    shifted_alphabet = spec.alphabet + "".join(sorted(set(spec.shift_map.values())))
    cognates = []
    partner_used = set()
    for w in lexicon:
        partner = _apply_shift(w, spec.shift_map)
        if spec.scramble:
            chars = list(partner)
            rng.shuffle(chars)
            partner = "".join(chars)
        if spec.suffix_partner and spec.suffixes:
            partner = partner + str(rng.choice(list(spec.suffixes)))
        partner = _random_edits(partner, spec.edit_budget, shifted_alphabet, rng)
        if not partner or (w, partner) in partner_used:
            partner = _apply_shift(w, spec.shift_map)
        partner_used.add((w, partner))
        cognates.append(CandidatePair(w, partner, label=1))
    neg_ratio = (1.0 - spec.cognate_ratio) / spec.cognate_ratio
    negatives = build_negatives(cognates, neg_ratio, rng)
    dataset = CognateDataset(pairs=cognates + negatives,
                             language_pair=("synthA", "synthB"), source="synthetic")
    morph_pairs = []
    morph_seen = set()
    for w in lexicon:
        for suf in spec.suffixes:
            key = (w, w + suf)
            if key not in morph_seen:
                morph_seen.add(key)
                morph_pairs.append(MorphPair(w, w + suf, "synthA"))
    return dataset, morph_pairs


def load_cognates(path, language_pair=("A", "B"), manifest_path=None) -> CognateDataset:
    """Read word1<TAB>word2<TAB>label TSV; malformed rows skipped and counted."""
    pairs: list[CandidatePair] = []
    skipped = 0
    seen = set()
    try:
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                cols = line.split("\t")
                if len(cols) < 3 or not cols[0].strip() or not cols[1].strip() \
                        or cols[2].strip() not in ("0", "1"):
                    skipped += 1
                    continue
                key = (cols[0].strip(), cols[1].strip())
                if key in seen:
                    skipped += 1
                    continue
                seen.add(key)
                pairs.append(CandidatePair(key[0], key[1], label=int(cols[2])))
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not valid UTF-8: {e}") from e
    if skipped:
        log.warning("%s: skipped %d malformed/duplicate rows", path, skipped)
    if not pairs:
        warnings.warn(f"{path}: empty cognate dataset")
    ds = CognateDataset(pairs=pairs, language_pair=tuple(language_pair), source="real")
    if manifest_path is not None:
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
        got = ds.counts()
        for key in ("cognates", "non_cognates"):
            if key in manifest and manifest[key] != got[key]:
                raise DataError(
                    f"{path}: manifest expects {manifest[key]} {key}, found {got[key]}")
    return ds


def save_cognates(dataset: CognateDataset, path):
    with open(path, "w", encoding="utf-8") as f:
        for p in dataset.pairs:
            f.write(f"{p.word1}\t{p.word2}\t{p.label}\n")


def load_unimorph(path, language: str = ""):
    """UniMorph TSV from disk; see morphology.pairs_from_unimorph."""
    from .morphology import pairs_from_unimorph
    try:
        with open(path, encoding="utf-8") as f:
            return pairs_from_unimorph(f, language)
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not valid UTF-8: {e}") from e
    except OSError as e:
        raise DataError(f"{path}: {e}") from e


def morph_resample(pairs: list[MorphPair], factor: float, rng: Rng) -> list[MorphPair]:
    """Down-/up-sample the morphology corpus by ``factor`` in [-0.3, 0.3].

    Negative factors drop pairs uniformly without replacement; positive
    factors append pairs sampled with replacement, keeping all originals.
    """
    if not -0.3 - 1e-9 <= factor <= 0.3 + 1e-9:
        raise PreconditionError("resample factor must lie in [-0.30, +0.30]")
    n = len(pairs)
    if factor == 0 or n == 0:
        return list(pairs)
    if factor < 0:
        keep = int(round(n * (1 + factor)))
        idx = sorted(rng.permutation(n)[:keep].tolist())
        return [pairs[i] for i in idx]
    extra = int(round(n * factor))
    idx = rng.integers(0, n, size=extra)
    return list(pairs) + [pairs[int(i)] for i in idx]
