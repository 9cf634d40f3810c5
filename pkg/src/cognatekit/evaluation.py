"""Scoring: binary P/R/F, cluster-to-label mapping, the orthographic
similarity baseline, and Welch's t-test for run comparisons."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

SIGNIFICANCE_ALPHA = 0.01


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_predictions(cls, predicted, actual) -> "ConfusionCounts":
        predicted = np.asarray(predicted)
        actual = np.asarray(actual)
        if predicted.shape != actual.shape:
            raise ValueError("prediction/label length mismatch")
        return cls(tp=int(((predicted == 1) & (actual == 1)).sum()),
                   fp=int(((predicted == 1) & (actual == 0)).sum()),
                   fn=int(((predicted == 0) & (actual == 1)).sum()),
                   tn=int(((predicted == 0) & (actual == 0)).sum()))


def f_score(counts: ConfusionCounts) -> tuple[float, float, float]:
    """(precision, recall, F1) on the cognate class; 0/0 counts as 0."""
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class EvalReport:
    mode: str
    per_fold: list[dict] = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""

    def add_fold(self, fold: int, counts: ConfusionCounts):
        p, r, f = f_score(counts)
        self.per_fold.append({"fold": fold, "precision": p, "recall": r, "f": f,
                              "tp": counts.tp, "fp": counts.fp,
                              "fn": counts.fn, "tn": counts.tn})

    @property
    def mean_f(self) -> float:
        return float(np.mean([d["f"] for d in self.per_fold])) if self.per_fold else 0.0

    @property
    def fold_fs(self) -> list[float]:
        return [d["f"] for d in self.per_fold]

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "seed": self.seed,
                           "config_hash": self.config_hash,
                           "per_fold": self.per_fold, "mean_f": self.mean_f},
                          indent=2)


def map_clusters(cluster_ids, labels) -> dict[int, int]:
    """Best of the two id->label bijections on a mapping split.

    Ties break to the identity mapping; a split where one cluster is absent
    maps the present cluster to the majority label (with a warning).
    """
    cluster_ids = np.asarray(cluster_ids)
    labels = np.asarray(labels)
    present = set(cluster_ids.tolist())
    if len(present) < 2:
        warnings.warn("only one cluster present on the mapping split")
        majority = int(np.bincount(labels, minlength=2).argmax())
        only = present.pop() if present else 0
        return {only: majority, 1 - only: 1 - majority}
    identity = float(np.mean(cluster_ids == labels))
    swapped = float(np.mean((1 - cluster_ids) == labels))
    if identity >= swapped:
        return {0: 0, 1: 1}
    return {0: 1, 1: 0}


def apply_mapping(cluster_ids, mapping: dict[int, int]) -> np.ndarray:
    return np.array([mapping[int(c)] for c in np.asarray(cluster_ids)])


def levenshtein(s: str, t: str) -> int:
    """Unit-cost edit distance, two-row dynamic program."""
    if s == t:
        return 0
    if not s:
        return len(t)
    if not t:
        return len(s)
    prev = list(range(len(t) + 1))
    for i, cs in enumerate(s):
        cur = [i + 1]
        for j, ct in enumerate(t):
            cur.append(min(cur[j] + 1, prev[j + 1] + 1, prev[j] + (cs != ct)))
        prev = cur
    return prev[-1]


def orthographic_similarity(w1: str, w2: str) -> float:
    """1 - editdist/max(len); symmetric, in [0, 1]."""
    m = max(len(w1), len(w2))
    if m == 0:
        return 1.0
    return 1.0 - levenshtein(w1, w2) / m


def fit_threshold(pairs, labels) -> float:
    """Similarity cutoff maximizing F on the given split (lowest such cutoff)."""
    sims = np.array([orthographic_similarity(p.word1, p.word2) for p in pairs])
    labels = np.asarray(labels)
    best_f, best_t = -1.0, 0.0
    for t in sorted(set(sims.tolist()) | {0.0, 1.0}):
        counts = ConfusionCounts.from_predictions((sims >= t).astype(int), labels)
        _, _, f = f_score(counts)
        if f > best_f:
            best_f, best_t = f, t
    return best_t


def orthographic_baseline(pairs, threshold: float) -> np.ndarray:
    """Predict cognate iff orthographic similarity >= threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    sims = np.array([orthographic_similarity(p.word1, p.word2) for p in pairs])
    return (sims >= threshold).astype(int)


@dataclass
class SignificanceResult:
    t: float
    p: float
    significant: bool


def significance(runs_a, runs_b, alpha: float = SIGNIFICANCE_ALPHA) -> SignificanceResult:
    """Two-sample Welch t-test (two-sided) between two score collections."""
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two samples per side")
    if a.var(ddof=1) == 0.0 and b.var(ddof=1) == 0.0:
        if a.mean() == b.mean():
            return SignificanceResult(t=0.0, p=1.0, significant=False)
        return SignificanceResult(t=float("inf") if a.mean() > b.mean() else float("-inf"),
                                  p=0.0, significant=True)
    t, p = stats.ttest_ind(a, b, equal_var=False)
    return SignificanceResult(t=float(t), p=float(p), significant=bool(p < alpha))


def format_table(rows: dict[str, dict[str, float]], columns: list[str]) -> str:
    """Plain-text results table: method rows, language-pair columns."""
    width = max([len(r) for r in rows] + [10])
    header = "Approach".ljust(width) + "".join(c.rjust(8) for c in columns)
    lines = [header, "-" * len(header)]
    for name, vals in rows.items():
        cells = "".join(
            (f"{vals[c]:.2f}" if c in vals else "-").rjust(8) for c in columns)
        lines.append(name.ljust(width) + cells)
    return "\n".join(lines)
