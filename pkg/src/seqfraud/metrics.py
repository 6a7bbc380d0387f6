"""Binary classification metrics: AUC, KS, precision and coverage.

Fraud is the positive class (label 1); higher scores mean more suspicious.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy.stats import rankdata


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d and of equal length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("both classes must be present")
    return scores, labels


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outranks negative), ties count one half."""
    scores, labels = _check(scores, labels)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_sweep(scores, labels):
    """TPR and FPR of ``score >= t`` for every distinct ``t``, highest first.

    Returns ``(thresholds, fpr, tpr)``; index 0 is the empty selection at
    ``t = +inf``.
    """
    scores, labels = _check(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    thresholds = np.r_[np.inf, s[last]]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return thresholds, fpr, tpr


def ks(scores, labels) -> float:
    """Kolmogorov-Smirnov statistic: max over thresholds of |TPR - FPR|."""
    _, fpr, tpr = roc_sweep(scores, labels)
    return float(np.max(np.abs(tpr - fpr)))


def ks_threshold(scores, labels) -> float:
    """Smallest-selection threshold attaining the KS statistic."""
    thresholds, fpr, tpr = roc_sweep(scores, labels)
    i = int(np.argmax(np.abs(tpr - fpr)))
    return float(thresholds[max(i, 1)])


class PrecisionCoverage(NamedTuple):
    precision: float
    coverage: float
    degenerate: bool  # nothing flagged, precision reported as 0


def precision_coverage(scores, labels, threshold: float) -> PrecisionCoverage:
    scores, labels = _check(scores, labels)
    flagged = scores >= threshold
    tp = int(np.sum(flagged & (labels == 1)))
    n_flagged = int(flagged.sum())
    coverage = tp / int(labels.sum())
    if n_flagged == 0:
        return PrecisionCoverage(0.0, coverage, True)
    return PrecisionCoverage(tp / n_flagged, coverage, False)


@dataclass
class EvalReport:
    auc: float
    ks: float
    precision: float
    coverage: float
    threshold: float
    roc_points: list = field(default_factory=list)
    ks_points: list = field(default_factory=list)
    degenerate_precision: bool = False
    n: int = 0
    n_pos: int = 0

    def summary(self) -> dict:
        return {
            "auc": self.auc,
            "ks": self.ks,
            "precision": self.precision,
            "coverage": self.coverage,
            "threshold": self.threshold,
            "degenerate_precision": self.degenerate_precision,
            "n": self.n,
            "n_pos": self.n_pos,
        }

    def to_text(self) -> str:
        lines = [
            f"sessions   {self.n} ({self.n_pos} fraud)",
            f"auc        {self.auc:.6f}",
            f"ks         {self.ks:.6f}",
            f"precision  {self.precision:.6f}" + ("  (nothing flagged)" if self.degenerate_precision else ""),
            f"coverage   {self.coverage:.6f}",
            f"threshold  {self.threshold!r}",
        ]
        return "\n".join(lines) + "\n"

    def write(self, directory, prefix: str = "") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{prefix}report.txt").write_text(self.to_text(), encoding="utf-8")
        (directory / f"{prefix}report.json").write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        _write_points(directory / f"{prefix}roc.tsv", "fpr\ttpr", self.roc_points)
        _write_points(directory / f"{prefix}ks.tsv", "flagged_fraction\ttpr_minus_fpr", self.ks_points)


def _write_points(path, header, points):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for x, y in points:
            fh.write(f"{x:.9g}\t{y:.9g}\n")


def evaluate(scores, labels, threshold: Optional[float] = None) -> EvalReport:
    """Full report; the operating threshold defaults to the KS-maximising one."""
    scores, labels = _check(scores, labels)
    thresholds, fpr, tpr = roc_sweep(scores, labels)
    if threshold is None:
        threshold = ks_threshold(scores, labels)
    pc = precision_coverage(scores, labels, threshold)
    flagged = np.r_[0, np.searchsorted(np.sort(-scores), -thresholds[1:], side="right")] / len(scores)
    return EvalReport(
        auc=auc(scores, labels),
        ks=ks(scores, labels),
        precision=pc.precision,
        coverage=pc.coverage,
        threshold=float(threshold),
        roc_points=list(zip(fpr.tolist(), tpr.tolist())),
        ks_points=list(zip(flagged.tolist(), (tpr - fpr).tolist())),
        degenerate_precision=pc.degenerate,
        n=len(scores),
        n_pos=int(labels.sum()),
    )
