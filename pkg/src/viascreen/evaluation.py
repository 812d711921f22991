"""Screening metrics, biopsy-subgroup evaluation, and inter-rater agreement.

Sensitivity/specificity with an empty denominator are reported as None (not
zero) so balanced accuracy is never silently skewed; balanced accuracy is
then None as well. Krippendorff's alpha uses the coincidence-matrix
formulation with the nominal metric; items carrying fewer than two ratings
are excluded, and a table with zero expected disagreement (all codes equal)
is 1.0 by convention.
"""

from __future__ import annotations

import itertools
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from .dataset_core import BiopsyResult, PatientCase
from .paired_classifier import aggregate_probs

DEFAULT_THRESHOLD = 0.5
SWEEP_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 20))


class EvaluationError(Exception):
    """Empty or inconsistent evaluation inputs."""


class AgreementError(Exception):
    """Ratings table unusable for agreement computation."""


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise EvaluationError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def _safe_rate(num: int, denom: int) -> Optional[float]:
    return num / denom if denom else None


@dataclass
class EvalReport:
    matrix: ConfusionMatrix
    sensitivity: Optional[float]
    specificity: Optional[float]
    balanced_accuracy: Optional[float]
    threshold: float
    misclassified: list[str] = field(default_factory=list)
    subgroups: dict[str, "EvalReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "matrix": self.matrix.to_dict(),
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "balanced_accuracy": self.balanced_accuracy,
            "threshold": self.threshold,
            "misclassified": sorted(self.misclassified),
        }
        if self.subgroups:
            d["subgroups"] = {k: v.to_dict() for k, v in self.subgroups.items()}
        return d

    def summary(self) -> str:
        def fmt(x):
            return "undefined" if x is None else f"{x:.4f}"

        m = self.matrix
        lines = [
            f"threshold {self.threshold:.2f}: "
            f"tp={m.tp} fp={m.fp} tn={m.tn} fn={m.fn}",
            f"  sensitivity       {fmt(self.sensitivity)}",
            f"  specificity       {fmt(self.specificity)}",
            f"  balanced accuracy {fmt(self.balanced_accuracy)}",
        ]
        for name, sub in sorted(self.subgroups.items()):
            lines.append(f"  subgroup {name}: sens {fmt(sub.sensitivity)} "
                         f"spec {fmt(sub.specificity)} (n={sub.matrix.total})")
        return "\n".join(lines)


def report_from_matrix(matrix: ConfusionMatrix, threshold: float = DEFAULT_THRESHOLD,
                       misclassified: Optional[list[str]] = None) -> EvalReport:
    sens = _safe_rate(matrix.tp, matrix.tp + matrix.fn)
    spec = _safe_rate(matrix.tn, matrix.tn + matrix.fp)
    balanced = (sens + spec) / 2 if sens is not None and spec is not None else None
    return EvalReport(
        matrix=matrix,
        sensitivity=sens,
        specificity=spec,
        balanced_accuracy=balanced,
        threshold=threshold,
        misclassified=misclassified or [],
    )


def evaluate(
    ids: Sequence[str],
    probs: Sequence[float],
    labels: Sequence[int],
    threshold: float = DEFAULT_THRESHOLD,
) -> EvalReport:
    """Confusion matrix and rates from cached probabilities at a threshold.

    Predicted positive means probability >= threshold.
    """
    if not ids:
        raise EvaluationError("empty evaluation set")
    if not (len(ids) == len(probs) == len(labels)):
        raise EvaluationError("ids/probs/labels length mismatch")
    if not 0.0 < threshold < 1.0:
        raise EvaluationError("threshold must lie in (0, 1)")
    tp = fp = tn = fn = 0
    misclassified = []
    for pid, p, y in zip(ids, probs, labels):
        pred = p >= threshold
        if y == 1 and pred:
            tp += 1
        elif y == 1:
            fn += 1
            misclassified.append(pid)
        elif pred:
            fp += 1
            misclassified.append(pid)
        else:
            tn += 1
    return report_from_matrix(ConfusionMatrix(tp, fp, tn, fn), threshold, misclassified)


def threshold_sweep(
    ids: Sequence[str],
    probs: Sequence[float],
    labels: Sequence[int],
    thresholds: Sequence[float] = SWEEP_THRESHOLDS,
) -> dict[float, EvalReport]:
    return {t: evaluate(ids, probs, labels, t) for t in thresholds}


def evaluate_subgroup(
    cases: Iterable[PatientCase],
    pair_probs: dict[str, list[float]],
    subgroup: Callable[[PatientCase], bool],
    aggregation: str = "mean",
    threshold: float = DEFAULT_THRESHOLD,
) -> EvalReport:
    """Patient-level evaluation on a subgroup, ground-truthed by biopsy.

    ``pair_probs`` maps patient_id to that woman's per-pair probabilities;
    positives are LSIL or worse on biopsy.
    """
    ids, probs, labels = [], [], []
    for case in cases:
        if not subgroup(case):
            continue
        if case.biopsy is None:
            raise EvaluationError(f"subgroup patient {case.patient_id} lacks a biopsy result")
        if case.patient_id not in pair_probs or not pair_probs[case.patient_id]:
            raise EvaluationError(f"no predictions for subgroup patient {case.patient_id}")
        ids.append(case.patient_id)
        probs.append(aggregate_probs(pair_probs[case.patient_id], aggregation))
        labels.append(1 if case.biopsy.lsil_plus else 0)
    if not ids:
        raise EvaluationError("empty subgroup")
    return evaluate(ids, probs, labels, threshold)


def biopsy_subgroup(case: PatientCase) -> bool:
    return case.biopsy is not None


# ---------------------------------------------------------------------------
# Krippendorff's alpha (nominal)

@dataclass
class RatingsTable:
    """item x rater nominal codes; None marks a missing rating."""

    items: list[str]
    raters: list[str]
    codes: dict[tuple[str, str], str] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, str]]) -> "RatingsTable":
        """Build from (item, rater, code) triples; the last record wins."""
        codes: dict[tuple[str, str], str] = {}
        items: list[str] = []
        raters: list[str] = []
        for item, rater, code in records:
            if item not in items:
                items.append(item)
            if rater not in raters:
                raters.append(rater)
            codes[(item, rater)] = code
        return cls(items=items, raters=raters, codes=codes)

    def unit_values(self) -> list[list[str]]:
        out = []
        for item in self.items:
            vals = [
                self.codes[(item, r)]
                for r in self.raters
                if (item, r) in self.codes and self.codes[(item, r)] is not None
            ]
            out.append(vals)
        return out

    def validate(self) -> None:
        if len(self.raters) < 2:
            raise AgreementError("need at least two raters")
        if not any(len(v) >= 2 for v in self.unit_values()):
            raise AgreementError("no item carries two or more ratings")


def krippendorff_alpha(table: RatingsTable, metric: str = "nominal") -> float:
    """Chance-corrected agreement over the pairable (>= 2 ratings) items."""
    if metric != "nominal":
        raise AgreementError(f"only the nominal metric is supported, got {metric!r}")
    table.validate()
    units = [vals for vals in table.unit_values() if len(vals) >= 2]

    coincidence: dict[tuple[str, str], float] = defaultdict(float)
    n_total = 0
    for vals in units:
        m = len(vals)
        n_total += m
        for i, j in itertools.permutations(range(m), 2):
            coincidence[(vals[i], vals[j])] += 1.0 / (m - 1)

    codes = sorted({c for vals in units for c in vals})
    margins = {c: sum(coincidence[(c, k)] for k in codes) for c in codes}

    d_observed = sum(v for (c, k), v in coincidence.items() if c != k) / n_total
    d_expected = (
        sum(margins[c] * margins[k] for c in codes for k in codes if c != k)
        / (n_total * (n_total - 1))
    )
    if d_expected == 0.0:
        return 1.0  # every pairable value identical: no expected disagreement
    return 1.0 - d_observed / d_expected


def pairwise_raw_agreement(table: RatingsTable) -> dict[str, float]:
    """Fraction of co-rated items on which each rater pair gave the same code."""
    out = {}
    for a, b in itertools.combinations(table.raters, 2):
        shared = [
            it
            for it in table.items
            if (it, a) in table.codes and (it, b) in table.codes
        ]
        if not shared:
            continue
        same = sum(table.codes[(it, a)] == table.codes[(it, b)] for it in shared)
        out[f"{a}|{b}"] = same / len(shared)
    return out


def write_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Rendering

def render_confusion_matrix(report: EvalReport, path: str | Path) -> None:
    """Confusion-matrix heatmap for the headline report."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = report.matrix
    grid = [[m.tn, m.fp], [m.fn, m.tp]]
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.imshow(grid, cmap="Blues")
    for i in range(2):
        for j in range(2):
            ax.text(j, i, str(grid[i][j]), ha="center", va="center", fontsize=14)
    ax.set_xticks([0, 1], ["pred neg", "pred pos"])
    ax.set_yticks([0, 1], ["true neg", "true pos"])
    ax.set_title(f"threshold={report.threshold:.2f}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def render_misclassified_sheet(
    pairs_with_images: list[tuple[str, "object", "object"]],
    path: str | Path,
    max_pairs: int = 8,
) -> None:
    """Contact sheet of misclassified pairs: pre image left, post image right."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = pairs_with_images[:max_pairs]
    if not rows:
        rows = []
    n = max(1, len(rows))
    fig, axes = plt.subplots(n, 2, figsize=(5, 2.2 * n), squeeze=False)
    for r, (pair_id, pre_img, post_img) in enumerate(rows):
        axes[r][0].imshow(pre_img)
        axes[r][1].imshow(post_img)
        axes[r][0].set_ylabel(pair_id, fontsize=6)
        for c in (0, 1):
            axes[r][c].set_xticks([])
            axes[r][c].set_yticks([])
    if rows:
        axes[0][0].set_title("pre-VIA", fontsize=9)
        axes[0][1].set_title("post-VIA", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
