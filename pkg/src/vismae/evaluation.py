"""Threshold metrics, AUROC, ROC curves, R², bootstrap intervals and the ablation report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from vismae.errors import ContractError, UndefinedMetricError
from vismae.io import atomic_write_text, write_json
from vismae.rng import substream

METRIC_NAMES = ("AUROC", "PPV", "NPV", "Sensitivity", "Specificity", "PLR", "NLR", "ACC")
# column order of the ablation table
REPORT_COLUMNS = ("R2", "AUROC", "PPV", "NPV", "PLR", "NLR", "ACC", "Sensitivity", "Specificity")
DEFAULT_RESAMPLES = 1000
MAX_REDRAW_FACTOR = 10


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _binary_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0:
        raise ContractError("empty input")
    if s.shape != y.shape:
        raise ContractError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    if not np.isfinite(s).all():
        raise ContractError("scores must be finite")
    return s, y.astype(np.int64)


def confusion_at_threshold(scores, labels, threshold: float) -> ConfusionCounts:
    """Counts when a sample is called positive iff its score >= threshold."""
    s, y = _binary_inputs(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def binary_metrics(counts: ConfusionCounts) -> dict[str, float | None]:
    """Threshold metrics; ``None`` marks a metric whose denominator is zero."""
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    plr = nlr = None
    if sens is not None and spec is not None:
        plr = _ratio(sens, 1.0 - spec)
        nlr = _ratio(1.0 - sens, spec)
    return {
        "PPV": _ratio(tp, tp + fp),
        "NPV": _ratio(tn, tn + fn),
        "Sensitivity": sens,
        "Specificity": spec,
        "PLR": plr,
        "NLR": nlr,
        "ACC": _ratio(tp + tn, counts.total),
    }


def _both_classes(y: np.ndarray) -> tuple[int, int]:
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    return n_pos, n_neg


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate: P(pos > neg) + P(tie) / 2, via midranks."""
    s, y = _binary_inputs(scores, labels)
    n_pos, n_neg = _both_classes(y)
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) from (0, 0) to (1, 1), one point per distinct score.

    The first threshold is +inf (nothing called positive).
    """
    s, y = _binary_inputs(scores, labels)
    n_pos, n_neg = _both_classes(y)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each run of equal scores
    distinct = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    tps = np.cumsum(y_sorted)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s_sorted[distinct]]
    return fpr, tpr, thresholds


def trapezoid_area(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def r2_score(pred, target) -> tuple[float | None, list[float | None]]:
    """Mean over target dims of 1 - SS_res / SS_tot, plus the per-dim values.

    A dimension whose target has zero variance is ``None`` and left out of
    the mean; if every dimension is undefined the mean is ``None`` too.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.ndim == 1:
        p, t = p[:, None], t[:, None]
    if p.shape != t.shape:
        raise ContractError(f"prediction {p.shape} and target {t.shape} differ")
    if p.shape[0] < 2:
        raise ContractError("R² needs at least 2 samples")
    per_dim: list[float | None] = []
    for k in range(t.shape[1]):
        ss_tot = float(np.sum((t[:, k] - t[:, k].mean()) ** 2))
        ss_res = float(np.sum((t[:, k] - p[:, k]) ** 2))
        per_dim.append(None if ss_tot == 0.0 else 1.0 - ss_res / ss_tot)
    defined = [v for v in per_dim if v is not None]
    return (float(np.mean(defined)) if defined else None), per_dim


def choose_threshold(scores, labels) -> float:
    """Youden's J maximizer, returned as the midpoint of the optimal score gap.

    Candidates are the ROC cut points; among equal J the lowest threshold wins.
    """
    s, y = _binary_inputs(scores, labels)
    fpr, tpr, thr = roc_curve(s, y)
    j = tpr - fpr
    best = j.max()
    # thresholds descend along the curve, so the last optimum is the lowest
    idx = int(np.flatnonzero(j == best)[-1])
    if idx == 0:
        # calling nothing positive is optimal: threshold sits above every score
        return float(s.max()) + 1.0
    lower = thr[idx]
    # next distinct score below the cut, if any, bounds the optimal interval
    below = s[s < lower]
    if below.size == 0:
        return float(lower)
    return float((lower + below.max()) / 2.0)


# -- bootstrap ----------------------------------------------------------------


def _percentile_ci(values: np.ndarray, point: float) -> tuple[float, float]:
    low, high = np.percentile(values, [2.5, 97.5])
    # keep the point inside its own interval (percentiles can exclude it when skewed)
    return float(min(low, point)), float(max(high, point))


def bootstrap_ci(
    metric: Callable[[np.ndarray, np.ndarray], float | None],
    scores,
    labels,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    point: float | None = None,
) -> tuple[float, float]:
    """Stratified percentile bootstrap 95% interval of ``metric(scores, labels)``.

    Each resample draws positives and negatives separately with replacement,
    so class counts match the original. Resamples on which the metric is
    undefined (``None``, NaN or :class:`UndefinedMetricError`) are redrawn, at
    most ``MAX_REDRAW_FACTOR * n_resamples`` draws in total.
    """
    if n_resamples < 100:
        raise ContractError(f"n_resamples must be >= 100, got {n_resamples}")
    s = np.asarray(scores)
    y = np.asarray(labels).reshape(-1)
    if s.shape[0] != y.shape[0] or y.size == 0:
        raise ContractError("scores and labels must be non-empty and aligned")
    if point is None:
        point = metric(s, y)
    if point is None or not math.isfinite(point):
        raise UndefinedMetricError("metric is undefined on the full sample")
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    rng = substream(seed, "bootstrap")
    values: list[float] = []
    draws = 0
    while len(values) < n_resamples:
        if draws >= MAX_REDRAW_FACTOR * n_resamples:
            raise UndefinedMetricError(
                f"metric undefined on too many resamples ({draws - len(values)} of {draws})"
            )
        draws += 1
        idx = np.concatenate([rng.choice(pos, size=pos.size), rng.choice(neg, size=neg.size)])
        try:
            v = metric(s[idx], y[idx])
        except UndefinedMetricError:
            continue
        if v is None or not math.isfinite(v):
            continue
        values.append(float(v))
    return _percentile_ci(np.array(values), float(point))


# -- reports ------------------------------------------------------------------


@dataclass
class MetricValue:
    point: float | None
    low: float | None = None
    high: float | None = None

    def fmt(self) -> str:
        if self.point is None:
            return "undefined"
        if self.low is None:
            return f"{self.point:.4f}"
        return f"{self.point:.4f} ({self.low:.4f} to {self.high:.4f})"


@dataclass
class MetricsReport:
    metrics: dict[str, MetricValue]
    threshold: float
    n: int
    seed: int
    config_name: str = "baseline"
    kd_enabled: bool = True
    mt_enabled: bool = True
    r2_per_target: list[float | None] = field(default_factory=list)
    flags: dict[str, str] = field(default_factory=dict)
    split_digest: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = {k: asdict(v) for k, v in self.metrics.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        d = dict(d)
        d["metrics"] = {k: MetricValue(**v) for k, v in d["metrics"].items()}
        return cls(**d)

    def row(self) -> list[str]:
        return [
            self.config_name,
            str(self.kd_enabled),
            str(self.mt_enabled),
            *(self.metrics[c].fmt() for c in REPORT_COLUMNS),
        ]

    def save(self, directory: str | Path, stem: str = "metrics") -> None:
        directory = Path(directory)
        write_json(directory / f"{stem}.json", self.to_dict())
        atomic_write_text(directory / f"{stem}.csv", report_table([self]))


def report_table(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Config", "KD", "MT", *REPORT_COLUMNS])
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def roc_text(scores, labels) -> str:
    fpr, tpr, _ = roc_curve(scores, labels)
    lines = ["fpr,tpr"] + [f"{a!r},{b!r}" for a, b in zip(fpr.tolist(), tpr.tolist())]
    return "\n".join(lines) + "\n"


def _threshold_metric(name: str, threshold: float):
    def f(s, y):
        return binary_metrics(confusion_at_threshold(s, y, threshold))[name]

    return f


def _r2_metric(pred: np.ndarray, target: np.ndarray):
    def f(idx_scores, _y):
        idx = idx_scores.astype(np.int64)
        return r2_score(pred[idx], target[idx])[0]

    return f


def build_report(
    scores,
    labels,
    threshold: float,
    reg_pred=None,
    reg_target=None,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    config_name: str = "baseline",
    kd_enabled: bool = True,
    mt_enabled: bool = True,
) -> MetricsReport:
    """Point estimates and 95% intervals for every ablation-table column."""
    s, y = _binary_inputs(scores, labels)
    metrics: dict[str, MetricValue] = {}
    flags: dict[str, str] = {}

    auc = auroc(s, y)
    metrics["AUROC"] = MetricValue(auc, *bootstrap_ci(auroc, s, y, n_resamples, seed, point=auc))

    point_metrics = binary_metrics(confusion_at_threshold(s, y, threshold))
    for name in ("PPV", "NPV", "Sensitivity", "Specificity", "PLR", "NLR", "ACC"):
        p = point_metrics[name]
        if p is None:
            metrics[name] = MetricValue(None)
            flags[name] = "undefined: zero denominator at the chosen threshold"
            continue
        try:
            ci = bootstrap_ci(_threshold_metric(name, threshold), s, y, n_resamples, seed, point=p)
        except UndefinedMetricError:
            metrics[name] = MetricValue(p)
            flags[name] = "interval undefined: metric undefined on most resamples"
            continue
        metrics[name] = MetricValue(p, *ci)

    r2_dims: list[float | None] = []
    if reg_pred is None:
        metrics["R2"] = MetricValue(None)
        flags["R2"] = "no regression output"
    else:
        pred = np.asarray(reg_pred, dtype=np.float64)
        target = np.asarray(reg_target, dtype=np.float64)
        r2, r2_dims = r2_score(pred, target)
        if r2 is None:
            metrics["R2"] = MetricValue(None)
            flags["R2"] = "undefined: constant targets"
        else:
            idx = np.arange(len(y), dtype=np.float64)
            metrics["R2"] = MetricValue(r2, *bootstrap_ci(_r2_metric(pred, target), idx, y, n_resamples, seed, point=r2))
        if not mt_enabled:
            flags["R2"] = "non-comparable: regression head was not trained in this arm"

    return MetricsReport(
        metrics=metrics,
        threshold=float(threshold),
        n=int(y.size),
        seed=int(seed),
        config_name=config_name,
        kd_enabled=kd_enabled,
        mt_enabled=mt_enabled,
        r2_per_target=r2_dims,
        flags=flags,
    )
