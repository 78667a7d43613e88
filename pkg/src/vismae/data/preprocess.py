"""Imputation, normalization, static encoding, stratified splitting, class weights.

All statistics are fit on the training split only and applied unchanged to
the validation and test splits.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vismae.data.schema import (
    AGENTS,
    GENDER_CATEGORIES,
    INSURANCE_CATEGORIES,
    MARITAL_CATEGORIES,
    N_HOURS,
    RACE_CATEGORIES,
    SCORES,
    PatientRecord,
)
from vismae.errors import (
    CannotFitError,
    ContractError,
    DegenerateClassError,
    DomainError,
    StratificationError,
    ValidationError,
)
from vismae.io import read_json, write_json, write_npz
from vismae.rng import substream

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

# potency weights of the vasoactive-inotropic score
VIS_WEIGHTS = {
    "dopamine": 1.0,
    "dobutamine": 1.0,
    "epinephrine": 100.0,
    "milrinone": 10.0,
    "vasopressin": 10000.0,
    "norepinephrine": 100.0,
}
_VIS_W = np.array([VIS_WEIGHTS[a] for a in AGENTS])

DEFAULT_FRACTIONS = (0.72, 0.08, 0.20)


def compute_total_vis(doses) -> float | np.ndarray:
    """Vasoactive-inotropic score of one 6-vector of doses, or of each row of (..., 6)."""
    d = np.asarray(doses, dtype=np.float64)
    if d.shape[-1] != len(AGENTS):
        raise ContractError(f"expected {len(AGENTS)} agent doses, got shape {d.shape}")
    if not np.isfinite(d).all():
        raise ValidationError("doses must be finite")
    if (d < 0).any():
        raise ValidationError("doses must be non-negative")
    # explicit left-to-right sum keeps the result independent of BLAS
    total = d[..., 0] * _VIS_W[0]
    for k in range(1, len(AGENTS)):
        total = total + d[..., k] * _VIS_W[k]
    return float(total) if total.ndim == 0 else total


def vis_matrix(record: PatientRecord) -> np.ndarray:
    """(48, 7) raw dose matrix with the total score as the last column.

    Null doses must have been imputed already.
    """
    if np.isnan(record.doses).any():
        raise ValidationError(f"{record.patient_id}: impute doses before building the VIS matrix")
    return np.concatenate([record.doses, compute_total_vis(record.doses)[:, None]], axis=1)


# -- encoding manifest --------------------------------------------------------


@dataclass(frozen=True)
class EncodingManifest:
    """Ordered category lists per categorical field and the static vector layout."""

    gender: tuple[str, ...] = GENDER_CATEGORIES
    marital_status: tuple[str, ...] = MARITAL_CATEGORIES
    insurance: tuple[str, ...] = INSURANCE_CATEGORIES
    race: tuple[str, ...] = RACE_CATEGORIES
    # category used for nulls and unseen values; None = impute with the train mode
    unknown: dict = field(default_factory=lambda: {
        "gender": None,
        "marital_status": "UNKNOWN",
        "insurance": "Unknown",
        "race": "Unknown",
    })

    @property
    def fields(self) -> tuple[str, ...]:
        return ("gender", "marital_status", "insurance", "race")

    def categories(self, name: str) -> tuple[str, ...]:
        return getattr(self, name)

    def feature_names(self) -> list[str]:
        names = ["admission_age"]
        for f in self.fields:
            names += [f"{f}_{c}" for c in self.categories(f)]
        return names + list(SCORES)

    def groups(self) -> list[tuple[str, list[int]]]:
        """Attribution players: (name, column indices) covering all static dims."""
        out = [("admission_age", [0])]
        start = 1
        for f in self.fields:
            n = len(self.categories(f))
            out.append((f, list(range(start, start + n))))
            start += n
        for k, s in enumerate(SCORES):
            out.append((s, [start + k]))
        return out

    @property
    def n_full(self) -> int:
        return 1 + sum(len(self.categories(f)) for f in self.fields) + len(SCORES)

    @property
    def n_scorefree(self) -> int:
        return self.n_full - len(SCORES)

    def to_dict(self) -> dict:
        return {f: list(self.categories(f)) for f in self.fields} | {"unknown": dict(self.unknown)}

    @classmethod
    def from_dict(cls, d: dict) -> EncodingManifest:
        return cls(**{f: tuple(d[f]) for f in ("gender", "marital_status", "insurance", "race")},
                   unknown=dict(d["unknown"]))


# -- preprocessing statistics -------------------------------------------------


@dataclass
class PreprocessStats:
    """Everything fit on the training split."""

    age_median: float
    score_medians: dict[str, float]
    categorical_modes: dict[str, str]
    vis_log_mean: list[float] = field(default_factory=list)
    vis_log_std: list[float] = field(default_factory=list)
    degenerate_vis_columns: list[int] = field(default_factory=list)
    age_mean: float = 0.0
    age_std: float = 1.0
    score_means: dict[str, float] = field(default_factory=dict)
    score_stds: dict[str, float] = field(default_factory=dict)
    manifest: EncodingManifest = field(default_factory=EncodingManifest)
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["manifest"] = self.manifest.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PreprocessStats:
        d = dict(d)
        if d.get("format_version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported PreprocessStats format_version {d.get('format_version')}")
        d["manifest"] = EncodingManifest.from_dict(d["manifest"])
        return cls(**d)


def _median(values: list[float | None], what: str) -> float:
    present = [v for v in values if v is not None]
    if not present:
        raise CannotFitError(f"{what} is null for every training record")
    return float(np.median(present))


def fit_imputer(train: Sequence[PatientRecord], manifest: EncodingManifest | None = None) -> PreprocessStats:
    """Medians of continuous fields and modes of categoricals, from training records."""
    manifest = manifest or EncodingManifest()
    if not train:
        raise CannotFitError("empty training split")
    modes = {}
    for f in manifest.fields:
        values = [getattr(r, f) for r in train if getattr(r, f) in manifest.categories(f)]
        if values:
            cats, counts = np.unique(values, return_counts=True)
            modes[f] = str(cats[np.argmax(counts)])  # ties -> lexicographically first
        else:
            modes[f] = manifest.unknown[f] or manifest.categories(f)[0]
    return PreprocessStats(
        age_median=_median([r.admission_age for r in train], "admission_age"),
        score_medians={s: _median([getattr(r, s) for r in train], s) for s in SCORES},
        categorical_modes=modes,
        manifest=manifest,
    )


def _impute_category(value: str | None, name: str, stats: PreprocessStats, warn: bool) -> str:
    m = stats.manifest
    if value is not None and value in m.categories(name):
        return value
    if value is not None and warn:
        warnings.warn(f"unseen {name} category {value!r}; mapping to the fallback category", stacklevel=3)
    return m.unknown[name] or stats.categorical_modes[name]


def impute(records: Sequence[PatientRecord], stats: PreprocessStats) -> list[PatientRecord]:
    """Fill every null: doses with 0, age and scores with train medians, categoricals
    with the field's unknown category (or the train mode when it has none)."""
    out = []
    for r in records:
        changes = {"doses": np.nan_to_num(r.doses, nan=0.0)}
        if r.admission_age is None:
            changes["admission_age"] = stats.age_median
        for s in SCORES:
            if getattr(r, s) is None:
                changes[s] = stats.score_medians[s]
        for f in stats.manifest.fields:
            v = getattr(r, f)
            if v is None:
                changes[f] = _impute_category(None, f, stats, warn=False)
        out.append(r.copy(**changes))
    return out


def fit_normalizer(train_imputed: Sequence[PatientRecord], stats: PreprocessStats) -> PreprocessStats:
    """Add log1p z-score parameters (VIS), age and score moments to ``stats``."""
    vis = np.stack([vis_matrix(r) for r in train_imputed])
    logged = _log1p_checked(vis).reshape(-1, vis.shape[-1])
    mean = logged.mean(axis=0)
    std = logged.std(axis=0)
    degenerate = [int(k) for k in np.flatnonzero(std == 0)]
    if degenerate:
        log.info("VIS columns %s are constant on train; using std=1", degenerate)
    std = np.where(std == 0, 1.0, std)
    stats.vis_log_mean = mean.tolist()
    stats.vis_log_std = std.tolist()
    stats.degenerate_vis_columns = degenerate
    ages = np.array([r.admission_age for r in train_imputed], dtype=np.float64)
    stats.age_mean, stats.age_std = float(ages.mean()), _safe_std(ages)
    for s in SCORES:
        v = np.array([getattr(r, s) for r in train_imputed], dtype=np.float64)
        stats.score_means[s] = float(v.mean())
        stats.score_stds[s] = _safe_std(v)
    return stats


def _safe_std(v: np.ndarray) -> float:
    s = float(v.std())
    return s if s > 0 else 1.0


def _log1p_checked(x: np.ndarray) -> np.ndarray:
    if (x < 0).any():
        raise DomainError("log1p transform needs non-negative doses")
    return np.log1p(x)


def normalize_vis(raw: np.ndarray, stats: PreprocessStats) -> np.ndarray:
    """(log(1 + x) - mean) / std per column, for raw (..., 7) VIS arrays."""
    return (_log1p_checked(np.asarray(raw, dtype=np.float64)) - np.asarray(stats.vis_log_mean)) / np.asarray(
        stats.vis_log_std
    )


def apply_normalizer(records: Sequence[PatientRecord], stats: PreprocessStats) -> np.ndarray:
    """(N, 48, 7) normalized VIS series for imputed records."""
    if not stats.vis_log_mean:
        raise ContractError("normalizer statistics have not been fit")
    raw = np.stack([vis_matrix(r) for r in records]) if records else np.zeros((0, N_HOURS, len(AGENTS) + 1))
    return normalize_vis(raw, stats)


# -- static encoding ---------------------------------------------------------------


def encode_static(record: PatientRecord, stats: PreprocessStats) -> np.ndarray:
    """51-dim static vector: z-scored age, four one-hot groups, four z-scored scores.

    The first 47 entries form the score-free vector used by the regression head.
    """
    m = stats.manifest
    parts = [np.array([(_require(record.admission_age, "admission_age", record) - stats.age_mean) / stats.age_std])]
    for f in m.fields:
        cats = m.categories(f)
        value = _impute_category(getattr(record, f), f, stats, warn=True)
        onehot = np.zeros(len(cats))
        onehot[cats.index(value)] = 1.0
        parts.append(onehot)
    parts.append(np.array([
        (_require(getattr(record, s), s, record) - stats.score_means[s]) / stats.score_stds[s] for s in SCORES
    ]))
    return np.concatenate(parts)


def _require(v, name, record):
    if v is None:
        raise ValidationError(f"{record.patient_id}: {name} is null; impute before encoding")
    return float(v)


def scorefree(static_full: np.ndarray, manifest: EncodingManifest | None = None) -> np.ndarray:
    """Drop the trailing severity-score dims."""
    n = (manifest or EncodingManifest()).n_scorefree
    return static_full[..., :n]


def decode_static(vector: np.ndarray, manifest: EncodingManifest | None = None) -> dict[str, str]:
    """Recover the categorical values of an encoded static vector."""
    m = manifest or EncodingManifest()
    out = {}
    for name, cols in m.groups():
        if name in m.fields:
            block = np.asarray(vector)[cols]
            out[name] = m.categories(name)[int(np.argmax(block))]
    return out


# -- splitting ---------------------------------------------------------------------


@dataclass
class SplitIndices:
    train: list[int]
    validation: list[int]
    test: list[int]
    seed: int
    format_version: int = FORMAT_VERSION

    def as_tuple(self) -> tuple[list[int], list[int], list[int]]:
        return self.train, self.validation, self.test

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SplitIndices:
        if d.get("format_version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported SplitIndices format_version {d.get('format_version')}")
        return cls(**d)

    def digest(self) -> str:
        payload = json.dumps([self.train, self.validation, self.test], separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def _largest_remainder(targets: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation summing to ``total`` with each entry within 1 of its target."""
    # rounding guards against 719.9999999 style float noise before flooring
    targets = np.round(np.asarray(targets, dtype=np.float64), 9)
    base = np.floor(targets).astype(int)
    short = total - int(base.sum())
    if short > 0:
        order = sorted(range(len(targets)), key=lambda j: (-(targets[j] - base[j]), j))
        for j in order[:short]:
            base[j] += 1
    return base


def stratified_split(labels, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0) -> SplitIndices:
    """Train/validation/test indices preserving the positive rate in every split."""
    y = np.asarray(labels).astype(int)
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise ContractError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(y)
    sizes = _largest_remainder(fr * n, n)
    n_splits = int((fr > 0).sum())
    classes = sorted(set(y.tolist()))
    for c in classes:
        count = int((y == c).sum())
        if count < n_splits:
            raise StratificationError(f"class {c} has {count} members, fewer than {n_splits} splits")
    rng = substream(seed, "split")
    parts: list[list[int]] = [[], [], []]
    remaining = sizes.copy()
    # allocate the rarer classes against the realized split sizes; the most
    # common class fills what is left, so every split stays within one patient
    # of the global rate
    by_count = sorted(classes, key=lambda c: ((y == c).sum(), c))
    for i, c in enumerate(by_count):
        members = np.flatnonzero(y == c)
        members = members[rng.permutation(len(members))]
        if i == len(by_count) - 1:
            alloc = remaining
        else:
            alloc = _largest_remainder(sizes * (len(members) / n), len(members))
            remaining = remaining - alloc
        start = 0
        for j in range(3):
            parts[j] += members[start:start + alloc[j]].tolist()
            start += alloc[j]
    return SplitIndices(*(sorted(p) for p in parts), seed=seed)


def compute_class_weights(train_labels) -> np.ndarray:
    """``len(train) / (2 * count_c)`` for c in (0, 1)."""
    y = np.asarray(train_labels).astype(int)
    counts = np.array([(y == 0).sum(), (y == 1).sum()], dtype=np.float64)
    if (counts == 0).any():
        raise DegenerateClassError(f"both classes must be present in train, counts={counts.tolist()}")
    return len(y) / (2.0 * counts)


# -- full pipeline -----------------------------------------------------------------


@dataclass
class PreparedData:
    """Model-ready arrays for a whole cohort plus the artifacts that produced them."""

    patient_ids: list[str]
    vis: np.ndarray  # (N, 48, 7) normalized
    static_full: np.ndarray  # (N, 51)
    labels: np.ndarray  # (N,) int
    splits: SplitIndices
    stats: PreprocessStats
    class_weights: np.ndarray
    vis_raw: np.ndarray | None = None  # (N, 48, 7) pre-normalization

    @property
    def manifest(self) -> EncodingManifest:
        return self.stats.manifest

    @property
    def static_scorefree(self) -> np.ndarray:
        return scorefree(self.static_full, self.manifest)

    @property
    def targets(self) -> np.ndarray:
        """Normalized severity scores, the regression targets."""
        return self.static_full[:, self.manifest.n_scorefree:]

    def split(self, name: str) -> np.ndarray:
        idx = {"train": self.splits.train, "validation": self.splits.validation, "test": self.splits.test}[name]
        return np.asarray(idx, dtype=np.int64)

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_npz(d / "dataset.npz", vis=self.vis, static_full=self.static_full, labels=self.labels,
                    patient_ids=np.array(self.patient_ids))
        write_json(d / "preprocess_stats.json", self.stats.to_dict())
        write_json(d / "splits.json", self.splits.to_dict())
        write_json(d / "class_weights.json", {"format_version": FORMAT_VERSION,
                                              "class_weights": self.class_weights.tolist()})
        write_json(d / "static_features.json", {"format_version": FORMAT_VERSION,
                                                "feature_names": self.manifest.feature_names(),
                                                "n_full": self.manifest.n_full,
                                                "n_scorefree": self.manifest.n_scorefree})
        return d

    @classmethod
    def load(cls, directory: str | Path) -> PreparedData:
        d = Path(directory)
        with np.load(d / "dataset.npz", allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        return cls(
            patient_ids=[str(p) for p in arrays["patient_ids"]],
            vis=arrays["vis"],
            static_full=arrays["static_full"],
            labels=arrays["labels"],
            splits=SplitIndices.from_dict(read_json(d / "splits.json")),
            stats=PreprocessStats.from_dict(read_json(d / "preprocess_stats.json")),
            class_weights=np.asarray(read_json(d / "class_weights.json")["class_weights"]),
        )


def prepare_dataset(
    records: Sequence[PatientRecord],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
    manifest: EncodingManifest | None = None,
) -> PreparedData:
    """Split, fit on train, then impute/normalize/encode every record."""
    labels = np.array([r.mortality for r in records], dtype=np.int64)
    splits = stratified_split(labels, fractions, seed)
    train = [records[i] for i in splits.train]
    stats = fit_imputer(train, manifest)
    fit_normalizer(impute(train, stats), stats)
    imputed = impute(records, stats)
    vis_raw = np.stack([vis_matrix(r) for r in imputed])
    return PreparedData(
        patient_ids=[r.patient_id for r in records],
        vis=normalize_vis(vis_raw, stats),
        static_full=np.stack([encode_static(r, stats) for r in imputed]),
        labels=labels,
        splits=splits,
        stats=stats,
        class_weights=compute_class_weights(labels[splits.train]),
        vis_raw=vis_raw,
    )
