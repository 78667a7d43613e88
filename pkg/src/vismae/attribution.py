"""Permutation-sampling Shapley attribution over the static features.

Players are the static groups of the encoding manifest: age, each
categorical field as one player (its one-hot block is swapped atomically)
and each severity score. The explained quantity is the positive-class
probability with the patient's VIS series held fixed. Missing players take a
single background value: the training median for continuous dims and the
training mode for one-hot groups.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from vismae.data.preprocess import EncodingManifest
from vismae.errors import ContractError
from vismae.io import atomic_write_text, write_json
from vismae.model import SepsisModel
from vismae.numerics import Tensor, softmax
from vismae.rng import substream

MIN_SAMPLES = 100

Groups = Sequence[tuple[str, Sequence[int]]]


def background_vector(static_train: np.ndarray, manifest: EncodingManifest | None = None) -> np.ndarray:
    """Median of each continuous dim and the modal category of each one-hot group."""
    m = manifest or EncodingManifest()
    x = np.asarray(static_train, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m.n_full or len(x) == 0:
        raise ContractError(f"expected a non-empty (N, {m.n_full}) training matrix, got {x.shape}")
    bg = np.zeros(m.n_full)
    for name, cols in m.groups():
        if name in m.fields:
            counts = np.bincount(np.argmax(x[:, cols], axis=1), minlength=len(cols))
            # ties go to the first category in manifest order
            bg[cols[int(np.argmax(counts))]] = 1.0
        else:
            bg[cols[0]] = float(np.median(x[:, cols[0]]))
    return bg


def model_function(model: SepsisModel, vis: np.ndarray) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """f(patient_rows, static) -> positive-class probability, VIS held fixed per patient.

    The CLS embedding of every patient is computed once; each call only runs
    the classification head.
    """
    if model.stage != "student":
        raise ContractError(f"attribution needs a trained student model, got stage {model.stage!r}")
    cls = model.cls_embedding(vis)

    def f(rows: np.ndarray, static: np.ndarray) -> np.ndarray:
        logits = model.head_logits(cls[rows], static)
        return softmax(Tensor(logits)).data[:, 1]

    return f


@dataclass
class AttributionResult:
    values: np.ndarray  # (N, n_features) per-dim attributions
    group_values: np.ndarray  # (N, n_players)
    feature_names: list[str]
    group_names: list[str]
    background: np.ndarray
    background_description: str
    f_x: np.ndarray
    f_background: np.ndarray
    n_samples: int
    seed: int
    patient_ids: list[str]
    static: np.ndarray

    @property
    def mean_abs(self) -> np.ndarray:
        return np.abs(self.values).mean(axis=0)

    def local_accuracy_gap(self) -> np.ndarray:
        """Per patient |sum of attributions - (f(x) - f(background))|."""
        return np.abs(self.group_values.sum(axis=1) - (self.f_x - self.f_background))

    def to_dict(self) -> dict:
        return {
            "feature_names": self.feature_names,
            "group_names": self.group_names,
            "patient_ids": self.patient_ids,
            "values": self.values.tolist(),
            "group_values": self.group_values.tolist(),
            "mean_abs": dict(zip(self.feature_names, self.mean_abs.tolist())),
            "background": self.background.tolist(),
            "background_description": self.background_description,
            "f_x": self.f_x.tolist(),
            "f_background": self.f_background.tolist(),
            "n_samples": self.n_samples,
            "seed": self.seed,
        }

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "mean_abs_shap"])
        for name, v in rank_features(self):
            w.writerow([name, repr(v)])
        return buf.getvalue()

    def long_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["patient_id", "feature", "feature_value", "shap_value"])
        for i, pid in enumerate(self.patient_ids):
            for j, name in enumerate(self.feature_names):
                w.writerow([pid, name, repr(float(self.static[i, j])), repr(float(self.values[i, j]))])
        return buf.getvalue()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        write_json(directory / "attribution.json", self.to_dict())
        atomic_write_text(directory / "shap_summary.csv", self.summary_csv())
        atomic_write_text(directory / "shap_values.csv", self.long_csv())


def _spread_to_dims(group_values: np.ndarray, x: np.ndarray, groups: Groups, n_features: int) -> np.ndarray:
    """Per-dim view: a group's value sits on its active dim, 0 elsewhere."""
    out = np.zeros((x.shape[0], n_features))
    for g, (_, cols) in enumerate(groups):
        cols = list(cols)
        if len(cols) == 1:
            out[:, cols[0]] = group_values[:, g]
        else:
            active = np.asarray(cols)[np.argmax(x[:, cols], axis=1)]
            out[np.arange(x.shape[0]), active] = group_values[:, g]
    return out


def shapley_static(
    model: SepsisModel | Callable,
    static: np.ndarray,
    background: np.ndarray,
    n_samples: int = 200,
    seed: int = 0,
    vis: np.ndarray | None = None,
    groups: Groups | None = None,
    feature_names: Sequence[str] | None = None,
    patient_ids: Sequence[str] | None = None,
) -> AttributionResult:
    """Monte Carlo Shapley values of the static players for each patient.

    ``model`` is either a student :class:`SepsisModel` (then ``vis`` is
    required) or a callable mapping an (M, n_features) static matrix to (M,)
    outputs. Each sampled permutation adds players one at a time starting
    from the background, so the attributions of every permutation, and thus
    their mean, sum exactly to f(x) - f(background).
    """
    x = np.asarray(static, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    if x.ndim != 2 or bg.shape != (x.shape[1],):
        raise ContractError(f"static {x.shape} and background {bg.shape} do not align")
    if n_samples < MIN_SAMPLES:
        raise ContractError(f"n_samples must be >= {MIN_SAMPLES}, got {n_samples}")
    n, d = x.shape
    if isinstance(model, SepsisModel):
        if vis is None:
            raise ContractError("a SepsisModel needs the patients' VIS series")
        if len(vis) != n:
            raise ContractError(f"{len(vis)} VIS series for {n} static vectors")
        head = model_function(model, vis)
    elif callable(model):
        def head(rows, s):
            return np.asarray(model(s), dtype=np.float64).reshape(-1)
    else:
        raise ContractError("model must be a student SepsisModel or a callable")

    manifest = EncodingManifest()
    if groups is None:
        if d != manifest.n_full:
            raise ContractError(f"default players need {manifest.n_full} static dims, got {d}")
        groups = manifest.groups()
    if feature_names is None:
        feature_names = manifest.feature_names() if d == manifest.n_full else [f"x{j}" for j in range(d)]
    covered = sorted(j for _, cols in groups for j in cols)
    if covered != list(range(d)):
        raise ContractError("players must partition the static dims")
    n_players = len(groups)
    group_of = np.zeros(d, dtype=np.int64)
    for g, (_, cols) in enumerate(groups):
        group_of[list(cols)] = g

    phi = np.zeros((n, n_players))
    f_x = np.zeros(n)
    f_bg = np.zeros(n)
    steps = np.arange(n_players + 1)
    for i in range(n):
        rng = substream(seed, "shap", i)
        perms = np.argsort(rng.random((n_samples, n_players)), axis=1)
        position = np.argsort(perms, axis=1)  # where each player enters
        # on[k, s, j]: dim j is taken from the patient after s players of permutation k
        on = position[:, None, group_of] < steps[None, :, None]
        z = np.where(on, x[i], bg)
        out = head(np.full(n_samples * (n_players + 1), i), z.reshape(-1, d)).reshape(n_samples, n_players + 1)
        deltas = np.diff(out, axis=1)
        contrib = np.zeros((n_samples, n_players))
        np.put_along_axis(contrib, perms, deltas, axis=1)
        phi[i] = contrib.mean(axis=0)
        f_x[i] = out[0, -1]
        f_bg[i] = out[0, 0]

    return AttributionResult(
        values=_spread_to_dims(phi, x, groups, d),
        group_values=phi,
        feature_names=list(feature_names),
        group_names=[g for g, _ in groups],
        background=bg,
        background_description="continuous dims: training median; one-hot groups: training mode",
        f_x=f_x,
        f_background=f_bg,
        n_samples=n_samples,
        seed=seed,
        patient_ids=list(patient_ids) if patient_ids is not None else [str(i) for i in range(n)],
        static=x,
    )


def rank_features(result: AttributionResult, k: int | None = None) -> list[tuple[str, float]]:
    """(feature, mean |attribution|), largest first, ties broken by name."""
    pairs = sorted(zip(result.feature_names, result.mean_abs.tolist()), key=lambda t: (-t[1], t[0]))
    return pairs if k is None else pairs[:k]
