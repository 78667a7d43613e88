"""Synthetic sepsis cohorts with the same schema as the real extraction.

Each patient has two latent factors: organ-dysfunction severity, which drives
the severity scores, vasopressor intensity and part of the risk; and a
hemodynamic trend (worsening vs. recovering), which is visible only in how
doses evolve over the 48 hours. Mortality is Bernoulli with a logistic link
on those latents plus small socio-demographic effects, scaled by
``signal_strength``. With ``signal_strength=0`` the label is independent of
every feature.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from vismae.data.schema import AGENTS, N_HOURS, RACE_CATEGORIES, PatientRecord
from vismae.errors import ContractError
from vismae.rng import substream

DEFAULT_POSITIVE_RATE = 0.22

# logit contributions at signal_strength = 1
SEVERITY_EFFECT = 6.0
TREND_EFFECT = 3.0
SOCIAL_EFFECTS = {
    ("marital_status", "SINGLE"): 0.5,
    ("insurance", "Medicaid"): 0.4,
}
AGE_EFFECT_PER_DECADE = 0.15

_MARITAL_P = {"MARRIED": 0.44, "SINGLE": 0.27, "DIVORCED": 0.09, "WIDOWED": 0.14, "UNKNOWN": 0.06}
_INSURANCE_P = {"Medicare": 0.52, "Medicaid": 0.13, "Private": 0.2, "Other": 0.15}
_RACE_MAIN = {
    "WHITE": 0.60,
    "BLACK/AFRICAN AMERICAN": 0.10,
    "UNKNOWN": 0.06,
    "OTHER": 0.04,
    "HISPANIC/LATINO - PUERTO RICAN": 0.02,
    "ASIAN": 0.02,
    "WHITE - OTHER EUROPEAN": 0.02,
    "UNABLE TO OBTAIN": 0.015,
}

# per agent: (baseline logit of use, severity slope, typical dose scale)
_AGENT_PARAMS = {
    "dopamine": (-2.5, 0.5, 5.0),
    "dobutamine": (-2.8, 0.6, 4.0),
    "epinephrine": (-2.2, 0.9, 0.05),
    "milrinone": (-3.5, 0.5, 0.4),
    "vasopressin": (-1.4, 1.0, 0.0015),
    "norepinephrine": (2.5, 0.8, 0.12),
}


def _race_probs() -> tuple[list[str], np.ndarray]:
    recorded = [c for c in RACE_CATEGORIES if c != "Unknown"]
    rest = [c for c in recorded if c not in _RACE_MAIN]
    leftover = 1.0 - sum(_RACE_MAIN.values())
    probs = [(_RACE_MAIN[c] if c in _RACE_MAIN else leftover / len(rest)) for c in recorded]
    return recorded, np.array(probs)


def _choice(rng: np.random.Generator, table: dict[str, float] | tuple[list[str], np.ndarray], n: int) -> list[str]:
    if isinstance(table, dict):
        names, p = list(table), np.array(list(table.values()))
    else:
        names, p = table
    p = p / p.sum()
    return [names[i] for i in rng.choice(len(names), size=n, p=p)]


def _dose_trajectories(rng: np.random.Generator, severity: np.ndarray, trend: np.ndarray) -> np.ndarray:
    """(N, 48, 6) non-negative hourly doses."""
    n = severity.shape[0]
    hours = np.arange(N_HOURS)
    doses = np.zeros((n, N_HOURS, len(AGENTS)))
    # worsening patients escalate over time, recovering ones are weaned
    drift = (hours[None, :] - N_HOURS / 2) / (N_HOURS / 2) * (0.9 * trend[:, None])
    for k, agent in enumerate(AGENTS):
        base_logit, slope, scale = _AGENT_PARAMS[agent]
        on = rng.random(n) < expit(base_logit + slope * severity)
        start = rng.integers(0, 12, size=n)
        duration = rng.integers(12, N_HOURS + 1, size=n)
        level = scale * np.exp(0.45 * severity + rng.normal(0.0, 0.35, size=n))
        noise = rng.normal(0.0, 0.15, size=(n, N_HOURS))
        active = (hours[None, :] >= start[:, None]) & (hours[None, :] < (start + duration)[:, None]) & on[:, None]
        doses[:, :, k] = np.where(active, level[:, None] * np.exp(drift + noise), 0.0)
    return np.round(doses, 6)


def _calibrate_intercept(linear_part: np.ndarray, rate: float) -> float:
    """Intercept making the cohort's mean risk equal ``rate``."""
    return brentq(lambda b: expit(b + linear_part).mean() - rate, -50.0, 50.0, xtol=1e-12)


def generate_synthetic_cohort(
    n_patients: int,
    signal_strength: float = 1.0,
    missingness_rate: float = 0.05,
    seed: int = 0,
    positive_rate: float = DEFAULT_POSITIVE_RATE,
) -> list[PatientRecord]:
    """Draw a schema-valid cohort; identical arguments give identical records."""
    if n_patients < 20:
        raise ContractError(f"n_patients must be >= 20, got {n_patients}")
    if not 0.0 <= missingness_rate <= 1.0:
        raise ContractError(f"missingness_rate must be in [0, 1], got {missingness_rate}")
    if not 0.0 < positive_rate < 1.0:
        raise ContractError(f"positive_rate must be in (0, 1), got {positive_rate}")
    if signal_strength < 0:
        raise ContractError(f"signal_strength must be >= 0, got {signal_strength}")

    rng = substream(seed, "data")
    n = n_patients
    severity = rng.normal(size=n)
    trend = rng.normal(size=n)

    age = np.clip(np.round(rng.normal(64.0 + 3.0 * severity, 15.0), 1), 18.0, 100.0)
    gender = _choice(rng, {"F": 0.43, "M": 0.57}, n)
    marital = _choice(rng, _MARITAL_P, n)
    insurance = _choice(rng, _INSURANCE_P, n)
    race = _choice(rng, _race_probs(), n)

    sofa = np.clip(np.round(7.0 + 3.0 * severity + rng.normal(0, 0.9, n)), 0, 24)
    sapsii = np.clip(np.round(42.0 + 12.0 * severity + rng.normal(0, 4.0, n)), 0, 163)
    lods = np.clip(np.round(5.0 + 2.5 * severity + rng.normal(0, 0.9, n)), 0, 22)
    oasis = np.clip(np.round(36.0 + 7.0 * severity + rng.normal(0, 2.5, n)), 0, 75)

    doses = _dose_trajectories(rng, severity, trend)

    social = np.zeros(n)
    for (fieldname, value), effect in SOCIAL_EFFECTS.items():
        col = marital if fieldname == "marital_status" else insurance
        social += effect * np.array([c == value for c in col], dtype=float)
    linear_part = signal_strength * (
        SEVERITY_EFFECT * severity
        + TREND_EFFECT * trend
        + social
        + AGE_EFFECT_PER_DECADE * (age - 64.0) / 10.0
    )
    intercept = _calibrate_intercept(linear_part, positive_rate)
    mortality = (rng.random(n) < expit(intercept + linear_part)).astype(int)

    def maybe_null(values):
        drop = rng.random(n) < missingness_rate
        return [None if d else v for v, d in zip(values, drop)]

    if missingness_rate > 0:
        doses = np.where(rng.random(doses.shape) < missingness_rate, np.nan, doses)
    age_l = maybe_null([float(a) for a in age])
    gender_l = maybe_null(gender)
    marital_l = maybe_null(marital)
    insurance_l = maybe_null(insurance)
    race_l = maybe_null(race)
    sofa_l, sapsii_l, lods_l, oasis_l = (maybe_null([float(v) for v in s]) for s in (sofa, sapsii, lods, oasis))

    width = len(str(n - 1))
    return [
        PatientRecord(
            patient_id=f"P{i:0{width}d}",
            doses=doses[i],
            gender=gender_l[i],
            admission_age=age_l[i],
            marital_status=marital_l[i],
            insurance=insurance_l[i],
            race=race_l[i],
            sofa_score_24h=sofa_l[i],
            sapsii=sapsii_l[i],
            lods=lods_l[i],
            oasis=oasis_l[i],
            mortality=int(mortality[i]),
        ).validate()
        for i in range(n)
    ]
