"""Patient record schema and the line-delimited JSON cohort file."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from vismae.errors import ValidationError

N_HOURS = 48
AGENTS = ("dopamine", "dobutamine", "epinephrine", "milrinone", "vasopressin", "norepinephrine")
VIS_COLUMNS = AGENTS + ("total_vis",)
SCORES = ("sofa_score_24h", "sapsii", "lods", "oasis")
CATEGORICALS = ("gender", "marital_status", "insurance", "race")

GENDER_CATEGORIES = ("F", "M")
MARITAL_CATEGORIES = ("MARRIED", "SINGLE", "DIVORCED", "WIDOWED", "UNKNOWN")
INSURANCE_CATEGORIES = ("Medicare", "Medicaid", "Private", "Other", "Unknown")
# MIMIC-IV admissions.race values, plus "Unknown" for values absent from the record
RACE_CATEGORIES = (
    "AMERICAN INDIAN/ALASKA NATIVE",
    "ASIAN",
    "ASIAN - ASIAN INDIAN",
    "ASIAN - CHINESE",
    "ASIAN - KOREAN",
    "ASIAN - SOUTH EAST ASIAN",
    "BLACK/AFRICAN",
    "BLACK/AFRICAN AMERICAN",
    "BLACK/CAPE VERDEAN",
    "BLACK/CARIBBEAN ISLAND",
    "HISPANIC OR LATINO",
    "HISPANIC/LATINO - CENTRAL AMERICAN",
    "HISPANIC/LATINO - COLUMBIAN",
    "HISPANIC/LATINO - CUBAN",
    "HISPANIC/LATINO - DOMINICAN",
    "HISPANIC/LATINO - GUATEMALAN",
    "HISPANIC/LATINO - HONDURAN",
    "HISPANIC/LATINO - MEXICAN",
    "HISPANIC/LATINO - PUERTO RICAN",
    "HISPANIC/LATINO - SALVADORAN",
    "MULTIPLE RACE/ETHNICITY",
    "NATIVE HAWAIIAN OR OTHER PACIFIC ISLANDER",
    "OTHER",
    "PATIENT DECLINED TO ANSWER",
    "PORTUGUESE",
    "SOUTH AMERICAN",
    "UNABLE TO OBTAIN",
    "UNKNOWN",
    "WHITE",
    "WHITE - BRAZILIAN",
    "WHITE - EASTERN EUROPEAN",
    "WHITE - OTHER EUROPEAN",
    "WHITE - RUSSIAN",
    "Unknown",
)

AGE_RANGE = (18.0, 120.0)


@dataclass
class PatientRecord:
    """One ICU stay. ``doses`` is (48, 6) in ``AGENTS`` order with NaN for null."""

    patient_id: str
    doses: np.ndarray
    gender: str | None
    admission_age: float | None
    marital_status: str | None
    insurance: str | None
    race: str | None
    sofa_score_24h: float | None
    sapsii: float | None
    lods: float | None
    oasis: float | None
    mortality: int

    def scores(self) -> list[float | None]:
        return [getattr(self, s) for s in SCORES]

    def copy(self, **changes) -> PatientRecord:
        changes.setdefault("doses", self.doses.copy())
        return replace(self, **changes)

    def validate(self) -> PatientRecord:
        pid = self.patient_id
        if self.doses.shape != (N_HOURS, len(AGENTS)):
            raise ValidationError(f"{pid}: expected {N_HOURS}x{len(AGENTS)} doses, got {self.doses.shape}")
        present = self.doses[~np.isnan(self.doses)]
        if not np.isfinite(present).all() or (present < 0).any():
            raise ValidationError(f"{pid}: doses must be finite and non-negative")
        for name in SCORES:
            v = getattr(self, name)
            if v is not None and (not math.isfinite(v) or v < 0):
                raise ValidationError(f"{pid}: {name}={v} must be a non-negative number")
        age = self.admission_age
        if age is not None and not (AGE_RANGE[0] <= age <= AGE_RANGE[1]):
            raise ValidationError(f"{pid}: admission_age={age} outside {AGE_RANGE}")
        if self.mortality not in (0, 1):
            raise ValidationError(f"{pid}: mortality must be 0 or 1, got {self.mortality!r}")
        for name in CATEGORICALS:
            v = getattr(self, name)
            if v is not None and not isinstance(v, str):
                raise ValidationError(f"{pid}: {name} must be a string or null")
        return self

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        doses = {
            agent: [None if math.isnan(v) else float(v) for v in self.doses[:, k]]
            for k, agent in enumerate(AGENTS)
        }
        return {
            "patient_id": self.patient_id,
            "doses": doses,
            "gender": self.gender,
            "admission_age": self.admission_age,
            "marital_status": self.marital_status,
            "insurance": self.insurance,
            "race": self.race,
            "sofa_score_24h": self.sofa_score_24h,
            "sapsii": self.sapsii,
            "lods": self.lods,
            "oasis": self.oasis,
            "mortality": self.mortality,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PatientRecord:
        try:
            raw = d["doses"]
            cols = [[np.nan if v is None else float(v) for v in raw[agent]] for agent in AGENTS]
            if any(len(c) != N_HOURS for c in cols):
                raise ValidationError(f"{d.get('patient_id')}: each agent needs {N_HOURS} hourly values")
            rec = cls(
                patient_id=str(d["patient_id"]),
                doses=np.array(cols, dtype=np.float64).T.copy(),
                gender=d["gender"],
                admission_age=_opt_float(d["admission_age"]),
                marital_status=d["marital_status"],
                insurance=d["insurance"],
                race=d["race"],
                sofa_score_24h=_opt_float(d["sofa_score_24h"]),
                sapsii=_opt_float(d["sapsii"]),
                lods=_opt_float(d["lods"]),
                oasis=_opt_float(d["oasis"]),
                mortality=d["mortality"],
            )
        except KeyError as exc:
            raise ValidationError(f"record {d.get('patient_id', '?')} is missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"record {d.get('patient_id', '?')}: {exc}") from None
        return rec.validate()


def _opt_float(v) -> float | None:
    return None if v is None else float(v)


def write_cohort(records: Iterable[PatientRecord], path: str | Path) -> Path:
    """Write one JSON object per line; the write is atomic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), separators=(",", ":")))
            fh.write("\n")
    tmp.replace(path)
    return path


def read_cohort(path: str | Path) -> list[PatientRecord]:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            try:
                records.append(PatientRecord.from_dict(obj))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return records
