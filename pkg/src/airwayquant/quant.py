"""Regional airway volumetrics: lobes and bronchopulmonary segments, hilum
exclusion, BSA normalisation, and the subject/cohort tables behind them.

Label maps use integer codes: 0 is unassigned (including the hilum),
1-18 are the segments in :data:`SEGMENTS` order and 19-23 the lobes.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import CohortError, GeometryMismatchError, RegionCodeError
from .volume_io import VoxelGrid, require_same_geometry

log = logging.getLogger(__name__)

SEGMENTS = (
    "R1", "R2", "R3", "R4", "R5", "R6", "R7", "R8", "R9", "R10",
    "L1-2", "L3", "L4", "L5", "L6", "L7-8", "L9", "L10",
)
LOBES = ("RUL", "RML", "RLL", "LUL", "LLL")
REGIONS = SEGMENTS + LOBES

LOBE_SEGMENTS = {
    "RUL": ("R1", "R2", "R3"),
    "RML": ("R4", "R5"),
    "RLL": ("R6", "R7", "R8", "R9", "R10"),
    "LUL": ("L1-2", "L3", "L4", "L5"),
    "LLL": ("L6", "L7-8", "L9", "L10"),
}
LOBE_OF = {seg: lobe for lobe, segs in LOBE_SEGMENTS.items() for seg in segs}

RIGHT_SEGMENTS = SEGMENTS[:10]
LEFT_SEGMENTS = SEGMENTS[10:]

HILUM = 0
LABEL_OF = {name: i + 1 for i, name in enumerate(REGIONS)}
NAME_OF = {i: name for name, i in LABEL_OF.items()}
MAX_LABEL = len(REGIONS)

GROUPS = ("SLE-non-ILD", "SLE-ILD")


def label_code(name: str) -> int:
    try:
        return LABEL_OF[name]
    except KeyError:
        raise RegionCodeError(f"unknown region code {name!r}") from None


def lobe_label_map(segment_labels: np.ndarray) -> np.ndarray:
    """Map segment labels (1-18) onto lobe labels (19-23); everything else to 0."""
    lut = np.zeros(MAX_LABEL + 1, dtype=np.uint8)
    for seg, lobe in LOBE_OF.items():
        lut[LABEL_OF[seg]] = LABEL_OF[lobe]
    for lobe in LOBES:
        lut[LABEL_OF[lobe]] = LABEL_OF[lobe]
    return lut[np.asarray(segment_labels)]


# ---------------------------------------------------------------- volumes ---

def restrict_to_lung(airway: VoxelGrid, lung: VoxelGrid) -> VoxelGrid:
    """Voxelwise AND; removes airway outside the (hilum-free) lung mask."""
    require_same_geometry(airway, lung)
    out = np.logical_and(airway.data, lung.data).astype(np.uint8)
    return airway.with_data(out)


@dataclass
class RegionalVolumes:
    segments: dict[str, float]
    lobes: dict[str, float]
    lobar_mode: str  # "direct" or "segment-sum"

    def as_row(self) -> dict[str, float]:
        return {**self.segments, **self.lobes}


def _check_labels(labels: np.ndarray, allowed: set[int]) -> None:
    present = set(np.unique(labels).tolist())
    bad = sorted(present - allowed)
    if bad:
        raise RegionCodeError(f"label map contains codes outside the enumeration: {bad}")


def regional_volumes(airway: VoxelGrid, regions: VoxelGrid, lobes: VoxelGrid | None = None) -> RegionalVolumes:
    """Airway volume (mm^3) per segment and per lobe.

    ``regions`` carries segment codes (or 0). Lobar volumes come from ``lobes``
    when a lobar label map is given ("direct"), otherwise as sums of member
    segments ("segment-sum").
    """
    require_same_geometry(airway, regions)
    seg_codes = {0} | {LABEL_OF[s] for s in SEGMENTS}
    labels = np.asarray(regions.data).astype(np.int64)
    _check_labels(labels, seg_codes)
    fg = np.asarray(airway.data, dtype=bool)
    counts = np.bincount(labels[fg], minlength=MAX_LABEL + 1)
    vv = airway.voxel_volume
    segments = {s: float(counts[LABEL_OF[s]]) * vv for s in SEGMENTS}
    if lobes is not None:
        require_same_geometry(airway, lobes)
        lob = np.asarray(lobes.data).astype(np.int64)
        _check_labels(lob, {0} | {LABEL_OF[l] for l in LOBES})
        lcounts = np.bincount(lob[fg], minlength=MAX_LABEL + 1)
        lobe_vols = {l: float(lcounts[LABEL_OF[l]]) * vv for l in LOBES}
        mode = "direct"
    else:
        lobe_vols = {l: sum(segments[s] for s in LOBE_SEGMENTS[l]) for l in LOBES}
        mode = "segment-sum"
    return RegionalVolumes(segments, lobe_vols, mode)


# -------------------------------------------------------------------- BSA ---

def bsa_dubois(weight_kg: float, height_cm: float) -> float:
    """DuBois body surface area in m^2."""
    if not (weight_kg > 0 and height_cm > 0):
        raise ValueError(f"BSA needs positive weight and height, got {weight_kg} kg, {height_cm} cm")
    return weight_kg ** 0.425 * height_cm ** 0.725 * 0.007184


def normalize_by_bsa(volume: float, bsa: float) -> float:
    if not bsa > 0:
        raise ValueError(f"BSA must be positive, got {bsa}")
    return volume / bsa


# ----------------------------------------------------------------- cohort ---

@dataclass
class SubjectRecord:
    id: str
    group: str
    sex: Optional[str] = None
    age: Optional[float] = None
    height: Optional[float] = None
    weight: Optional[float] = None
    volumes: dict[str, float] = field(default_factory=dict)

    @property
    def bsa(self) -> Optional[float]:
        if self.height and self.weight:
            return bsa_dubois(self.weight, self.height)
        return None

    def normalized_volumes(self) -> Optional[dict[str, float]]:
        b = self.bsa
        if b is None:
            return None
        return {k: normalize_by_bsa(v, b) for k, v in self.volumes.items()}


@dataclass
class CohortTable:
    records: list[SubjectRecord]
    missing: dict[str, list[str]] = field(default_factory=dict)

    @property
    def group_sizes(self) -> dict[str, int]:
        sizes = {g: 0 for g in GROUPS}
        for r in self.records:
            sizes[r.group] += 1
        return sizes

    def by_group(self, group: str) -> list[SubjectRecord]:
        return [r for r in self.records if r.group == group]

    def values(self, group: str, region: str, normalized: bool = False) -> list[float]:
        out = []
        for r in self.by_group(group):
            vols = r.normalized_volumes() if normalized else r.volumes
            if vols is None:
                continue
            if region in vols and vols[region] is not None and not math.isnan(vols[region]):
                out.append(vols[region])
        return out


def build_cohort(records: Iterable[SubjectRecord]) -> CohortTable:
    records = list(records)
    seen: set[str] = set()
    missing: dict[str, list[str]] = {}
    for r in records:
        if r.id in seen:
            raise CohortError(f"duplicate subject id {r.id!r}")
        seen.add(r.id)
        if r.group not in GROUPS:
            raise CohortError(f"subject {r.id!r}: unknown group {r.group!r}; expected one of {GROUPS}")
        for name in ("sex", "age", "height", "weight"):
            if getattr(r, name) is None:
                missing.setdefault(name, []).append(r.id)
        for k, v in r.volumes.items():
            if k not in LABEL_OF:
                raise RegionCodeError(f"subject {r.id!r}: unknown region {k!r}")
            if v is not None and v < 0:
                raise CohortError(f"subject {r.id!r}: negative volume for {k}")
    if missing.get("height") or missing.get("weight"):
        ids = sorted(set(missing.get("height", [])) | set(missing.get("weight", [])))
        log.warning("%d subject(s) lack height/weight and are excluded from BSA-normalised analysis: %s",
                    len(ids), ", ".join(ids))
    return CohortTable(records, missing)


# -------------------------------------------------------------- CSV schema ---

SUBJECT_FIELDS = ("id", "group", "sex", "age", "height_cm", "weight_kg")


def volume_column(region: str) -> str:
    return f"vol_{region}_mm3"


SUBJECT_COLUMNS = SUBJECT_FIELDS + tuple(volume_column(r) for r in REGIONS) + ("bsa_m2",)


def _opt_float(s: str | None) -> Optional[float]:
    if s is None or s.strip() == "":
        return None
    return float(s)


def record_to_row(rec: SubjectRecord) -> dict[str, str]:
    def fmt(v):
        return "" if v is None else repr(float(v))

    row = {
        "id": rec.id, "group": rec.group, "sex": rec.sex or "",
        "age": fmt(rec.age), "height_cm": fmt(rec.height), "weight_kg": fmt(rec.weight),
    }
    for r in REGIONS:
        row[volume_column(r)] = fmt(rec.volumes.get(r))
    row["bsa_m2"] = fmt(rec.bsa)
    return row


def write_subjects_csv(records: Iterable[SubjectRecord], path, append: bool = False) -> None:
    path = Path(path)
    new_file = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUBJECT_COLUMNS)
        if new_file:
            w.writeheader()
        for rec in records:
            w.writerow(record_to_row(rec))


def read_subjects_csv(path) -> list[SubjectRecord]:
    out = []
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        for required in ("id", "group"):
            if required not in cols:
                raise CohortError(f"{path}: subject CSV lacks column {required!r}")
        for row in reader:
            vols = {}
            for r in REGIONS:
                v = _opt_float(row.get(volume_column(r)))
                if v is not None:
                    vols[r] = v
            out.append(SubjectRecord(
                id=row["id"], group=row["group"], sex=(row.get("sex") or None),
                age=_opt_float(row.get("age")), height=_opt_float(row.get("height_cm")),
                weight=_opt_float(row.get("weight_kg")), volumes=vols,
            ))
    return out


def quantify_subject(subject_id: str, group: str, airway: VoxelGrid, lung: VoxelGrid, regions: VoxelGrid,
                     lobes: VoxelGrid | None = None, **covariates) -> tuple[SubjectRecord, RegionalVolumes]:
    """Hilum-excluded regional volumes for one subject as a cohort record."""
    if airway.dims != regions.dims:
        raise GeometryMismatchError(f"airway dims {airway.dims} vs label dims {regions.dims}")
    restricted = restrict_to_lung(airway, lung)
    vols = regional_volumes(restricted, regions, lobes)
    rec = SubjectRecord(id=subject_id, group=group, volumes=vols.as_row(), **covariates)
    return rec, vols
