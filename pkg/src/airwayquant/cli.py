"""Command-line pipeline: phantom -> segment -> eval / quant -> compare.

Every command reads an optional JSON run config (``--config``), applies
``--seed``/``--out``, writes its artifacts and the effective config into the
output directory, and exits with a code that identifies the failure class.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import loss as lossmod
from . import phantom as ph
from . import quant, segment, stats
from .errors import (AirwayQuantError, CohortError, ConfigError, GeometryMismatchError, NiftiError,
                     RegionCodeError, SegmentationError, StatisticsError)
from .metrics import evaluate, read_centerlines_csv, write_centerlines_csv
from .volume_io import BBox, VoxelGrid, embed, ensure_dir, mask_bbox, read_nifti, write_nifti

log = logging.getLogger("airwayquant")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_GEOMETRY = 5
EXIT_STATS = 6
EXIT_SEGMENTATION = 7
EXIT_REGION_CODE = 8

_PHANTOM_DEFAULTS = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(ph.PhantomConfig()).items()}

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "phantom": _PHANTOM_DEFAULTS,
    "segment": {
        "input": "intensity.nii",
        "method": "region-grow",
        "lung_threshold_hu": segment.LUNG_THRESHOLD_HU,
        "fill_holes": True,
        "crop_margin": 2,
        "seed_voxel": None,
        "seed_top_fraction": segment.SEED_TOP_FRACTION,
        "seed_hu": segment.SEED_HU,
        "seed_area_mm2": list(segment.SEED_AREA_MM2),
        "t_start": segment.GROW_START_HU,
        "t_max": segment.GROW_MAX_HU,
        "t_step": segment.GROW_STEP_HU,
        "explosion_ratio": segment.EXPLOSION_RATIO,
        "window": list(segment.DEFAULT_WINDOW),
        "overlap": segment.DEFAULT_OVERLAP,
        "predictor": "constant",
        "predictor_value": 0.7,
        "binarize_threshold": 0.5,
        "workers": 1,
    },
    "eval": {
        "pred": "pred.nii",
        "gt": "airway_gt.nii",
        "centerlines": "centerlines.csv",
        "tolerance_mm": 0.0,
    },
    "quant": {
        "airway": "pred.nii",
        "lung": "lung_mask.nii",
        "regions": "region_labels.nii",
        "lobes": None,
        "subject_id": "subject",
        "group": quant.GROUPS[0],
        "sex": None,
        "age": None,
        "height_cm": None,
        "weight_kg": None,
        "cohort_csv": "cohort.csv",
    },
    "compare": {
        "cohort_csv": None,
        "summary_csv": None,
        "normalized": False,
        "variant": "pooled",
        "figure": True,
    },
    "loss": {
        "alpha": lossmod.DEFAULT_ALPHA,
        "sigma": None,
        "dice_eps": lossmod.DICE_EPS,
        "ce_clamp": lossmod.CE_CLAMP,
        "instances": 20,
        "size": 6,
        "fd_step": 1e-4,
        "tolerance": 1e-5,
        "p": None,
        "g": None,
    },
}


def _merge(base: dict, update: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path=None, seed=None, out=None) -> dict:
    """Defaults overlaid with the JSON file at ``path`` and the CLI overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        cfg = _merge(cfg, user, "")
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["out"] = str(out)
    return cfg


def _echo_config(cfg: dict, out: Path, command: str) -> None:
    with open(out / f"config_{command}.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _input(path, out: Path) -> Path:
    """Inputs resolve as given, falling back to the output directory."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    alt = out / p
    return alt if alt.exists() else p


def _read(path, out: Path) -> VoxelGrid:
    return read_nifti(_input(path, out))


def _write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------- phantom ---

def cmd_phantom(cfg: dict, out: Path) -> dict:
    pcfg = ph.PhantomConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg["phantom"].items()})
    pcfg.seed = cfg["seed"]
    bundle = ph.make_phantom(pcfg)
    write_nifti(bundle.intensity, out / "intensity.nii")
    write_nifti(bundle.airway_gt, out / "airway_gt.nii")
    write_nifti(bundle.lung_mask, out / "lung_mask.nii")
    write_nifti(bundle.region_labels, out / "region_labels.nii")
    write_nifti(bundle.lobe_labels, out / "lobe_labels.nii")
    write_centerlines_csv(bundle.centerlines, out / "centerlines.csv")
    ph.write_branch_table(bundle.branch_table, out / "branches.csv")
    return {"branches": len(bundle.branch_table), "airway_voxels": int(np.count_nonzero(bundle.airway_gt.data))}


# ---------------------------------------------------------------- segment ---

def _crop_box(lung: VoxelGrid, margin: int) -> BBox:
    """Lung bounding box plus ``margin``, extended to the top slice so the
    trachea above the apices stays in view."""
    box = mask_bbox(lung, margin)
    hi = list(box.hi)
    hi[2] = lung.dims[2]
    return BBox(box.lo, tuple(hi))


def _sub(grid: VoxelGrid, box: BBox) -> VoxelGrid:
    origin = tuple(np.asarray(grid.origin) + np.asarray(box.lo) * np.asarray(grid.spacing))
    return VoxelGrid(np.array(grid.data[box.slices]), grid.spacing, origin)


def _largest(mask: np.ndarray) -> np.ndarray:
    labels, sizes = segment.connected_components(mask, 26)
    return labels == 1 if sizes else mask.astype(bool)


def cmd_segment(cfg: dict, out: Path) -> dict:
    s = cfg["segment"]
    img = _read(s["input"], out)
    lung = segment.segment_lung_coarse(img, s["lung_threshold_hu"], s["fill_holes"])
    write_nifti(lung, out / "lung_coarse.nii")
    box = _crop_box(lung, int(s["crop_margin"]))
    crop = _sub(img, box)
    summary = {"crop_lo": list(map(int, box.lo)), "crop_hi": list(map(int, box.hi))}
    if s["method"] == "region-grow":
        if s["seed_voxel"] is not None:
            seed_voxel = tuple(int(v) - int(lo) for v, lo in zip(s["seed_voxel"], box.lo))
        else:
            seed_voxel = segment.find_trachea_seed(crop, s["seed_top_fraction"], s["seed_hu"], tuple(s["seed_area_mm2"]))
        mask, trace = segment.region_grow_airway(crop, seed_voxel, s["t_start"], s["t_max"], s["t_step"],
                                                 s["explosion_ratio"])
        trace.write_csv(out / "growth_trace.csv")
        fg = np.asarray(mask.data, dtype=bool)
        summary.update(threshold_hu=trace.chosen, leakage=trace.leakage,
                       seed_voxel=[int(v) + int(lo) for v, lo in zip(seed_voxel, box.lo)])
    elif s["method"] == "sliding-window":
        if s["predictor"] == "constant":
            predictor = segment.constant_predictor(float(s["predictor_value"]))
        elif s["predictor"] == "threshold":
            predictor = segment.threshold_predictor(float(s["predictor_value"]))
        else:
            raise ConfigError(f"unknown predictor {s['predictor']!r}; use 'constant' or 'threshold'")
        window = tuple(min(int(w), n) for w, n in zip(s["window"], crop.dims))
        if window != tuple(s["window"]):
            log.info("window %s clamped to the %s crop", tuple(s["window"]), crop.dims)
        prob = segment.sliding_window_infer(crop, predictor, window, float(s["overlap"]), workers=int(s["workers"]))
        fg = np.asarray(segment.binarize(prob, s["binarize_threshold"]).data, dtype=bool)
    else:
        raise ConfigError(f"unknown segmentation method {s['method']!r}; use 'region-grow' or 'sliding-window'")
    fg = _largest(fg)
    pred = embed(crop.with_data(fg.astype(np.uint8)), box, img)
    write_nifti(pred, out / "pred.nii")
    summary["airway_voxels"] = int(np.count_nonzero(pred.data))
    return summary


# ------------------------------------------------------------------- eval ---

def cmd_eval(cfg: dict, out: Path) -> dict:
    e = cfg["eval"]
    pred, gt = _read(e["pred"], out), _read(e["gt"], out)
    lines = read_centerlines_csv(_input(e["centerlines"], out))
    report = evaluate(pred, gt, lines, float(e["tolerance_mm"])).to_dict()
    with open(out / "eval.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"dice": report["dice"], "cl_recall": report["cl_recall"]}


# ------------------------------------------------------------------ quant ---

def cmd_quant(cfg: dict, out: Path) -> dict:
    q = cfg["quant"]
    airway, lung, regions = _read(q["airway"], out), _read(q["lung"], out), _read(q["regions"], out)
    lobes = _read(q["lobes"], out) if q["lobes"] else None
    rec, vols = quant.quantify_subject(q["subject_id"], q["group"], airway, lung, regions, lobes,
                                       sex=q["sex"], age=q["age"], height=q["height_cm"], weight=q["weight_kg"])
    if rec.bsa is None:
        log.warning("subject %s has no height/weight; bsa_m2 left empty", rec.id)
    cohort_path = out / q["cohort_csv"] if not Path(q["cohort_csv"]).is_absolute() else Path(q["cohort_csv"])
    quant.write_subjects_csv([rec], cohort_path, append=True)
    quant.write_subjects_csv([rec], out / f"subject_{rec.id}.csv")
    return {"subject": rec.id, "lobar_mode": vols.lobar_mode, "total_segment_mm3": sum(vols.segments.values())}


# ---------------------------------------------------------------- compare ---

SUMMARY_COLUMNS = ("region", "n0", "mean0", "sd0", "n1", "mean1", "sd1")


def read_summary_csv(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SUMMARY_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise CohortError(f"{path}: summary CSV lacks columns {sorted(missing)}")
        for row in reader:
            out[row["region"]] = (
                stats.SummaryStat(int(row["n0"]), float(row["mean0"]), float(row["sd0"])),
                stats.SummaryStat(int(row["n1"]), float(row["mean1"]), float(row["sd1"])),
            )
    return out


def tvalue_figure(rows, path: Path) -> None:
    """Bar chart of signed t values, significant regions filled."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [r.region for r in rows]
    t = [r.result.statistic for r in rows]
    colors = ["#b2182b" if r.significant else "#bbbbbb" for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(rows) + 1.5), 3.2))
    ax.bar(range(len(rows)), t, color=colors, edgecolor="black", linewidth=0.5)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=8)
    ax.set_ylabel(f"t ({quant.GROUPS[1]} - {quant.GROUPS[0]})")
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def cmd_compare(cfg: dict, out: Path) -> dict:
    c = cfg["compare"]
    variant = c["variant"]
    if bool(c["cohort_csv"]) == bool(c["summary_csv"]):
        raise ConfigError("compare needs exactly one of compare.cohort_csv or compare.summary_csv")
    if c["summary_csv"]:
        summaries = read_summary_csv(_input(c["summary_csv"], out))
        unknown = [r for r in summaries if r not in quant.LABEL_OF]
        if unknown:
            raise RegionCodeError(f"summary CSV has unknown regions {unknown}")
        rows = stats.compare_summaries(summaries, variant)
    else:
        cohort = quant.build_cohort(quant.read_subjects_csv(_input(c["cohort_csv"], out)))
        regions = [r for r in quant.REGIONS
                   if any(r in rec.volumes for rec in cohort.records)]
        rows = stats.group_compare(cohort, regions, bool(c["normalized"]), variant)
        _write_rows(out / "demographics.csv", ("variable", "group0", "group1", "p", "p_formatted", "method"),
                    stats.demographics(cohort))
    lobar = [r for r in rows if r.region in quant.LOBES]
    segmental = [r for r in rows if r.region in quant.SEGMENTS]
    for name, part in (("lobar", lobar), ("segmental", segmental)):
        if part:
            _write_rows(out / f"{name}.csv", stats.REPORT_COLUMNS, stats.report_rows(part))
            _write_rows(out / f"{name}_table.csv", stats.TABLE_COLUMNS, stats.table_rows(part))
    _write_rows(out / "tvalues.csv", stats.TVALUE_COLUMNS, stats.tvalue_rows(rows))
    if c["figure"] and rows:
        tvalue_figure(rows, out / "tvalues.png")
    return {"regions": len(rows), "significant": [r.region for r in rows if r.significant]}


# ------------------------------------------------------------- loss-check ---

def cmd_loss_check(cfg: dict, out: Path) -> dict:
    """Analytic vs central-difference gradients on random small volumes."""
    L = cfg["loss"]
    rng = np.random.default_rng(cfg["seed"])
    n = int(L["size"])
    worst = {"dice": 0.0, "ce": 0.0, "hybrid": 0.0}
    for _ in range(int(L["instances"])):
        g = (rng.random((n, n, n)) < 0.4).astype(np.float64)
        w = np.asarray(lossmod.boundary_weights(VoxelGrid(g.astype(np.uint8), (1.0, 1.0, 1.0)),
                                                L["alpha"], L["sigma"]).data, dtype=np.float64)
        p = rng.uniform(0.05, 0.95, size=(n, n, n))
        fns = {
            "dice": lambda q: lossmod.weighted_dice_loss(q, g, w, L["dice_eps"]),
            "ce": lambda q: lossmod.weighted_ce_loss(q, g, w, L["ce_clamp"]),
            "hybrid": lambda q: lossmod.hybrid_loss(q, g, w, L["dice_eps"], L["ce_clamp"]),
        }
        for name, fn in fns.items():
            res = fn(p)
            value = (lambda q, fn=fn: fn(q).total) if name == "hybrid" else (lambda q, fn=fn: fn(q).value)
            num = lossmod.finite_difference_gradient(value, p, L["fd_step"])
            worst[name] = max(worst[name], lossmod.gradient_relative_error(res.gradient, num))
    result = {"max_relative_error": worst, "pass": all(v < L["tolerance"] for v in worst.values())}
    if L["p"] and L["g"]:
        pg, gg = _read(L["p"], out), _read(L["g"], out)
        w = lossmod.boundary_weights(gg, L["alpha"], L["sigma"])
        val = lossmod.hybrid_loss(pg, gg, w, L["dice_eps"], L["ce_clamp"])
        write_nifti(pg.with_data(val.gradient.astype(np.float32)), out / "loss_gradient.nii")
        result["loss"] = {"total": val.total, "dice": val.dice_term, "ce": val.ce_term}
    with open(out / "loss_check.json", "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result


COMMANDS = {
    "phantom": cmd_phantom,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "quant": cmd_quant,
    "compare": cmd_compare,
    "loss-check": cmd_loss_check,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (OSError, NiftiError)):
        return EXIT_IO
    if isinstance(exc, GeometryMismatchError):
        return EXIT_GEOMETRY
    if isinstance(exc, RegionCodeError):
        return EXIT_REGION_CODE
    if isinstance(exc, (StatisticsError, CohortError)):
        return EXIT_STATS
    if isinstance(exc, SegmentationError):
        return EXIT_SEGMENTATION
    return EXIT_OTHER


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="airwayquant", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run config; omitted keys take defaults")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory (default: config 'out')")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        out = ensure_dir(cfg["out"])
        _echo_config(cfg, out, args.command)
        summary = COMMANDS[args.command](cfg, out)
    except (AirwayQuantError, OSError, ValueError) as exc:
        code = exit_code(exc) if not isinstance(exc, ValueError) else EXIT_CONFIG
        print(f"airwayquant {args.command}: error: {exc}", file=sys.stderr)
        return code
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
