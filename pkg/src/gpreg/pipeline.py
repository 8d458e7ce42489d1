"""End-to-end runners: phantom synthesis, registration, evaluation, and
the scalarization-vs-projection sweep.  The command-line tool and the HTTP
service are both thin clients of these functions.

Every runner writes its outputs plus a manifest recording the command,
configuration, seed, input paths, and output file names (relative to the
output directory), so a run can be reproduced exactly.
"""

import csv
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import NonFiniteLossError, PreconditionError
from .fileio import (_fmt, read_label_map, read_landmarks, read_manifest,
                     read_report_json, read_step_logs_csv, read_volume,
                     write_label_map, write_landmarks, write_manifest,
                     write_report_json, write_step_logs_csv, write_volume)
from .grids import DisplacementField, Volume
from .metrics import MetricsReport, dice, hd95_mean, ndv, tre, warp_labels
from .optim import (MODE_GRADIENT_PROJECTION, MODE_SCALARIZATION, MODES,
                    GpConfig, conflict_rate, instance_optimize)
from .phantoms import PhantomPair, make_phantom

MODE_ALIASES = {
    "scalar": MODE_SCALARIZATION,
    "gp": MODE_GRADIENT_PROJECTION,
    MODE_SCALARIZATION: MODE_SCALARIZATION,
    MODE_GRADIENT_PROJECTION: MODE_GRADIENT_PROJECTION,
}

SUMMARY_COLUMNS = [
    "pair", "mode", "seed", "dice_unreg", "dice_mean", "hd95_mm",
    "ndv_fraction", "tre_mean_mm", "conflict_rate", "sim_fwd", "sim_bwd",
    "reg", "total",
]
SUMMARY_STD_COLUMNS = ["dice_mean_std", "hd95_mm_std", "ndv_fraction_std",
                       "tre_mean_mm_std", "conflict_rate_std", "total_std"]
AGGREGATE_PAIR = "aggregate"


def resolve_mode(name: str) -> str:
    if name not in MODE_ALIASES:
        raise PreconditionError(
            f"mode must be one of {sorted(set(MODE_ALIASES))}, got {name!r}")
    return MODE_ALIASES[name]


def run_synth(out_dir, seed: int = 0, dims=(48, 48, 48), n_blobs: int = 5,
              max_disp: float = 4.0) -> tuple[PhantomPair, dict]:
    """Generate a phantom pair and write all its files into out_dir."""
    t0 = time.perf_counter()
    pair = make_phantom(seed, dims, n_blobs, max_disp)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(out / "fixed", pair.fixed)
    write_volume(out / "moving", pair.moving)
    write_label_map(out / "fixed_labels", pair.fixed_labels)
    write_label_map(out / "moving_labels", pair.moving_labels)
    write_volume(out / "gt_field", pair.gt_field)
    write_landmarks(out / "landmarks.json", pair.fixed_landmarks,
                    pair.moving_landmarks)
    outputs = ["fixed.json", "fixed.raw", "moving.json", "moving.raw",
               "fixed_labels.json", "fixed_labels.raw", "moving_labels.json",
               "moving_labels.raw", "gt_field.json", "gt_field.raw",
               "landmarks.json"]
    config = {"dims": [int(d) for d in dims], "n_blobs": int(n_blobs),
              "max_disp": float(max_disp)}
    manifest = write_manifest(out / "manifest.json", "synth", seed, config,
                              inputs={}, outputs=outputs,
                              wall_time_seconds=time.perf_counter() - t0)
    return pair, manifest


def run_register(fixed_path, moving_path, out_dir, cfg: GpConfig
                 ) -> tuple[DisplacementField, DisplacementField, list, dict]:
    """Register moving onto fixed from zero initial fields; write the final
    fields, the per-step CSV, and a manifest.

    On a non-finite loss the partial step log is still written before the
    error propagates.
    """
    t0 = time.perf_counter()
    fixed = read_volume(fixed_path)
    moving = read_volume(moving_path)
    if not isinstance(fixed, Volume) or not isinstance(moving, Volume):
        raise PreconditionError("register expects single-component volumes")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    init_mov = DisplacementField.zeros(fixed.dims, fixed.spacing)
    init_fix = DisplacementField.zeros(fixed.dims, fixed.spacing)
    try:
        u_mov, u_fix, logs = instance_optimize(moving, fixed, init_mov,
                                               init_fix, cfg)
    except NonFiniteLossError as e:
        if e.logs:
            write_step_logs_csv(out / "steps.csv", e.logs)
        raise
    write_volume(out / "u_mov", u_mov)
    write_volume(out / "u_fix", u_fix)
    write_step_logs_csv(out / "steps.csv", logs)
    outputs = ["u_mov.json", "u_mov.raw", "u_fix.json", "u_fix.raw", "steps.csv"]
    manifest = write_manifest(out / "manifest.json", "register", cfg.seed,
                              asdict(cfg),
                              inputs={"fixed": str(fixed_path),
                                      "moving": str(moving_path)},
                              outputs=outputs,
                              wall_time_seconds=time.perf_counter() - t0)
    return u_mov, u_fix, logs, manifest


def _eval_manifest_path(out_path: Path) -> Path:
    name = out_path.name
    if name.endswith(".json"):
        name = name[: -len(".json")]
    return out_path.with_name(f"{name}.manifest.json")


def run_eval(pair_dir, fields_dir, out_path) -> tuple[MetricsReport, dict]:
    """Evaluate a field directory against a phantom pair directory.

    Uses u_mov when present, falling back to gt_field (so the ground truth
    can be scored by pointing fields_dir at the pair directory).  Label and
    landmark metrics are null when those inputs are absent.
    """
    t0 = time.perf_counter()
    pair = Path(pair_dir)
    fields = Path(fields_dir)
    out_path = Path(out_path)
    if (fields / "u_mov.json").is_file():
        field_base = fields / "u_mov"
    elif (fields / "gt_field.json").is_file():
        field_base = fields / "gt_field"
    else:
        raise PreconditionError(f"no u_mov or gt_field found in {fields}")
    u_mov = read_volume(field_base)
    if not isinstance(u_mov, DisplacementField):
        raise PreconditionError(f"{field_base} is not a displacement field")

    dice_per_label = None
    dice_mean = None
    hd95_value = None
    if (pair / "fixed_labels.json").is_file() and (pair / "moving_labels.json").is_file():
        fixed_labels = read_label_map(pair / "fixed_labels")
        moving_labels = read_label_map(pair / "moving_labels")
        if fixed_labels.dims != u_mov.dims or moving_labels.dims != u_mov.dims:
            raise PreconditionError(
                f"label dims {fixed_labels.dims} do not match field dims {u_mov.dims}")
        warped = warp_labels(moving_labels, u_mov)
        dice_per_label, dice_mean = dice(warped, fixed_labels)
        hd95_value = hd95_mean(warped, fixed_labels, u_mov.spacing)

    tre_mean = None
    tre_std = None
    if (pair / "landmarks.json").is_file():
        fixed_lms, moving_lms = read_landmarks(pair / "landmarks.json")
        tre_mean, tre_std, _ = tre(fixed_lms, moving_lms, u_mov, u_mov.spacing)

    report = MetricsReport(
        dice_per_label=dice_per_label,
        dice_mean=dice_mean,
        hd95_mm=hd95_value,
        ndv_fraction=ndv(u_mov),
        tre_mean_mm=tre_mean,
        tre_std_mm=tre_std,
    )
    rate = None
    if (fields / "steps.csv").is_file():
        rate = conflict_rate(read_step_logs_csv(fields / "steps.csv"))
    config = None
    seed = None
    if (fields / "manifest.json").is_file():
        producer = read_manifest(fields / "manifest.json")
        config = producer.get("config")
        seed = producer.get("seed")
    write_report_json(out_path, report, config, rate, seed)
    write_manifest(_eval_manifest_path(out_path), "eval", seed,
                   {"config_echo": config},
                   inputs={"pair_dir": str(pair_dir),
                           "fields_dir": str(fields_dir)},
                   outputs=[out_path.name],
                   wall_time_seconds=time.perf_counter() - t0)
    return report, read_report_json(out_path)


def _mean(values) -> float:
    return float(np.mean(np.asarray(values, dtype=np.float64)))


def _std(values) -> float:
    return float(np.std(np.asarray(values, dtype=np.float64)))


def write_summary_csv(path, rows: list[dict], modes: list[str]) -> list[dict]:
    """Write per-pair rows plus one aggregate (mean/std) row per mode.
    Returns the aggregate rows."""
    aggregates = []
    for mode in modes:
        mode_rows = [r for r in rows if r["mode"] == mode]
        if not mode_rows:
            continue
        agg = {"pair": AGGREGATE_PAIR, "mode": mode, "seed": ""}
        for col in ("dice_unreg", "dice_mean", "hd95_mm", "ndv_fraction",
                    "tre_mean_mm", "conflict_rate", "sim_fwd", "sim_bwd",
                    "reg", "total"):
            agg[col] = _mean([r[col] for r in mode_rows])
        for col in ("dice_mean", "hd95_mm", "ndv_fraction", "tre_mean_mm",
                    "conflict_rate", "total"):
            agg[f"{col}_std"] = _std([r[col] for r in mode_rows])
        aggregates.append(agg)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = SUMMARY_COLUMNS + SUMMARY_STD_COLUMNS
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows + aggregates:
            out_row = []
            for col in columns:
                if col not in row or row[col] is None or row[col] == "":
                    out_row.append("")
                elif col in ("pair", "mode", "victim"):
                    out_row.append(str(row[col]))
                elif col == "seed":
                    out_row.append(str(row[col]))
                else:
                    out_row.append(_fmt(row[col]))
            writer.writerow(out_row)
    return aggregates


def read_summary_csv(path) -> list[dict]:
    """Rows as dicts; numeric cells parsed to float, empty cells to None."""
    path = Path(path)
    if not path.is_file():
        raise PreconditionError(f"missing file: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {}
            for key, value in raw.items():
                if value is None or value == "":
                    row[key] = None
                elif key in ("pair", "mode"):
                    row[key] = value
                elif key == "seed":
                    row[key] = int(value)
                else:
                    row[key] = float(value)
            rows.append(row)
    return rows


def run_sweep(out_dir, n_pairs: int, seed: int = 0, steps: int = 100,
              modes=("scalar", "gp"), dims=(48, 48, 48), n_blobs: int = 5,
              max_disp: float = 4.0, lr: float = 0.1, lam: float = 1.5,
              weight_decay: float = 1e-3, variant: str = "projected_onto",
              sigma: float = 5.0, lncc_eps: float = 1e-5
              ) -> tuple[list[dict], list[dict], dict]:
    """Generate n_pairs phantoms and register each with every mode, using
    paired seeds so modes face identical problems.  Writes per-pair files
    under pairs/ and runs/, and a summary CSV with aggregate rows."""
    if not (isinstance(n_pairs, int) and n_pairs >= 1):
        raise PreconditionError(f"n_pairs must be an integer >= 1, got {n_pairs}")
    mode_list = []
    for name in modes:
        canonical = resolve_mode(name)
        if canonical not in mode_list:
            mode_list.append(canonical)
    if not mode_list:
        raise PreconditionError("no modes requested")
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_pairs):
        pair_dir = out / "pairs" / f"pair_{i:03d}"
        pair, _ = run_synth(pair_dir, seed + i, dims, n_blobs, max_disp)
        _, dice_unreg = dice(pair.moving_labels, pair.fixed_labels)
        for mode in mode_list:
            run_dir = out / "runs" / f"pair_{i:03d}_{mode}"
            cfg = GpConfig(lam=lam, steps=steps, lr=lr,
                           weight_decay=weight_decay, mode=mode,
                           denominator_variant=variant,
                           seed=seed + 100000 + i, sigma=sigma,
                           lncc_eps=lncc_eps)
            _, _, logs, _ = run_register(pair_dir / "fixed",
                                         pair_dir / "moving", run_dir, cfg)
            _, report = run_eval(pair_dir, run_dir, run_dir / "report.json")
            last = logs[-1]
            rows.append({
                "pair": f"pair_{i:03d}",
                "mode": mode,
                "seed": cfg.seed,
                "dice_unreg": dice_unreg,
                "dice_mean": report["dice_mean"],
                "hd95_mm": report["hd95_mm"],
                "ndv_fraction": report["ndv_fraction"],
                "tre_mean_mm": report["tre_mean_mm"],
                "conflict_rate": report["conflict_rate"],
                "sim_fwd": last.sim_fwd,
                "sim_bwd": last.sim_bwd,
                "reg": last.reg,
                "total": last.total,
            })
    aggregates = write_summary_csv(out / "summary.csv", rows, mode_list)
    config = {"n_pairs": n_pairs, "steps": steps, "modes": mode_list,
              "dims": [int(d) for d in dims], "n_blobs": int(n_blobs),
              "max_disp": float(max_disp), "lr": lr, "lam": lam,
              "weight_decay": weight_decay, "variant": variant,
              "sigma": sigma, "lncc_eps": lncc_eps}
    manifest = write_manifest(out / "manifest.json", "sweep", seed, config,
                              inputs={}, outputs=["summary.csv"],
                              wall_time_seconds=time.perf_counter() - t0)
    return rows, aggregates, manifest
