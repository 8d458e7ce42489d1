"""File formats: raw little-endian grids with JSON sidecar headers,
landmark JSON, step-log CSV, metrics reports, and run manifests.

A grid object at base path ``p`` occupies two files: ``p.json`` holds the
header (dims, spacing, dtype f32|f64, components 1|3, byte order) and
``p.raw`` holds the payload, C-order with x fastest, component-major for
fields.  Round-trips are lossless for both dtypes.  All writers are
deterministic functions of their inputs so reruns produce identical bytes.
"""

import csv
import json
from pathlib import Path

import numpy as np

from ._version import __version__
from .errors import PreconditionError
from .grids import DisplacementField, Volume
from .metrics import LabelMap, LandmarkSet, MetricsReport
from .optim import StepLog

DTYPES = {"f32": "<f4", "f64": "<f8"}

CSV_HEADER = ["step", "sim_fwd", "sim_bwd", "reg", "total", "g_sim_norm",
              "g_reg_norm", "inner_product", "cosine", "conflict", "victim",
              "update_norm"]


def _fmt(x: float) -> str:
    """Shortest decimal string that round-trips the double exactly."""
    return repr(float(x))


def write_volume(path, obj, dtype: str = "f64") -> None:
    """Write a Volume or DisplacementField as <path>.json + <path>.raw."""
    if dtype not in DTYPES:
        raise PreconditionError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    if isinstance(obj, Volume):
        components = 1
        dims = obj.dims
    elif isinstance(obj, DisplacementField):
        components = 3
        dims = obj.dims
    else:
        raise PreconditionError(
            f"expected Volume or DisplacementField, got {type(obj).__name__}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": [int(d) for d in dims],
        "spacing": [float(s) for s in obj.spacing],
        "dtype": dtype,
        "components": components,
        "byte_order": "little",
    }
    with open(f"{path}.json", "w") as fh:
        json.dump(header, fh, indent=2)
        fh.write("\n")
    payload = np.ascontiguousarray(obj.data).astype(DTYPES[dtype]).tobytes()
    with open(f"{path}.raw", "wb") as fh:
        fh.write(payload)


def read_volume(path):
    """Read <path>.json + <path>.raw back into a Volume (1 component) or
    DisplacementField (3 components), data upcast to float64."""
    path = Path(path)
    header_path = Path(f"{path}.json")
    raw_path = Path(f"{path}.raw")
    for p in (header_path, raw_path):
        if not p.is_file():
            raise PreconditionError(f"missing file: {p}")
    with open(header_path) as fh:
        header = json.load(fh)
    for key in ("dims", "spacing", "dtype", "components", "byte_order"):
        if key not in header:
            raise PreconditionError(f"header {header_path} lacks field {key!r}")
    if header["byte_order"] != "little":
        raise PreconditionError(f"unsupported byte order {header['byte_order']!r}")
    if header["dtype"] not in DTYPES:
        raise PreconditionError(f"unknown dtype {header['dtype']!r}")
    components = int(header["components"])
    if components not in (1, 3):
        raise PreconditionError(f"components must be 1 or 3, got {components}")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3:
        raise PreconditionError(f"dims must have 3 entries, got {header['dims']}")
    np_dtype = np.dtype(DTYPES[header["dtype"]])
    expected = int(np.prod(dims)) * components * np_dtype.itemsize
    raw = raw_path.read_bytes()
    if len(raw) != expected:
        raise PreconditionError(
            f"{raw_path}: payload is {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype=np_dtype).astype(np.float64)
    spacing = np.asarray(header["spacing"], dtype=np.float64)
    if components == 1:
        return Volume(data.reshape(dims), spacing)
    return DisplacementField(data.reshape((3,) + dims), spacing)


def write_label_map(path, labels: LabelMap) -> None:
    """Labels are stored as an f32 volume; small integers are exact."""
    write_volume(path, Volume(labels.data.astype(np.float64), labels.spacing),
                 dtype="f32")


def read_label_map(path) -> LabelMap:
    vol = read_volume(path)
    if not isinstance(vol, Volume):
        raise PreconditionError(f"{path}: label map must have 1 component")
    return LabelMap(np.rint(vol.data).astype(np.int64), vol.spacing)


def _landmarks_to_dict(lms: LandmarkSet) -> dict:
    return {"ids": [int(i) for i in lms.ids],
            "points": [[float(c) for c in p] for p in lms.points]}


def _landmarks_from_dict(obj: dict) -> LandmarkSet:
    return LandmarkSet(np.asarray(obj["points"], dtype=np.float64).reshape(-1, 3),
                       np.asarray(obj["ids"], dtype=np.int64))


def write_landmarks(path, fixed: LandmarkSet, moving: LandmarkSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump({"fixed": _landmarks_to_dict(fixed),
                   "moving": _landmarks_to_dict(moving)}, fh, indent=2)
        fh.write("\n")


def read_landmarks(path) -> tuple[LandmarkSet, LandmarkSet]:
    path = Path(path)
    if not path.is_file():
        raise PreconditionError(f"missing file: {path}")
    with open(path) as fh:
        obj = json.load(fh)
    return _landmarks_from_dict(obj["fixed"]), _landmarks_from_dict(obj["moving"])


def write_step_logs_csv(path, logs: list[StepLog]) -> None:
    if not logs:
        raise PreconditionError("refusing to write an empty step log")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for log in logs:
            writer.writerow([
                str(log.step), _fmt(log.sim_fwd), _fmt(log.sim_bwd),
                _fmt(log.reg), _fmt(log.total), _fmt(log.g_sim_norm),
                _fmt(log.g_reg_norm), _fmt(log.inner_product),
                _fmt(log.cosine), str(int(log.conflict)), log.victim,
                _fmt(log.update_norm),
            ])


def read_step_logs_csv(path) -> list[StepLog]:
    path = Path(path)
    if not path.is_file():
        raise PreconditionError(f"missing file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise PreconditionError(f"{path}: unexpected CSV header {header}")
        logs = []
        for row in reader:
            if len(row) != len(CSV_HEADER):
                raise PreconditionError(f"{path}: malformed row {row}")
            logs.append(StepLog(
                step=int(row[0]), sim_fwd=float(row[1]), sim_bwd=float(row[2]),
                reg=float(row[3]), total=float(row[4]), g_sim_norm=float(row[5]),
                g_reg_norm=float(row[6]), inner_product=float(row[7]),
                cosine=float(row[8]), conflict=bool(int(row[9])), victim=row[10],
                update_norm=float(row[11]),
            ))
    return logs


def report_to_dict(report: MetricsReport, config: dict | None = None,
                   conflict_rate: float | None = None,
                   seed: int | None = None) -> dict:
    dice_per_label = None
    if report.dice_per_label is not None:
        dice_per_label = {str(k): float(v)
                          for k, v in sorted(report.dice_per_label.items())}
    return {
        "dice_per_label": dice_per_label,
        "dice_mean": report.dice_mean,
        "hd95_mm": report.hd95_mm,
        "ndv_fraction": report.ndv_fraction,
        "tre_mean_mm": report.tre_mean_mm,
        "tre_std_mm": report.tre_std_mm,
        "conflict_rate": conflict_rate,
        "config": config,
        "seed": seed,
    }


def write_report_json(path, report: MetricsReport, config: dict | None = None,
                      conflict_rate: float | None = None,
                      seed: int | None = None) -> dict:
    obj = report_to_dict(report, config, conflict_rate, seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
    return obj


def read_report_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise PreconditionError(f"missing file: {path}")
    with open(path) as fh:
        return json.load(fh)


def write_manifest(path, command: str, seed: int | None, config: dict,
                   inputs: dict, outputs: list, wall_time_seconds: float) -> dict:
    manifest = {
        "command": command,
        "artifact_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": sorted(str(p) for p in outputs),
        "wall_time_seconds": float(wall_time_seconds),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise PreconditionError(f"missing file: {path}")
    with open(path) as fh:
        return json.load(fh)
