"""Evaluation metrics for registration quality: per-label Dice overlap,
95th-percentile symmetric Hausdorff boundary distance in mm, fraction of
folding voxels by the forward-difference Jacobian criterion, and landmark
target registration error in mm.

All of these are pure numpy; interpolation of the field at landmark
positions is done here directly so that every arithmetic step is plain
elementwise IEEE double math, reproducible against scalar oracles.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import PreconditionError
from .grids import DEFAULT_SPACING, DisplacementField, _as_spacing


@dataclass
class LabelMap:
    """Integer segmentation labels on a (D, H, W) grid; 0 is background."""

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_SPACING))

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.ndim != 3:
            raise PreconditionError(f"label data must be 3-D, got {self.data.ndim}-D")
        if not np.issubdtype(self.data.dtype, np.integer):
            as_int = np.rint(self.data).astype(np.int64)
            if not np.allclose(self.data, as_int):
                raise PreconditionError("label data must hold integers")
            self.data = as_int
        else:
            self.data = self.data.astype(np.int64)
        if self.data.min() < 0:
            raise PreconditionError("labels must be nonnegative")
        self.spacing = _as_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def labels(self) -> list[int]:
        """Sorted foreground label values present in the map."""
        vals = np.unique(self.data)
        return [int(v) for v in vals if v != 0]


@dataclass
class LandmarkSet:
    """Point annotations in voxel coordinates (x, y, z) with integer ids."""

    points: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise PreconditionError(
                f"points must have shape (N, 3), got {self.points.shape}")
        if self.ids.shape != (self.points.shape[0],):
            raise PreconditionError("ids must parallel points")
        if not np.all(np.isfinite(self.points)):
            raise PreconditionError("landmark points must be finite")
        if len(np.unique(self.ids)) != len(self.ids):
            raise PreconditionError("landmark ids must be unique")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class MetricsReport:
    """One evaluation of a field against ground truth.  Fields are None
    when the inputs needed to compute them were not provided."""

    dice_per_label: dict[int, float] | None = None
    dice_mean: float | None = None
    hd95_mm: float | None = None
    ndv_fraction: float | None = None
    tre_mean_mm: float | None = None
    tre_std_mm: float | None = None


def warp_labels(labels: LabelMap, u: DisplacementField) -> LabelMap:
    """Nearest-neighbor resampling of labels at x + u(x), border clamp.
    Output values are always drawn from the input label set."""
    if labels.dims != u.dims:
        raise PreconditionError(f"dims mismatch: {labels.dims} vs {u.dims}")
    d, h, w = labels.dims
    z, y, x = np.meshgrid(np.arange(d, dtype=np.float64),
                          np.arange(h, dtype=np.float64),
                          np.arange(w, dtype=np.float64), indexing="ij")
    ix = np.clip(np.floor(x + u.data[0] + 0.5), 0, w - 1).astype(np.int64)
    iy = np.clip(np.floor(y + u.data[1] + 0.5), 0, h - 1).astype(np.int64)
    iz = np.clip(np.floor(z + u.data[2] + 0.5), 0, d - 1).astype(np.int64)
    return LabelMap(labels.data[iz, iy, ix], labels.spacing.copy())


def dice(a: LabelMap, b: LabelMap) -> tuple[dict[int, float], float]:
    """Per-label Dice 2|A∩B| / (|A|+|B|) over the union of foreground
    labels, plus the mean.  A label present in only one map scores 0."""
    if a.dims != b.dims:
        raise PreconditionError(f"dims mismatch: {a.dims} vs {b.dims}")
    labels = sorted(set(a.labels()) | set(b.labels()))
    if not labels:
        raise PreconditionError("no foreground labels in either map")
    per_label: dict[int, float] = {}
    for lab in labels:
        mask_a = a.data == lab
        mask_b = b.data == lab
        inter = int(np.count_nonzero(mask_a & mask_b))
        denom = int(np.count_nonzero(mask_a)) + int(np.count_nonzero(mask_b))
        per_label[lab] = 2.0 * inter / denom
    mean = sum(per_label.values()) / len(per_label)
    return per_label, mean


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """(N, 3) integer (x, y, z) indices of mask voxels that touch the
    outside: at least one 6-neighbor is off-mask, or the voxel lies on the
    volume border."""
    mask = np.asarray(mask, dtype=bool)
    interior = np.ones_like(mask)
    interior[0, :, :] = interior[-1, :, :] = False
    interior[:, 0, :] = interior[:, -1, :] = False
    interior[:, :, 0] = interior[:, :, -1] = False
    core = interior.copy()
    core[1:-1, 1:-1, 1:-1] &= (mask[:-2, 1:-1, 1:-1] & mask[2:, 1:-1, 1:-1]
                               & mask[1:-1, :-2, 1:-1] & mask[1:-1, 2:, 1:-1]
                               & mask[1:-1, 1:-1, :-2] & mask[1:-1, 1:-1, 2:])
    boundary = mask & ~core
    zyx = np.argwhere(boundary)
    return zyx[:, ::-1].astype(np.int64)


def _directed_p95(from_pts_mm: np.ndarray, to_tree: cKDTree,
                  to_pts_mm: np.ndarray) -> float:
    """Nearest-rank 95th percentile of nearest-neighbor distances.  The
    tree only selects the neighbor; the distance is recomputed with plain
    numpy so the arithmetic matches a brute-force evaluation."""
    _, idx = to_tree.query(from_pts_mm, k=1)
    diff = from_pts_mm - to_pts_mm[idx]
    dists = np.sqrt((diff * diff).sum(axis=1))
    dists.sort()
    k = int(np.ceil(0.95 * dists.size))
    return float(dists[k - 1])


def hd95(a: LabelMap, b: LabelMap, label: int, spacing=None) -> float:
    """Symmetric 95th-percentile Hausdorff distance in mm between the
    boundaries of one label's masks, nearest-rank percentile per direction,
    max over the two directions."""
    if a.dims != b.dims:
        raise PreconditionError(f"dims mismatch: {a.dims} vs {b.dims}")
    spacing = _as_spacing(a.spacing if spacing is None else spacing)
    mask_a = a.data == label
    mask_b = b.data == label
    if not mask_a.any() or not mask_b.any():
        raise PreconditionError(f"label {label} missing from one of the maps")
    pts_a = boundary_voxels(mask_a).astype(np.float64) * spacing
    pts_b = boundary_voxels(mask_b).astype(np.float64) * spacing
    tree_a = cKDTree(pts_a)
    tree_b = cKDTree(pts_b)
    d_ab = _directed_p95(pts_a, tree_b, pts_b)
    d_ba = _directed_p95(pts_b, tree_a, pts_a)
    return max(d_ab, d_ba)


def forward_jacobian_determinants(u: DisplacementField) -> np.ndarray:
    """Determinant of the forward-difference Jacobian of phi = x + u at
    every voxel with a complete forward neighborhood; shape
    (D-1, H-1, W-1)."""
    if min(u.dims) < 2:
        raise PreconditionError(f"ndv needs every dim >= 2, got {u.dims}")
    c = u.data[:, :-1, :-1, :-1]
    dx = u.data[:, :-1, :-1, 1:] - c
    dy = u.data[:, :-1, 1:, :-1] - c
    dz = u.data[:, 1:, :-1, :-1] - c
    # rows: component (x, y, z); columns: derivative direction (x, y, z)
    a00, a01, a02 = 1.0 + dx[0], dy[0], dz[0]
    a10, a11, a12 = dx[1], 1.0 + dy[1], dz[1]
    a20, a21, a22 = dx[2], dy[2], 1.0 + dz[2]
    return (a00 * (a11 * a22 - a12 * a21)
            - a01 * (a10 * a22 - a12 * a20)
            + a02 * (a10 * a21 - a11 * a20))


def ndv(u: DisplacementField) -> float:
    """Fraction of evaluated voxels whose forward-difference Jacobian
    determinant is <= 0 (space folding)."""
    dets = forward_jacobian_determinants(u)
    return int(np.count_nonzero(dets <= 0.0)) / dets.size


def _interp_field_at(u: DisplacementField, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of all three components at (N, 3) points,
    border clamp; plain numpy."""
    d, h, w = u.dims
    px = np.clip(pts[:, 0], 0.0, w - 1.0)
    py = np.clip(pts[:, 1], 0.0, h - 1.0)
    pz = np.clip(pts[:, 2], 0.0, d - 1.0)
    x0 = np.clip(np.floor(px), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(py), 0, h - 2).astype(np.int64)
    z0 = np.clip(np.floor(pz), 0, d - 2).astype(np.int64)
    xd = (px - x0)[:, None]
    yd = (py - y0)[:, None]
    zd = (pz - z0)[:, None]
    comp = np.moveaxis(u.data, 0, -1)            # (D, H, W, 3)
    c000 = comp[z0, y0, x0]
    c100 = comp[z0, y0, x0 + 1]
    c010 = comp[z0, y0 + 1, x0]
    c110 = comp[z0, y0 + 1, x0 + 1]
    c001 = comp[z0 + 1, y0, x0]
    c101 = comp[z0 + 1, y0, x0 + 1]
    c011 = comp[z0 + 1, y0 + 1, x0]
    c111 = comp[z0 + 1, y0 + 1, x0 + 1]
    c00 = c000 * (1 - xd) + c100 * xd
    c10 = c010 * (1 - xd) + c110 * xd
    c01 = c001 * (1 - xd) + c101 * xd
    c11 = c011 * (1 - xd) + c111 * xd
    c0 = c00 * (1 - yd) + c10 * yd
    c1 = c01 * (1 - yd) + c11 * yd
    return c0 * (1 - zd) + c1 * zd


def tre(fixed_pts: LandmarkSet, moving_pts: LandmarkSet, u: DisplacementField,
        spacing=None) -> tuple[float, float, np.ndarray]:
    """Target registration error: map each fixed-grid landmark p through
    p + u(p) and measure the mm distance to its id-matched moving landmark.
    Returns (mean, population std, per-point distances)."""
    if sorted(fixed_pts.ids.tolist()) != sorted(moving_pts.ids.tolist()):
        raise PreconditionError("landmark id sets differ")
    if len(fixed_pts) == 0:
        raise PreconditionError("empty landmark sets")
    spacing = _as_spacing(u.spacing if spacing is None else spacing)
    d, h, w = u.dims
    hi = np.array([w - 1.0, h - 1.0, d - 1.0])
    if np.any(fixed_pts.points < 0) or np.any(fixed_pts.points > hi):
        raise PreconditionError("fixed landmarks fall outside the volume")
    order_f = np.argsort(fixed_pts.ids)
    order_m = np.argsort(moving_pts.ids)
    p = fixed_pts.points[order_f]
    q = moving_pts.points[order_m]
    mapped = p + _interp_field_at(u, p)
    diff = (mapped - q) * spacing
    per_point = np.sqrt((diff * diff).sum(axis=1))
    return float(np.mean(per_point)), float(np.std(per_point)), per_point


def hd95_mean(a: LabelMap, b: LabelMap, spacing=None) -> float | None:
    """Mean hd95 over the labels present in both maps; None if no label is
    shared."""
    common = sorted(set(a.labels()) & set(b.labels()))
    if not common:
        return None
    values = [hd95(a, b, lab, spacing) for lab in common]
    return sum(values) / len(values)
