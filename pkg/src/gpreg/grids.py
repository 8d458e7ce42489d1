"""Dense-grid data types and operations: volumes, displacement fields,
interpolation, warping, composition, Jacobians, Gaussian filtering, and
resolution pyramids.

Layout conventions:

* ``Volume.data`` has shape ``(D, H, W)`` and is indexed ``[z, y, x]`` with
  x (the W axis) varying fastest in memory.
* Points are given in voxel coordinates, ordered ``(x, y, z)``.
* ``DisplacementField.data`` has shape ``(3, D, H, W)``; component 0
  displaces along x, 1 along y, 2 along z, in voxel units of its own grid.
  The field defines the map ``phi(x) = x + u(x)``.
* ``spacing`` is the voxel size in mm per ``(x, y, z)`` axis; it only
  matters for the mm-valued metrics, never for warping.
* Out-of-range coordinates are clamped to the border everywhere.

All operations are pure functions in 64-bit floating point.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from . import tensorops
from .errors import PreconditionError

DEFAULT_SPACING = (1.0, 1.0, 1.0)


def _as_spacing(spacing) -> np.ndarray:
    s = np.asarray(spacing, dtype=np.float64)
    if s.shape != (3,):
        raise PreconditionError(f"spacing must be a 3-vector, got shape {s.shape}")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise PreconditionError("spacing components must be finite and > 0")
    return s


@dataclass
class Volume:
    """3-D scalar grid (image, label map rendered as floats, loss map)."""

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_SPACING))

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise PreconditionError(f"volume data must be 3-D, got {self.data.ndim}-D")
        if not np.all(np.isfinite(self.data)):
            raise PreconditionError("volume contains non-finite values")
        self.spacing = _as_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, dims, spacing=DEFAULT_SPACING) -> "Volume":
        return cls(np.zeros(tuple(dims)), np.asarray(spacing, dtype=np.float64))


@dataclass
class DisplacementField:
    """Per-voxel displacement u(x) in voxel units, defining phi(x) = x + u(x)."""

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_SPACING))

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise PreconditionError(
                f"field data must have shape (3, D, H, W), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise PreconditionError("field contains non-finite values")
        self.spacing = _as_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @classmethod
    def zeros(cls, dims, spacing=DEFAULT_SPACING) -> "DisplacementField":
        return cls(np.zeros((3,) + tuple(dims)), np.asarray(spacing, dtype=np.float64))


@dataclass
class JacobianField:
    """Per-voxel 3x3 matrices of grad(phi); shape (D, H, W, 3, 3), row i /
    column j = d phi_i / d x_j with (x, y, z) ordering."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 5 or self.data.shape[3:] != (3, 3):
            raise PreconditionError(
                f"jacobian data must have shape (D, H, W, 3, 3), got {self.data.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]


def _check_same_dims(a_dims, b_dims, what: str):
    if tuple(a_dims) != tuple(b_dims):
        raise PreconditionError(f"{what}: dims mismatch {tuple(a_dims)} vs {tuple(b_dims)}")


def sample_trilinear(vol: Volume, p) -> float:
    """Trilinear interpolation of the 8 voxels around point p = (x, y, z);
    coordinates outside [0, dim-1] are clamped to the border first."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,):
        raise PreconditionError(f"point must be a 3-vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise PreconditionError("point coordinates must be finite")
    vol_t = tensorops.as_tensor(vol.data)
    out = tensorops.trilinear(
        vol_t,
        torch.tensor(p[0], dtype=torch.float64),
        torch.tensor(p[1], dtype=torch.float64),
        torch.tensor(p[2], dtype=torch.float64),
    )
    return float(out)


def sample_trilinear_many(data: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Vectorized trilinear sampling of a (D, H, W) array at (N, 3) points."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise PreconditionError(f"points must have shape (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise PreconditionError("point coordinates must be finite")
    out = tensorops.trilinear(
        tensorops.as_tensor(data),
        tensorops.as_tensor(pts[:, 0]),
        tensorops.as_tensor(pts[:, 1]),
        tensorops.as_tensor(pts[:, 2]),
    )
    return out.numpy()


def warp_volume(vol: Volume, u: DisplacementField) -> Volume:
    """out(x) = vol(x + u(x)).  The zero field is the exact identity."""
    _check_same_dims(vol.dims, u.dims, "warp_volume")
    if np.count_nonzero(u.data) == 0:
        return Volume(vol.data.copy(), u.spacing.copy())
    out = tensorops.warp(tensorops.as_tensor(vol.data), tensorops.as_tensor(u.data))
    return Volume(out.numpy(), u.spacing.copy())


def compose_fields(u_a: DisplacementField, u_b: DisplacementField) -> DisplacementField:
    """Displacement of phi_a o phi_b: u_c(x) = u_b(x) + u_a(x + u_b(x)),
    with u_a interpolated trilinearly (border clamp)."""
    _check_same_dims(u_a.dims, u_b.dims, "compose_fields")
    out = tensorops.compose(tensorops.as_tensor(u_a.data), tensorops.as_tensor(u_b.data))
    return DisplacementField(out.numpy(), u_b.spacing.copy())


def jacobian_field(u: DisplacementField) -> JacobianField:
    """grad(phi) = I + grad(u): central differences at interior voxels,
    one-sided first-order differences at boundary voxels, voxel units."""
    if min(u.dims) < 3:
        raise PreconditionError(f"jacobian_field needs every dim >= 3, got {u.dims}")
    g = tensorops.displacement_gradient(tensorops.as_tensor(u.data)).numpy()
    jac = np.moveaxis(g, (0, 1), (3, 4))          # (D, H, W, i, j)
    jac = jac + np.eye(3)
    return JacobianField(jac)


def gaussian_blur(vol: Volume, sigma: float) -> Volume:
    """Separable Gaussian filter, kernel truncated at radius ceil(3*sigma),
    normalized to sum 1, borders clamped (replicate)."""
    if not (sigma > 0):
        raise PreconditionError(f"sigma must be > 0, got {sigma}")
    out = tensorops.blur(tensorops.as_tensor(vol.data), float(sigma))
    return Volume(out.numpy(), vol.spacing.copy())


def _blur_field(data: np.ndarray, sigma: float) -> np.ndarray:
    t = tensorops.as_tensor(data)
    return np.stack([tensorops.blur(t[c], sigma).numpy() for c in range(3)])


def downsample2(obj):
    """Halve the grid: Gaussian pre-blur (sigma = 1) then every 2nd sample
    per axis.  Displacement components are rescaled by the per-axis grid
    ratio so they stay in voxel units of the new grid."""
    dims = obj.dims
    if min(dims) < 2:
        raise PreconditionError(f"downsample2 needs every dim >= 2, got {dims}")
    new_dims = tuple((d + 1) // 2 for d in dims)
    if isinstance(obj, Volume):
        blurred = tensorops.blur(tensorops.as_tensor(obj.data), 1.0).numpy()
        return Volume(blurred[::2, ::2, ::2], obj.spacing * 2.0)
    if isinstance(obj, DisplacementField):
        blurred = _blur_field(obj.data, 1.0)
        sub = blurred[:, ::2, ::2, ::2]
        # dims (D, H, W) map to component axes (z, y, x) = components (2, 1, 0)
        scale = np.array([new_dims[2] / dims[2], new_dims[1] / dims[1],
                          new_dims[0] / dims[0]])
        return DisplacementField(sub * scale[:, None, None, None], obj.spacing * 2.0)
    raise PreconditionError(f"downsample2 expects Volume or DisplacementField, got {type(obj)!r}")


def upsample_to(u: DisplacementField, dims) -> DisplacementField:
    """Trilinear resize of a displacement field to target dims; components
    are rescaled by the per-axis grid ratio (target/source)."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise PreconditionError(f"upsample_to needs 3 target dims >= 2, got {dims}")
    src = u.dims
    d, h, w = dims
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    # target voxel t samples source position t * (src/tgt) per axis
    pts = np.stack([
        (x * (src[2] / w)).ravel(),
        (y * (src[1] / h)).ravel(),
        (z * (src[0] / d)).ravel(),
    ], axis=1)
    scale = np.array([w / src[2], h / src[1], d / src[0]])
    comps = [sample_trilinear_many(u.data[c], pts).reshape(dims) * scale[c]
             for c in range(3)]
    spacing = u.spacing * np.array([src[2] / w, src[1] / h, src[0] / d])
    return DisplacementField(np.stack(comps), spacing)
