"""Synthetic ground-truth registration pairs: blob images with labels,
landmarks, and a known smooth deformation.

Direction convention: ``gt_field`` is the field that registers the moving
image onto the fixed grid, i.e. ``warp_volume(moving, gt_field) ~ fixed``,
the same role the optimized ``u_mov`` plays.  The moving image is built by
warping the pristine fixed image with the numerically inverted field, so
evaluating ``gt_field`` itself scores near-perfectly.
"""

from dataclasses import dataclass

import numpy as np
import torch

from . import tensorops
from .errors import PreconditionError
from .grids import DisplacementField, Volume, warp_volume
from .metrics import (LabelMap, LandmarkSet, _interp_field_at,
                      forward_jacobian_determinants, warp_labels)

NOISE_LEVEL = 0.01
NOISE_SIGMA = 1.5   # acquisition noise is PSF-correlated, not per-voxel white
LABEL_THRESHOLD = float(np.exp(-2.0))   # blob ownership within 2 blob-sigmas
MIN_DET = 0.1
MAX_HALVINGS = 20


@dataclass
class PhantomPair:
    """One synthetic registration problem with known ground truth."""

    fixed: Volume
    moving: Volume
    fixed_labels: LabelMap
    moving_labels: LabelMap
    fixed_landmarks: LandmarkSet
    moving_landmarks: LandmarkSet
    gt_field: DisplacementField


def invert_field(u: DisplacementField, max_iterations: int = 60,
                 tol: float = 1e-10) -> DisplacementField:
    """Displacement v with phi_v = phi_u^(-1), by fixed-point iteration
    v <- -u(x + v(x)).  Converges for smooth fields with sub-unit gradient."""
    if min(u.dims) < 2:
        raise PreconditionError(f"invert_field needs every dim >= 2, got {u.dims}")
    t = tensorops.as_tensor(u.data)
    grid = tensorops.identity_grid(tuple(u.dims))
    v = -t.clone()
    with torch.no_grad():
        for _ in range(max_iterations):
            px = grid[0] + v[0]
            py = grid[1] + v[1]
            pz = grid[2] + v[2]
            pulled = torch.stack([tensorops.trilinear(t[c], px, py, pz)
                                  for c in range(3)])
            nxt = -pulled
            delta = float((nxt - v).abs().max())
            v = nxt
            if delta < tol:
                break
    return DisplacementField(v.numpy(), u.spacing.copy())


def _smooth_unit_field(rng: np.random.Generator, dims, sigma: float) -> np.ndarray:
    raw = rng.standard_normal((3,) + tuple(dims))
    data = np.stack([tensorops.blur(tensorops.as_tensor(raw[c]), sigma).numpy()
                     for c in range(3)])
    # clamp-border blurring piles kernel mass onto edge voxels, inflating
    # their variance; divide by the per-voxel kernel energy so the field is
    # equally strong everywhere instead of peaking at the border
    energies = [
        (tensorops.gaussian_matrix(n, sigma).numpy() ** 2).sum(axis=1)
        for n in dims
    ]
    std = np.sqrt(
        energies[0][:, None, None]
        * energies[1][None, :, None]
        * energies[2][None, None, :]
    )
    return data / std


def _acquisition_noise(rng: np.random.Generator, dims) -> np.ndarray:
    """1% additive measurement noise, blurred to the point-spread scale so
    its voxel-to-voxel gradient stays bounded like a real reconstruction;
    per-voxel white noise would hand the similarity term a voxel-scale
    lattice to overfit."""
    raw = rng.standard_normal(dims)
    sm = tensorops.blur(tensorops.as_tensor(raw), NOISE_SIGMA).numpy()
    return sm * (NOISE_LEVEL / sm.std())


def make_gt_field(rng: np.random.Generator, dims, max_disp: float,
                  spacing) -> DisplacementField:
    """Gaussian-blurred white-noise field, rescaled so the maximum vector
    magnitude is at most ``max_disp`` voxels and every forward-difference
    Jacobian determinant stays above 0.1 (halving until satisfied)."""
    dims = tuple(dims)
    if max_disp == 0:
        return DisplacementField.zeros(dims, spacing)
    sigma = min(dims) / 8.0
    data = _smooth_unit_field(rng, dims, sigma)
    magnitude = float(np.sqrt((data * data).sum(axis=0)).max())
    if magnitude == 0.0:
        return DisplacementField.zeros(dims, spacing)
    data = data * (max_disp / magnitude)
    for _ in range(MAX_HALVINGS + 1):
        field = DisplacementField(data, spacing)
        if float(forward_jacobian_determinants(field).min()) > MIN_DET:
            return field
        data = data * 0.5
    raise PreconditionError(
        f"could not reach Jacobian determinant > {MIN_DET} "
        f"after {MAX_HALVINGS} halvings")


def make_phantom(seed: int, dims, n_blobs: int, max_disp_voxels: float,
                 spacing=(1.0, 1.0, 1.0)) -> PhantomPair:
    """Generate one deterministic phantom pair.

    The fixed image is a sum of ``n_blobs`` isotropic Gaussian blobs with
    seeded centers and widths plus 1% additive noise.  Labels are blob
    ownership (argmax blob within two blob-sigmas of a center), landmarks
    are the blob centers.  The moving side is the fixed side warped by the
    inverse of the ground-truth field; moving landmarks are the mapped
    centers, so the ground-truth field scores a zero registration error.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise PreconditionError(f"dims must be >= 16 per axis, got {dims}")
    if not (isinstance(n_blobs, int) and n_blobs >= 1):
        raise PreconditionError(f"n_blobs must be an integer >= 1, got {n_blobs}")
    if not (0 <= max_disp_voxels < min(dims) / 8):
        raise PreconditionError(
            f"max_disp_voxels must lie in [0, min(dims)/8 = {min(dims) / 8}), "
            f"got {max_disp_voxels}")
    rng = np.random.default_rng(seed)
    d, h, w = dims
    lo = np.array([0.15 * w, 0.15 * h, 0.15 * d])
    hi = np.array([0.85 * w, 0.85 * h, 0.85 * d])
    centers = rng.uniform(lo, hi, size=(n_blobs, 3))          # (x, y, z)
    # wide blobs so intensity gradients cover the whole volume; with narrow
    # blobs the similarity term has nothing but the additive noise to chase
    # in the empty background, which drives spurious voxel-scale motion
    widths = rng.uniform(min(dims) / 7.0, min(dims) / 4.5, size=n_blobs)
    z, y, x = np.meshgrid(np.arange(d, dtype=np.float64),
                          np.arange(h, dtype=np.float64),
                          np.arange(w, dtype=np.float64), indexing="ij")
    clean = np.zeros(dims)
    best_val = np.zeros(dims)
    best_idx = np.zeros(dims, dtype=np.int64)
    for i in range(n_blobs):
        cx, cy, cz = centers[i]
        r2 = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
        val = np.exp(-r2 / (2.0 * widths[i] ** 2))
        clean += val
        take = val > best_val
        best_val = np.where(take, val, best_val)
        best_idx = np.where(take, i + 1, best_idx)
    # each side gets its own noise draw, like two acquisitions of the same
    # anatomy; warping a shared noise pattern would reward registering the
    # noise lattice itself, which no real pair offers
    fixed = Volume(clean + _acquisition_noise(rng, dims), spacing)
    fixed_labels = LabelMap(np.where(best_val >= LABEL_THRESHOLD, best_idx, 0),
                            spacing)
    fixed_landmarks = LandmarkSet(centers, np.arange(1, n_blobs + 1))
    gt = make_gt_field(rng, dims, float(max_disp_voxels), spacing)
    if max_disp_voxels == 0:
        inverse = DisplacementField.zeros(dims, spacing)
        moving = Volume(fixed.data.copy(), spacing)
    else:
        inverse = invert_field(gt)
        moving = Volume(warp_volume(Volume(clean, spacing), inverse).data
                        + _acquisition_noise(rng, dims), spacing)
    moving_labels = warp_labels(fixed_labels, inverse)
    moving_landmarks = LandmarkSet(centers + _interp_field_at(gt, centers),
                                   fixed_landmarks.ids.copy())
    return PhantomPair(fixed, moving, fixed_labels, moving_labels,
                       fixed_landmarks, moving_landmarks, gt)
