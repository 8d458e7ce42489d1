"""Differentiable grid primitives on torch float64 tensors.

This module is the single implementation of interpolation, warping, field
composition, displacement gradients, and Gaussian filtering.  The public
numpy-facing API in :mod:`gpreg.grids` wraps these functions; the objective
module calls them directly on ``requires_grad`` tensors so that exact
gradients of the discrete losses come from reverse-mode autodiff.

Conventions (shared with the rest of the package):

* a volume is a ``(D, H, W)`` tensor indexed ``[z, y, x]`` with x fastest;
* a displacement field is ``(3, D, H, W)``, component order ``(x, y, z)``,
  in voxel units of its own grid;
* continuous points are given as separate ``px, py, pz`` coordinate tensors;
* out-of-range coordinates are clamped to the border before interpolation.

Everything here is a pure function of its tensor inputs.
"""

from functools import lru_cache

import numpy as np
import torch

DTYPE = torch.float64


@lru_cache(maxsize=64)
def gaussian_matrix(n: int, sigma: float) -> torch.Tensor:
    """Dense (n, n) matrix applying a truncated, normalized 1-D Gaussian
    along an axis of length ``n`` with clamp-to-border handling.

    Kernel radius is ceil(3*sigma); taps falling outside the axis accumulate
    onto the nearest edge element, so every row sums to 1 and a constant
    signal is preserved.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    radius = int(np.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    mat = np.zeros((n, n), dtype=np.float64)
    for j, w in enumerate(kernel):
        off = j - radius
        for i in range(n):
            mat[i, min(max(i + off, 0), n - 1)] += w
    return torch.from_numpy(mat)


def blur(vol: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur of a (D, H, W) volume, clamp borders."""
    d, h, w = vol.shape
    out = torch.tensordot(gaussian_matrix(d, sigma), vol, dims=([1], [0]))
    out = torch.moveaxis(torch.tensordot(gaussian_matrix(h, sigma), out, dims=([1], [1])), 0, 1)
    out = torch.moveaxis(torch.tensordot(gaussian_matrix(w, sigma), out, dims=([1], [2])), 0, 2)
    return out


@lru_cache(maxsize=16)
def identity_grid(dims: tuple) -> torch.Tensor:
    """(3, D, H, W) tensor of voxel coordinates, component order (x, y, z)."""
    d, h, w = dims
    z, y, x = torch.meshgrid(
        torch.arange(d, dtype=DTYPE),
        torch.arange(h, dtype=DTYPE),
        torch.arange(w, dtype=DTYPE),
        indexing="ij",
    )
    return torch.stack([x, y, z])


def trilinear(vol: torch.Tensor, px: torch.Tensor, py: torch.Tensor,
              pz: torch.Tensor) -> torch.Tensor:
    """Sample ``vol`` at continuous points, trilinear with border clamp.

    ``px, py, pz`` may have any common shape; the result has that shape.
    Gradients flow to the point coordinates (and to ``vol`` if it requires
    grad).  Every axis of ``vol`` must have length >= 2.
    """
    d, h, w = vol.shape
    if min(d, h, w) < 2:
        raise ValueError("interpolation needs every volume axis >= 2")
    px = px.clamp(0.0, w - 1.0)
    py = py.clamp(0.0, h - 1.0)
    pz = pz.clamp(0.0, d - 1.0)
    x0 = px.detach().floor().clamp(0, w - 2).long()
    y0 = py.detach().floor().clamp(0, h - 2).long()
    z0 = pz.detach().floor().clamp(0, d - 2).long()
    xd = px - x0
    yd = py - y0
    zd = pz - z0
    flat = vol.reshape(-1)
    base = (z0 * h + y0) * w + x0
    c000 = flat[base]
    c100 = flat[base + 1]
    c010 = flat[base + w]
    c110 = flat[base + w + 1]
    c001 = flat[base + h * w]
    c101 = flat[base + h * w + 1]
    c011 = flat[base + h * w + w]
    c111 = flat[base + h * w + w + 1]
    c00 = c000 * (1 - xd) + c100 * xd
    c10 = c010 * (1 - xd) + c110 * xd
    c01 = c001 * (1 - xd) + c101 * xd
    c11 = c011 * (1 - xd) + c111 * xd
    c0 = c00 * (1 - yd) + c10 * yd
    c1 = c01 * (1 - yd) + c11 * yd
    return c0 * (1 - zd) + c1 * zd


def warp(vol: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """out(x) = vol(x + u(x)) for every voxel x of u's grid."""
    grid = identity_grid(tuple(u.shape[1:]))
    return trilinear(vol, grid[0] + u[0], grid[1] + u[1], grid[2] + u[2])


def compose(u_a: torch.Tensor, u_b: torch.Tensor) -> torch.Tensor:
    """Displacement of phi_a o phi_b: u_c(x) = u_b(x) + u_a(x + u_b(x))."""
    grid = identity_grid(tuple(u_b.shape[1:]))
    px = grid[0] + u_b[0]
    py = grid[1] + u_b[1]
    pz = grid[2] + u_b[2]
    pulled = torch.stack([trilinear(u_a[c], px, py, pz) for c in range(3)])
    return u_b + pulled


def _axis_gradient(vol: torch.Tensor, dim: int) -> torch.Tensor:
    """d vol / d axis in voxel units: central differences at interior
    positions, one-sided first-order differences at the two boundaries."""
    n = vol.shape[dim]
    lo = vol.narrow(dim, 1, 1) - vol.narrow(dim, 0, 1)
    hi = vol.narrow(dim, n - 1, 1) - vol.narrow(dim, n - 2, 1)
    mid = (vol.narrow(dim, 2, n - 2) - vol.narrow(dim, 0, n - 2)) * 0.5
    return torch.cat([lo, mid, hi], dim=dim)


def displacement_gradient(u: torch.Tensor) -> torch.Tensor:
    """(3, 3, D, H, W) tensor g[i, j] = d u_i / d x_j, components and
    derivative directions both ordered (x, y, z).  Needs dims >= 3."""
    if min(u.shape[1:]) < 3:
        raise ValueError("displacement gradient needs every axis >= 3")
    rows = []
    for c in range(3):
        comp = u[c]
        rows.append(torch.stack([
            _axis_gradient(comp, 2),   # d/dx
            _axis_gradient(comp, 1),   # d/dy
            _axis_gradient(comp, 0),   # d/dz
        ]))
    return torch.stack(rows)


def lncc(a: torch.Tensor, b: torch.Tensor, sigma: float, eps: float,
         b_moments: tuple | None = None) -> torch.Tensor:
    """Per-voxel local normalized cross-correlation with Gaussian windows.

    Moments are Gaussian-blurred a, b, a^2, b^2, ab.  ``b_moments`` may carry
    precomputed ``(blur(b), blur(b*b))`` when b is constant across calls.
    Values are clipped to [-1, 1]; the clip is treated as identity in the
    backward pass (out-of-range values arise only from rounding).
    """
    mu_a = blur(a, sigma)
    e_a2 = blur(a * a, sigma)
    if b_moments is None:
        mu_b = blur(b, sigma)
        e_b2 = blur(b * b, sigma)
    else:
        mu_b, e_b2 = b_moments
    e_ab = blur(a * b, sigma)
    var_a = e_a2 - mu_a * mu_a
    var_b = e_b2 - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    ncc = cov / torch.sqrt((var_a + eps) * (var_b + eps))
    return ncc + (ncc.clamp(-1.0, 1.0) - ncc).detach()


def as_tensor(arr: np.ndarray) -> torch.Tensor:
    """View a float64 numpy array as a torch tensor (no copy)."""
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
