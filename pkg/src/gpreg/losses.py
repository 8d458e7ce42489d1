"""Loss terms for symmetric pairwise registration: local normalized
cross-correlation similarity in both directions plus a gradient
inverse-consistency penalty on the composition of the two fields.

Exact gradients of the discrete losses with respect to both displacement
fields come from reverse-mode autodiff over the tensor primitives; their
correctness contract is the central finite-difference check in the tests.

Parameter layout: one flat float64 vector, ``concat(u_mov, u_fix)`` with
each field raveled component-major from its (3, D, H, W) array.
"""

from dataclasses import dataclass

import numpy as np
import torch

from . import tensorops
from .errors import NonFiniteLossError, PreconditionError
from .grids import DisplacementField, Volume

DEFAULT_LAMBDA = 1.5
DEFAULT_SIGMA = 5.0
DEFAULT_EPS = 1e-5


@dataclass
class LossBreakdown:
    """One evaluation of the full objective.  ``reg`` is unweighted;
    ``total = sim_fwd + sim_bwd + lam * reg``."""

    sim_fwd: float
    sim_bwd: float
    reg: float
    total: float
    lam: float


@dataclass
class GradientPair:
    """Gradients of the two objectives kept separate for projection.
    ``g_reg`` is the gradient of the unweighted regularizer; the trade-off
    weight is applied at combination time."""

    g_sim: np.ndarray
    g_reg: np.ndarray


def _check_pair(a: Volume, b: Volume, sigma: float, eps: float):
    if a.dims != b.dims:
        raise PreconditionError(f"volume dims mismatch: {a.dims} vs {b.dims}")
    if not (sigma > 0):
        raise PreconditionError(f"sigma must be > 0, got {sigma}")
    if not (eps > 0):
        raise PreconditionError(f"eps must be > 0, got {eps}")


def _reg_term(t_mov: torch.Tensor, t_fix: torch.Tensor) -> torch.Tensor:
    """Mean squared Frobenius norm of (grad of the composed map - I),
    which equals the mean of the composed displacement's gradient energy."""
    comp = tensorops.compose(t_mov, t_fix)
    g = tensorops.displacement_gradient(comp)
    return (g * g).sum(dim=(0, 1)).mean()


def lncc_map(a: Volume, b: Volume, sigma: float = DEFAULT_SIGMA,
             eps: float = DEFAULT_EPS) -> Volume:
    """Per-voxel local normalized cross-correlation in [-1, 1], computed
    from Gaussian-windowed means, variances, and covariance."""
    _check_pair(a, b, sigma, eps)
    out = tensorops.lncc(tensorops.as_tensor(a.data), tensorops.as_tensor(b.data),
                         float(sigma), float(eps))
    return Volume(out.numpy(), a.spacing.copy())


def sim_loss(a: Volume, b: Volume, sigma: float = DEFAULT_SIGMA,
             eps: float = DEFAULT_EPS) -> float:
    """1 - mean(lncc_map); lies in [0, 2], minimized by identical images."""
    _check_pair(a, b, sigma, eps)
    out = tensorops.lncc(tensorops.as_tensor(a.data), tensorops.as_tensor(b.data),
                         float(sigma), float(eps))
    return float(1.0 - out.mean())


def gradicon_reg(u_mov: DisplacementField, u_fix: DisplacementField) -> float:
    """Inverse-consistency penalty: mean over voxels of the squared
    Frobenius norm of (jacobian of the composed map - identity).  Zero iff
    the composition is grid-exactly rigid-identity in its Jacobian."""
    if u_mov.dims != u_fix.dims:
        raise PreconditionError(f"field dims mismatch: {u_mov.dims} vs {u_fix.dims}")
    if min(u_mov.dims) < 3:
        raise PreconditionError(f"regularizer needs every dim >= 3, got {u_mov.dims}")
    return float(_reg_term(tensorops.as_tensor(u_mov.data),
                           tensorops.as_tensor(u_fix.data)))


def flat_params(u_mov: DisplacementField, u_fix: DisplacementField) -> np.ndarray:
    """Concatenate both fields into the canonical flat parameter vector."""
    if u_mov.dims != u_fix.dims:
        raise PreconditionError(f"field dims mismatch: {u_mov.dims} vs {u_fix.dims}")
    return np.concatenate([u_mov.data.ravel(), u_fix.data.ravel()])


def unflatten_params(params: np.ndarray, dims, spacing=(1.0, 1.0, 1.0)
                     ) -> tuple[DisplacementField, DisplacementField]:
    """Inverse of flat_params for a known grid shape."""
    dims = tuple(int(d) for d in dims)
    n = 3 * int(np.prod(dims))
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (2 * n,):
        raise PreconditionError(
            f"parameter vector has length {params.shape}, expected ({2 * n},)")
    u_mov = DisplacementField(params[:n].reshape((3,) + dims).copy(),
                              np.asarray(spacing, dtype=np.float64))
    u_fix = DisplacementField(params[n:].reshape((3,) + dims).copy(),
                              np.asarray(spacing, dtype=np.float64))
    return u_mov, u_fix


class PairContext:
    """Per-pair precomputation reused across optimization steps.

    Holds the image tensors and the Gaussian moments of each image in its
    role as the static side of an LNCC comparison; those moments do not
    depend on the displacement fields.
    """

    def __init__(self, i_a: Volume, i_b: Volume, sigma: float = DEFAULT_SIGMA,
                 eps: float = DEFAULT_EPS):
        _check_pair(i_a, i_b, sigma, eps)
        if min(i_a.dims) < 3:
            raise PreconditionError(f"loss needs every dim >= 3, got {i_a.dims}")
        self.dims = i_a.dims
        self.sigma = float(sigma)
        self.eps = float(eps)
        self.t_a = tensorops.as_tensor(i_a.data)
        self.t_b = tensorops.as_tensor(i_b.data)
        self.moments_a = (tensorops.blur(self.t_a, self.sigma),
                          tensorops.blur(self.t_a * self.t_a, self.sigma))
        self.moments_b = (tensorops.blur(self.t_b, self.sigma),
                          tensorops.blur(self.t_b * self.t_b, self.sigma))
        self.n_field = 3 * int(np.prod(self.dims))

    def terms(self, t_mov: torch.Tensor, t_fix: torch.Tensor):
        """Torch scalars (sim_fwd, sim_bwd, reg) for the given fields."""
        warped_a = tensorops.warp(self.t_a, t_mov)
        warped_b = tensorops.warp(self.t_b, t_fix)
        sim_fwd = 1.0 - tensorops.lncc(warped_a, self.t_b, self.sigma, self.eps,
                                       b_moments=self.moments_b).mean()
        sim_bwd = 1.0 - tensorops.lncc(warped_b, self.t_a, self.sigma, self.eps,
                                       b_moments=self.moments_a).mean()
        reg = _reg_term(t_mov, t_fix)
        return sim_fwd, sim_bwd, reg

    def loss_and_gradients(self, params: np.ndarray, lam: float
                           ) -> tuple[LossBreakdown, GradientPair]:
        """One forward pass and two backward passes over the flat vector."""
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (2 * self.n_field,):
            raise PreconditionError(
                f"parameter vector has shape {params.shape}, "
                f"expected ({2 * self.n_field},)")
        t_all = torch.from_numpy(params).requires_grad_(True)
        t_mov = t_all[:self.n_field].reshape((3,) + self.dims)
        t_fix = t_all[self.n_field:].reshape((3,) + self.dims)
        sim_fwd, sim_bwd, reg = self.terms(t_mov, t_fix)
        (g_sim,) = torch.autograd.grad(sim_fwd + sim_bwd, t_all, retain_graph=True)
        (g_reg,) = torch.autograd.grad(reg, t_all)
        t_all.requires_grad_(False)
        fwd = float(sim_fwd.detach())
        bwd = float(sim_bwd.detach())
        r = float(reg.detach())
        total = fwd + bwd + float(lam) * r
        if not np.isfinite(total):
            raise NonFiniteLossError(
                f"non-finite loss: sim_fwd={fwd} sim_bwd={bwd} reg={r}")
        return (LossBreakdown(fwd, bwd, r, total, float(lam)),
                GradientPair(g_sim.numpy(), g_reg.numpy()))


def total_loss(i_a: Volume, i_b: Volume, u_mov: DisplacementField,
               u_fix: DisplacementField, lam: float = DEFAULT_LAMBDA,
               sigma: float = DEFAULT_SIGMA, eps: float = DEFAULT_EPS
               ) -> LossBreakdown:
    """Full objective: sim_loss(warp(i_a, u_mov), i_b) both ways plus the
    weighted inverse-consistency term."""
    if not (lam >= 0):
        raise PreconditionError(f"lambda must be >= 0, got {lam}")
    _check_pair(i_a, i_b, sigma, eps)
    if u_mov.dims != i_a.dims or u_fix.dims != i_a.dims:
        raise PreconditionError("field dims must match image dims")
    ctx = PairContext(i_a, i_b, sigma, eps)
    with torch.no_grad():
        sim_fwd, sim_bwd, reg = ctx.terms(tensorops.as_tensor(u_mov.data),
                                          tensorops.as_tensor(u_fix.data))
    fwd, bwd, r = float(sim_fwd), float(sim_bwd), float(reg)
    return LossBreakdown(fwd, bwd, r, fwd + bwd + float(lam) * r, float(lam))


def loss_gradients(i_a: Volume, i_b: Volume, u_mov: DisplacementField,
                   u_fix: DisplacementField, sigma: float = DEFAULT_SIGMA,
                   eps: float = DEFAULT_EPS) -> GradientPair:
    """Exact gradients of (sim_fwd + sim_bwd) and of the unweighted
    regularizer with respect to the flat parameter vector."""
    ctx = PairContext(i_a, i_b, sigma, eps)
    if u_mov.dims != i_a.dims or u_fix.dims != i_a.dims:
        raise PreconditionError("field dims must match image dims")
    params = flat_params(u_mov, u_fix)
    _, pair = ctx.loss_and_gradients(params, 0.0)
    if not (np.all(np.isfinite(pair.g_sim)) and np.all(np.isfinite(pair.g_reg))):
        raise NonFiniteLossError("non-finite gradient")
    return pair
