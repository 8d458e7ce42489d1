"""Instance optimization of displacement-field pairs with two ways of
combining the similarity and regularity gradients:

* ``scalarization``: step along ``g_sim + lambda * g_reg``;
* ``gradient_projection``: when the two (weighted) gradients conflict,
  project a randomly chosen one into the normal space of the other before
  summing.  Non-conflicting steps are identical to scalarization.

Updates use AMSGrad with decoupled weight decay.  Every run is a pure
function of (inputs, config): the victim draw comes from a seeded
generator and each step is logged.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteLossError, PreconditionError
from .grids import DisplacementField, Volume
from .losses import (DEFAULT_EPS, DEFAULT_LAMBDA, DEFAULT_SIGMA, PairContext,
                     flat_params, unflatten_params)

MODE_SCALARIZATION = "scalarization"
MODE_GRADIENT_PROJECTION = "gradient_projection"
MODES = (MODE_SCALARIZATION, MODE_GRADIENT_PROJECTION)

VARIANT_PROJECTED_ONTO = "projected_onto"
VARIANT_AS_PRINTED = "as_printed"
VARIANTS = (VARIANT_PROJECTED_ONTO, VARIANT_AS_PRINTED)

VICTIM_NONE = "none"
VICTIM_SIM = "sim"
VICTIM_REG = "reg"


@dataclass
class GpConfig:
    """Configuration of one instance-optimization run."""

    lam: float = DEFAULT_LAMBDA
    steps: int = 100
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 1e-3
    mode: str = MODE_GRADIENT_PROJECTION
    denominator_variant: str = VARIANT_PROJECTED_ONTO
    seed: int = 0
    sigma: float = DEFAULT_SIGMA
    lncc_eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not (self.lr > 0):
            raise PreconditionError(f"lr must be > 0, got {self.lr}")
        if not (isinstance(self.steps, int) and self.steps >= 1):
            raise PreconditionError(f"steps must be an integer >= 1, got {self.steps}")
        if not (self.lam >= 0):
            raise PreconditionError(f"lambda must be >= 0, got {self.lam}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise PreconditionError(
                f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not (self.eps_opt > 0):
            raise PreconditionError(f"eps_opt must be > 0, got {self.eps_opt}")
        if not (self.weight_decay >= 0):
            raise PreconditionError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.mode not in MODES:
            raise PreconditionError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.denominator_variant not in VARIANTS:
            raise PreconditionError(
                f"denominator_variant must be one of {VARIANTS}, "
                f"got {self.denominator_variant!r}")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2 ** 64):
            raise PreconditionError(f"seed must be a 64-bit integer, got {self.seed!r}")
        if not (self.sigma > 0):
            raise PreconditionError(f"sigma must be > 0, got {self.sigma}")
        if not (self.lncc_eps > 0):
            raise PreconditionError(f"lncc_eps must be > 0, got {self.lncc_eps}")


@dataclass
class StepLog:
    """Everything observable about one optimization step."""

    step: int
    sim_fwd: float
    sim_bwd: float
    reg: float
    total: float
    g_sim_norm: float
    g_reg_norm: float
    inner_product: float
    cosine: float
    conflict: bool
    victim: str
    update_norm: float


@dataclass
class CombineRecord:
    """Diagnostics of one gradient combination."""

    g_sim_norm: float
    g_reg_norm: float
    inner_product: float
    cosine: float
    conflict: bool
    victim: str


@dataclass
class AmsGradState:
    """AMSGrad moment buffers over the flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    v_hat: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AmsGradState":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), 0)


def _check_lengths(g1: np.ndarray, g2: np.ndarray):
    if g1.shape != g2.shape or g1.ndim != 1:
        raise PreconditionError(
            f"gradient vectors must be flat and equal length, "
            f"got {g1.shape} vs {g2.shape}")


def detect_conflict(g1: np.ndarray, g2: np.ndarray) -> bool:
    """True iff the inner product is strictly negative; a zero vector
    conflicts with nothing."""
    _check_lengths(g1, g2)
    return bool(float(np.dot(g1, g2)) < 0.0)


def project(victim: np.ndarray, other: np.ndarray,
            variant: str = VARIANT_PROJECTED_ONTO) -> np.ndarray:
    """Remove from ``victim`` its component along ``other``.

    ``projected_onto`` divides by ||other||^2, which places the result in
    the normal space of ``other`` (exact orthogonality, norm never grows).
    ``as_printed`` divides by ||victim||^2 instead; it is kept for fidelity
    experiments and guarantees neither property.
    """
    _check_lengths(victim, other)
    if variant not in VARIANTS:
        raise PreconditionError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if variant == VARIANT_PROJECTED_ONTO:
        denom = float(np.dot(other, other))
    else:
        denom = float(np.dot(victim, victim))
    if denom == 0.0:
        raise PreconditionError("projection denominator is zero")
    coef = float(np.dot(victim, other)) / denom
    return victim - coef * other


def combine_gradients(g_sim: np.ndarray, g_reg: np.ndarray, lam: float,
                      mode: str, variant: str, rng: np.random.Generator
                      ) -> tuple[np.ndarray, CombineRecord]:
    """Combine the two objective gradients into one update direction.

    The regularizer gradient is weighted by ``lam`` before anything else,
    so scalarization is the exact non-conflict limit of projection.  The
    conflict flag is logged in both modes (it is a property of the
    gradients); a victim is drawn, uniformly at random, only when the
    projection mode actually projects.
    """
    _check_lengths(g_sim, g_reg)
    if mode not in MODES:
        raise PreconditionError(f"mode must be one of {MODES}, got {mode!r}")
    gr = lam * g_reg
    inner = float(np.dot(g_sim, gr))
    norm_sim = float(np.linalg.norm(g_sim))
    norm_reg = float(np.linalg.norm(gr))
    cosine = inner / (norm_sim * norm_reg) if norm_sim > 0 and norm_reg > 0 else 0.0
    conflict = inner < 0.0
    victim = VICTIM_NONE
    if mode == MODE_GRADIENT_PROJECTION and conflict:
        victim = VICTIM_SIM if rng.random() < 0.5 else VICTIM_REG
        if victim == VICTIM_SIM:
            combined = project(g_sim, gr, variant) + gr
        else:
            combined = g_sim + project(gr, g_sim, variant)
    else:
        combined = g_sim + gr
    return combined, CombineRecord(norm_sim, norm_reg, inner, cosine, conflict, victim)


def amsgrad_step(state: AmsGradState, params: np.ndarray, grad: np.ndarray,
                 cfg: GpConfig) -> tuple[AmsGradState, np.ndarray]:
    """One AMSGrad update with decoupled weight decay, in place.

    m and v are the usual exponential moments, v_hat their elementwise
    running max; bias correction uses the incremented step count.  Weight
    decay shrinks the parameters after the adaptive step.
    """
    _check_lengths(params, grad)
    _check_lengths(params, state.m)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteLossError("non-finite gradient passed to optimizer step")
    state.t += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * (grad * grad)
    np.maximum(state.v_hat, state.v, out=state.v_hat)
    m_hat = state.m / (1.0 - cfg.beta1 ** state.t)
    v_hat_hat = state.v_hat / (1.0 - cfg.beta2 ** state.t)
    params -= cfg.lr * m_hat / (np.sqrt(v_hat_hat) + cfg.eps_opt)
    if cfg.weight_decay != 0.0:
        params -= cfg.lr * cfg.weight_decay * params
    return state, params


def instance_optimize(i_a: Volume, i_b: Volume, init_mov: DisplacementField,
                      init_fix: DisplacementField, cfg: GpConfig
                      ) -> tuple[DisplacementField, DisplacementField, list[StepLog]]:
    """Optimize both displacement fields for one image pair.

    Each step evaluates the loss terms and their two gradients, combines
    them per ``cfg.mode``, and applies one AMSGrad update to the
    concatenated parameter vector.  Deterministic given (inputs, cfg).
    A non-finite loss or gradient aborts with the partial log attached.
    """
    if i_a.dims != i_b.dims:
        raise PreconditionError(f"image dims mismatch: {i_a.dims} vs {i_b.dims}")
    if init_mov.dims != i_a.dims or init_fix.dims != i_a.dims:
        raise PreconditionError("field dims must match image dims")
    ctx = PairContext(i_a, i_b, cfg.sigma, cfg.lncc_eps)
    params = flat_params(init_mov, init_fix)
    state = AmsGradState.zeros(params.size)
    rng = np.random.default_rng(cfg.seed)
    logs: list[StepLog] = []
    for step in range(cfg.steps):
        try:
            breakdown, pair = ctx.loss_and_gradients(params, cfg.lam)
        except NonFiniteLossError as e:
            raise NonFiniteLossError(str(e), logs=logs) from None
        combined, rec = combine_gradients(pair.g_sim, pair.g_reg, cfg.lam,
                                          cfg.mode, cfg.denominator_variant, rng)
        before = params.copy()
        try:
            amsgrad_step(state, params, combined, cfg)
        except NonFiniteLossError as e:
            raise NonFiniteLossError(str(e), logs=logs) from None
        logs.append(StepLog(
            step=step,
            sim_fwd=breakdown.sim_fwd,
            sim_bwd=breakdown.sim_bwd,
            reg=breakdown.reg,
            total=breakdown.total,
            g_sim_norm=rec.g_sim_norm,
            g_reg_norm=rec.g_reg_norm,
            inner_product=rec.inner_product,
            cosine=rec.cosine,
            conflict=rec.conflict,
            victim=rec.victim,
            update_norm=float(np.linalg.norm(params - before)),
        ))
    spacing = init_mov.spacing
    u_mov, u_fix = unflatten_params(params, i_a.dims, spacing)
    return u_mov, u_fix, logs


def conflict_rate(logs: list[StepLog]) -> float:
    """Fraction of logged steps whose gradients conflicted."""
    if not logs:
        raise PreconditionError("conflict_rate needs a non-empty log")
    return sum(1 for log in logs if log.conflict) / len(logs)
