"""Displacement-field image registration by instance optimization.

The package optimizes a pair of dense displacement fields for one image
pair under a symmetric local-correlation similarity plus an
inverse-consistency regularizer, combining the two objective gradients
either by weighted summation or, when they conflict, by randomly
projecting one into the normal space of the other.  Synthetic phantoms
with known ground truth, evaluation metrics (Dice, HD95, folding
fraction, landmark error), a CLI, and an HTTP service round out the
toolkit.
"""

from ._version import __version__
from .errors import GpregError, NonFiniteLossError, PreconditionError
from .grids import (DisplacementField, JacobianField, Volume, compose_fields,
                    downsample2, gaussian_blur, jacobian_field,
                    sample_trilinear, upsample_to, warp_volume)
from .losses import (GradientPair, LossBreakdown, PairContext, flat_params,
                     gradicon_reg, lncc_map, loss_gradients, sim_loss,
                     total_loss, unflatten_params)
from .metrics import (LabelMap, LandmarkSet, MetricsReport, dice, hd95,
                      hd95_mean, ndv, tre, warp_labels)
from .optim import (MODE_GRADIENT_PROJECTION, MODE_SCALARIZATION,
                    VARIANT_AS_PRINTED, VARIANT_PROJECTED_ONTO, VICTIM_NONE,
                    VICTIM_REG, VICTIM_SIM, AmsGradState,
                    GpConfig, StepLog, amsgrad_step, combine_gradients,
                    conflict_rate, detect_conflict, instance_optimize,
                    project)
from .phantoms import PhantomPair, invert_field, make_phantom

__all__ = [
    "__version__",
    "GpregError", "NonFiniteLossError", "PreconditionError",
    "Volume", "DisplacementField", "JacobianField",
    "sample_trilinear", "warp_volume", "compose_fields", "jacobian_field",
    "gaussian_blur", "downsample2", "upsample_to",
    "LossBreakdown", "GradientPair", "PairContext",
    "lncc_map", "sim_loss", "gradicon_reg", "total_loss", "loss_gradients",
    "flat_params", "unflatten_params",
    "GpConfig", "StepLog", "AmsGradState",
    "MODE_SCALARIZATION", "MODE_GRADIENT_PROJECTION",
    "VARIANT_PROJECTED_ONTO", "VARIANT_AS_PRINTED",
    "VICTIM_NONE", "VICTIM_SIM", "VICTIM_REG",
    "detect_conflict", "project", "combine_gradients", "amsgrad_step",
    "instance_optimize", "conflict_rate",
    "LabelMap", "LandmarkSet", "MetricsReport",
    "warp_labels", "dice", "hd95", "hd95_mean", "ndv", "tre",
    "PhantomPair", "make_phantom", "invert_field",
]
