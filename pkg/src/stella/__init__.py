"""Low-rank adaptation with orthonormal factors trained on the Stiefel manifold."""

from .adapter import (
    InitStrategy,
    ThreeFactorAdapter,
    TwoFactorAdapter,
    factor_grads,
    forward,
    init_adapter,
    merge,
    param_count,
)
from .errors import ContractError, DivergenceError, NumericalError, SingularMatrixError
from .numkernel import (
    batched_polar_factor,
    matrix_exp,
    polar_factor,
    random_orthonormal,
    thin_qr,
    thin_svd,
)
from .optim import (
    GradScale,
    OptimizerState,
    Riemannianizer,
    StepRule,
    euclidean_step,
    grad_scale_factors,
    riemannian_step,
)
from .quotient import QuotientTangent, quotient_metric
from .stiefel import (
    StiefelPoint,
    TangentVector,
    canonical_metric,
    euclidean_to_riemannian_grad,
    is_on_manifold,
    project_to_tangent,
    random_tangent,
    retract_exp,
    retract_polar,
)

__version__ = "0.1.0"
