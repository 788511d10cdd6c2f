"""Parameter estimation for nonlinear ODEs with quasilinearized ODE-penalized B-splines."""

from .bspline import BSplineBasis, build_basis, design_matrix, eval_basis
from .data import Dataset, read_dataset, write_dataset
from .errors import (
    ConfigurationError,
    DataError,
    DegenerateFitError,
    DomainError,
    NumericalError,
    QlodeError,
    SingularParameterError,
)
from .estimator import FitConfig, FitResult, fit
from .models import (
    OdeModel,
    StateCondition,
    get_model,
    model_coupled_vdp,
    model_first_order,
    model_lotka_volterra,
    model_van_der_pol,
)
from .penalty import Collocation, PenaltyAssembly
from .reference import analytic_first_order, nls_fit, rk4_solve
from .simulation import StudyConfig, generate_dataset, run_study

__version__ = "0.1.0"
