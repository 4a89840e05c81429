"""Fitting and nested parameter tests for one-hidden-layer MLPs with
multivariate output, using the log-determinant of the residual covariance
as cost so the test statistic has a plain chi-squared null law."""

from .cost import Dataset, SingularCovariance
from .estimate import AllStartsFailed, FitConfig, FitResult, estimate_info_matrix, minimize
from .hypothesis import InconsistentFits, TestReport, chi2_cdf, s_statistic, t_statistic
from .mlp import (
    MLPArchitecture,
    ParameterMask,
    WeightVector,
    apply_mask,
    canonicalize,
    forward,
    random_init,
)
from .simulate import (
    GeneratorSpec,
    MonteCarloReport,
    contrast_probe,
    generate,
    ks_statistic,
    qq_points,
    run_replications,
)

__version__ = "0.1.0"
