"""Nested parameter-count tests: the log-det statistic and its classical rival.

Both statistics compare the restricted fit (a mask pinning some weights to
zero) against the full fit.  The log-det statistic ``t_n`` is referred to a
chi-squared law with one degree of freedom per pinned weight; the
sum-of-squares statistic ``s_n`` has no usable reference law unless the
noise covariance is the identity, which is exactly the deficiency the
log-det cost removes, so no p-value is attached to it.
"""

from dataclasses import dataclass

import numpy as np
import scipy.special

from . import estimate
from .cost import Dataset
from .estimate import FitConfig, FitResult
from .mlp import MLPArchitecture, ParameterMask

DECISION_LEVELS = (0.10, 0.05, 0.01)

# Optimizer slack: statistics in [-NEGATIVE_SLACK, 0) clamp to zero, anything
# more negative means the full fit lost to the restricted one.
NEGATIVE_SLACK = 1e-9


class InconsistentFits(Exception):
    """Full-model fit ended above the restricted fit beyond optimizer slack."""


def chi2_cdf(x, dof):
    """Chi-squared CDF via the regularized lower incomplete gamma function."""
    if dof < 1:
        raise ValueError("dof must be a positive integer")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("chi2_cdf requires x >= 0")
    out = scipy.special.gammainc(dof / 2.0, x / 2.0)
    return float(out) if out.ndim == 0 else out


def chi2_sf(x, dof):
    """Upper tail probability, 1 - chi2_cdf, computed without cancellation."""
    if dof < 1:
        raise ValueError("dof must be a positive integer")
    x = np.asarray(x, dtype=float)
    out = scipy.special.gammaincc(dof / 2.0, x / 2.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class TestReport:
    t_n: float
    dof: int
    p_value_t: float
    fit_full: FitResult
    fit_restricted: FitResult
    decision_at_levels: dict
    s_n: float = None
    n: int = 0

    def to_json_dict(self):
        return {
            "t_n": self.t_n,
            "s_n": self.s_n,
            "dof": self.dof,
            "p_value_t": self.p_value_t,
            "n": self.n,
            "decisions": {f"{lvl:.2f}": d for lvl, d in self.decision_at_levels.items()},
            "fit_full": self.fit_full.to_json_dict(),
            "fit_restricted": self.fit_restricted.to_json_dict(),
        }

    def table(self):
        lines = [
            f"{'statistic':<12}{'value':>14}{'dof':>6}{'p-value':>12}",
            f"{'t_n':<12}{self.t_n:>14.6f}{self.dof:>6}{self.p_value_t:>12.6f}",
        ]
        if self.s_n is not None:
            lines.append(f"{'s_n':<12}{self.s_n:>14.6f}{self.dof:>6}{'-':>12}")
        decisions = "  ".join(
            f"{int(lvl * 100)}%: {self.decision_at_levels[lvl]}" for lvl in DECISION_LEVELS
        )
        lines.append(f"decision     {decisions}")
        return "\n".join(lines)


def _clamped_difference(n, cost_restricted, cost_full, label):
    raw = n * (cost_restricted - cost_full)
    if raw < -NEGATIVE_SLACK:
        raise InconsistentFits(
            f"{label} = {raw} < -{NEGATIVE_SLACK}: the full fit ended above the "
            "restricted fit; increase n_starts"
        )
    return max(raw, 0.0)


def _paired_fits(data, arch, mask_restricted, cfg, cost_kind):
    """Restricted fit, then the full fit warm-started from it.

    The warm start guarantees the full optimum is no worse than the
    restricted one, which keeps the statistic nonnegative up to line-search
    slack.
    """
    if mask_restricted.n_pinned < 1:
        raise ValueError("the restricted mask must pin at least one coordinate")
    fit_restricted = estimate.minimize(data, arch, mask_restricted, cfg, cost_kind)
    fit_full = estimate.minimize(
        data, arch, ParameterMask.all_free(arch), cfg, cost_kind,
        extra_starts=[fit_restricted.weights],
    )
    return fit_restricted, fit_full


def t_statistic(data: Dataset, arch: MLPArchitecture,
                mask_restricted: ParameterMask, cfg: FitConfig):
    """Log-det test of H0 "the pinned weights are zero".

    Returns a TestReport with t_n = n * (cost drop), its chi-squared p-value
    at dof = number of pinned coordinates, and both fits.
    """
    fit_restricted, fit_full = _paired_fits(data, arch, mask_restricted, cfg, "logdet")
    t_n = _clamped_difference(data.n, fit_restricted.cost, fit_full.cost, "t_n")
    dof = mask_restricted.n_pinned
    p = chi2_sf(t_n, dof)
    decisions = {lvl: ("reject" if p < lvl else "accept") for lvl in DECISION_LEVELS}
    return TestReport(
        t_n=t_n, dof=dof, p_value_t=p, fit_full=fit_full,
        fit_restricted=fit_restricted, decision_at_levels=decisions, n=data.n,
    )


def _s_statistic_with_fits(data, arch, mask_restricted, cfg):
    fit_restricted, fit_full = _paired_fits(data, arch, mask_restricted, cfg, "sumsquares")
    s_n = _clamped_difference(data.n, fit_restricted.cost, fit_full.cost, "s_n")
    return s_n, fit_restricted, fit_full


def s_statistic(data: Dataset, arch: MLPArchitecture,
                mask_restricted: ParameterMask, cfg: FitConfig):
    """Classical sum-of-squares statistic for the same nested hypothesis.

    Fits minimize the mean squared residual norm; the statistic is n times
    the drop, i.e. the raw residual-sum-of-squares difference.  No p-value:
    its asymptotic law is a weighted chi-squared mixture whose weights
    depend on the unknown noise covariance.
    """
    return _s_statistic_with_fits(data, arch, mask_restricted, cfg)[0]
