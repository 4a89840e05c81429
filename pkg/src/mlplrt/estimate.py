"""Multi-start minimization of the residual costs over free weight coordinates.

The descent engine is a limited-memory quasi-Newton (L-BFGS) with a
backtracking line search using quadratic interpolation.  Iterates are
clamped to the box [-box_radius, box_radius] on every trial step, pinned
coordinates are simply excluded from the optimization variables, and a step
that lands on an undefined point (singular residual covariance) is treated
as "too long" and backtracked, never consumed as an infinite value.
"""

from dataclasses import dataclass

import numpy as np

from . import cost, linalg, mlp
from .cost import Dataset, SingularCovariance
from .linalg import DimensionMismatch
from .mlp import MLPArchitecture, ParameterMask, WeightVector

COST_KINDS = ("logdet", "sumsquares", "gls")

# Two multi-start endpoints count as the same minimum when their canonical
# weight vectors agree to this max-norm tolerance.
DEDUP_TOL = 1e-4

_ARMIJO_C1 = 1e-4
_MAX_BACKTRACKS = 60
_MEMORY = 10


class AllStartsFailed(Exception):
    """No optimization start produced a usable (finite) final point."""

    def __init__(self, starts):
        self.starts = starts
        lines = "; ".join(
            f"seed {s.seed}: {s.error or 'no finite cost'}" for s in starts
        )
        super().__init__(f"every start failed ({lines})")


@dataclass
class FitConfig:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-7
    n_starts: int = 10
    seed: int = 0
    box_radius: float = mlp.DEFAULT_BOX_RADIUS

    def __post_init__(self):
        if self.max_iterations < 1 or self.n_starts < 1:
            raise ValueError("max_iterations and n_starts must be positive")
        if self.gradient_tolerance <= 0 or self.box_radius <= 0:
            raise ValueError("gradient_tolerance and box_radius must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class StartRecord:
    seed: object          # int for random starts, None for warm starts
    cost: float           # +inf when the start failed outright
    converged: bool
    n_iterations: int
    on_boundary: bool
    error: str = ""


@dataclass
class FitResult:
    weights: WeightVector          # canonicalized best endpoint
    cost: float
    gradient_norm: float           # max-norm over free coordinates
    converged: bool
    starts_summary: list
    n_distinct_minima: int
    info_matrix: np.ndarray = None

    def to_json_dict(self):
        d = {
            "architecture": self.weights.arch.to_dict(),
            "weights": list(self.weights.values),
            "cost": self.cost,
            "gradient_norm": self.gradient_norm,
            "converged": self.converged,
            "n_distinct_minima": self.n_distinct_minima,
            "starts": [
                {
                    "seed": s.seed,
                    "cost": s.cost,
                    "converged": s.converged,
                    "iterations": s.n_iterations,
                    "on_boundary": s.on_boundary,
                    "error": s.error,
                }
                for s in self.starts_summary
            ],
        }
        if self.info_matrix is not None:
            d["info_matrix"] = [list(row) for row in self.info_matrix]
        return d


@dataclass
class _DescentOutcome:
    x: np.ndarray
    value: float
    grad: np.ndarray
    history: list
    converged: bool
    n_iterations: int


def _projected_gradient(x, g, radius):
    pg = g.copy()
    at_lower = x <= -radius
    at_upper = x >= radius
    pg[at_lower] = np.minimum(pg[at_lower], 0.0)
    pg[at_upper] = np.maximum(pg[at_upper], 0.0)
    return pg


def _two_loop_direction(g, s_pairs, y_pairs, rho):
    q = g.copy()
    alphas = []
    for s, y, r in zip(reversed(s_pairs), reversed(y_pairs), reversed(rho)):
        a = r * (s @ q)
        alphas.append(a)
        q -= a * y
    if y_pairs:
        q *= (s_pairs[-1] @ y_pairs[-1]) / (y_pairs[-1] @ y_pairs[-1])
    for s, y, r, a in zip(s_pairs, y_pairs, rho, reversed(alphas)):
        b = r * (y @ q)
        q += s * (a - b)
    return -q


def _descend(fun, x0, radius, max_iterations, gradient_tolerance):
    """Projected L-BFGS; `fun` returns (value, gradient) or raises
    SingularCovariance where the cost is undefined."""
    x = np.clip(x0, -radius, radius)
    f, g = fun(x)  # propagate: a start at an undefined point has failed
    history = [f]
    s_pairs, y_pairs, rho = [], [], []
    converged = False
    n_iter = 0

    for _ in range(max_iterations):
        if np.max(np.abs(_projected_gradient(x, g, radius))) <= gradient_tolerance:
            converged = True
            break
        d = _two_loop_direction(g, s_pairs, y_pairs, rho)
        gd = g @ d
        if not np.isfinite(gd) or gd >= 0:
            s_pairs, y_pairs, rho = [], [], []
            d = -g
            gd = g @ d
        t = 1.0 if s_pairs else min(1.0, 1.0 / max(1.0, np.max(np.abs(g))))

        accepted = None
        for _ in range(_MAX_BACKTRACKS):
            x_try = np.clip(x + t * d, -radius, radius)
            dx = x_try - x
            if not np.any(dx):
                break
            try:
                f_try, g_try = fun(x_try)
            except SingularCovariance:
                t *= 0.5
                continue
            slope = g @ dx
            armijo = f_try <= f + _ARMIJO_C1 * min(slope, 0.0)
            # Near the optimum the cost flattens to float granularity before
            # the gradient meets the tolerance; equal-cost steps that shrink
            # the gradient max-norm keep polishing without breaking the
            # non-increasing cost guarantee.
            polishing = f_try <= f and np.max(np.abs(g_try)) < np.max(np.abs(g))
            if np.isfinite(f_try) and (armijo or polishing):
                accepted = (x_try, f_try, g_try)
                break
            # quadratic interpolation for the next trial step, kept inside
            # [0.1 t, 0.5 t] for robustness
            denom = 2.0 * (f_try - f - gd * t)
            t_new = -gd * t * t / denom if np.isfinite(f_try) and denom > 0 else 0.5 * t
            t = min(max(t_new, 0.1 * t), 0.5 * t)
        if accepted is None:
            break

        x_new, f_new, g_new = accepted
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_pairs.append(s)
            y_pairs.append(y)
            rho.append(1.0 / sy)
            if len(s_pairs) > _MEMORY:
                s_pairs.pop(0)
                y_pairs.pop(0)
                rho.pop(0)
        x, f, g = x_new, f_new, g_new
        history.append(f)
        n_iter += 1
    if not converged:
        converged = bool(
            np.max(np.abs(_projected_gradient(x, g, radius))) <= gradient_tolerance
        )
    return _DescentOutcome(x, f, g, history, converged, n_iter)


def _objective(cost_kind, arch, mask, data, gamma):
    z, y = data.inputs, data.targets
    free = mask.free
    full = np.zeros(arch.n_params)

    if cost_kind == "logdet":
        value_grad = lambda vals: cost.logdet_value_grad(vals, arch, z, y)
    elif cost_kind == "sumsquares":
        value_grad = lambda vals: cost.sumsquares_value_grad(vals, arch, z, y)
    elif cost_kind == "gls":
        if gamma is None:
            raise ValueError("cost_kind 'gls' requires a gamma matrix")
        try:
            factor = linalg.cholesky(gamma)
        except linalg.NotPositiveDefinite as exc:
            raise SingularCovariance("gls weighting matrix is singular") from exc
        gamma_inverse = linalg.spd_inverse(factor)
        value_grad = lambda vals: cost.gls_value_grad(vals, arch, z, y, gamma_inverse)
    else:
        raise ValueError(f"unknown cost_kind {cost_kind!r}; expected one of {COST_KINDS}")

    def fun(x_free):
        vals = full.copy()
        vals[free] = x_free
        value, grad = value_grad(vals)
        return value, grad[free]

    return fun


def minimize(data: Dataset, arch: MLPArchitecture, mask: ParameterMask,
             cfg: FitConfig, cost_kind="logdet", gamma=None, extra_starts=(),
             with_info=False):
    """Minimize the chosen cost over the mask's free coordinates.

    Runs `cfg.n_starts` random starts (seeds cfg.seed, cfg.seed + 1, ...)
    plus any `extra_starts` weight vectors, keeps the best endpoint by
    (cost, start order), and returns it canonicalized.  Deterministic in
    (cfg.seed, data).

    Raises AllStartsFailed when not a single start reaches a point with a
    finite cost.
    """
    if arch.input_dim != data.input_dim or arch.output_dim != data.output_dim:
        raise DimensionMismatch("architecture does not match dataset dimensions")
    if mask.arch != arch:
        raise mlp.ArchMismatch("mask architecture does not match fit architecture")

    fun = _objective(cost_kind, arch, mask, data, gamma)
    free = mask.free

    starts = []
    outcomes = []  # (order, StartRecord, outcome x) for usable starts
    initial_points = [
        (cfg.seed + i, mlp.random_init(arch, mask, cfg.seed + i)) for i in range(cfg.n_starts)
    ] + [(None, mlp.apply_mask(w, mask)) for w in extra_starts]

    for order, (seed, w0) in enumerate(initial_points):
        x0 = w0.values[free]
        try:
            out = _descend(fun, x0, cfg.box_radius, cfg.max_iterations,
                           cfg.gradient_tolerance)
        except SingularCovariance as exc:
            starts.append(StartRecord(seed, np.inf, False, 0, False, str(exc)))
            continue
        on_boundary = bool(np.any(np.abs(out.x) >= cfg.box_radius))
        record = StartRecord(seed, out.value, out.converged and not on_boundary,
                             out.n_iterations, on_boundary)
        starts.append(record)
        if np.isfinite(out.value):
            outcomes.append((order, record, out))

    if not outcomes:
        raise AllStartsFailed(starts)

    best_order, best_record, best = min(outcomes, key=lambda t: (t[2].value, t[0]))
    values = np.zeros(arch.n_params)
    values[free] = best.x
    weights = mlp.canonicalize(WeightVector(arch, values, cfg.box_radius))

    finals = []
    for _, _, out in outcomes:
        vals = np.zeros(arch.n_params)
        vals[free] = out.x
        finals.append(mlp.canonicalize(WeightVector(arch, vals, cfg.box_radius)).values)
    distinct = []
    for v in finals:
        if not any(np.max(np.abs(v - u)) <= DEDUP_TOL for u in distinct):
            distinct.append(v)

    result = FitResult(
        weights=weights,
        cost=best.value,
        gradient_norm=float(np.max(np.abs(best.grad))),
        converged=best_record.converged,
        starts_summary=starts,
        n_distinct_minima=len(distinct),
    )
    if with_info:
        try:
            result.info_matrix = estimate_info_matrix(weights, data)
        except SingularCovariance:
            result.info_matrix = None
    return result


def estimate_info_matrix(w: WeightVector, data: Dataset):
    """Plug-in information matrix: entry (k,l) = tr(G_n^{-1} b_n(k,l)).

    Equals the average over samples of J_t^T G_n^{-1} J_t, a symmetric
    positive semidefinite (s, s) matrix.
    """
    cov = cost.gamma_n(w, data)
    jac = mlp.weight_jacobian(w, data.inputs)
    info = np.einsum("tik,ij,tjl->kl", jac, cov.inverse, jac) / data.n
    return linalg.symmetrize(info)
