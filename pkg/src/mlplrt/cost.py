"""Cost functions on residuals and their analytic derivatives.

Three costs are supported for a network `w` on a dataset of n pairs
(z_t, y_t) with residuals r_t = y_t - F_w(z_t):

* ``u_n``        log det of the uncentered residual covariance
                 G_n(w) = (1/n) sum_t r_t r_t^T
* ``v_n``        raw sum of squared residual norms
* ``gls_cost``   (1/n) sum_t r_t^T gamma^{-1} r_t for a fixed SPD gamma

The gradient of u_n has the closed form 2 tr(G_n^{-1} A_n(k)) per
coordinate, and the Hessian decomposes into A-, B- and C-blocks built from
the network Jacobian and second derivatives; ``a_n``, ``b_n`` and ``c_n``
expose those blocks individually for testing while ``grad_u_n`` and
``hessian_u_n`` use fused single-pass versions.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import linalg, mlp
from .linalg import DimensionMismatch
from .mlp import MLPArchitecture, WeightVector


class SingularCovariance(Exception):
    """Residuals do not span output space; the log-det cost is undefined."""


@dataclass
class Dataset:
    """n observed (input, target) pairs, inputs (n, d_in), targets (n, d_out)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DimensionMismatch("inputs and targets disagree on sample count")
        if self.n < self.output_dim + 1:
            raise ValueError(
                f"need at least output_dim + 1 = {self.output_dim + 1} samples, got {self.n}"
            )
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset contains non-finite values")

    @property
    def n(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    @property
    def output_dim(self):
        return self.targets.shape[1]

    def to_csv(self):
        """CSV text with header z_1..z_din, y_1..y_dout, one row per sample."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            [f"z_{i + 1}" for i in range(self.input_dim)]
            + [f"y_{i + 1}" for i in range(self.output_dim)]
        )
        for z, y in zip(self.inputs, self.targets):
            writer.writerow([format(v, ".17g") for v in z] + [format(v, ".17g") for v in y])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if not header:
            raise ValueError("empty CSV")
        d_in = sum(1 for c in header if c.startswith("z_"))
        d_out = sum(1 for c in header if c.startswith("y_"))
        if d_in + d_out != len(header) or d_in == 0 or d_out == 0:
            raise ValueError(f"unrecognized CSV header {header!r}")
        rows = [[float(v) for v in row] for row in reader if row]
        data = np.asarray(rows, dtype=float)
        return cls(data[:, :d_in], data[:, d_in:])


@dataclass
class ResidualCovariance:
    """G_n(w) with its Cholesky factor and inverse, all consistent."""

    gamma: np.ndarray
    factor: np.ndarray
    inverse: np.ndarray


def _check_dims(w: WeightVector, data: Dataset):
    if w.arch.input_dim != data.input_dim or w.arch.output_dim != data.output_dim:
        raise DimensionMismatch(
            f"architecture ({w.arch.input_dim}->{w.arch.output_dim}) does not match "
            f"dataset ({data.input_dim}->{data.output_dim})"
        )


def residuals(w: WeightVector, data: Dataset):
    """Rows y_t - F_w(z_t)."""
    _check_dims(w, data)
    return data.targets - mlp.forward(w, data.inputs)


def _covariance_of(res):
    gamma = linalg.sample_covariance(res)
    try:
        factor = linalg.cholesky(gamma)
    except linalg.NotPositiveDefinite as exc:
        raise SingularCovariance(
            f"residual covariance is singular (pivot {exc.pivot_index})"
        ) from exc
    return ResidualCovariance(gamma, factor, linalg.spd_inverse(factor))


def gamma_n(w: WeightVector, data: Dataset):
    """Uncentered residual covariance; raises SingularCovariance when rank-deficient."""
    return _covariance_of(residuals(w, data))


def u_n(w: WeightVector, data: Dataset):
    """Log-determinant of the residual covariance."""
    return linalg.logdet(gamma_n(w, data).factor)


def v_n(w: WeightVector, data: Dataset):
    """Raw sum (not mean) of squared Euclidean residual norms."""
    res = residuals(w, data)
    return float(np.sum(res * res))


def gls_cost(w: WeightVector, data: Dataset, gamma):
    """(1/n) sum_t r_t^T gamma^{-1} r_t for a fixed SPD matrix gamma."""
    try:
        factor = linalg.cholesky(gamma)
    except linalg.NotPositiveDefinite as exc:
        raise SingularCovariance("gls weighting matrix is singular") from exc
    inv = linalg.spd_inverse(factor)
    res = residuals(w, data)
    return float(np.einsum("ti,ij,tj->", res, inv, res) / data.n)


def a_n(w: WeightVector, data: Dataset, k):
    """(1/n) sum_t (-dF/dW_k)(z_t) r_t^T, a (d_out, d_out) matrix."""
    res = residuals(w, data)
    jac = mlp.weight_jacobian(w, data.inputs)
    return -np.einsum("ti,tj->ij", jac[:, :, k], res) / data.n


def b_n(w: WeightVector, data: Dataset, k, l):
    """(1/n) sum_t (dF/dW_k)(z_t) (dF/dW_l)(z_t)^T."""
    _check_dims(w, data)
    jac = mlp.weight_jacobian(w, data.inputs)
    return np.einsum("ti,tj->ij", jac[:, :, k], jac[:, :, l]) / data.n


def c_n(w: WeightVector, data: Dataset, k, l):
    """(1/n) sum_t -r_t (d2F/dW_k dW_l)(z_t)^T."""
    res = residuals(w, data)
    second = mlp.weight_second_derivative(w, data.inputs, k, l)
    return -np.einsum("ti,tj->ij", res, second) / data.n


# ---------------------------------------------------------------------------
# Fused evaluation paths.  These operate on the flat weight array directly so
# the optimizer does not pay dataclass-validation overhead per iteration.

def _net_pass(values, arch, z):
    w1, b1, w2, b2 = arch.unpack(values)
    act = np.tanh(z @ w1.T + b1)
    out = act @ w2.T + b2
    return act, out, w2


def _jacobian_weighted_sum(values, arch, z, act, weight_rows):
    """sum_t J_t^T weight_rows[t] over the flat layout, as an s-vector."""
    w1, b1, w2, b2 = arch.unpack(values)
    dact = 1.0 - act ** 2
    proj = weight_rows @ w2                      # (n, h)
    g = np.empty(arch.n_params)
    g[arch.hidden_weight_slice] = ((dact * proj).T @ z).ravel()
    g[arch.hidden_bias_slice] = np.sum(dact * proj, axis=0)
    g[arch.output_weight_slice] = (weight_rows.T @ act).ravel()
    g[arch.output_bias_slice] = np.sum(weight_rows, axis=0)
    return g


def logdet_value_grad(values, arch, z, y):
    """u_n and its gradient in one pass over the data.

    Raises SingularCovariance when the residual covariance has no Cholesky
    factor; callers in line searches treat that as "step too long".
    """
    act, out, _ = _net_pass(values, arch, z)
    res = y - out
    cov = _covariance_of(res)
    value = linalg.logdet(cov.factor)
    pulled = res @ cov.inverse                   # rows gamma^{-1} r_t
    grad = (-2.0 / z.shape[0]) * _jacobian_weighted_sum(values, arch, z, act, pulled)
    return value, grad


def sumsquares_value_grad(values, arch, z, y):
    """Mean squared residual norm (v_n / n) and its gradient."""
    act, out, _ = _net_pass(values, arch, z)
    res = y - out
    n = z.shape[0]
    value = float(np.sum(res * res)) / n
    grad = (-2.0 / n) * _jacobian_weighted_sum(values, arch, z, act, res)
    return value, grad


def gls_value_grad(values, arch, z, y, gamma_inverse):
    act, out, _ = _net_pass(values, arch, z)
    res = y - out
    n = z.shape[0]
    pulled = res @ gamma_inverse
    value = float(np.sum(pulled * res)) / n
    grad = (-2.0 / n) * _jacobian_weighted_sum(values, arch, z, act, pulled)
    return value, grad


def grad_u_n(w: WeightVector, data: Dataset):
    """Analytic gradient of u_n; coordinate k equals 2 tr(G_n^{-1} A_n(k))."""
    _check_dims(w, data)
    value, grad = logdet_value_grad(w.values, w.arch, data.inputs, data.targets)
    return grad


_HESSIAN_CHUNK = 4096


def hessian_u_n(w: WeightVector, data: Dataset):
    """Analytic Hessian of u_n, symmetrized.

    Entry (k, l) is assembled from the three trace blocks

        2 tr(G^{-1} B_n(k,l)) + 2 tr(G^{-1} C_n(k,l))
        - 2 tr(G^{-1} (A_n(l) + A_n(l)^T) G^{-1} A_n(k))

    The sign of the A-block follows from d(G^{-1}) = -G^{-1} dG G^{-1} and is
    pinned down by the finite-difference tests.
    """
    _check_dims(w, data)
    z, y = data.inputs, data.targets
    n = data.n
    res = residuals(w, data)
    cov = _covariance_of(res)
    rinv = cov.inverse

    jac = mlp.weight_jacobian(w, z)              # (n, d, s)
    hess = 2.0 * np.einsum("tik,ij,tjl->kl", jac, rinv, jac) / n  # B-block

    # C-block: -(2/n) sum_t (G^{-1} r_t)^T d2F_t[:, k, l], chunked in t.
    pulled = res @ rinv
    for start in range(0, n, _HESSIAN_CHUNK):
        stop = min(start + _HESSIAN_CHUNK, n)
        tensor = mlp.second_derivative_tensor(w, z[start:stop])
        hess -= 2.0 * np.einsum("td,tdkl->kl", pulled[start:stop], tensor) / n

    # A-block: a[:, :, k] = A_n(k); term_kl = -2 tr(G^{-1}(A_l + A_l^T)G^{-1} A_k)
    a = -np.einsum("tik,tj->ijk", jac, res) / n  # (d, d, s)
    m = np.einsum("ij,jek,el->ilk", rinv, a, rinv)  # G^{-1} A_k G^{-1}
    hess -= 2.0 * np.einsum("ijl,jik->kl", m, a)    # tr(G^{-1} A_l G^{-1} A_k)
    hess -= 2.0 * np.einsum("jil,jik->kl", m, a)    # tr(G^{-1} A_l^T G^{-1} A_k)

    return linalg.symmetrize(hess)
