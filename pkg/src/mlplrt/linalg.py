"""Dense symmetric-matrix utilities: Cholesky, log-det, SPD inverse, traces.

All matrices here are small (d up to ~10 in practice, never beyond ~50) and
stored densely.  Everything is a pure function of its inputs.
"""

import numpy as np
import scipy.linalg


class NotPositiveDefinite(Exception):
    """Cholesky pivot at `pivot_index` fell below the singularity cutoff."""

    def __init__(self, pivot_index):
        self.pivot_index = pivot_index
        super().__init__(f"matrix is not positive definite (pivot {pivot_index})")


class DimensionMismatch(Exception):
    pass


class EmptyInput(Exception):
    pass


# Pivots are compared against 1e-12 times the largest diagonal entry, so the
# cutoff is invariant under rescaling of the matrix.
PIVOT_RTOL = 1e-12


def symmetrize(a):
    """Return (a + a.T) / 2, which is exactly symmetric entrywise."""
    a = np.asarray(a, dtype=float)
    return (a + a.T) / 2.0


def cholesky(m):
    """Lower-triangular Cholesky factor of a symmetric positive definite matrix.

    Raises NotPositiveDefinite(j) as soon as pivot j drops to within
    PIVOT_RTOL of zero relative to the largest diagonal entry; this is the
    designated detector for singular or indefinite residual covariances.
    """
    m = symmetrize(m)
    d = m.shape[0]
    if m.shape != (d, d):
        raise DimensionMismatch(f"expected a square matrix, got {m.shape}")
    tol = PIVOT_RTOL * max(np.max(np.diagonal(m)), 0.0)
    lower = np.zeros_like(m)
    for j in range(d):
        pivot = m[j, j] - lower[j, :j] @ lower[j, :j]
        if pivot <= tol:
            raise NotPositiveDefinite(j)
        lower[j, j] = np.sqrt(pivot)
        if j + 1 < d:
            lower[j + 1:, j] = (m[j + 1:, j] - lower[j + 1:, :j] @ lower[j, :j]) / lower[j, j]
    return lower


def logdet(lower):
    """log det of the matrix whose Cholesky factor is `lower`."""
    return 2.0 * float(np.sum(np.log(np.diagonal(lower))))


def spd_inverse(lower):
    """Inverse of the SPD matrix whose Cholesky factor is `lower`."""
    d = lower.shape[0]
    y = scipy.linalg.solve_triangular(lower, np.eye(d), lower=True)
    return symmetrize(y.T @ y)


def trace_product(a, b):
    """tr(a @ b) without materializing the product."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape != b.shape or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"incompatible shapes {a.shape} and {b.shape}")
    return float(np.einsum("ij,ji->", a, b))


def sample_covariance(rows):
    """Uncentered second-moment matrix (1/n) * sum_t rows[t] rows[t]^T."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[None, :]
    n = rows.shape[0]
    if n == 0:
        raise EmptyInput("need at least one row")
    return symmetrize(rows.T @ rows / n)
