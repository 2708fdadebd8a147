# Lint as: python3
"""Dense float64 matrix helpers shared by the model, the aggregator and the diagnostics.

A matrix is a 2-D, C-contiguous `numpy.ndarray` of dtype float64. Every function returns fresh
arrays and never mutates its inputs.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericError, RankError, ShapeError
from .utils.logging import get_logger


logger = get_logger(__name__)

Matrix = np.ndarray


def as_matrix(values, name: str = "matrix") -> Matrix:
    """Return `values` as a finite 2-D float64 array.

    Raises:
        ShapeError: if `values` is not two-dimensional.
        NumericError: if an entry is NaN or infinite.
    """
    matrix = np.ascontiguousarray(values, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeError(f"'{name}' must be two-dimensional, got shape {matrix.shape}")
    _check_finite(matrix, name)
    return matrix


def _check_finite(matrix: Matrix, name: str) -> None:
    if not np.all(np.isfinite(matrix)):
        raise NumericError(f"'{name}' contains non-finite entries")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product `a @ b`, accumulated left to right over the inner dimension.

    The summation order does not depend on the BLAS build, so products are bit-identical across platforms.

    Args:
        a (`np.ndarray` of shape `(m, n)`): left factor.
        b (`np.ndarray` of shape `(n, p)`): right factor.

    Returns:
        `np.ndarray` of shape `(m, p)`.

    Raises:
        ShapeError: if `a.cols != b.rows`.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}: inner dimensions differ")
    product = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        product += np.multiply.outer(a[:, k], b[k])
    _check_finite(product, "product")
    return product


def frobenius_norm(matrix: Matrix) -> float:
    return float(np.linalg.norm(matrix, ord="fro"))


@dataclass(frozen=True)
class SvdResult:
    """Top-k singular triplets of a matrix.

    `u` is `(m, k)` with orthonormal columns, `singular_values` is non-increasing and non-negative,
    `vt` is `(k, n)` with orthonormal rows.
    """

    u: Matrix
    singular_values: np.ndarray
    vt: Matrix

    @property
    def rank(self) -> int:
        return len(self.singular_values)

    def reconstruct(self) -> Matrix:
        """Return `u @ diag(s) @ vt`."""
        return np.ascontiguousarray((self.u * self.singular_values) @ self.vt)


_SVD_DRIVERS = ("gesdd", "gesvd")


def _full_svd(matrix: Matrix):
    for attempt, driver in enumerate(_SVD_DRIVERS, start=1):
        try:
            if driver == "gesdd":
                return np.linalg.svd(matrix, full_matrices=False)
            return scipy.linalg.svd(matrix, full_matrices=False, lapack_driver=driver)
        except (np.linalg.LinAlgError, ValueError) as err:
            logger.warning(f"SVD driver {driver} failed on a {matrix.shape} matrix: {err}")
    raise NumericError(
        f"SVD did not converge on a {matrix.shape} matrix after {len(_SVD_DRIVERS)} attempts",
        iterations=len(_SVD_DRIVERS),
    )


def truncated_svd(matrix: Matrix, k: int) -> SvdResult:
    """Best rank-`k` factorization of `matrix` in the Frobenius norm.

    Args:
        matrix (`np.ndarray` of shape `(m, n)`): matrix to factorize.
        k (`int`): number of singular triplets to keep, `1 <= k <= min(m, n)`.

    Returns:
        [`SvdResult`] holding the `k` largest singular triplets.

    Raises:
        RankError: if `k` is out of range.
        NumericError: if no LAPACK driver converges. `iterations` holds the number of attempts.
    """
    matrix = as_matrix(matrix)
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= min(matrix.shape):
        raise RankError(f"Rank k={k} must lie in [1, {min(matrix.shape)}] for a {matrix.shape} matrix")
    u, s, vt = _full_svd(matrix)
    s = np.clip(s[:k], 0.0, None)
    return SvdResult(u=np.ascontiguousarray(u[:, :k]), singular_values=s, vt=np.ascontiguousarray(vt[:k]))


def canonical_signs(u: Matrix, vt: Matrix, anchor: str = "u"):
    """Flip singular vector pairs so that the largest-magnitude entry of each anchor vector is non-negative.

    Args:
        u (`np.ndarray` of shape `(m, k)`): left singular vectors as columns.
        vt (`np.ndarray` of shape `(k, n)`): right singular vectors as rows.
        anchor (`str`): `"u"` to anchor on the columns of `u`, `"vt"` on the rows of `vt`.

    Returns:
        `(u, vt)` with consistent sign flips applied to both.
    """
    if anchor not in ("u", "vt"):
        raise ValueError(f"anchor has to be 'u' or 'vt', got {anchor}")
    vectors = u.T if anchor == "u" else vt
    signs = np.ones(vectors.shape[0])
    for i, vector in enumerate(vectors):
        # argmax returns the first index on ties
        if vector.size and vector[np.argmax(np.abs(vector))] < 0:
            signs[i] = -1.0
    return np.ascontiguousarray(u * signs), np.ascontiguousarray(vt * signs[:, None])


def random_init(rows: int, cols: int, std: float, seed: int) -> Matrix:
    """I.i.d. Gaussian(0, std²) matrix from a counter-based Philox stream keyed on `seed`.

    Identical `(rows, cols, std, seed)` give bit-identical output.
    """
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if std == 0:
        return np.zeros((rows, cols), dtype=np.float64)
    rng = np.random.Generator(np.random.Philox(seed))
    return np.ascontiguousarray(rng.normal(0.0, std, size=(rows, cols)))


def rng_for(seed: int, *stream) -> np.random.Generator:
    """Independent Philox generator for `seed` and a tuple of non-negative stream identifiers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *stream])))


def derive_seed(seed: int, *stream) -> int:
    """Deterministic 63-bit child seed of `seed` for a tuple of non-negative stream identifiers."""
    state = np.random.SeedSequence([int(seed) & (2**64 - 1), *stream]).generate_state(1, dtype=np.uint64)
    return int(state[0] >> np.uint64(1))
