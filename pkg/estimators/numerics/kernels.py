from dataclasses import dataclass
from typing import List, Optional, Sequence, Union
import logging

import numpy as np
import scipy.linalg
from sklearn.model_selection import KFold

from ..errors import BadFoldCount, DimensionMismatch, NonConvergence, NumericsError, SingularSystem

logger = logging.getLogger(__name__)

# Reconstruction tolerance for eigenpairs, relative to the infinity norm of A.
EIG_RESIDUAL_TOL = 1e-8
# Singular values below this fraction of the largest are treated as zero.
OLS_RANK_TOL = 1e-10
# Penalized normal matrices above this condition number are rejected.
RIDGE_MAX_COND = 1e12

ArrayLike = Union[np.ndarray, Sequence]


def as_matrix(a: ArrayLike, name: str = 'matrix') -> np.ndarray:
    """Return a read-only, finite, two-dimensional float copy of ``a``."""
    m = np.array(a, dtype=float)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise DimensionMismatch(f"{name} must be a non-empty 2-D array, got shape {m.shape}",
                                details={'shape': m.shape})
    if not np.all(np.isfinite(m)):
        raise NumericsError(f"{name} contains non-finite entries")
    m.flags.writeable = False
    return m


def inf_norm(a: np.ndarray) -> float:
    return float(np.abs(a).sum(axis=1).max()) if a.size else 0.0


@dataclass(frozen=True)
class EigenPairs:
    """Right eigenpairs sorted by ascending real part.

    Column j of ``vectors`` has unit l1-norm of absolute values and its first
    nonzero entry is real and positive.
    """
    values: np.ndarray
    vectors: np.ndarray
    residual: float

    def max_imag(self) -> float:
        return float(np.max(np.abs(self.values.imag))) if self.values.size else 0.0

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


def _canonical_columns(vectors: np.ndarray) -> np.ndarray:
    out = np.array(vectors, dtype=complex)
    for j in range(out.shape[1]):
        col = out[:, j]
        mags = np.abs(col)
        scale = mags.max()
        if scale == 0:
            continue
        lead = int(np.argmax(mags > 1e-12 * scale))
        col = col * (np.conj(col[lead]) / mags[lead])
        out[:, j] = col / np.abs(col).sum()
    return out


def eig_real(a: ArrayLike) -> EigenPairs:
    """Eigendecomposition of a square real matrix.

    Imaginary parts are never dropped here; callers decide their tolerance.
    """
    a = as_matrix(a, 'A')
    n, m = a.shape
    if n != m:
        raise DimensionMismatch(f"eig_real needs a square matrix, got {a.shape}", details={'shape': a.shape})

    try:
        values, vectors = scipy.linalg.eig(a)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise NonConvergence(f"Eigen iteration failed on a {n}x{n} matrix: {str(e)}",
                             details={'dimension': n, 'residual': float('nan')})

    order = np.lexsort((values.imag, values.real))
    values = values[order]
    vectors = _canonical_columns(vectors[:, order])

    residual = float(max(
        np.abs(a @ vectors[:, j] - values[j] * vectors[:, j]).max() for j in range(n)
    ))
    bound = EIG_RESIDUAL_TOL * inf_norm(a)
    if residual > bound:
        raise NonConvergence(f"Eigenpair residual {residual:.3e} exceeds {bound:.3e} for a {n}x{n} matrix",
                             details={'dimension': n, 'residual': residual})

    logger.debug(f"eig_real: n={n}, values={np.round(values, 10)}, residual={residual:.2e}")
    return EigenPairs(values=values, vectors=vectors, residual=residual)


def solve_ols(X: ArrayLike, y: ArrayLike) -> np.ndarray:
    """Least-squares coefficients, minimum-norm when X is rank deficient.

    ``y`` may be a vector or a matrix of responses (one fit per column).
    """
    X = as_matrix(X, 'X')
    y = np.asarray(y, dtype=float)
    n, q = X.shape
    if y.shape[0] != n:
        raise DimensionMismatch(f"X has {n} rows but y has {y.shape[0]}", details={'n_x': n, 'n_y': y.shape[0]})
    if n < q:
        raise DimensionMismatch(f"Need at least as many rows as columns, got {n}x{q}", details={'shape': (n, q)})
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=OLS_RANK_TOL)
    if rank < q:
        logger.debug(f"solve_ols: design rank {rank} < {q} columns, returning minimum-norm solution")
    return coef


def ridge_from_gram(gram: np.ndarray, moment: np.ndarray, lam: float, mask: np.ndarray) -> np.ndarray:
    """Solve (G + lam*diag(mask)) b = m for a precomputed Gram matrix G = B'B and moment m = B'y."""
    normal = gram + lam * np.diag(mask)
    cond = np.linalg.cond(normal)
    if not np.isfinite(cond) or cond > RIDGE_MAX_COND:
        raise SingularSystem(f"Penalized normal matrix is numerically singular (cond={cond:.3e}, lambda={lam:g})",
                             details={'condition_number': float(cond), 'lambda': float(lam)})
    return scipy.linalg.solve(normal, moment, assume_a='sym')


def ridge_masked(B: ArrayLike, y: ArrayLike, lam: float, mask: Sequence[int]) -> np.ndarray:
    """Ridge estimate with penalty lam on the coordinates where mask is 1."""
    B = as_matrix(B, 'B')
    y = np.asarray(y, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if lam < 0:
        raise NumericsError(f"Ridge penalty must be nonnegative, got {lam}")
    if mask.shape != (B.shape[1],) or not np.all((mask == 0) | (mask == 1)):
        raise DimensionMismatch(f"mask must hold {B.shape[1]} binary flags", details={'mask_shape': mask.shape})
    if y.shape[0] != B.shape[0]:
        raise DimensionMismatch(f"B has {B.shape[0]} rows but y has {y.shape[0]}")
    return ridge_from_gram(B.T @ B, B.T @ y, lam, mask)


def kfold_split(n: int, k: int, seed: Optional[int]) -> List[np.ndarray]:
    """Partition range(n) into k shuffled folds whose sizes differ by at most one."""
    if not (2 <= k <= n):
        raise BadFoldCount(f"Fold count must satisfy 2 <= k <= n, got k={k}, n={n}", details={'k': k, 'n': n})
    splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    return [np.sort(test) for _, test in splitter.split(np.zeros((n, 1)))]
