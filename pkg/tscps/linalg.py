"""
Small linear algebra helpers shared by the projection, analysis and metrics modules.
"""
from typing import Any

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .logging_config import logger


def power_iteration(operator: Any, max_iter: int = 100_000, tol: float = 1e-13,
                    seed: int = 0) -> tuple[float, np.ndarray]:
    """
    Dominant eigenpair of a symmetric positive semidefinite operator.

    Iterates ``x <- Mx / ||Mx||`` from a seeded random start until the eigen-residual ``||Mx - lambda x||`` falls below ``tol * max(lambda, 1)``.

    :param operator: Dense array, sparse matrix or :class:`scipy.sparse.linalg.LinearOperator`.
    :param max_iter: Iteration cap.
    :param tol: Relative residual tolerance.
    :param seed: Seed of the starting vector.
    :return: ``(lambda, x)``; ``(0, x)`` for the zero operator.
    :rtype: tuple[float, numpy.ndarray]
    """
    M = scipy.sparse.linalg.aslinearoperator(operator)
    n = M.shape[0]
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    x /= np.linalg.norm(x)

    lam = 0.0
    for iteration in range(max_iter):
        y = M.matvec(x)
        y_norm = np.linalg.norm(y)
        if y_norm == 0.0:
            if iteration == 0:
                # start vector in the nullspace: try a fresh one once
                x = rng.normal(size=n)
                x /= np.linalg.norm(x)
                continue
            return 0.0, x
        lam = float(x @ y)
        x = y / y_norm
        residual = np.linalg.norm(M.matvec(x) - lam * x)
        if residual <= tol * max(abs(lam), 1.0):
            return lam, x
    logger.debug(f"Power iteration stopped at the cap of {max_iter} iterations")
    return lam, x


def spectral_norm(matrix: Any, **kwargs: Any) -> float:
    """
    Largest singular value, as the square root of the dominant eigenvalue of ``M^T M`` found by :func:`power_iteration`.
    """
    M = scipy.sparse.linalg.aslinearoperator(matrix)
    if isinstance(matrix, np.ndarray) and not np.any(matrix):
        return 0.0
    gram = scipy.sparse.linalg.LinearOperator(
        (M.shape[1], M.shape[1]), matvec=lambda v: M.rmatvec(M.matvec(v)), dtype=float)
    lam, _ = power_iteration(gram, **kwargs)
    return float(np.sqrt(max(lam, 0.0)))


def gram_extreme_eigenvalues(A: np.ndarray) -> tuple[float, float]:
    """
    ``(lambda_min, lambda_max)`` of ``A^T A`` by a full symmetric eigen-decomposition.
    """
    A = np.asarray(A, dtype=float)
    values = scipy.linalg.eigh(A.T @ A, eigvals_only=True)
    return float(values[0]), float(values[-1])


def symmetric_sqrtm(matrix: np.ndarray) -> np.ndarray:
    """
    Square root of a symmetric positive semidefinite matrix through its eigen-decomposition; negative round-off eigenvalues are clipped to 0.
    """
    matrix = np.asarray(matrix, dtype=float)
    values, vectors = scipy.linalg.eigh((matrix + matrix.T) / 2.0)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T
