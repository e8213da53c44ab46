"""Symmetric PSD helpers built on ``numpy.linalg.eigh``."""

import numpy as np

from fewtreat import constants


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return (matrix + np.swapaxes(matrix, -1, -2)) / 2


def project_psd(matrix: np.ndarray) -> np.ndarray:
    """Nearest PSD matrix in Frobenius norm, clipping negative eigenvalues to zero.

    Works on a single matrix or a stack of them along the leading axes.
    Matrices that are already PSD come back unchanged.
    """
    matrix = symmetrize(np.asarray(matrix, dtype=np.float64))
    eigenvalues, eigenvectors = np.linalg.eigh(matrix)
    if np.all(eigenvalues >= 0):
        return matrix

    clipped = np.clip(eigenvalues, 0, None)
    return symmetrize(
        (eigenvectors * clipped[..., None, :]) @ np.swapaxes(eigenvectors, -1, -2)
    )


def psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root, negative eigenvalues clipped at zero.

    Accepts stacks of matrices.
    """
    matrix = symmetrize(np.asarray(matrix, dtype=np.float64))
    eigenvalues, eigenvectors = np.linalg.eigh(matrix)
    roots = np.sqrt(np.clip(eigenvalues, 0, None))
    return symmetrize(
        (eigenvectors * roots[..., None, :]) @ np.swapaxes(eigenvectors, -1, -2)
    )


def min_eigenvalue(matrix: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(symmetrize(np.asarray(matrix, dtype=np.float64)))[
        ..., 0
    ]


def is_psd(matrix: np.ndarray, tolerance: float = constants.PSD_TOLERANCE) -> bool:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        return False

    if not np.allclose(matrix, matrix.T, atol=tolerance, rtol=0):
        return False

    if matrix.size == 0:
        return True

    return bool(min_eigenvalue(matrix) >= -tolerance)
