"""Symmetric eigendecomposition (cyclic Jacobi) and PSD matrix powers."""
from dataclasses import dataclass

import numpy as np

from .. import kernels

MAX_SWEEPS = 100
OFF_TOL = 1e-12


@dataclass(frozen=True)
class SymEigResult:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # orthonormal columns


def sym_eig(m, sym_tol=1e-9):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Runs in float64 regardless of the input dtype. Eigenvalues come back
    ascending; each eigenvector is signed so its largest-magnitude entry
    (first on ties) is positive, which makes the output bitwise repeatable.

    Raises:
        ValueError: if ``m`` is not square or deviates from symmetry by more
            than ``sym_tol`` (scaled by ``max(1, max|m|)``).
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_eig needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n == 0:
        return SymEigResult(np.zeros(0), np.zeros((0, 0)))
    scale = max(1.0, float(np.abs(a).max()))
    asym = float(np.abs(a - a.T).max())
    if asym > sym_tol * scale:
        raise ValueError(f"matrix is not symmetric (max |M - M^T| = {asym:.3e})")
    a = np.ascontiguousarray(0.5 * (a + a.T))
    v = np.eye(n)
    tol = OFF_TOL * max(1.0, float(np.sqrt((a * a).sum())))
    kernels.jacobi_eig(a, v, tol, MAX_SWEEPS)
    w = np.diagonal(a).copy()
    order = np.argsort(w, kind="stable")
    w = w[order]
    v = v[:, order]
    pivots = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[pivots, np.arange(n)] < 0, -1.0, 1.0)
    return SymEigResult(w, v * signs)


def _psd_power(m, power, floor, neg_tol):
    eig = sym_eig(m)
    w = eig.eigenvalues
    top = max(1.0, float(np.abs(w).max())) if w.size else 1.0
    if w.size and w[0] < -neg_tol * top:
        raise ValueError(f"matrix is not PSD (smallest eigenvalue {w[0]:.3e})")
    w = np.maximum(w, floor)
    with np.errstate(divide="ignore"):
        s = np.where(w > 0, w ** power, 0.0)
    v = eig.eigenvectors
    out = (v * s) @ v.T
    return 0.5 * (out + out.T)


def psd_inv_sqrt(m, floor=1e-6):
    """``V diag(max(w, floor))^{-1/2} V^T`` for symmetric PSD ``m``."""
    if floor <= 0:
        raise ValueError("floor must be positive")
    return _psd_power(m, -0.5, floor, 1e-9)


def psd_sqrt(m):
    """Principal square root; slightly negative eigenvalues are clamped to 0."""
    return _psd_power(m, 0.5, 0.0, 1e-9)
