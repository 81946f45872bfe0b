"""Induced matrix norms and matrix measures (logarithmic norms).

The measure associated with an induced norm is the one-sided derivative
``mu(A) = lim_{h->0+} (||I + h A|| - 1)/h``.  Closed forms:

* ``mu_1(A)  = max_j (a_jj + sum_{i!=j} |a_ij|)``   (column-wise)
* ``mu_inf(A)= max_i (a_ii + sum_{j!=i} |a_ij|)``   (row-wise)
* ``mu_2(A)  = lambda_max((A + A^T)/2)``

A weighted measure uses the norm ``|Theta x|`` and satisfies
``mu_{Theta}(A) = mu(Theta A Theta^{-1})``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CertifyError

__all__ = ["MeasureKind", "matrix_measure", "measure_limit_estimate", "induced_norm"]

_BASES = ("one", "two", "infinity")

_BASE_ALIASES = {
    "1": "one", "one": "one",
    "2": "two", "two": "two",
    "inf": "infinity", "infinity": "infinity",
}


@dataclass(frozen=True)
class MeasureKind:
    """Measure selector: base norm plus an optional invertible weight."""

    base: str = "two"
    weight: object = None  # n x n ndarray or None

    def __post_init__(self):
        base = _BASE_ALIASES.get(str(self.base))
        if base is None:
            raise CertifyError(f"unknown measure base '{self.base}'; use one of {_BASES}")
        object.__setattr__(self, "base", base)
        if self.weight is not None:
            w = np.asarray(self.weight, dtype=float)
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                raise CertifyError("measure weight must be a square matrix")
            object.__setattr__(self, "weight", w)

    def label(self):
        name = {"one": "1", "two": "2", "infinity": "inf"}[self.base]
        return f"weighted-{name}" if self.weight is not None else name


def _check_square(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise CertifyError(f"matrix measure needs a square matrix, got shape {A.shape}")
    return A


def _weight_inverse(theta):
    """LU-based inverse with a pivot-magnitude guard."""
    theta = np.asarray(theta, dtype=float)
    import warnings

    import scipy.linalg
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(theta)
    if np.min(np.abs(np.diag(lu))) < 1e-12:
        raise CertifyError("measure weight is singular (pivot below 1e-12)")
    return scipy.linalg.lu_solve((lu, piv), np.eye(theta.shape[0]))


def _apply_weight(A, kind):
    if kind.weight is None:
        return A
    theta = kind.weight
    if theta.shape != A.shape:
        raise CertifyError(
            f"weight shape {theta.shape} does not match matrix shape {A.shape}")
    return theta @ A @ _weight_inverse(theta)


def matrix_measure(A, kind=MeasureKind("two")):
    """Matrix measure of a square real matrix for the given kind."""
    if isinstance(kind, str):
        kind = MeasureKind(kind)
    A = _check_square(A)
    A = _apply_weight(A, kind)
    if kind.base == "one":
        return float(np.max(np.diag(A) + np.sum(np.abs(A), axis=0) - np.abs(np.diag(A))))
    if kind.base == "infinity":
        return float(np.max(np.diag(A) + np.sum(np.abs(A), axis=1) - np.abs(np.diag(A))))
    sym = (A + A.T) / 2.0
    return float(np.linalg.eigvalsh(sym)[-1])


def induced_norm(A, base="two"):
    """Induced operator norm; rectangular matrices are allowed."""
    base = _BASE_ALIASES.get(str(base))
    if base is None:
        raise CertifyError(f"unknown norm base '{base}'")
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A.reshape(1, -1)
    if base == "one":
        return float(np.max(np.sum(np.abs(A), axis=0)))
    if base == "infinity":
        return float(np.max(np.sum(np.abs(A), axis=1)))
    return float(np.linalg.svd(A, compute_uv=False)[0])


def measure_limit_estimate(A, kind=MeasureKind("two"), h=1e-6):
    """Definitional difference quotient ``(||I + hA|| - 1)/h``.  Cross-check
    oracle for :func:`matrix_measure`; not meant for production use."""
    if isinstance(kind, str):
        kind = MeasureKind(kind)
    if not 0.0 < h <= 1e-3:
        raise CertifyError(f"h must lie in (0, 1e-3], got {h}")
    A = _check_square(A)
    A = _apply_weight(A, kind)
    n = A.shape[0]
    return (induced_norm(np.eye(n) + h * A, kind.base) - 1.0) / h
