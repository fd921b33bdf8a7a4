"""Cubic B-spline basis on the integer-year grid.

The trend coefficients are parameterized through a sum-to-zero null-space
basis, so the H constrained coefficients are built from H-1 free ones and
the constraint holds to machine precision. Smoothness enters through a
penalty on first differences of the constrained coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import null_space

from .errors import OutOfWindow, WindowTooShort

DEGREE = 3
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class SplineBasis:
    knots: np.ndarray  # full knot vector, boundary knots replicated
    year_min: int
    year_max: int
    n_coef: int  # H
    B: np.ndarray  # (grid years, H) basis evaluations
    Z: np.ndarray  # (H, H-1) sum-to-zero null-space map
    D: np.ndarray  # (H-1, H) first differences
    BZ: np.ndarray  # B @ Z, cached for the likelihood path
    DZ: np.ndarray  # D @ Z, cached for the penalty path

    @property
    def grid(self):
        return np.arange(self.year_min, self.year_max + 1, dtype=float)

    def basis_row(self, t: float) -> np.ndarray:
        """All H basis functions evaluated at decimal year t."""
        if not self.year_min <= t <= self.year_max:
            raise OutOfWindow(
                f"t={t} outside [{self.year_min}, {self.year_max}]")
        row = BSpline.design_matrix(np.array([float(t)]), self.knots, DEGREE)
        return np.asarray(row.todense())[0]

    def constrained(self, free_coeffs) -> np.ndarray:
        """Map H-1 free coefficients to H sum-to-zero constrained ones."""
        free_coeffs = np.asarray(free_coeffs, dtype=float)
        if free_coeffs.shape != (self.n_coef - 1,):
            raise ValueError(
                f"expected {self.n_coef - 1} free coefficients, got {free_coeffs.shape}")
        return self.Z @ free_coeffs


def build_basis(year_min: int, year_max: int) -> SplineBasis:
    """Clamped cubic B-spline basis with knots at every integer year.

    The span [year_min, year_max] with n = year_max - year_min interior
    intervals carries H = n + 3 basis functions.
    """
    year_min, year_max = int(year_min), int(year_max)
    if year_max - year_min < DEGREE:
        raise WindowTooShort(
            f"window [{year_min}, {year_max}] has fewer than {DEGREE} year intervals")

    interior = np.arange(year_min, year_max + 1, dtype=float)
    knots = np.concatenate([
        np.full(DEGREE, float(year_min)), interior, np.full(DEGREE, float(year_max)),
    ])
    n_coef = len(knots) - DEGREE - 1

    grid = np.arange(year_min, year_max + 1, dtype=float)
    B = np.asarray(BSpline.design_matrix(grid, knots, DEGREE).todense())

    Z = null_space(np.ones((1, n_coef)))
    D = np.zeros((n_coef - 1, n_coef))
    idx = np.arange(n_coef - 1)
    D[idx, idx] = -1.0
    D[idx, idx + 1] = 1.0

    return SplineBasis(
        knots=knots,
        year_min=year_min,
        year_max=year_max,
        n_coef=n_coef,
        B=B,
        Z=Z,
        D=D,
        BZ=B @ Z,
        DZ=D @ Z,
    )


def eval_trend(basis: SplineBasis, free_coeffs, t: float) -> float:
    """Trend value at decimal year t for the given free coefficients."""
    alpha = basis.constrained(free_coeffs)
    return float(basis.basis_row(t) @ alpha)


def diff_penalty(basis: SplineBasis, free_coeffs, sigma_delta: float) -> float:
    """Log density of first differences of the constrained coefficients,
    each Normal(0, sigma_delta^2)."""
    if sigma_delta <= 0:
        raise ValueError(f"sigma_delta must be positive, got {sigma_delta}")
    deltas = basis.DZ @ np.asarray(free_coeffs, dtype=float)
    k = len(deltas)
    return float(-0.5 * k * LOG_2PI - k * math.log(sigma_delta)
                 - 0.5 * np.sum(deltas ** 2) / sigma_delta ** 2)
