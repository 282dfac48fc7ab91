"""Least-squares conditional expectations on a polynomial state basis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RegressionError(RuntimeError):
    pass


class ImplicitStepError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegressionConfig:
    degree: int = 3
    ridge: float = 1e-8
    implicit_inner_iters: int = 10
    implicit_tol: float = 1e-10
    z_mark_mode: str = "constant"
    winsor: float = 1e-3

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("basis degree must be non-negative")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.z_mark_mode not in ("constant", "per-mark"):
            raise ValueError(f"z_mark_mode must be 'constant' or 'per-mark', got {self.z_mark_mode!r}")
        if not 0.0 <= self.winsor < 0.5:
            raise ValueError("winsor fraction must lie in [0, 0.5)")


def _standardized(col: np.ndarray):
    mu = col.mean()
    sd = col.std()
    if not np.isfinite(sd) or sd <= 1e-12 * (1.0 + abs(mu)):
        return None
    return (col - mu) / sd


class Projector:
    """Projection onto span{1, x, ..., x^d, extra columns} across paths.

    Non-constant columns are centered and scaled, and the ridge penalty skips
    the intercept, so the cross-path mean of fitted values always equals the
    mean of the target. The state is clipped to its ``winsor`` and
    ``1 - winsor`` sample quantiles before the powers are formed, which keeps
    noisy cubic fits from exploding on the few extreme paths.
    """

    def __init__(self, x: np.ndarray, degree: int = 3, ridge: float = 1e-8, extra=None,
                 winsor: float = 1e-3):
        cols = []
        x = np.asarray(x, dtype=float)
        if winsor > 0 and x.size > 1:
            lo, hi = np.quantile(x, [winsor, 1.0 - winsor])
            x = np.clip(x, lo, hi)
        z = _standardized(x)
        if z is not None:
            power = np.ones_like(z)
            for _ in range(degree):
                power = power * z
                c = _standardized(power)
                if c is not None:
                    cols.append(c)
        if extra is not None:
            for col in np.atleast_2d(np.asarray(extra, dtype=float).T):
                c = _standardized(col)
                if c is not None:
                    cols.append(c)
        self.n = len(x)
        if not cols:
            self.A = None
            return
        self.A = np.column_stack(cols)
        gram = self.A.T @ self.A / self.n
        gram[np.diag_indices_from(gram)] += ridge
        try:
            self._chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError as exc:
            raise RegressionError("regression normal matrix is singular beyond ridge rescue") from exc
        if np.min(np.diag(self._chol)) ** 2 < 1e-14 * np.max(np.diag(gram)):
            raise RegressionError("regression normal matrix is numerically singular")

    def __call__(self, target: np.ndarray) -> np.ndarray:
        target = np.asarray(target, dtype=float)
        mean = target.mean(axis=0)
        if self.A is None:
            return np.broadcast_to(mean, target.shape).copy()
        rhs = self.A.T @ (target - mean) / self.n
        coef = np.linalg.solve(self._chol.T, np.linalg.solve(self._chol, rhs))
        return mean + self.A @ coef
