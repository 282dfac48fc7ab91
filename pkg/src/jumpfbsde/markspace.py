"""Finite mark space with positive weights and the weighted L^2 geometry on it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MarkSpaceError(ValueError):
    """Raised for malformed mark spaces or mismatched mark vectors."""


def kahan_sum(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Left-to-right compensated (Neumaier) sum along ``axis``.

    The loop runs over the (short) summation axis, so it vectorizes over
    everything else and the result does not depend on how the other axes
    are chunked.
    """
    values = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    total = np.zeros(values.shape[1:])
    comp = np.zeros(values.shape[1:])
    for v in values:
        t = total + v
        big = np.abs(total) >= np.abs(v)
        comp = comp + np.where(big, (total - t) + v, (v - t) + total)
        total = t
    return total + comp


@dataclass(frozen=True)
class MarkSpace:
    """Marks ``e_j`` with weights ``nu_j``; ``intensity`` is the total weight."""

    marks: tuple
    weights: tuple

    def __post_init__(self):
        marks = tuple(float(e) for e in self.marks)
        weights = tuple(float(w) for w in self.weights)
        if len(marks) == 0:
            raise MarkSpaceError("mark space must contain at least one mark")
        if len(marks) != len(weights):
            raise MarkSpaceError(
                f"{len(marks)} marks but {len(weights)} weights"
            )
        if len(set(marks)) != len(marks):
            raise MarkSpaceError("marks must be distinct")
        for j, w in enumerate(weights):
            if not np.isfinite(w) or w <= 0.0:
                raise MarkSpaceError(f"weight {j} must be finite and positive, got {w}")
        for j, e in enumerate(marks):
            if not np.isfinite(e):
                raise MarkSpaceError(f"mark {j} is not finite")
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> int:
        return len(self.marks)

    @property
    def total_mass(self) -> float:
        return float(kahan_sum(np.array(self.weights)))

    @property
    def intensity(self) -> float:
        return self.total_mass

    @property
    def nu(self) -> np.ndarray:
        return np.array(self.weights)

    @property
    def e(self) -> np.ndarray:
        return np.array(self.marks)

    @property
    def probabilities(self) -> np.ndarray:
        """Mark distribution of a single jump, ``nu_j / lambda``."""
        return self.nu / self.intensity

    def vector(self, values) -> "MarkVector":
        return MarkVector(self, np.asarray(values, dtype=float))


@dataclass(frozen=True)
class MarkVector:
    """A function on the marks, stored as its values ``v_j``."""

    space: MarkSpace
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape[-1:] != (self.space.size,):
            raise MarkSpaceError(
                f"mark vector has trailing length {vals.shape[-1:]} but the space has "
                f"{self.space.size} marks"
            )
        object.__setattr__(self, "values", vals)

    def __add__(self, other: "MarkVector") -> "MarkVector":
        _check_same(self.space, other.space)
        return MarkVector(self.space, self.values + other.values)

    def __mul__(self, c: float) -> "MarkVector":
        return MarkVector(self.space, self.values * c)

    __rmul__ = __mul__


def _check_same(a: MarkSpace, b: MarkSpace) -> None:
    if a != b:
        raise MarkSpaceError("mark vectors live on different mark spaces")


def _values(ms: MarkSpace, v) -> np.ndarray:
    if isinstance(v, MarkVector):
        _check_same(ms, v.space)
        return v.values
    arr = np.asarray(v, dtype=float)
    if arr.shape[-1:] != (ms.size,):
        raise MarkSpaceError(
            f"expected trailing mark axis of length {ms.size}, got shape {arr.shape}"
        )
    return arr


def _scalarize(a: np.ndarray):
    return float(a) if np.ndim(a) == 0 else a


def integrate(ms: MarkSpace, v):
    """Weighted sum ``sum_j nu_j v_j`` over the trailing mark axis."""
    vals = _values(ms, v)
    return _scalarize(kahan_sum(vals * ms.nu, axis=-1))


def l2_norm(ms: MarkSpace, v):
    """Weighted L^2 norm ``sqrt(sum_j nu_j v_j^2)``."""
    vals = _values(ms, v)
    return _scalarize(np.sqrt(kahan_sum(vals * vals * ms.nu, axis=-1)))


def inner(ms: MarkSpace, v, w) -> np.ndarray:
    return integrate(ms, _values(ms, v) * _values(ms, w))
