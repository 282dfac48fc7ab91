"""Reproducible Brownian increments and marked Poisson jumps on a uniform grid.

Every random number is a pure function of (seed, channel, path, counter), so
paths can be generated in any order or in parallel chunks and still come out
bit-identical.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .markspace import MarkSpace, MarkVector, _values

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_PATH_MULT = np.uint64(0xD1B54A32D192ED03)
_CHANNELS = {"dW": 1, "count": 2, "time": 3, "mark": 4}


class NoiseError(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise NoiseError(f"horizon must be positive, got {self.T}")
        if int(self.n_steps) < 1:
            raise NoiseError(f"need at least one step, got {self.n_steps}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def knots(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t

    def step_of(self, t) -> np.ndarray:
        """Index k of the step (t_k, t_{k+1}] containing t."""
        k = np.ceil(np.asarray(t) / self.dt).astype(np.int64) - 1
        return np.clip(k, 0, self.n_steps - 1)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps modulo 2^64
    x = x ^ (x >> np.uint64(30))
    x = x * np.uint64(0xBF58476D1CE4E5B9)
    x = x ^ (x >> np.uint64(27))
    x = x * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _path_keys(seed: int, channel: str, paths: np.ndarray) -> np.ndarray:
    seed64 = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    ch = np.uint64(_CHANNELS[channel])
    base = _mix64(np.array([seed64 ^ _mix64(np.array([ch * _GOLDEN]))[0]]))[0]
    return _mix64(base ^ (paths.astype(np.uint64) * _PATH_MULT))


def uniforms(seed: int, channel: str, paths, counters) -> np.ndarray:
    """Uniforms in (0, 1) for broadcastable arrays of path and counter indices."""
    paths = np.asarray(paths, dtype=np.int64)
    counters = np.asarray(counters, dtype=np.int64)
    with np.errstate(over="ignore"):
        keys = _path_keys(seed, channel, paths)
        bits = _mix64(keys + (counters.astype(np.uint64) + np.uint64(1)) * _GOLDEN)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """Driving noise for ``n_paths`` paths.

    ``dW`` and ``dN`` are time-major: ``dW[k, p]`` and ``dN[k, p, j]``.
    Jumps of path p are ``jump_times[jump_offsets[p]:jump_offsets[p+1]]`` with
    the matching mark indices, sorted in time.
    """

    grid: TimeGrid
    markspace: MarkSpace
    n_paths: int
    seed: int
    dW: np.ndarray
    dN: np.ndarray
    jump_offsets: np.ndarray
    jump_times: np.ndarray
    jump_marks: np.ndarray

    def jumps(self, path: int) -> list:
        lo, hi = self.jump_offsets[path], self.jump_offsets[path + 1]
        return list(zip(self.jump_times[lo:hi].tolist(), self.jump_marks[lo:hi].tolist()))

    def compensated(self, step: int) -> np.ndarray:
        """Per-mark compensated counts ``dN - nu dt`` at one step, shape (n, m)."""
        return self.dN[step] - self.markspace.nu * self.grid.dt

    def any_jump(self) -> np.ndarray:
        """Boolean (K, n): at least one jump of any mark in the step."""
        return self.dN.sum(axis=2) > 0

    def params_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr((int(self.seed), self.grid.T, self.grid.n_steps, self.n_paths,
                       self.markspace.marks, self.markspace.weights)).encode())
        return h.hexdigest()


def _generate_chunk(grid: TimeGrid, ms: MarkSpace, seed: int, paths: np.ndarray):
    K, dt = grid.n_steps, grid.dt
    steps = np.arange(K)[:, None]
    u = uniforms(seed, "dW", paths[None, :], steps)
    dW = special.ndtri(u) * np.sqrt(dt)

    lam = ms.total_mass
    counts = stats.poisson.ppf(uniforms(seed, "count", paths, 0), lam * grid.T).astype(np.int64)
    owner = np.repeat(paths, counts)
    local_offsets = np.concatenate([[0], np.cumsum(counts)])
    idx = np.arange(owner.size) - np.repeat(local_offsets[:-1], counts)
    times = grid.T * uniforms(seed, "time", owner, idx)
    marks = np.searchsorted(np.cumsum(ms.probabilities)[:-1],
                            uniforms(seed, "mark", owner, idx), side="right")
    order = np.lexsort((times, owner))
    times, marks = times[order], marks[order]
    return dW, counts, times, marks


def generate_noise(grid: TimeGrid, ms: MarkSpace, n_paths: int, seed: int,
                   threads: int = 1, chunk: int = 8192) -> NoiseBundle:
    if n_paths < 1:
        raise NoiseError("cannot generate an empty noise bundle (n_paths = 0)")
    K, m = grid.n_steps, ms.size
    dW = np.empty((K, n_paths))
    bounds = [(lo, min(lo + chunk, n_paths)) for lo in range(0, n_paths, chunk)]

    def work(b):
        return _generate_chunk(grid, ms, seed, np.arange(b[0], b[1]))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]

    counts = np.empty(n_paths, dtype=np.int64)
    times_parts, marks_parts = [], []
    for (lo, hi), (dw, c, t, mk) in zip(bounds, parts):
        dW[:, lo:hi] = dw
        counts[lo:hi] = c
        times_parts.append(t)
        marks_parts.append(mk)
    times = np.concatenate(times_parts)
    marks = np.concatenate(marks_parts).astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])

    dN = np.zeros((K, n_paths, m), dtype=np.int16)
    owner = np.repeat(np.arange(n_paths), counts)
    np.add.at(dN, (grid.step_of(times), owner, marks), 1)
    return NoiseBundle(grid, ms, int(n_paths), int(seed), dW, dN, offsets, times, marks)


def compensated_increment(bundle: NoiseBundle, ms: MarkSpace, path: int, step: int, v) -> float:
    """Integral of the mark function v against the compensated measure over one step."""
    if not (0 <= path < bundle.n_paths):
        raise IndexError(f"path {path} out of range [0, {bundle.n_paths})")
    if not (0 <= step < bundle.grid.n_steps):
        raise IndexError(f"step {step} out of range [0, {bundle.grid.n_steps})")
    vals = v.values if isinstance(v, MarkVector) else _values(ms, v)
    counts = bundle.dN[step, path].astype(float)
    return float(np.dot(vals, counts) - bundle.grid.dt * np.dot(ms.nu, vals))


def warn_if_inactive(ms: MarkSpace, has_jump_coefficient: bool) -> None:
    if has_jump_coefficient and ms.total_mass == 0.0:
        warnings.warn("jump coefficient present but the jump intensity is zero")


_HEADER = struct.Struct("<qqqq")


def dump_noise(bundle: NoiseBundle, path) -> None:
    """Binary audit dump: header (seed, K, n_paths, marks) then dW and dN, row-major."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(bundle.seed, bundle.grid.n_steps, bundle.n_paths,
                              bundle.markspace.size))
        fh.write(np.ascontiguousarray(bundle.dW.T, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.dN.transpose(1, 0, 2), dtype="<i8").tobytes())


def load_noise_dump(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    seed, K, n, m = _HEADER.unpack_from(raw)
    off = _HEADER.size
    dW = np.frombuffer(raw, dtype="<f8", count=K * n, offset=off).reshape(n, K)
    off += 8 * K * n
    dN = np.frombuffer(raw, dtype="<i8", count=K * n * m, offset=off).reshape(n, K, m)
    return {"seed": seed, "n_steps": K, "n_paths": n, "n_marks": m, "dW": dW, "dN": dN}
