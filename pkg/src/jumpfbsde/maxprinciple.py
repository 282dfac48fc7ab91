"""Spike variations, variational systems and checks of the Hamiltonian inequality."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .adjoint import (EPS_DEN, FirstOrderAdjoint, SecondOrderAdjoint, StatePartials,
                      second_order_terms)
from .fbsolve import (FBSDEPSolution, as_control, backward_sweep, control_row, nu_integral,
                      picard_solve, spread_z, triple_distance)
from .markspace import kahan_sum
from .model import Coefficients, Problem
from .noise import NoiseBundle, TimeGrid
from .regression import RegressionConfig


class FixedPointError(RuntimeError):
    pass


# ------------------------------------------------------------------ spikes

@dataclass(frozen=True)
class SpikeConfig:
    """Perturb on (t_bar, t_bar + epsilon] with ``replacement``.

    ``replacement`` is a number or a function of the state at t_bar, which
    keeps the perturbed control measurable at the start of the window.
    """

    t_bar: float
    epsilon: float
    replacement: Union[float, Callable] = 0.0

    def check(self, T: float) -> None:
        if not (0.0 <= self.t_bar < T):
            raise ValueError(f"t_bar must lie in [0, T), got {self.t_bar}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.t_bar + self.epsilon > T * (1 + 1e-12):
            raise ValueError("perturbation window extends past the horizon")

    def with_epsilon(self, eps: float) -> "SpikeConfig":
        return SpikeConfig(self.t_bar, eps, self.replacement)


def window_steps(grid: TimeGrid, cfg: SpikeConfig) -> np.ndarray:
    """Steps (t_k, t_{k+1}] lying inside (t_bar, t_bar + epsilon]."""
    t = grid.knots
    slack = 1e-9 * grid.dt
    return (t[:-1] >= cfg.t_bar - slack) & (t[1:] <= cfg.t_bar + cfg.epsilon + slack)


def spike_mask(cfg: SpikeConfig, noise: NoiseBundle) -> np.ndarray:
    """Perturbed (step, path) pairs: inside the window and free of jumps."""
    cfg.check(noise.grid.T)
    win = window_steps(noise.grid, cfg)
    mask = np.zeros((noise.grid.n_steps, noise.n_paths), dtype=bool)
    idx = np.flatnonzero(win)
    if idx.size:
        mask[idx] = noise.dN[idx].sum(axis=2) == 0
    return mask


def tbar_index(grid: TimeGrid, t_bar: float) -> int:
    return int(min(np.floor(t_bar / grid.dt + 1e-9), grid.n_steps - 1))


def replacement_values(cfg: SpikeConfig, X: Optional[np.ndarray], grid: TimeGrid, n: int) -> np.ndarray:
    if callable(cfg.replacement):
        if X is None:
            raise ValueError("a state-dependent replacement needs the reference state")
        return np.broadcast_to(np.asarray(cfg.replacement(X[tbar_index(grid, cfg.t_bar)]),
                                          dtype=float), (n,)).copy()
    return np.full(n, float(cfg.replacement))


def build_spike_control(ubar, cfg: SpikeConfig, noise: NoiseBundle, X=None) -> np.ndarray:
    """The spike control u^eps of shape (K, n)."""
    K, n = noise.grid.n_steps, noise.n_paths
    ubar = np.broadcast_to(as_control(ubar, K), (K, n))
    mask = spike_mask(cfg, noise)
    rep = replacement_values(cfg, X, noise.grid, n)
    return np.where(mask, rep[None, :], ubar)


# ------------------------------------------------------------- Hamiltonians

def delta_fixed_point(sigma, t, x, y, z, zt, u, ubar, e, p, tol: float = 1e-12,
                      max_iter: int = 50, eps_den: float = EPS_DEN) -> np.ndarray:
    """Solve D = p (sigma(z + D, u) - sigma(z, ubar)) by relaxed iteration.

    Each step moves D toward the map value with weight 1 / (1 - p sigma_z),
    taken at the current iterate, so affine dependence on z settles in one
    step; the weight falls back to 1/2 whenever the residual grows.
    """
    s_bar = sigma(t, x, y, z, zt, ubar, e)
    delta = p * (sigma(t, x, y, z, zt, u, e) - s_bar)
    prev = None
    slope = np.zeros(1)
    for _ in range(max_iter):
        new = p * (sigma(t, x, y, z + delta, zt, u, e) - s_bar)
        res = np.abs(new - delta)
        if np.all(res <= tol * np.maximum(1.0, np.abs(new))):
            return np.asarray(new + 0.0 * delta)
        slope = p * np.asarray(sigma.grad(t, x, y, z + delta, zt, u, e)[2], dtype=float)
        den = 1.0 - slope
        if np.any(np.abs(den) <= eps_den):
            break
        weight = 1.0 / den
        if prev is not None:
            weight = np.where(res > prev, 0.5, weight)
        prev = res
        delta = delta + weight * (new - delta)
    raise FixedPointError(
        f"shift fixed point did not converge in {max_iter} iterations; "
        f"|p sigma_z| is about {np.max(np.abs(slope)):.3g} (needs to stay below {1 - eps_den:.3g})"
    )


def hamiltonian_H(coefs: Coefficients, t, x, y, z, zt, u, e, p, q):
    """H = g + p b + q sigma."""
    return (coefs.g(t, x, y, z, zt, u, e) + p * coefs.b(t, x, y, z, zt, u, e)
            + q * coefs.sigma(t, x, y, z, zt, u, e))


def hamiltonian_partials(coefs: Coefficients, t, x, y, z, zt, u, e, p, q):
    """(H_x, H_y, H_z, H_zt) through the same chain as H."""
    gg = coefs.g.grad(t, x, y, z, zt, u, e)
    bg = coefs.b.grad(t, x, y, z, zt, u, e)
    sg = coefs.sigma.grad(t, x, y, z, zt, u, e)
    return tuple(gg[i] + p * bg[i] + q * sg[i] for i in range(4))


def script_hamiltonian(coefs: Coefficients, t, x, y, z, zt, u, ubar, e, p, q, P, delta=None):
    """Shifted Hamiltonian at control u relative to the reference control ubar."""
    if delta is None:
        delta = delta_fixed_point(coefs.sigma, t, x, y, z, zt, u, ubar, e, p)
    zs = z + delta
    s = coefs.sigma(t, x, y, zs, zt, u, e)
    s_bar = coefs.sigma(t, x, y, z, zt, ubar, e)
    return (p * coefs.b(t, x, y, zs, zt, u, e) + q * s + coefs.g(t, x, y, zs, zt, u, e)
            + 0.5 * P * (s - s_bar) ** 2)


@dataclass
class SpikeIncrements:
    """Coefficient increments at the shifted state, all shaped (n, m)."""

    delta: np.ndarray
    db: np.ndarray
    dsigma: np.ndarray
    dg: np.ndarray
    dH: np.ndarray
    dsigma_grad: list


def spike_increments(coefs: Coefficients, t, x, y, z, zt, u, ubar, e, p, q) -> SpikeIncrements:
    delta = delta_fixed_point(coefs.sigma, t, x, y, z, zt, u, ubar, e, p)
    zs = z + delta

    def inc(c):
        return c(t, x, y, zs, zt, u, e) - c(t, x, y, z, zt, ubar, e)

    db, ds, dg = inc(coefs.b), inc(coefs.sigma), inc(coefs.g)
    g_new = coefs.sigma.grad(t, x, y, zs, zt, u, e)
    g_old = coefs.sigma.grad(t, x, y, z, zt, ubar, e)
    dgrad = [np.asarray(a) - np.asarray(b) for a, b in zip(g_new, g_old)]
    return SpikeIncrements(delta, db, ds, dg, dg + p * db + q * ds, dgrad)


def hamiltonian_identity_residual(coefs: Coefficients, t, x, y, z, zt, u, ubar, e, p, q, P):
    """|[H(u) - H(ubar)] - [dH + P dsigma^2 / 2]| / (1 + |H(ubar)|) for the shifted Hamiltonian."""
    h_u = script_hamiltonian(coefs, t, x, y, z, zt, u, ubar, e, p, q, P)
    h_bar = script_hamiltonian(coefs, t, x, y, z, zt, ubar, ubar, e, p, q, P)
    inc = spike_increments(coefs, t, x, y, z, zt, u, ubar, e, p, q)
    rhs = inc.dH + 0.5 * P * inc.dsigma ** 2
    return np.abs((h_u - h_bar) - rhs) / (1.0 + np.abs(h_bar))


# ----------------------------------------------------------- verify the MP

@dataclass
class MPReport:
    controls: list
    times: list
    paths: list
    min_gap: float
    argmin: dict
    violation_fraction: float
    tol: float
    threshold: float
    n_points: int
    gaps: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"controls": self.controls, "times": self.times, "n_paths": len(self.paths),
                "min_gap": self.min_gap, "argmin": self.argmin,
                "violation_fraction": self.violation_fraction, "tol": self.tol,
                "threshold": self.threshold, "n_points": self.n_points}


def _subsample(total: int, count: int) -> np.ndarray:
    return np.unique(np.round(np.linspace(0, total - 1, min(count, total))).astype(int))


def verify_mp(problem: Problem, sol: FBSDEPSolution, fo: FirstOrderAdjoint,
              so: SecondOrderAdjoint, noise: NoiseBundle, U_grid=None, offsets=None,
              n_times: int = 20, n_paths: int = 200, tol: float = 1e-2) -> MPReport:
    """Evaluate H(u) - H(ubar) on a (time, path, control, mark) lattice.

    Controls are either the absolute values ``U_grid`` or ``offsets`` added
    to the candidate control; points outside the control set are skipped.
    A point violates the inequality when its gap is below
    -tol (1 + |H(ubar)|).
    """
    if (U_grid is None) == (offsets is None):
        raise ValueError("give exactly one of U_grid or offsets")
    grid, ms = noise.grid, noise.markspace
    coefs = problem.coefficients
    ks = _subsample(grid.n_steps, n_times)
    ps = _subsample(noise.n_paths, n_paths)
    K, n = grid.n_steps, noise.n_paths
    ubar_all = np.broadcast_to(sol.control, (K, n))
    gaps = []
    min_gap, argmin = np.inf, {}
    n_bad = n_total = 0
    e = ms.e[None, None, :]
    for k in ks:
        t = grid.knots[k]
        x = sol.X[k, ps][:, None, None]
        y = sol.Y[k, ps][:, None, None]
        z = sol.Z[k, ps][:, None, :]
        zt = sol.Zt[k, ps][:, None, :]
        p = fo.p[k, ps][:, None, None]
        q = fo.q[k, ps][:, None, :]
        P = so.P[k, ps][:, None, None]
        ub = ubar_all[k, ps][:, None, None]
        if offsets is not None:
            u = ub + np.asarray(offsets, dtype=float)[None, :, None]
        else:
            u = np.broadcast_to(np.asarray(U_grid, dtype=float)[None, :, None],
                                (len(ps), len(U_grid), 1))
        inside = problem.controls.contains(u)
        h_bar = script_hamiltonian(coefs, t, x, y, z, zt, ub, ub, e, p, q, P)
        h_u = script_hamiltonian(coefs, t, x, y, z, zt, u, ub, e, p, q, P)
        gap = np.broadcast_to(h_u - h_bar, (len(ps), u.shape[1], ms.size))
        ok = np.broadcast_to(inside, gap.shape)
        scale = 1.0 + np.abs(np.broadcast_to(h_bar, gap.shape))
        bad = ok & (gap < -tol * scale)
        n_bad += int(bad.sum())
        n_total += int(ok.sum())
        masked = np.where(ok, gap, np.inf)
        i = np.unravel_index(int(np.argmin(masked)), masked.shape)
        if masked[i] < min_gap:
            min_gap = float(masked[i])
            argmin = {"t": float(t), "path": int(ps[i[0]]), "mark": int(i[2]),
                      "u": float(np.broadcast_to(u, gap.shape)[i]),
                      "ubar": float(ub[i[0], 0, 0])}
        gaps.append(np.where(ok, gap, np.nan))
    controls = (list(map(float, offsets)) if offsets is not None else list(map(float, U_grid)))
    return MPReport(controls, [float(grid.knots[k]) for k in ks], ps.tolist(), min_gap, argmin,
                    n_bad / max(n_total, 1), tol, -tol, n_total, np.array(gaps))


# -------------------------------------------------------------- cost gaps

def spike_cost_gap(problem: Problem, ubar, cfg: SpikeConfig, noise: NoiseBundle,
                   reg: RegressionConfig = RegressionConfig(), tol: float = 1e-6,
                   max_iter: int = 30, baseline: Optional[FBSDEPSolution] = None):
    """J(u^eps) - J(ubar) on common noise with a paired standard error.

    Returns (gap, se, perturbed solution).
    """
    K = noise.grid.n_steps
    base = baseline if baseline is not None else picard_solve(problem, as_control(ubar, K), noise,
                                                             reg, tol, max_iter)
    u_eps = build_spike_control(base.control, cfg, noise, base.X)
    if np.array_equal(u_eps, np.broadcast_to(base.control, u_eps.shape)):
        return 0.0, 0.0, base
    sol = picard_solve(problem, u_eps, noise, reg, tol, max_iter)
    diff = sol.pathwise_cost - base.pathwise_cost
    se = float(diff.std(ddof=1) / np.sqrt(diff.size))
    return float(sol.Y0 - base.Y0), se, sol


# ------------------------------------------------------ variational systems

@dataclass
class VariationProcesses:
    X1: np.ndarray
    Y1: np.ndarray
    mask: np.ndarray
    u_eps: np.ndarray
    increments: dict
    K1: np.ndarray = field(repr=False, default=None)
    K2: np.ndarray = field(repr=False, default=None)
    p: np.ndarray = field(repr=False, default=None)
    X2: Optional[np.ndarray] = None
    Y2: Optional[np.ndarray] = None
    Ystar: Optional[np.ndarray] = None
    Zstar: Optional[np.ndarray] = None
    Ztstar: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None

    def Z1(self, k: int) -> np.ndarray:
        """K1 X1 + p dsigma on perturbed steps, (n, m)."""
        z = self.K1[k] * self.X1[k][:, None]
        if k in self.increments:
            z = z + self.p[k][:, None] * self.increments[k].dsigma * self.mask[k][:, None]
        return z

    def Zt1(self, k: int) -> np.ndarray:
        return self.K2[k] * self.X1[k][:, None]


def _window_increments(problem, sol, fo, noise, mask, u_eps):
    """Spike increments at every perturbed step, keyed by step index."""
    ms = noise.markspace
    out = {}
    for k in np.flatnonzero(mask.any(axis=1)):
        t = noise.grid.knots[k]
        ub = control_row(sol.control, k)
        u = u_eps[k][:, None]
        out[int(k)] = spike_increments(problem.coefficients, t, sol.X[k][:, None],
                                       sol.Y[k][:, None], sol.Z[k], sol.Zt[k], u, ub, ms.e,
                                       fo.p[k][:, None], fo.q[k])
    return out


def _loadings(d: StatePartials, p, k1, k2):
    bx, by, bz, bzt = d.b
    sx, sy, sz, szt = d.sigma
    fx, fy, _, fzt = d.f
    return (bx + by * p + bz * k1 + bzt * k2,
            sx + sy * p + sz * k1 + szt * k2,
            fx + fy * p + fzt * k2)


def first_variation_simulate(problem: Problem, sol: FBSDEPSolution, fo: FirstOrderAdjoint,
                             cfg: SpikeConfig, noise: NoiseBundle,
                             reg: RegressionConfig = RegressionConfig()) -> VariationProcesses:
    """Euler scheme for X1 on the reference trajectory; Y1 = p X1."""
    grid, ms = noise.grid, noise.markspace
    K, n, dt = grid.n_steps, noise.n_paths, grid.dt
    mask = spike_mask(cfg, noise)
    u_eps = build_spike_control(sol.control, cfg, noise, sol.X)
    incs = _window_increments(problem, sol, fo, noise, mask, u_eps)
    X1 = np.zeros((K + 1, n))
    active = mask.any(axis=1)
    start = int(np.argmax(active)) if active.any() else K
    for k in range(start, K):
        d = StatePartials(problem, sol, noise, k, fo.projected_f, reg)
        p = fo.p[k][:, None]
        a, s, f = _loadings(d, p, fo.K1[k], fo.K2[k])
        x = X1[k][:, None]
        vol = s * x
        if k in incs:
            vol = vol + incs[k].dsigma * mask[k][:, None]
        X1[k + 1] = (X1[k] + dt * nu_integral(ms, np.broadcast_to(a * x, (n, ms.size)))
                     + noise.dW[k] * nu_integral(ms, np.broadcast_to(vol, (n, ms.size)))
                     + kahan_sum(f * x * noise.compensated(k), axis=-1))
    return VariationProcesses(X1, fo.p * X1, mask, u_eps, incs, fo.K1, fo.K2, fo.p)


@dataclass
class IdentityCheck:
    """Gaps between a forward-simulated first-variation pair and its adjoint form."""

    mean_abs_Y: float
    mean_abs_Zt: float
    X1: np.ndarray = field(repr=False, default=None)
    Y1: np.ndarray = field(repr=False, default=None)


def first_variation_identity(problem: Problem, sol: FBSDEPSolution, fo: FirstOrderAdjoint,
                             cfg: SpikeConfig, noise: NoiseBundle,
                             reg: RegressionConfig = RegressionConfig()) -> IdentityCheck:
    """Simulate (X1, Y1) forward as a coupled pair and compare with Y1 = p X1, Zt1 = K2 X1.

    Y1 runs forward from Y1_0 = 0 with its own driver; its martingale
    loadings come from the product rule for p X1 evaluated at the simulated
    Y1 instead of p X1, so any drift between the two representations shows
    up in both reported means.
    """
    grid, ms = noise.grid, noise.markspace
    K, n, m, dt = grid.n_steps, noise.n_paths, ms.size, grid.dt
    mask = spike_mask(cfg, noise)
    u_eps = build_spike_control(sol.control, cfg, noise, sol.X)
    incs = _window_increments(problem, sol, fo, noise, mask, u_eps)
    X = np.zeros((K + 1, n))
    Y = np.zeros((K + 1, n))
    zt_gap = 0.0
    for k in range(K):
        d = StatePartials(problem, sol, noise, k, fo.projected_f, reg)
        bx, by, bz, bzt = d.b
        sx, sy, sz, szt = d.sigma
        fx, fy, _, fzt = d.f
        gx, gy, gz, gzt = d.g
        p = fo.p[k][:, None]
        q = fo.q[k]
        qt = fo.qt[k]
        x = X[k][:, None]
        y = Y[k][:, None]
        zt = ((p + qt) * (fx * x + fy * y) + qt * x) / (1.0 - (p + qt) * fzt)
        zdot = (p * (sx * x + sy * y + szt * zt) + q * x) / (1.0 - p * sz)
        ds = incs[k].dsigma * mask[k][:, None] if k in incs else 0.0
        z1 = zdot + p * ds
        sload = sx * x + sy * y + sz * zdot + szt * zt + ds
        fload = fx * x + fy * y + fzt * zt
        drift_x = bx * x + by * y + bz * zdot + bzt * zt
        drift_y = gx * x + gy * y + gz * zdot + gzt * zt - q * ds
        comp = noise.compensated(k)

        def integ(v):
            return nu_integral(ms, np.broadcast_to(v, (n, m)))

        X[k + 1] = (X[k] + dt * integ(drift_x) + noise.dW[k] * integ(sload)
                    + kahan_sum(np.broadcast_to(fload, (n, m)) * comp, axis=-1))
        Y[k + 1] = (Y[k] - dt * integ(drift_y) + noise.dW[k] * integ(z1)
                    + kahan_sum(np.broadcast_to(zt, (n, m)) * comp, axis=-1))
        zt_gap += float(np.abs(np.broadcast_to(zt - fo.K2[k] * x, (n, m))).mean())
    return IdentityCheck(float(np.abs(Y - fo.p * X).mean()), zt_gap / K, X, Y)


def _linear_sweep_features(sol, extras):
    def features(k):
        cols = [e[k] for e in extras if e is not None]
        return sol.X[k], (np.column_stack(cols) if cols else None)
    return features


def second_variation_simulate(problem: Problem, sol: FBSDEPSolution, fo: FirstOrderAdjoint,
                              so: SecondOrderAdjoint, var: VariationProcesses,
                              noise: NoiseBundle, reg: RegressionConfig = RegressionConfig(),
                              tol: float = 1e-10, max_iter: int = 30) -> "SecondVariation":
    """Solve the (X2, Y2) system by Picard iteration and the Y* equation separately."""
    grid, ms = noise.grid, noise.markspace
    K, n, m, dt = grid.n_steps, noise.n_paths, ms.size, grid.dt
    lam = ms.total_mass
    X1 = var.X1
    Y1 = var.Y1
    shape = (n, m)

    def full(v):
        return np.broadcast_to(v, shape)

    def quad(h, xi):
        if h is None:
            return 0.0
        tot = 0.0
        for a in range(4):
            for b in range(4):
                tot = tot + h[a][b] * xi[a] * xi[b]
        return tot

    memo = {}

    def step(k):
        if memo.get("k") != k:
            memo["k"] = k
            memo["v"] = _step(k)
        return memo["v"]

    def _step(k):
        s = second_order_terms(problem, sol, fo, noise, k, reg, fo.projected_f)
        d = s.d
        x1 = X1[k][:, None]
        xi = [x1, Y1[k][:, None], fo.K1[k] * x1, fo.K2[k] * x1]
        src_b = 0.5 * quad(d.b_hess, xi)
        src_s = 0.5 * quad(d.sigma_hess, xi)
        src_f = 0.5 * quad(d.f_hess, xi)
        src_g = 0.5 * quad(d.g_hess, xi)
        src_star = 0.0
        if k in var.increments:
            inc = var.increments[k]
            w = var.mask[k][:, None]
            src_b = src_b + inc.db * w
            src_s = src_s + sum(inc.dsigma_grad[i] * xi[i] for i in range(4)) * w
            src_g = src_g + (fo.q[k] * inc.dsigma + inc.dg) * w
            src_star = (inc.dH + 0.5 * so.P[k][:, None] * inc.dsigma ** 2) * w
        return s, src_b, src_s, src_f, src_g, src_star

    # Picard iteration for the linear (X2, Y2) system
    Y2 = np.zeros((K + 1, n))
    Zb2 = np.zeros((K, n))
    Zt2 = np.zeros((K, n, m))
    prev = (Y2, Zb2, Zt2)
    distances = []
    X2 = np.zeros((K + 1, n))
    for _ in range(max_iter):
        X2 = np.zeros((K + 1, n))
        for k in range(K):
            s, sb, ss, sf, _, _ = step(k)
            d = s.d
            x2 = X2[k][:, None]
            y2 = Y2[k][:, None]
            z2 = (Zb2[k] / lam)[:, None]
            zt2 = Zt2[k]
            bx, by, bz, bzt = d.b
            sx, sy, sz, szt = d.sigma
            fx, fy, _, fzt = d.f
            drift = bx * x2 + by * y2 + bz * z2 + bzt * zt2 + sb
            vol = sx * x2 + sy * y2 + sz * z2 + szt * zt2 + ss
            jmp = fx * x2 + fy * y2 + fzt * zt2 + sf
            X2[k + 1] = (X2[k] + dt * nu_integral(ms, full(drift))
                         + noise.dW[k] * nu_integral(ms, full(vol))
                         + kahan_sum(full(jmp) * noise.compensated(k), axis=-1))
        phi = problem.coefficients.phi
        terminal = phi.dx(sol.X[-1]) * X2[-1] + 0.5 * phi.dxx(sol.X[-1]) * X1[-1] ** 2

        def driver(k, y, zbar, zt, X2=X2):
            s, _, _, _, sg, _ = step(k)
            gx, gy, gz, gzt = s.d.g
            z = (zbar / lam)[:, None]
            val = gx * X2[k][:, None] + gy * y[:, None] + gz * z + gzt * zt + sg
            return nu_integral(ms, full(val))

        extras = [X2, X1, X1 ** 2]
        Y2, Zb2, Zt2 = backward_sweep(terminal, noise, reg, _linear_sweep_features(sol, extras),
                                      driver)
        dist = triple_distance((Y2, Zb2, Zt2), prev, ms, dt)
        distances.append(dist)
        prev = (Y2, Zb2, Zt2)
        if dist < tol:
            break

    # pathwise version of Y2_0 for paired standard errors
    c2 = terminal.copy()
    for k in range(K):
        s, _, _, _, sg, _ = step(k)
        gx, gy, gz, gzt = s.d.g
        val = (gx * X2[k][:, None] + gy * Y2[k][:, None] + gz * (Zb2[k] / lam)[:, None]
               + gzt * Zt2[k] + sg)
        c2 += dt * nu_integral(ms, full(val))

    ystar = solve_ystar(problem, sol, fo, so, var, noise, reg, step_fn=step)
    return SecondVariation(X2, Y2, spread_z(Zb2, ms), Zt2, float(Y2[0].mean()), c2, distances,
                           ystar)


@dataclass
class YStar:
    Y: np.ndarray
    Z: np.ndarray
    Zt: np.ndarray
    Y0: float
    pathwise: np.ndarray


@dataclass
class SecondVariation:
    X2: np.ndarray
    Y2: np.ndarray
    Z2: np.ndarray
    Zt2: np.ndarray
    Y2_0: float
    pathwise: np.ndarray
    distances: list
    ystar: YStar

    def identity_gap(self):
        """(Y2_0 - Y*_0, paired standard error)."""
        diff = self.pathwise - self.ystar.pathwise
        return self.Y2_0 - self.ystar.Y0, float(diff.std(ddof=1) / np.sqrt(diff.size))


def ystar_coefficients(s, eps_den: float = EPS_DEN):
    """Drift, diffusion and jump loadings (A, B, C) of the Y* and gamma equations."""
    d = s.d
    sy, sz, szt = d.sigma[1], d.sigma[2], d.sigma[3]
    fy, fzt = d.f[1], d.f[3]
    p, qt = s.p, s.qt
    m = p + qt
    den1 = 1.0 - sz * p
    den2 = 1.0 - fzt * m
    if np.any(np.abs(den1) <= eps_den) or np.any(np.abs(den2) <= eps_den):
        raise ArithmeticError("singular R1/R2 denominator in the Y* coefficients")
    R1 = 1.0 / den1
    R2 = 1.0 / den2
    A = s.Hy + qt * fy + s.Hz * sy * p * R1 + s.Hzt * fy * m * R2
    B = s.Hz + s.Hz * sz * p * R1
    C = s.Hzt + qt * fzt + s.Hz * szt * p * R1 * (1.0 + R2 * fzt * m) + s.Hzt * fzt * m * R2
    return A, B, C


def solve_ystar(problem, sol, fo, so, var: VariationProcesses, noise: NoiseBundle,
                reg: RegressionConfig = RegressionConfig(), step_fn=None) -> YStar:
    grid, ms = noise.grid, noise.markspace
    K, n, m, dt = grid.n_steps, noise.n_paths, ms.size, grid.dt
    lam = ms.total_mass
    cache = {}

    def coeffs(k):
        if cache.get("k") != k:
            if step_fn is not None:
                s, *_, src = step_fn(k)
            else:
                s = second_order_terms(problem, sol, fo, noise, k, reg, fo.projected_f)
                src = 0.0
                if k in var.increments:
                    inc = var.increments[k]
                    src = (inc.dH + 0.5 * so.P[k][:, None] * inc.dsigma ** 2) * var.mask[k][:, None]
            cache["k"] = k
            cache["v"] = ystar_coefficients(s) + (src,)
        return cache["v"]

    def driver(k, y, zbar, zt):
        A, B, C, src = coeffs(k)
        val = A * y[:, None] + B * (zbar / lam)[:, None] + C * zt + src
        return nu_integral(ms, np.broadcast_to(val, (n, m)))

    Y, Zb, Zt = backward_sweep(np.zeros(n), noise, reg, lambda k: (sol.X[k], None), driver)
    cost = np.zeros(n)
    for k in range(K):
        cost += dt * driver(k, Y[k], Zb[k], Zt[k])
    return YStar(Y, spread_z(Zb, ms), Zt, float(Y[0].mean()), cost)


@dataclass
class GammaPath:
    gamma: np.ndarray
    nonpositive_fraction: float
    first_nonpositive_step: Optional[int]


def gamma_simulate(problem: Problem, sol: FBSDEPSolution, fo: FirstOrderAdjoint,
                   noise: NoiseBundle, reg: RegressionConfig = RegressionConfig()) -> GammaPath:
    """Euler scheme for the positive weight gamma with gamma(0) = 1."""
    grid, ms = noise.grid, noise.markspace
    K, n, m, dt = grid.n_steps, noise.n_paths, ms.size, grid.dt
    g = np.empty((K + 1, n))
    g[0] = 1.0
    for k in range(K):
        s = second_order_terms(problem, sol, fo, noise, k, reg, fo.projected_f)
        A, B, C = (np.broadcast_to(v, (n, m)) for v in ystar_coefficients(s))
        g[k + 1] = g[k] * (1.0 + dt * nu_integral(ms, A) + noise.dW[k] * nu_integral(ms, B)
                           + kahan_sum(C * noise.compensated(k), axis=-1))
    bad = g <= 0
    first = int(np.argmax(bad.any(axis=1))) if bad.any() else None
    return GammaPath(g, float(bad.mean()), first)


def ystar_via_gamma(gamma: np.ndarray, var: VariationProcesses, so: SecondOrderAdjoint,
                    noise: NoiseBundle):
    """E sum_k dt gamma_k (dH + P dsigma^2 / 2) over perturbed steps, with its SE."""
    ms, dt = noise.markspace, noise.grid.dt
    total = np.zeros(noise.n_paths)
    for k, inc in var.increments.items():
        src = (inc.dH + 0.5 * so.P[k][:, None] * inc.dsigma ** 2) * var.mask[k][:, None]
        total += dt * gamma[k] * nu_integral(ms, np.broadcast_to(src, (noise.n_paths, ms.size)))
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(total.size))


# -------------------------------------------------------- order experiments

SELECTORS = ("forward_gap", "backward_gap", "first_variation", "remainder")


@dataclass
class OrderFit:
    selector: str
    beta: float
    epsilons: list
    statistics: list
    ses: list
    slope: Optional[float]
    intercept: Optional[float]
    r2: Optional[float]
    expected_slope: float
    inconclusive: bool

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("selector", "beta", "epsilons", "statistics", "ses",
                                               "slope", "intercept", "r2", "expected_slope",
                                               "inconclusive")}


def _check_epsilons(eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    if eps.size < 4:
        raise ValueError("need at least four epsilon values")
    ratios = eps[1:] / eps[:-1]
    if np.any(ratios >= 1) or np.ptp(ratios) > 1e-6 * np.abs(ratios).max():
        raise ValueError("epsilon values must decrease geometrically")
    return eps


def check_on_grid(grid: TimeGrid, t_bar: float, epsilons) -> None:
    """Windows must start on a knot and cover a whole number of steps."""
    for label, v in [("t_bar", t_bar)] + [("epsilon", e) for e in epsilons]:
        r = v / grid.dt
        if abs(r - round(r)) > 1e-6:
            raise ValueError(f"{label} = {v} is not a multiple of dt = {grid.dt}; "
                             "pick K so that every window covers whole steps")


def fit_order(epsilons, stats, ses, selector: str, beta: float) -> OrderFit:
    eps = np.asarray(epsilons, dtype=float)
    st = np.asarray(stats, dtype=float)
    se = np.asarray(ses, dtype=float)
    expected = beta if selector == "remainder" else beta / 2.0
    if np.any(st <= 0) or np.any(st < 2.0 * se):
        return OrderFit(selector, beta, eps.tolist(), st.tolist(), se.tolist(), None, None, None,
                        expected, True)
    lx, ly = np.log(eps), np.log(st)
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    r2 = 1.0 - np.sum((ly - pred) ** 2) / max(np.sum((ly - ly.mean()) ** 2), 1e-300)
    return OrderFit(selector, beta, eps.tolist(), st.tolist(), se.tolist(), float(slope),
                    float(intercept), float(r2), expected, False)


def order_experiment(problem: Problem, ubar, cfg: SpikeConfig, noise: NoiseBundle, epsilons,
                     selector: str = "forward_gap", beta: float = 2.0,
                     reg: RegressionConfig = RegressionConfig(), tol: float = 1e-6,
                     max_iter: int = 30, baseline: Optional[FBSDEPSolution] = None,
                     fo: Optional[FirstOrderAdjoint] = None) -> OrderFit:
    """Paired solves over a geometric epsilon list and a log-log slope fit."""
    from .adjoint import solve_first_order_adjoint

    if selector not in SELECTORS:
        raise ValueError(f"selector must be one of {SELECTORS}")
    eps = _check_epsilons(epsilons)
    check_on_grid(noise.grid, cfg.t_bar, eps)
    K = noise.grid.n_steps
    base = baseline if baseline is not None else picard_solve(problem, as_control(ubar, K), noise,
                                                             reg, tol, max_iter)
    if selector in ("first_variation", "remainder") and fo is None:
        fo = solve_first_order_adjoint(problem, base, noise, reg)
    stats, ses = [], []
    for e in eps:
        c = cfg.with_epsilon(float(e))
        if selector == "first_variation":
            per_path = np.max(np.abs(first_variation_simulate(problem, base, fo, c, noise, reg).X1),
                              axis=0) ** beta
        else:
            u_eps = build_spike_control(base.control, c, noise, base.X)
            sol = picard_solve(problem, u_eps, noise, reg, tol, max_iter)
            if selector == "forward_gap":
                per_path = np.max(np.abs(sol.X - base.X), axis=0) ** beta
            elif selector == "backward_gap":
                per_path = np.max(np.abs(sol.Y - base.Y), axis=0) ** beta
            else:
                X1 = first_variation_simulate(problem, base, fo, c, noise, reg).X1
                per_path = np.max(np.abs(sol.X - base.X - X1), axis=0) ** beta
            del sol
        stats.append(float(per_path.mean()))
        ses.append(float(per_path.std(ddof=1) / np.sqrt(per_path.size)))
    return fit_order(eps, stats, ses, selector, beta)


def write_order_csv(fit: OrderFit, path) -> None:
    rows = np.column_stack([fit.epsilons, fit.statistics, fit.ses])
    np.savetxt(path, rows, fmt="%.17g", delimiter=",", header="epsilon,statistic,se", comments="")


# -------------------------------------------------------------- expansion

@dataclass
class ExpansionReport:
    G: float
    G_se: float
    epsilons: list
    gaps: list
    gap_ses: list
    residuals: list
    decreasing: bool
    final_residual: float
    threshold: float
    sign_match: bool
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def expansion_check(problem: Problem, ubar, cfg: SpikeConfig, noise: NoiseBundle, epsilons,
                    reg: RegressionConfig = RegressionConfig(), tol: float = 1e-6,
                    max_iter: int = 30, baseline: Optional[FBSDEPSolution] = None,
                    fo: Optional[FirstOrderAdjoint] = None,
                    so: Optional[SecondOrderAdjoint] = None) -> ExpansionReport:
    """Compare spike cost gaps with epsilon times the leading coefficient G at t_bar."""
    from .adjoint import solve_first_order_adjoint, solve_second_order_adjoint

    eps = _check_epsilons(epsilons)
    check_on_grid(noise.grid, cfg.t_bar, eps)
    grid, ms = noise.grid, noise.markspace
    K, n = grid.n_steps, noise.n_paths
    base = baseline if baseline is not None else picard_solve(problem, as_control(ubar, K), noise,
                                                             reg, tol, max_iter)
    fo = fo if fo is not None else solve_first_order_adjoint(problem, base, noise, reg)
    so = so if so is not None else solve_second_order_adjoint(problem, base, fo, noise, reg)
    gam = gamma_simulate(problem, base, fo, noise, reg)
    kb = tbar_index(grid, cfg.t_bar)
    t = grid.knots[kb]
    u = replacement_values(cfg, base.X, grid, n)[:, None]
    inc = spike_increments(problem.coefficients, t, base.X[kb][:, None], base.Y[kb][:, None],
                           base.Z[kb], base.Zt[kb], u, control_row(base.control, kb), ms.e,
                           fo.p[kb][:, None], fo.q[kb])
    lead = inc.dH + 0.5 * so.P[kb][:, None] * inc.dsigma ** 2
    per_path = gam.gamma[kb] * nu_integral(ms, np.broadcast_to(lead, (n, ms.size)))
    G = float(per_path.mean())
    G_se = float(per_path.std(ddof=1) / np.sqrt(n))
    gaps, ses = [], []
    for e in eps:
        gap, se, _ = spike_cost_gap(problem, base.control, cfg.with_epsilon(float(e)), noise, reg,
                                    tol, max_iter, baseline=base)
        gaps.append(gap)
        ses.append(se)
    resid = [float(abs(gp - e * G) / e) for gp, e in zip(gaps, eps)]
    decreasing = all(resid[i + 1] < resid[i] for i in range(len(resid) - 1))
    threshold = 0.1 * (abs(G) + 3.0 * ses[-1] / eps[-1])
    sign_match = bool(all(np.sign(gp) == np.sign(G) for gp in gaps[-2:]))
    passed = decreasing and resid[-1] < threshold and sign_match
    return ExpansionReport(G, G_se, eps.tolist(), gaps, ses, resid, decreasing, resid[-1],
                           threshold, sign_match, passed)
