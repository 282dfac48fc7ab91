"""Forward Euler, regression-based backward solve and Picard coupling.

Array layout is time-major throughout: scalar processes are (K+1, n) or
(K, n), mark-indexed processes are (K, n, m).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .markspace import MarkSpace, kahan_sum
from .model import Coefficient, Problem
from .noise import NoiseBundle, TimeGrid
from .regression import ImplicitStepError, Projector, RegressionConfig


class DivergenceError(RuntimeError):
    pass


class ContractionError(RuntimeError):
    pass


class NotConvergedError(RuntimeError):
    pass


def mark_eval(coef: Coefficient, t, x, y, z, zt, u, e, shape) -> np.ndarray:
    """Evaluate a coefficient on every (path, mark) pair, result of ``shape`` (n, m)."""
    return np.broadcast_to(coef(t, x, y, z, zt, u, e), shape)


def nu_integral(ms: MarkSpace, values: np.ndarray) -> np.ndarray:
    return kahan_sum(np.asarray(values) * ms.nu, axis=-1)


def _col(a, k):
    """Row k of a time-major array as a column (paths, 1), or the scalar 0."""
    return 0.0 if a is None else a[k][:, None]


def _marks(a, k):
    return 0.0 if a is None else a[k]


def control_row(control, k):
    return np.asarray(control[k]).reshape(-1, 1)


def as_control(control, n_steps: int) -> np.ndarray:
    """Control on the left knots as (K, 1) for deterministic or (K, n) otherwise."""
    u = np.asarray(control, dtype=float)
    if u.ndim <= 1:
        u = np.broadcast_to(u, (n_steps,)).reshape(n_steps, 1)
    if u.shape[0] != n_steps:
        raise ValueError(f"control has {u.shape[0]} rows but the grid has {n_steps} steps")
    return u


# ------------------------------------------------------------------ forward

def simulate_forward(problem: Problem, driver, control, noise: NoiseBundle) -> np.ndarray:
    """Euler scheme for the state with the backward triple ``driver`` frozen.

    ``driver`` is (y, z, zt) with y of shape (K+1, n) and z, zt of shape
    (K, n, m); any entry may be None for zero.
    """
    y, z, zt = driver if driver is not None else (None, None, None)
    grid, ms = noise.grid, noise.markspace
    K, n, m, dt = grid.n_steps, noise.n_paths, ms.size, grid.dt
    coefs = problem.coefficients
    t = grid.knots
    e = ms.e
    X = np.empty((K + 1, n))
    X[0] = problem.x0
    shape = (n, m)
    for k in range(K):
        xk = X[k][:, None]
        args = (t[k], xk, _col(y, k), _marks(z, k), _marks(zt, k), control_row(control, k), e)
        drift = nu_integral(ms, mark_eval(coefs.b, *args, shape))
        vol = nu_integral(ms, mark_eval(coefs.sigma, *args, shape))
        fj = mark_eval(coefs.f, *args, shape)
        jump = kahan_sum(fj * noise.compensated(k), axis=-1)
        X[k + 1] = X[k] + dt * drift + vol * noise.dW[k] + jump
        if not np.all(np.isfinite(X[k + 1])):
            path = int(np.argmin(np.isfinite(X[k + 1])))
            raise DivergenceError(f"forward state not finite at path {path}, step {k + 1}")
    return X


# ----------------------------------------------------------------- backward

def backward_sweep(terminal: np.ndarray, noise: NoiseBundle, cfg: RegressionConfig,
                   features: Callable, driver: Callable, implicit: bool = True,
                   after_step: Optional[Callable] = None):
    """Generic regression sweep for -dY = driver dt - Zbar dW - Zt dÑ.

    ``features(k)`` returns (x, extra) for the basis at step k and
    ``driver(k, y, zbar, zt)`` returns the nu-integrated driver (n,).
    Returns (Y, Zbar, Zt).
    """
    grid, ms = noise.grid, noise.markspace
    K, n, m, dt = grid.n_steps, noise.n_paths, ms.size, grid.dt
    nu = ms.nu
    Y = np.empty((K + 1, n))
    Zbar = np.empty((K, n))
    Zt = np.empty((K, n, m))
    Y[K] = terminal
    for k in range(K - 1, -1, -1):
        x, extra = features(k)
        proj = Projector(x, cfg.degree, cfg.ridge, extra, cfg.winsor)
        nxt = Y[k + 1]
        ey = proj(nxt)
        resid = nxt - ey
        targets = np.empty((n, 1 + m))
        targets[:, 0] = resid * noise.dW[k]
        targets[:, 1:] = resid[:, None] * noise.compensated(k)
        fit = proj(targets)
        Zbar[k] = fit[:, 0] / dt
        Zt[k] = fit[:, 1:] / (nu * dt)
        yk = ey + dt * driver(k, ey, Zbar[k], Zt[k])
        if implicit:
            for _ in range(cfg.implicit_inner_iters):
                y_new = ey + dt * driver(k, yk, Zbar[k], Zt[k])
                diff = np.max(np.abs(y_new - yk))
                yk = y_new
                if diff <= cfg.implicit_tol * max(1.0, float(np.max(np.abs(yk)))):
                    break
            else:
                raise ImplicitStepError(
                    f"implicit backward step {k} did not settle (last change {diff:.3g}); "
                    "try a smaller dt"
                )
        if not np.all(np.isfinite(yk)):
            raise DivergenceError(f"backward value not finite at step {k}")
        Y[k] = yk
        if after_step is not None:
            after_step(k, yk, Zbar[k], Zt[k])
    return Y, Zbar, Zt


def spread_z(zbar: np.ndarray, ms: MarkSpace, profile: Optional[np.ndarray] = None) -> np.ndarray:
    """Distribute the aggregate Zbar over the marks.

    Without a profile every mark gets Zbar / lambda (returned as a broadcast
    view); a profile w with sum_j nu_j w_j = 1 gives Z_j = Zbar w_j.
    """
    if profile is None:
        return np.broadcast_to((zbar / ms.total_mass)[..., None], zbar.shape + (ms.size,))
    return zbar[..., None] * profile


def solve_backward(problem: Problem, X: np.ndarray, control, noise: NoiseBundle,
                   cfg: RegressionConfig = RegressionConfig(), z_profile=None):
    """Backward regression solve from Y_K = phi(X_K); returns (Y, Z, Zt, Zbar)."""
    if cfg.z_mark_mode == "per-mark" and z_profile is None:
        raise ValueError("per-mark z mode needs an e-profile (for example from K1)")
    profile = z_profile if cfg.z_mark_mode == "per-mark" else None
    grid, ms = noise.grid, noise.markspace
    n, m = noise.n_paths, ms.size
    g = problem.coefficients.g
    t = grid.knots
    lam = ms.total_mass

    def driver(k, y, zbar, zt):
        z = zbar[:, None] / lam if profile is None else zbar[:, None] * profile[k]
        vals = mark_eval(g, t[k], X[k][:, None], y[:, None], z, zt,
                         control_row(control, k), ms.e, (n, m))
        return nu_integral(ms, vals)

    Y, Zbar, Zt = backward_sweep(problem.coefficients.phi(X[-1]) + 0.0 * X[-1], noise, cfg,
                                 lambda k: (X[k], None), driver)
    return Y, spread_z(Zbar, ms, profile), Zt, Zbar


# ------------------------------------------------------------------- Picard

@dataclass
class PicardReport:
    iterations: int
    converged: bool
    distances: list
    ratios: list
    budget: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "converged": self.converged,
                "distances": list(self.distances), "ratios": list(self.ratios),
                "lipschitz_budget": self.budget}


@dataclass
class FBSDEPSolution:
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    Zt: np.ndarray
    Zbar: np.ndarray
    Y0: float
    picard: PicardReport
    control: np.ndarray
    pathwise_cost: np.ndarray

    @property
    def converged(self) -> bool:
        return self.picard.converged


def triple_distance(a, b, ms: MarkSpace, dt: float) -> float:
    """Squared distance between two backward triples (Y, Zbar, Zt).

    Accumulated one step at a time so no full-size temporaries are made.
    """
    n = a[0].shape[1]
    sup_y = np.zeros(n)
    for k in range(a[0].shape[0]):
        np.maximum(sup_y, (a[0][k] - b[0][k]) ** 2, out=sup_y)
    dz = np.zeros(n)
    dzt = np.zeros(n)
    for k in range(a[1].shape[0]):
        dz += (a[1][k] - b[1][k]) ** 2
        dzt += nu_integral(ms, (a[2][k] - b[2][k]) ** 2)
    return float(sup_y.mean() + dz.mean() * dt / ms.total_mass + dzt.mean() * dt)


def pathwise_cost(problem: Problem, X, Y, Z, Zt, control, noise: NoiseBundle) -> np.ndarray:
    """phi(X_T) + sum_k dt * nu-integrated g along each path.

    Its cross-path mean reproduces Y_0 because the regression keeps means.
    """
    grid, ms = noise.grid, noise.markspace
    n, m, t, dt = noise.n_paths, ms.size, grid.knots, grid.dt
    g = problem.coefficients.g
    cost = problem.coefficients.phi(X[-1]) + 0.0 * X[-1]
    running = np.zeros(n)
    for k in range(grid.n_steps):
        vals = mark_eval(g, t[k], X[k][:, None], Y[k][:, None], Z[k], Zt[k],
                         control_row(control, k), ms.e, (n, m))
        running += nu_integral(ms, vals)
    return cost + dt * running


def picard_solve(problem: Problem, control, noise: NoiseBundle,
                 cfg: RegressionConfig = RegressionConfig(), tol: float = 1e-6,
                 max_iter: int = 30, z_profile=None) -> FBSDEPSolution:
    """Iterate forward simulation and backward regression from the zero triple."""
    if tol <= 0 or max_iter < 1:
        raise ValueError("need tol > 0 and max_iter >= 1")
    ms, dt = noise.markspace, noise.grid.dt
    K, n = noise.grid.n_steps, noise.n_paths
    control = as_control(control, K)
    prev = (np.zeros((K + 1, n)), np.zeros((K, n)), np.zeros((K, n, ms.size)))
    driver = None
    distances = []
    best = None
    increases = 0
    converged = False
    for it in range(1, max_iter + 1):
        X = simulate_forward(problem, driver, control, noise)
        Y, Z, Zt, Zbar = solve_backward(problem, X, control, noise, cfg, z_profile)
        d = triple_distance((Y, Zbar, Zt), prev, ms, dt)
        if distances and d > distances[-1] and d > 1e-20:
            increases += 1
        else:
            increases = 0
        distances.append(d)
        if best is None or d <= best[0]:
            best = (d, X, Y, Z, Zt, Zbar)
        if d < tol:
            converged = True
            best = (d, X, Y, Z, Zt, Zbar)
            break
        if increases >= 3:
            raise ContractionError(
                f"Picard distances increased three times in a row ({distances[-4:]}); "
                "the contraction condition on the Lipschitz budget is likely violated"
            )
        prev = (Y, Zbar, Zt)
        driver = (Y, Z, Zt)
    ratios = [distances[i + 1] / distances[i] for i in range(len(distances) - 1)
              if distances[i] > 0]
    b = problem.budget
    report = PicardReport(len(distances), converged, distances, ratios,
                          {"L1": b.L1, "L2": b.L2, "L3": b.L3, "L4": b.L4, "C0": b.C0})
    _, X, Y, Z, Zt, Zbar = best
    cost = pathwise_cost(problem, X, Y, Z, Zt, control, noise)
    return FBSDEPSolution(X, Y, Z, Zt, Zbar, float(Y[0].mean()), report, control, cost)


def evaluate_cost(sol: FBSDEPSolution, override: bool = False):
    """Cost Y_0 and a Monte Carlo standard error from the pathwise cost."""
    if not sol.converged and not override:
        raise NotConvergedError("solution did not converge; pass override=True to use it anyway")
    c = sol.pathwise_cost
    se = float(c.std(ddof=1) / np.sqrt(c.size)) if c.size > 1 else 0.0
    return sol.Y0, se


# ------------------------------------------------------------ norm estimates

@dataclass
class NormReport:
    p: float
    sup_X: float
    sup_Y: float
    Z_term: float
    jump_term: float
    data: dict

    def to_dict(self) -> dict:
        return {"p": self.p, "sup_X": self.sup_X, "sup_Y": self.sup_Y, "Z_term": self.Z_term,
                "jump_term": self.jump_term, "data": self.data}


def lp_norm_report(sol: FBSDEPSolution, problem: Problem, noise: NoiseBundle, p: float = 2.0) -> NormReport:
    """Monte Carlo estimates of both sides of the a-priori L^p bound."""
    if p < 2:
        raise ValueError("p must be at least 2")
    grid, ms = noise.grid, noise.markspace
    n, m, dt, t = noise.n_paths, ms.size, grid.dt, grid.knots
    sup_x = float(np.mean(np.max(np.abs(sol.X), axis=0) ** p))
    sup_y = float(np.mean(np.max(np.abs(sol.Y), axis=0) ** p))
    z_int = nu_integral(ms, sol.Z ** 2).sum(axis=0) * dt
    jumps = (sol.Zt ** 2 * noise.dN).sum(axis=(0, 2))
    coefs = problem.coefficients
    b0 = np.zeros(n)
    g0 = np.zeros(n)
    s0 = np.zeros(n)
    f0 = np.zeros(n)
    zero = np.zeros((n, 1))
    for k in range(grid.n_steps):
        args = (t[k], zero, zero, zero, zero, control_row(sol.control, k), ms.e)
        b0 += np.sqrt(nu_integral(ms, mark_eval(coefs.b, *args, (n, m)) ** 2))
        g0 += np.sqrt(nu_integral(ms, mark_eval(coefs.g, *args, (n, m)) ** 2))
        s0 += nu_integral(ms, mark_eval(coefs.sigma, *args, (n, m)) ** 2)
        f0 += (mark_eval(coefs.f, *args, (n, m)) ** 2 * noise.dN[k]).sum(axis=1)
    data = {
        "phi_at_zero": float(abs(coefs.phi(0.0)) ** p),
        "x0": float(abs(problem.x0) ** p),
        "b_at_zero": float(np.mean((b0 * dt) ** p)),
        "g_at_zero": float(np.mean((g0 * dt) ** p)),
        "sigma_at_zero": float(np.mean((s0 * dt) ** (p / 2))),
        "f_at_zero": float(np.mean(f0 ** (p / 2))),
    }
    return NormReport(p, sup_x, sup_y, float(np.mean(z_int ** (p / 2))),
                      float(np.mean(jumps ** (p / 2))), data)


# -------------------------------------------------------------------- export

def write_solution_csv(sol: FBSDEPSolution, grid: TimeGrid, path, max_paths: Optional[int] = None) -> None:
    K = grid.n_steps
    n = sol.X.shape[1] if max_paths is None else min(max_paths, sol.X.shape[1])
    m = sol.Zt.shape[2]
    t = grid.knots
    steps = np.repeat(np.arange(K + 1)[None, :], n, axis=0)
    zbar = np.concatenate([sol.Zbar[:, :n], np.full((1, n), np.nan)]).T
    zt = np.concatenate([sol.Zt[:, :n], np.full((1, n, m), np.nan)]).transpose(1, 0, 2)
    cols = [np.repeat(np.arange(n), K + 1), steps.ravel(), np.tile(t, n),
            sol.X[:, :n].T.ravel(), sol.Y[:, :n].T.ravel(), zbar.ravel()]
    cols += [zt[..., j].ravel() for j in range(m)]
    header = "path,step,t,X,Y,Zbar," + ",".join(f"Ztilde_{j}" for j in range(m))
    fmt = ["%d", "%d"] + ["%.17g"] * (4 + m)
    np.savetxt(path, np.column_stack(cols), fmt=fmt, delimiter=",", header=header, comments="")
