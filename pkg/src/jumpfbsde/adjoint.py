"""First- and second-order adjoint equations and their closed-form K algebra."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fbsolve import FBSDEPSolution, backward_sweep, control_row, nu_integral, spread_z
from .model import Problem
from .noise import NoiseBundle
from .regression import Projector, RegressionConfig

EPS_DEN = 1e-8


class KAlgebraSingularity(ArithmeticError):
    """A denominator of the K algebra came within ``eps_den`` of zero.

    ``violations`` holds (t, path, mark, guard_name, value) rows when the
    location is known.
    """

    def __init__(self, guard: str, value: float, violations=None):
        self.guard = guard
        self.value = value
        self.violations = list(violations or [])
        where = ""
        if self.violations:
            t, path, mark, _, _ = self.violations[0]
            where = f" at t={t:.6g}, path={path}, mark={mark}"
        super().__init__(f"singular denominator for guard {guard}: {value:.3g}{where}")


class AdjointBoundError(RuntimeError):
    pass


def _guard(den: np.ndarray, name: str, eps_den: float):
    bad = np.abs(den) <= eps_den
    if np.any(bad):
        flat = np.atleast_1d(den)[np.atleast_1d(bad)]
        raise KAlgebraSingularity(name, float(flat[0]))


def k_algebra(p, q, qt, sx, sy, sz, szt, fx, fy, fzt, eps_den: float = EPS_DEN):
    """K2 from the jump loadings first, then K1 from the diffusion loadings."""
    p, q, qt = (np.asarray(a, dtype=float) for a in (p, q, qt))
    den2 = 1.0 - fzt * (p + qt)
    den1 = 1.0 - sz * p
    _guard(np.asarray(den2), "f_zt*(p+qt)", eps_den)
    _guard(np.asarray(den1), "sigma_z*p", eps_den)
    K2 = (fx * p + fy * p * p + fx * qt + fy * p * qt + qt) / den2
    K1 = (sx * p + sy * p * p + szt * p * K2 + q) / den1
    return K1, K2


def k_algebra_residual(K1, K2, p, q, qt, sx, sy, sz, szt, fx, fy, fzt):
    """Relative residuals of the two undivided relations at (K1, K2)."""
    t2 = [fx * p, fy * p * p, fx * qt, fy * p * qt, qt, fzt * (p + qt) * K2]
    t1 = [sx * p, sy * p * p, sz * p * K1, szt * p * K2, q]
    r2 = np.abs(K2 - sum(t2)) / (np.abs(K2) + sum(np.abs(a) for a in t2) + 1e-300)
    r1 = np.abs(K1 - sum(t1)) / (np.abs(K1) + sum(np.abs(a) for a in t1) + 1e-300)
    return r1, r2


class StatePartials:
    """Coefficient partials along the reference trajectory at one step, shape (n, m)."""

    def __init__(self, problem: Problem, sol: FBSDEPSolution, noise: NoiseBundle, k: int,
                 project_f: bool, cfg: RegressionConfig, hessians: bool = False):
        ms = noise.markspace
        n, m = noise.n_paths, ms.size
        t = noise.grid.knots[k]
        args = (t, sol.X[k][:, None], sol.Y[k][:, None], sol.Z[k], sol.Zt[k],
                control_row(sol.control, k), ms.e)
        self.t = t
        for name, coef in problem.coefficients.items():
            grads = [np.broadcast_to(np.asarray(gv, dtype=float), (n, m)) for gv in coef.grad(*args)]
            if name == "f" and project_f:
                grads = _project_columns(grads, sol.X[k], cfg)
            setattr(self, name, grads)
            if hessians:
                h = None
                if coef.hess is not None:
                    h = [[np.broadcast_to(np.asarray(v, dtype=float), (n, m)) for v in row]
                         for row in coef.hess(*args)]
                setattr(self, name + "_hess", h)


def _project_columns(grads, x, cfg: RegressionConfig):
    """Predictable projection of the f partials onto the state basis."""
    out = []
    proj = None
    for gv in grads:
        if np.all(gv == gv.flat[0]):
            out.append(gv)
            continue
        if proj is None:
            proj = Projector(x, cfg.degree, cfg.ridge, None, cfg.winsor)
        out.append(proj(np.ascontiguousarray(gv)))
    return out


def _quad(hess, v):
    if hess is None:
        return 0.0
    total = 0.0
    for a in range(4):
        if v[a] is None:
            continue
        for b in range(4):
            if v[b] is None:
                continue
            total = total + hess[a][b] * v[a] * v[b]
    return total


# ------------------------------------------------------------- first order

@dataclass
class FirstOrderAdjoint:
    p: np.ndarray
    q: np.ndarray
    qt: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    qbar: np.ndarray
    max_abs_p: float
    bounded: bool
    projected_f: bool = True
    notes: list = field(default_factory=list)


def solve_first_order_adjoint(problem: Problem, sol: FBSDEPSolution, noise: NoiseBundle,
                              cfg: RegressionConfig = RegressionConfig(), bound: float = 1e6,
                              strict: bool = False, project_f: bool = True,
                              eps_den: float = EPS_DEN) -> FirstOrderAdjoint:
    """Regression solve of the first-order adjoint with K1, K2 refreshed per step."""
    grid, ms = noise.grid, noise.markspace
    K, n, m = grid.n_steps, noise.n_paths, ms.size
    lam = ms.total_mass
    K1 = np.empty((K, n, m))
    K2 = np.empty((K, n, m))
    cache = {}

    def partials(k):
        if cache.get("k") != k:
            cache["k"] = k
            cache["d"] = StatePartials(problem, sol, noise, k, project_f, cfg)
        return cache["d"]

    def kk(k, p, qbar, qt):
        d = partials(k)
        q = (qbar / lam)[:, None]
        pp = p[:, None]
        sx, sy, sz, szt = d.sigma
        fx, fy, _, fzt = d.f
        for den, name in ((1.0 - fzt * (pp + qt), "f_zt*(p+qt)"), (1.0 - sz * pp, "sigma_z*p")):
            den = np.broadcast_to(den, (n, m))
            if np.any(np.abs(den) <= eps_den):
                bad = np.argwhere(np.abs(den) <= eps_den)
                rows = [(float(d.t), int(i), int(j), name, float(den[i, j])) for i, j in bad]
                raise KAlgebraSingularity(name, rows[0][4], rows)
        k1, k2 = k_algebra(pp, q, qt, sx, sy, sz, szt, fx, fy, fzt, eps_den)
        return q, pp, k1, k2, d

    def driver(k, p, qbar, qt):
        q, pp, k1, k2, d = kk(k, p, qbar, qt)
        gx, gy, gz, gzt = d.g
        bx, by, bz, bzt = d.b
        sx, sy, sz, szt = d.sigma
        fx, fy, _, fzt = d.f
        val = (gx + gy * pp + gz * k1 + gzt * k2
               + bx * pp + by * pp * pp + bz * k1 * pp + bzt * k2 * pp
               + sx * q + sy * pp * q + sz * k1 * q + szt * k2 * q
               + fx * qt + fy * pp * qt + fzt * k2 * qt)
        return nu_integral(ms, np.broadcast_to(val, (n, m)))

    def after(k, p, qbar, qt):
        _, _, k1, k2, _ = kk(k, p, qbar, qt)
        K1[k] = k1
        K2[k] = k2

    terminal = problem.coefficients.phi.dx(sol.X[-1]) + 0.0 * sol.X[-1]
    p, qbar, qt = backward_sweep(terminal, noise, cfg, lambda k: (sol.X[k], None), driver,
                                 after_step=after)
    max_p = float(np.max(np.abs(p)))
    bounded = max_p <= bound
    if not bounded and strict:
        raise AdjointBoundError(f"max |p| = {max_p:.3g} exceeds the bound {bound:.3g}")
    notes = ["f partials replaced by their projection on the state basis"] if project_f else []
    return FirstOrderAdjoint(p, spread_z(qbar, ms), qt, K1, K2, qbar, max_p, bounded,
                             project_f, notes)


# ------------------------------------------------------------ second order

@dataclass
class SecondOrderAdjoint:
    P: np.ndarray
    Q: np.ndarray
    Qt: np.ndarray
    Kt1: np.ndarray
    Kt2: np.ndarray
    Qbar: np.ndarray


@dataclass
class SecondOrderTerms:
    """Per-step quantities shared by the second-order adjoint and the Y* equation."""

    p: np.ndarray
    q: np.ndarray
    qt: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    d: StatePartials
    Db: np.ndarray
    Ds: np.ndarray
    Df: np.ndarray
    Hy: np.ndarray
    Hz: np.ndarray
    Hzt: np.ndarray
    quadH: np.ndarray
    quadf: np.ndarray
    quads: np.ndarray


def second_order_terms(problem, sol, fo: FirstOrderAdjoint, noise, k, cfg, project_f=True):
    n, m = noise.n_paths, noise.markspace.size
    d = StatePartials(problem, sol, noise, k, project_f, cfg, hessians=True)
    p = fo.p[k][:, None]
    q = fo.q[k]
    qt = fo.qt[k]
    k1, k2 = fo.K1[k], fo.K2[k]
    bx, by, bz, bzt = d.b
    sx, sy, sz, szt = d.sigma
    fx, fy, _, fzt = d.f
    gx, gy, gz, gzt = d.g
    xi1 = [1.0, p, k1, k2]
    xi2 = [1.0, p, None, k2]
    hess_h = None
    if d.g_hess is not None or d.b_hess is not None or d.sigma_hess is not None:
        zero = np.zeros((n, m))
        gh = d.g_hess or [[zero] * 4] * 4
        bh = d.b_hess or [[zero] * 4] * 4
        sh = d.sigma_hess or [[zero] * 4] * 4
        hess_h = [[gh[a][b] + p * bh[a][b] + q * sh[a][b] for b in range(4)] for a in range(4)]

    def full(v):
        return np.broadcast_to(v, (n, m))

    return SecondOrderTerms(
        p=full(p), q=full(q), qt=full(qt), K1=k1, K2=k2, d=d,
        Db=full(bx + by * p + bz * k1 + bzt * k2),
        Ds=full(sx + sy * p + sz * k1 + szt * k2),
        Df=full(fx + fy * p + fzt * k2),
        Hy=full(gy + p * by + q * sy),
        Hz=full(gz + p * bz + q * sz),
        Hzt=full(gzt + p * bzt + q * szt),
        quadH=full(_quad(hess_h, xi1)),
        quadf=full(_quad(d.f_hess, xi2)),
        quads=full(_quad(d.sigma_hess, xi1)),
    )


def solve_second_order_adjoint(problem: Problem, sol: FBSDEPSolution, fo: FirstOrderAdjoint,
                               noise: NoiseBundle, cfg: RegressionConfig = RegressionConfig(),
                               eps_den: float = EPS_DEN) -> SecondOrderAdjoint:
    """Regression solve of the linear second-order adjoint equation."""
    grid, ms = noise.grid, noise.markspace
    K, n, m = grid.n_steps, noise.n_paths, ms.size
    lam = ms.total_mass
    Kt1 = np.empty((K, n, m))
    Kt2 = np.empty((K, n, m))
    cache = {}

    def terms(k):
        if cache.get("k") != k:
            cache["k"] = k
            cache["s"] = second_order_terms(problem, sol, fo, noise, k, cfg, fo.projected_f)
        return cache["s"]

    def tilde_k(k, P, Qbar, Qt):
        s = terms(k)
        d = s.d
        sz, szt = d.sigma[2], d.sigma[3]
        fy, fzt = d.f[1], d.f[3]
        sy = d.sigma[1]
        PP = P[:, None]
        Q = (Qbar / lam)[:, None]
        mm = s.p + s.qt
        nn = PP + Qt
        den2 = np.broadcast_to(1.0 - fzt * mm, (n, m))
        den1 = np.broadcast_to(1.0 - sz * s.p, (n, m))
        for den, name in ((den2, "R2:f_zt*(p+qt)"), (den1, "R1:sigma_z*p")):
            if np.any(np.abs(den) <= eps_den):
                bad = np.argwhere(np.abs(den) <= eps_den)
                rows = [(float(d.t), int(i), int(j), name, float(den[i, j])) for i, j in bad]
                raise KAlgebraSingularity(name, rows[0][4], rows)
        kt2 = (fy * mm * PP + mm * s.quadf + 2.0 * nn * s.Df + nn * s.Df ** 2 + Qt) / den2
        kt1 = (s.p * sy * PP + 2.0 * s.Ds * PP + Q + s.p * s.quads + szt * s.p * kt2) / den1
        return s, PP, Q, kt1, kt2

    def driver(k, P, Qbar, Qt):
        s, PP, Q, kt1, kt2 = tilde_k(k, P, Qbar, Qt)
        fy, fzt = s.d.f[1], s.d.f[3]
        val = (PP * (s.Df ** 2 + s.Ds ** 2 + 2.0 * s.Db + s.Hy + s.qt * fy)
               + 2.0 * Q * s.Ds + s.quadH + s.qt * s.quadf + 2.0 * Qt * s.Df
               + s.Hz * kt1 + Qt * s.Df ** 2 + s.Hzt * kt2 + s.qt * fzt * kt2)
        return nu_integral(ms, np.broadcast_to(val, (n, m)))

    def after(k, P, Qbar, Qt):
        _, _, _, kt1, kt2 = tilde_k(k, P, Qbar, Qt)
        Kt1[k] = kt1
        Kt2[k] = kt2

    terminal = problem.coefficients.phi.dxx(sol.X[-1]) + 0.0 * sol.X[-1]
    P, Qbar, Qt = backward_sweep(terminal, noise, cfg, lambda k: (sol.X[k], None), driver,
                                 after_step=after)
    return SecondOrderAdjoint(P, spread_z(Qbar, ms), Qt, Kt1, Kt2, Qbar)


def write_adjoint_csv(fo: FirstOrderAdjoint, so: SecondOrderAdjoint, knots: np.ndarray, path,
                      max_paths=None) -> None:
    K, n_all, m = fo.qt.shape
    n = n_all if max_paths is None else min(max_paths, n_all)

    def pad(a):
        return np.concatenate([a[:, :n], np.full((1,) + a[:, :n].shape[1:], np.nan)])

    cols = [np.repeat(np.arange(n), K + 1), np.tile(np.arange(K + 1), n), np.tile(knots, n),
            fo.p[:, :n].T.ravel(), so.P[:, :n].T.ravel()]
    names = ["path", "step", "t", "p", "P"]
    for label, arr in (("q", fo.q), ("qt", fo.qt), ("K1", fo.K1), ("K2", fo.K2)):
        padded = pad(np.asarray(arr)).transpose(1, 0, 2)
        for j in range(m):
            cols.append(padded[..., j].ravel())
            names.append(f"{label}_{j}")
    fmt = ["%d", "%d"] + ["%.17g"] * (len(cols) - 2)
    np.savetxt(path, np.column_stack(cols), fmt=fmt, delimiter=",", header=",".join(names),
               comments="")
