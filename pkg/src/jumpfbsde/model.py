"""Control problems: coefficients with declared derivatives, control sets and builtins."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate as quad_integrate

from .markspace import MarkSpace

ARGS = ("x", "y", "z", "zt")


class ProblemError(ValueError):
    pass


def _as_fn(c):
    return c if callable(c) else (lambda e, _c=float(c): _c)


@dataclass(frozen=True)
class Coefficient:
    """A coefficient psi(t, x, y, z, zt, u, e) with its state derivatives.

    ``grad`` returns the four partials in (x, y, z, zt); ``hess`` returns a
    4x4 nested sequence of second partials, or is None when psi is affine in
    the state. All callables must broadcast over array arguments.
    """

    value: Callable
    grad: Callable
    hess: Optional[Callable] = None
    affine_state: bool = False

    def __call__(self, t, x, y, z, zt, u, e):
        return self.value(t, x, y, z, zt, u, e)

    def hessian(self, t, x, y, z, zt, u, e):
        if self.hess is None:
            return [[0.0] * 4 for _ in range(4)]
        return self.hess(t, x, y, z, zt, u, e)


def affine(x=0.0, y=0.0, z=0.0, zt=0.0, const=0.0, control=None) -> Coefficient:
    """psi = cx(e) x + cy(e) y + cz(e) z + czt(e) zt + const(e) + control(u, e).

    Each slope may be a number or a function of the mark.
    """
    cx, cy, cz, czt, c0 = (_as_fn(c) for c in (x, y, z, zt, const))
    h = control if control is not None else (lambda u, e: 0.0 * u)

    def value(t, x_, y_, z_, zt_, u, e):
        return cx(e) * x_ + cy(e) * y_ + cz(e) * z_ + czt(e) * zt_ + c0(e) + h(u, e)

    def grad(t, x_, y_, z_, zt_, u, e):
        return (cx(e), cy(e), cz(e), czt(e))

    return Coefficient(value, grad, None, affine_state=True)


@dataclass(frozen=True)
class Terminal:
    value: Callable
    dx: Callable
    dxx: Callable

    def __call__(self, x):
        return self.value(x)


def quadratic_terminal(slope: float = 0.0, const: float = 0.0, curvature: float = 0.0) -> Terminal:
    """phi(x) = const + slope x + curvature x^2 / 2."""
    return Terminal(
        lambda x: const + slope * x + 0.5 * curvature * x * x,
        lambda x: slope + curvature * x,
        lambda x: curvature + 0.0 * x,
    )


@dataclass(frozen=True)
class Coefficients:
    b: Coefficient
    sigma: Coefficient
    f: Coefficient
    g: Coefficient
    phi: Terminal
    f_ignores_z: bool = True

    def __post_init__(self):
        if self.f_ignores_z is not True:
            raise ProblemError("the jump coefficient f must not depend on z")

    def items(self):
        return (("b", self.b), ("sigma", self.sigma), ("f", self.f), ("g", self.g))


@dataclass(frozen=True)
class ControlSet:
    kind: str
    lower: float = -np.inf
    upper: float = np.inf
    values: tuple = ()

    def __post_init__(self):
        if self.kind == "box":
            if not (np.isfinite(self.lower) and np.isfinite(self.upper)):
                raise ProblemError("box control bounds must be finite")
            if self.lower > self.upper:
                raise ProblemError("empty control box")
        elif self.kind == "finite":
            if len(self.values) == 0:
                raise ProblemError("finite control set must be non-empty")
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        else:
            raise ProblemError(f"unknown control set kind {self.kind!r}")

    @classmethod
    def box(cls, lower: float, upper: float) -> "ControlSet":
        return cls("box", float(lower), float(upper))

    @classmethod
    def finite(cls, values) -> "ControlSet":
        return cls("finite", values=tuple(values))

    def contains(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return (u >= self.lower) & (u <= self.upper)
        return np.isin(u, np.array(self.values))

    def project(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.clip(u, self.lower, self.upper)
        vals = np.array(self.values)
        return vals[np.argmin(np.abs(u[..., None] - vals), axis=-1)]

    def grid(self, n: int) -> np.ndarray:
        if self.kind == "box":
            return np.linspace(self.lower, self.upper, n)
        return np.array(self.values)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "box":
            return rng.uniform(self.lower, self.upper, n)
        return rng.choice(np.array(self.values), n)


@dataclass(frozen=True)
class LipschitzBudget:
    L1: float = 0.0
    L2: float = 0.0
    L3: float = 0.0
    L4: float = 0.0

    def __post_init__(self):
        for name in ("L1", "L2", "L3", "L4"):
            if not getattr(self, name) >= 0:
                raise ProblemError(f"budget entry {name} must be non-negative")

    @property
    def C0(self) -> float:
        return max(self.L2, self.L3, self.L4)


@dataclass(frozen=True)
class Oracle:
    """Closed-form facts about a builtin problem; any field may be None."""

    control: Optional[Callable] = None
    p: Optional[Callable] = None
    y0: Optional[float] = None
    mean_XT: Optional[float] = None


@dataclass(frozen=True)
class Problem:
    name: str
    x0: float
    T: float
    coefficients: Coefficients
    markspace: MarkSpace
    controls: ControlSet
    budget: LipschitzBudget = LipschitzBudget()
    params: dict = field(default_factory=dict)
    oracle: Oracle = Oracle()
    default_control: Optional[Callable] = None

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise ProblemError("horizon T must be positive")

    def control_path(self, knots: np.ndarray, kind="default", shift: float = 0.0) -> np.ndarray:
        """Deterministic control on the left knots, shape (K, 1)."""
        t = np.asarray(knots)[:-1]
        if kind == "oracle":
            if self.oracle.control is None:
                raise ProblemError(f"problem {self.name!r} has no oracle control")
            u = self.oracle.control(t)
        elif kind == "default":
            u = self.default_control(t) if self.default_control else np.zeros_like(t)
        else:
            u = np.full_like(t, float(kind))
        return (np.asarray(u, dtype=float) + shift).reshape(-1, 1)


# ---------------------------------------------------------------- validation

@dataclass
class ValidationReport:
    passed: bool
    failures: list
    observed: dict
    budget: dict
    within_budget: dict
    growth_ratio: dict

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "failures": self.failures,
            "observed_lipschitz": self.observed,
            "budget": self.budget,
            "within_budget": self.within_budget,
            "growth_ratio": self.growth_ratio,
        }


def _sample_points(problem: Problem, n: int, rng, scale: float):
    ms = problem.markspace
    t = rng.uniform(0.0, problem.T, n)
    state = [scale * rng.normal(size=n) for _ in range(4)]
    u = problem.controls.sample(rng, n)
    e = ms.e[rng.integers(0, ms.size, n)]
    return t, state, u, e


def _bcast(v, n):
    return np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()


def validate_problem(problem: Problem, sample_count: int = 64, seed: int = 0,
                     tol: float = 1e-5) -> ValidationReport:
    """Audit declared derivatives by central differences, growth, and f_z = 0."""
    rng = np.random.default_rng(seed)
    n = int(sample_count)
    t, state, u, e = _sample_points(problem, n, rng, 2.0)
    failures = []
    observed = {a: 0.0 for a in ("L1", "L2", "L3", "L4")}
    growth = {}

    def mismatch(label, declared, fd, values):
        bad = np.abs(declared - fd) > tol * (1.0 + np.abs(values))
        if np.any(bad):
            i = int(np.argmax(bad))
            failures.append(
                f"{label}: declared {declared[i]:.6g} vs finite difference {fd[i]:.6g} "
                f"at t={t[i]:.4g}, x={state[0][i]:.4g}, y={state[1][i]:.4g}, "
                f"z={state[2][i]:.4g}, zt={state[3][i]:.4g}, u={u[i]:.4g}, e={e[i]:.4g}"
            )

    for name, coef in problem.coefficients.items():
        val = _bcast(coef(t, *state, u, e), n)
        grad = [_bcast(gv, n) for gv in coef.grad(t, *state, u, e)]
        hess = [[_bcast(h, n) for h in row] for row in coef.hessian(t, *state, u, e)]
        for i, arg in enumerate(ARGS):
            h = 1e-5 * (1.0 + np.abs(state[i]))
            up = list(state)
            dn = list(state)
            up[i] = state[i] + h
            dn[i] = state[i] - h
            fd = (_bcast(coef(t, *up, u, e), n) - _bcast(coef(t, *dn, u, e), n)) / (2 * h)
            mismatch(f"{name}_{arg}", grad[i], fd, grad[i])
            gu = [_bcast(gv, n) for gv in coef.grad(t, *up, u, e)]
            gd = [_bcast(gv, n) for gv in coef.grad(t, *dn, u, e)]
            for jj, arg2 in enumerate(ARGS):
                fd2 = (gu[jj] - gd[jj]) / (2 * h)
                mismatch(f"{name}_{arg2}{arg}", hess[jj][i], fd2, hess[jj][i])
        for i, key in enumerate(("L1", "L2", "L3", "L4")):
            observed[key] = max(observed[key], float(np.max(np.abs(grad[i]))))
        if name == "f":
            if np.any(grad[2] != 0.0):
                failures.append("f_z: declared non-zero derivative in z")
            zp = list(state)
            zp[2] = state[2] + 1.0
            if np.any(np.abs(_bcast(coef(t, *zp, u, e), n) - val) > tol * (1 + np.abs(val))):
                failures.append("f depends on z")
        ratios = []
        for scale in (1.0, 100.0):
            ts, st, us, es = _sample_points(problem, n, rng, scale)
            v = np.abs(_bcast(coef(ts, *st, us, es), n))
            denom = 1.0 + sum(np.abs(s) for s in st) + np.abs(us)
            ratios.append(float(np.max(v / denom)))
        growth[name] = ratios
        if ratios[1] > 10.0 * max(ratios[0], 1e-12) and ratios[1] > 1e-12:
            failures.append(f"{name}: growth faster than linear ({ratios[0]:.3g} -> {ratios[1]:.3g})")

    phi = problem.coefficients.phi
    x = state[0]
    h = 1e-5 * (1.0 + np.abs(x))
    fd = (_bcast(phi(x + h), n) - _bcast(phi(x - h), n)) / (2 * h)
    d1 = _bcast(phi.dx(x), n)
    mismatch("phi_x", d1, fd, d1)
    fd2 = (_bcast(phi.dx(x + h), n) - _bcast(phi.dx(x - h), n)) / (2 * h)
    d2 = _bcast(phi.dxx(x), n)
    mismatch("phi_xx", d2, fd2, d2)

    budget = problem.budget
    declared = {"L1": budget.L1, "L2": budget.L2, "L3": budget.L3, "L4": budget.L4}
    within = {k: observed[k] <= declared[k] * (1 + 1e-12) + 1e-15 for k in declared}
    return ValidationReport(not failures, failures, observed, declared, within, growth)


# ----------------------------------------------------------------- builtins

def _single_mark(lam: float) -> MarkSpace:
    return MarkSpace((1.0,), (float(lam),))


def _zero(x0: float = 1.0, T: float = 1.0, lam: float = 1.0) -> Problem:
    zero = affine()
    coefs = Coefficients(zero, zero, zero, zero, quadratic_terminal())
    return Problem("zero", x0, T, coefs, _single_mark(lam), ControlSet.box(-1, 1),
                   LipschitzBudget(), {"x0": x0, "T": T, "lam": lam},
                   Oracle(control=np.zeros_like, y0=0.0, mean_XT=x0))


def _linear_forward(a: float = 0.1, c: float = 0.2, gamma: float = 0.2, x0: float = 1.0,
                    T: float = 1.0, lam: float = 1.0) -> Problem:
    coefs = Coefficients(affine(x=a), affine(x=c), affine(x=gamma), affine(),
                         quadratic_terminal(slope=1.0))
    mean = x0 * np.exp(lam * a * T)
    return Problem("linear_forward", x0, T, coefs, _single_mark(lam), ControlSet.box(-1, 1),
                   LipschitzBudget(max(abs(a), abs(c), abs(gamma)), 0.0, 0.0, 0.0),
                   {"a": a, "c": c, "gamma": gamma, "x0": x0, "T": T, "lam": lam},
                   Oracle(y0=mean, mean_XT=mean))


def _linear_bsde(r: float = 0.05, x0: float = 1.0, T: float = 1.0, lam: float = 1.0) -> Problem:
    zero = affine()
    coefs = Coefficients(zero, zero, zero, affine(y=r), quadratic_terminal(const=1.0))
    return Problem("linear_bsde", x0, T, coefs, _single_mark(lam), ControlSet.box(-1, 1),
                   LipschitzBudget(0.0, abs(r), 0.0, 0.0),
                   {"r": r, "x0": x0, "T": T, "lam": lam},
                   Oracle(y0=float(np.exp(lam * r * T)), mean_XT=x0))


def _coupled_small(k: float = 0.1, x0: float = 1.0, T: float = 1.0) -> Problem:
    """Linear, fully coupled; every y/z/zt coupling constant is at most ``k``."""
    ms = MarkSpace((0.5, 1.0), (0.6, 0.4))
    coefs = Coefficients(
        b=affine(x=0.2, y=k, z=0.5 * k, zt=0.5 * k, control=lambda u, e: 0.5 * u),
        sigma=affine(x=0.1, y=k, z=k, zt=0.5 * k, const=0.2, control=lambda u, e: 0.3 * u),
        f=affine(x=lambda e: 0.2 * e, y=k, zt=k),
        g=affine(x=0.1, y=k, z=k, zt=k, control=lambda u, e: 0.5 * u * u),
        phi=quadratic_terminal(slope=1.0),
    )
    return Problem("coupled_small", x0, T, coefs, ms, ControlSet.box(-1, 1),
                   LipschitzBudget(0.2, k, k, k), {"k": k, "x0": x0, "T": T})


def _lq_jump(c: float = 1.0, beta: float = 1.0, sigma0: float = 0.3, s: float = 0.0,
             fx: float = 0.0, fy: float = 0.0, x0: float = 1.0, T: float = 1.0,
             lam: float = 1.0, umin: float = -5.0, umax: float = 5.0) -> Problem:
    """Linear-quadratic problem with an explicit optimal control.

    With the defaults b = u, sigma = sigma0, f = 0, g = u^2/2 + c x, phi = beta x.
    The optional loadings sigma = sigma0 + s u and f = fx x + fy y leave the
    expected cost, the adjoint p and the optimal control unchanged.
    """
    coefs = Coefficients(
        b=affine(control=lambda u, e: u),
        sigma=affine(const=sigma0, control=lambda u, e: s * u),
        f=affine(x=fx, y=fy),
        g=affine(x=c, control=lambda u, e: 0.5 * u * u),
        phi=quadratic_terminal(slope=beta),
    )
    controls = ControlSet.box(umin, umax)

    def p(t):
        return beta + c * lam * (T - np.asarray(t, dtype=float))

    def control(t):
        return np.clip(-p(t), umin, umax)

    def integrand(t):
        # E X_t under the optimal control, then the running cost rate
        mean_x = x0 + lam * quad_integrate.quad(lambda r: float(control(r)), 0.0, t)[0]
        return lam * (0.5 * float(control(t)) ** 2 + c * mean_x)

    mean_xt = x0 + lam * quad_integrate.quad(lambda r: float(control(r)), 0.0, T)[0]
    y0 = beta * mean_xt + quad_integrate.quad(integrand, 0.0, T)[0]
    params = {"c": c, "beta": beta, "sigma0": sigma0, "s": s, "fx": fx, "fy": fy,
              "x0": x0, "T": T, "lam": lam, "umin": umin, "umax": umax}
    return Problem("lq_jump", x0, T, coefs, _single_mark(lam), controls,
                   LipschitzBudget(max(abs(c), abs(fx)), abs(fy), 0.0, 0.0), params,
                   Oracle(control=control, p=p, y0=float(y0), mean_XT=float(mean_xt)),
                   default_control=control)


REGISTRY = {
    "zero": _zero,
    "linear_forward": _linear_forward,
    "linear_bsde": _linear_bsde,
    "coupled_small": _coupled_small,
    "lq_jump": _lq_jump,
}


def builtin_problem(name: str, **params) -> Problem:
    if name not in REGISTRY:
        raise KeyError(f"unknown problem {name!r}; registry: {', '.join(sorted(REGISTRY))}")
    return REGISTRY[name](**params)


def list_problems() -> list:
    return sorted(REGISTRY)
