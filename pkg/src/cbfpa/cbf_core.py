"""Closed-form CBF-QP controller for the relaxed barrier constraint.

The parameter dynamics ``theta_dot = -grad J + a`` are filtered through the
quadratic program

    min_{a, c}  0.5 * |a|^2 + 0.5 * w * c^2
    s.t.        l_f + l_g . a + gamma_h * (h + c) >= 0,   c >= 0

whose solution is available in closed form (``closed_form_controller``).
``qp_oracle`` solves the same program by active-set enumeration and is used
to cross-check the closed form.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np

from ._accel import njit

#: denominators below this magnitude take the degenerate (zero controller) path
DENOM_EPS = 1e-12


class Branch(enum.IntEnum):
    INACTIVE = 0
    RELAXED_ACTIVE = 1
    HARD_ACTIVE = 2


class CbfError(ValueError):
    """Invalid input to a CBF operation."""


class OracleInconsistencyError(RuntimeError):
    """The KKT enumeration found no admissible candidate."""


@dataclass(frozen=True)
class LieTerms:
    l_f: float
    l_g: np.ndarray
    h: float
    l_a: float
    l_b: float
    gamma_h: float
    w: float

    @property
    def l_g_sq(self) -> float:
        return float(self.l_g @ self.l_g)


@dataclass(frozen=True)
class CbfDecision:
    a: np.ndarray
    c_star: float
    branch: Branch
    residual: float
    infeasible: bool = False


@dataclass(frozen=True)
class TighteningMargin:
    delta: float
    lipschitz_estimate: float
    flow_norm_bound: float
    step_size: float


def _check_finite(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise CbfError(f"{name} has non-finite components: {arr!r}")
    return arr


def make_lie_terms(l_f, l_g, h, gamma_h, w) -> LieTerms:
    """Build :class:`LieTerms` from already-evaluated components.

    Used directly when the Lie derivatives are sample averages rather than a
    single gradient pair (the actor-critic case).
    """
    l_f = float(_check_finite("l_f", l_f))
    l_g = np.array(_check_finite("l_g", l_g), dtype=float).reshape(-1)
    h = float(_check_finite("h", h))
    gamma_h = float(_check_finite("gamma_h", gamma_h))
    w = float(_check_finite("w", w))
    if l_g.size < 1:
        raise CbfError("l_g must have at least one component")
    if gamma_h <= 0:
        raise CbfError(f"gamma_h must be positive, got {gamma_h}")
    if w < 0:
        raise CbfError(f"w must be nonnegative, got {w}")
    l_a = l_f + gamma_h * h
    l_b = -gamma_h * l_a / (w * float(l_g @ l_g) + gamma_h * gamma_h)
    l_g.setflags(write=False)
    return LieTerms(l_f=l_f, l_g=l_g, h=h, l_a=l_a, l_b=l_b, gamma_h=gamma_h, w=w)


def lie_terms(grad_j, grad_g, g_ref, g_now, gamma_h, w, margin=0.0) -> LieTerms:
    """Lie derivatives of ``h(theta) = g_ref - G(theta)`` along ``-grad J``.

    ``margin`` is subtracted from ``h`` (the inter-sample tightening).
    """
    grad_j = _check_finite("grad_j", grad_j).reshape(-1)
    grad_g = _check_finite("grad_g", grad_g).reshape(-1)
    if grad_j.shape != grad_g.shape:
        raise CbfError(f"grad_j and grad_g shapes differ: {grad_j.shape} vs {grad_g.shape}")
    g_ref = float(_check_finite("g_ref", g_ref))
    g_now = float(_check_finite("g_now", g_now))
    return make_lie_terms(
        l_f=float(grad_g @ grad_j),
        l_g=-grad_g,
        h=g_ref - g_now - float(margin),
        gamma_h=gamma_h,
        w=w,
    )


@njit
def closed_form_kernel(l_f, l_g, h, gamma_h, w):
    """Returns ``(a, c_star, branch, infeasible)`` for ``w > 0``."""
    p = l_g.shape[0]
    a = np.zeros(p)
    l_g_sq = 0.0
    for i in range(p):
        l_g_sq += l_g[i] * l_g[i]
    l_a = l_f + gamma_h * h
    if l_a >= 0.0:
        return a, 0.0, 0, False
    l_b = -gamma_h * l_a / (w * l_g_sq + gamma_h * gamma_h)
    if l_b >= 0.0:
        denom = l_g_sq + gamma_h * gamma_h / w
        if abs(denom) < DENOM_EPS:
            return a, 0.0, 1, True
        scale = -l_a / denom
        for i in range(p):
            a[i] = scale * l_g[i]
        return a, l_b, 1, False
    if abs(l_g_sq) < DENOM_EPS:
        return a, 0.0, 2, True
    scale = -l_a / l_g_sq
    for i in range(p):
        a[i] = scale * l_g[i]
    return a, 0.0, 2, False


def constraint_residual(t: LieTerms, a, c) -> float:
    """Value of ``l_f + l_g . a + gamma_h * (h + c)``."""
    return float(t.l_f + t.l_g @ np.asarray(a, dtype=float) + t.gamma_h * (t.h + c))


def closed_form_controller(t: LieTerms) -> CbfDecision:
    if t.w == 0:
        raise CbfError("w = 0 makes the relaxed branch undefined; use fixed_relaxation_controller")
    a, c, branch, infeasible = closed_form_kernel(t.l_f, np.asarray(t.l_g, dtype=float), t.h, t.gamma_h, t.w)
    return CbfDecision(
        a=a,
        c_star=float(c),
        branch=Branch(int(branch)),
        residual=constraint_residual(t, a, c),
        infeasible=bool(infeasible),
    )


def fixed_relaxation_controller(t: LieTerms, c_fixed: float) -> CbfDecision:
    """Controller for a prescribed relaxation ``c_fixed`` (the ``w = 0`` case)."""
    if c_fixed < 0:
        raise CbfError(f"c_fixed must be nonnegative, got {c_fixed}")
    p = t.l_g.shape[0]
    shifted = t.l_a + t.gamma_h * c_fixed
    if shifted >= 0:
        a = np.zeros(p)
        return CbfDecision(a, float(c_fixed), Branch.INACTIVE, constraint_residual(t, a, c_fixed))
    l_g_sq = t.l_g_sq
    if l_g_sq < DENOM_EPS:
        a = np.zeros(p)
        return CbfDecision(a, float(c_fixed), Branch.HARD_ACTIVE, constraint_residual(t, a, c_fixed), infeasible=True)
    a = -shifted * t.l_g / l_g_sq
    return CbfDecision(a, float(c_fixed), Branch.HARD_ACTIVE, constraint_residual(t, a, c_fixed))


def qp_objective(a, c, w) -> float:
    a = np.asarray(a, dtype=float)
    return 0.5 * float(a @ a) + 0.5 * w * c * c


def qp_oracle(t: LieTerms, tol: float = 1e-12) -> CbfDecision:
    """Solve the two-constraint QP by enumerating every active set.

    Each equality-constrained subproblem is solved through its KKT linear
    system; candidates are kept when primal and dual feasibility hold.
    """
    if t.w <= 0:
        raise CbfError("qp_oracle requires w > 0")
    p = t.l_g.shape[0]
    n = p + 1
    hess = np.eye(n)
    hess[p, p] = t.w
    # rows: barrier constraint, then c >= 0; written as row . z >= rhs
    rows = np.zeros((2, n))
    rows[0, :p] = t.l_g
    rows[0, p] = t.gamma_h
    rows[1, p] = 1.0
    rhs = np.array([-(t.l_f + t.gamma_h * t.h), 0.0])
    scale = 1.0 + abs(t.l_f) + abs(t.gamma_h * t.h) + t.l_g_sq

    best = None
    for active in itertools.chain.from_iterable(itertools.combinations(range(2), k) for k in range(3)):
        active = list(active)
        m = len(active)
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = hess
        vec = np.zeros(n + m)
        if m:
            a_act = rows[active]
            kkt[:n, n:] = -a_act.T
            kkt[n:, :n] = a_act
            vec[n:] = rhs[active]
        try:
            sol = np.linalg.solve(kkt, vec)
        except np.linalg.LinAlgError:
            continue
        if not np.allclose(kkt @ sol, vec, atol=tol * scale * 10):
            continue
        z, lam = sol[:n], sol[n:]
        if np.any(lam < -tol * scale):
            continue
        if np.any(rows @ z - rhs < -tol * scale):
            continue
        obj = qp_objective(z[:p], z[p], t.w)
        if best is None or obj < best[0] - tol * scale:
            best = (obj, z)
    if best is None:
        raise OracleInconsistencyError("no KKT-admissible active set found")
    z = best[1]
    a, c = z[:p].copy(), max(float(z[p]), 0.0)
    if not np.any(a) and c == 0.0:
        branch = Branch.INACTIVE
    elif c > 0.0:
        branch = Branch.RELAXED_ACTIVE
    else:
        branch = Branch.HARD_ACTIVE
    return CbfDecision(a=a, c_star=c, branch=branch, residual=constraint_residual(t, a, c))


def tightening_margin(step_size, lipschitz_estimate, flow_norm_bound) -> TighteningMargin:
    """Smallest margin satisfying the inter-sample bound ``(alpha/2) L_B sup|flow|``."""
    if not step_size > 0:
        raise CbfError(f"step_size must be positive, got {step_size}")
    if lipschitz_estimate < 0 or flow_norm_bound < 0:
        raise CbfError("lipschitz_estimate and flow_norm_bound must be nonnegative")
    delta = 0.5 * step_size * lipschitz_estimate * flow_norm_bound
    return TighteningMargin(float(delta), float(lipschitz_estimate), float(flow_norm_bound), float(step_size))


def estimate_sup_norm(fn, lo, hi, n_samples, rng) -> float:
    """Monte-Carlo estimate of ``sup |fn(x)|`` over the box ``[lo, hi]``."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    pts = rng.uniform(lo, hi, size=(n_samples, lo.size))
    return float(max(np.linalg.norm(np.atleast_1d(fn(x))) for x in pts))


def estimate_lipschitz(fn, lo, hi, n_samples, rng, step=1e-6) -> float:
    """Lipschitz constant of scalar ``fn`` on a box, from sampled central differences."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    dim = lo.size
    eye = np.eye(dim) * step

    def fd_grad(x):
        return np.array([(fn(x + e) - fn(x - e)) / (2 * step) for e in eye])

    return estimate_sup_norm(fd_grad, lo, hi, n_samples, rng)


def random_lie_terms(rng, p, gamma_h, w, scale=1.0) -> LieTerms:
    """Random instance for fuzzing; components uniform in ``[-scale, scale]``."""
    l_g = rng.uniform(-scale, scale, size=p)
    # occasionally zero the gradient to exercise the degenerate path
    if rng.random() < 0.02:
        l_g[:] = 0.0
    return make_lie_terms(rng.uniform(-scale, scale), l_g, rng.uniform(-scale, scale), gamma_h, w)


@dataclass
class FuzzReport:
    instances: int
    max_abs_da: float
    max_abs_dc: float
    min_residual: float
    branch_counts: dict
    infeasible: int

    def ok(self, tol=1e-8, residual_tol=1e-10) -> bool:
        return self.max_abs_da <= tol and self.max_abs_dc <= tol and self.min_residual >= -residual_tol


def fuzz_oracle(instances, seed=0, p_values=range(1, 9), gamma_values=(0.1, 1.0, 10.0),
                w_values=(0.01, 1.0, 100.0), scale=1.0) -> FuzzReport:
    """Compare the closed form against the KKT enumeration on random instances."""
    rng = np.random.default_rng(seed)
    p_values, gamma_values, w_values = list(p_values), list(gamma_values), list(w_values)
    max_da = max_dc = 0.0
    min_res = math.inf
    counts = {b.name: 0 for b in Branch}
    infeasible = 0
    for _ in range(instances):
        t = random_lie_terms(
            rng,
            p=int(rng.choice(p_values)),
            gamma_h=float(rng.choice(gamma_values)),
            w=float(rng.choice(w_values)),
            scale=scale,
        )
        d = closed_form_controller(t)
        o = qp_oracle(t)
        counts[d.branch.name] += 1
        infeasible += d.infeasible
        max_da = max(max_da, float(np.max(np.abs(d.a - o.a))))
        max_dc = max(max_dc, abs(d.c_star - o.c_star))
        min_res = min(min_res, d.residual)
    return FuzzReport(instances, max_da, max_dc, min_res, counts, infeasible)
