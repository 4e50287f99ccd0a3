"""Discrete safe gradient flow on explicit objectives, with GD and MOGD baselines."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import cbf_core
from ._accel import njit

DIVERGENCE_NORM = 1e6


class FlowMethod(str, enum.Enum):
    CBF_PA = "cbfpa"
    GD = "gd"
    MOGD = "mogd"


_METHOD_CODE = {FlowMethod.CBF_PA: 0, FlowMethod.GD: 1, FlowMethod.MOGD: 2}


@dataclass(frozen=True)
class ObjectivePair:
    eval_j: Callable
    grad_j: Callable
    eval_g: Callable
    grad_g: Callable
    theta_ref: np.ndarray
    g_ref: float
    # name of a compiled fast path in this module, if one exists
    kernel: str | None = None


@dataclass
class FlowTrace:
    thetas: np.ndarray
    c_stars: np.ndarray
    j_values: np.ndarray
    g_values: np.ndarray
    method: FlowMethod
    branches: np.ndarray
    diverged: bool = False
    params: dict = field(default_factory=dict)

    @property
    def g_bar(self) -> float:
        """Arithmetic mean of every logged ``G`` value."""
        return float(np.mean(self.g_values))

    @property
    def steps(self) -> int:
        return len(self.thetas) - 1

    def constraint_excess(self, g_ref: float) -> np.ndarray:
        """``G(theta_k) - g_ref - c*_k`` for every logged iterate."""
        return self.g_values - g_ref - self.c_stars

    def to_csv(self, path) -> None:
        p = self.thetas.shape[1]
        header = ["step"] + [f"theta_{i}" for i in range(p)] + ["c_star", "J", "G"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for k in range(len(self.thetas)):
                writer.writerow(
                    [k]
                    + [repr(float(v)) for v in self.thetas[k]]
                    + [repr(float(self.c_stars[k])), repr(float(self.j_values[k])), repr(float(self.g_values[k]))]
                )


def _fmt(x: float) -> str:
    return repr(float(x))


def flow_filename(method, w, gamma_h, alpha) -> str:
    method = FlowMethod(method).value
    return f"flow_{method}_w{_fmt(w)}_g{_fmt(gamma_h)}_a{_fmt(alpha)}.csv"


def read_flow_csv(path) -> dict:
    """Load a flow CSV into column arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    return {name: body[:, i] for i, name in enumerate(header)}


def illustrative_objectives() -> ObjectivePair:
    """``J = sin(x) + (y - 8)^2`` and ``G = x^3 + y^3`` with reference ``[0, 0]``."""

    def eval_j(theta):
        return math.sin(theta[0]) + (theta[1] - 8.0) ** 2

    def grad_j(theta):
        return np.array([math.cos(theta[0]), 2.0 * (theta[1] - 8.0)])

    def eval_g(theta):
        return theta[0] ** 3 + theta[1] ** 3

    def grad_g(theta):
        return np.array([3.0 * theta[0] ** 2, 3.0 * theta[1] ** 2])

    return ObjectivePair(eval_j, grad_j, eval_g, grad_g, np.zeros(2), 0.0, kernel="illustrative")


def validate_objectives(obj: ObjectivePair, rng, n_points=20, radius=2.0, rel_tol=1e-5, step=1e-6) -> float:
    """Check analytic gradients against central differences; returns the worst relative error."""
    p = obj.theta_ref.size
    worst = 0.0
    for _ in range(n_points):
        theta = obj.theta_ref + rng.uniform(-radius, radius, size=p)
        for f, g in ((obj.eval_j, obj.grad_j), (obj.eval_g, obj.grad_g)):
            analytic = np.asarray(g(theta), dtype=float)
            fd = np.empty(p)
            for i in range(p):
                e = np.zeros(p)
                e[i] = step
                fd[i] = (f(theta + e) - f(theta - e)) / (2 * step)
            err = np.linalg.norm(analytic - fd) / max(np.linalg.norm(analytic), 1e-8)
            worst = max(worst, err)
    if worst > rel_tol:
        raise ValueError(f"objective gradients disagree with finite differences (rel err {worst:.3g})")
    return worst


def cbf_decision(obj: ObjectivePair, theta, gamma_h, w) -> tuple[np.ndarray, cbf_core.CbfDecision]:
    gj = np.asarray(obj.grad_j(theta), dtype=float)
    if math.isinf(obj.g_ref) and obj.g_ref > 0:
        # the constraint can never bind
        p = gj.size
        return gj, cbf_core.CbfDecision(np.zeros(p), 0.0, cbf_core.Branch.INACTIVE, math.inf)
    t = cbf_core.lie_terms(gj, obj.grad_g(theta), obj.g_ref, obj.eval_g(theta), gamma_h, w)
    return gj, cbf_core.closed_form_controller(t)


def step_cbf_pa(obj: ObjectivePair, theta, alpha, gamma_h, w):
    gj, d = cbf_decision(obj, theta, gamma_h, w)
    return theta - alpha * (gj - d.a), d


def step_gd(obj: ObjectivePair, theta, alpha):
    return theta - alpha * np.asarray(obj.grad_j(theta), dtype=float)


def step_mogd(obj: ObjectivePair, theta, alpha, w):
    gj = np.asarray(obj.grad_j(theta), dtype=float)
    penalty = 2.0 * w * (obj.eval_g(theta) - obj.g_ref) * np.asarray(obj.grad_g(theta), dtype=float)
    return theta - alpha * (gj + penalty)


@njit
def _illustrative_flow_kernel(method, steps, alpha, gamma_h, w, theta0, g_ref):
    thetas = np.zeros((steps + 1, 2))
    c_stars = np.zeros(steps + 1)
    branches = np.zeros(steps + 1, dtype=np.int64)
    jv = np.zeros(steps + 1)
    gv = np.zeros(steps + 1)
    x, y = theta0[0], theta0[1]
    never_binds = math.isinf(g_ref) and g_ref > 0
    l_g = np.zeros(2)
    n = 0
    diverged = False
    for k in range(steps + 1):
        thetas[k, 0] = x
        thetas[k, 1] = y
        g_now = x ** 3 + y ** 3
        jv[k] = math.sin(x) + (y - 8.0) ** 2
        gv[k] = g_now
        gjx = math.cos(x)
        gjy = 2.0 * (y - 8.0)
        ggx = 3.0 * x ** 2
        ggy = 3.0 * y ** 2
        ax = 0.0
        ay = 0.0
        if method == 0 and not never_binds:
            l_g[0] = -ggx
            l_g[1] = -ggy
            a, c, br, _ = cbf_core.closed_form_kernel(ggx * gjx + ggy * gjy, l_g, g_ref - g_now, gamma_h, w)
            ax = a[0]
            ay = a[1]
            c_stars[k] = c
            branches[k] = br
        n = k + 1
        if k == steps:
            break
        if method == 2:
            pen = 2.0 * w * (g_now - g_ref)
            x = x - alpha * (gjx + pen * ggx)
            y = y - alpha * (gjy + pen * ggy)
        else:
            x = x - alpha * (gjx - ax)
            y = y - alpha * (gjy - ay)
        if not (math.isfinite(x) and math.isfinite(y)) or math.sqrt(x * x + y * y) > DIVERGENCE_NORM:
            diverged = True
            break
    return thetas[:n], c_stars[:n], branches[:n], jv[:n], gv[:n], diverged


def _run_generic(obj, method, steps, alpha, gamma_h, w, theta):
    thetas, c_stars, branches, jv, gv = [], [], [], [], []
    diverged = False
    for k in range(steps + 1):
        thetas.append(theta)
        jv.append(obj.eval_j(theta))
        gv.append(obj.eval_g(theta))
        d = None
        if method is FlowMethod.CBF_PA:
            _, d = cbf_decision(obj, theta, gamma_h, w)
        c_stars.append(d.c_star if d else 0.0)
        branches.append(int(d.branch) if d else 0)
        if k == steps:
            break
        if method is FlowMethod.CBF_PA:
            theta = theta - alpha * (np.asarray(obj.grad_j(theta), dtype=float) - d.a)
        elif method is FlowMethod.GD:
            theta = step_gd(obj, theta, alpha)
        else:
            theta = step_mogd(obj, theta, alpha, w)
        if not np.all(np.isfinite(theta)) or np.linalg.norm(theta) > DIVERGENCE_NORM:
            diverged = True
            break
    return (np.array(thetas), np.array(c_stars), np.array(branches), np.array(jv), np.array(gv), diverged)


def run_flow(obj: ObjectivePair, method, steps, alpha, gamma_h=10.0, w=0.0, theta0=None,
             use_kernel=True) -> FlowTrace:
    """Iterate one update rule from ``theta0`` (default: the reference point)."""
    method = FlowMethod(method)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    theta = np.array(obj.theta_ref if theta0 is None else theta0, dtype=float)
    if use_kernel and obj.kernel == "illustrative":
        out = _illustrative_flow_kernel(_METHOD_CODE[method], int(steps), float(alpha), float(gamma_h),
                                        float(w), theta, float(obj.g_ref))
    else:
        out = _run_generic(obj, method, int(steps), float(alpha), float(gamma_h), float(w), theta)
    thetas, c_stars, branches, jv, gv, diverged = out
    return FlowTrace(
        thetas=thetas, c_stars=c_stars, j_values=jv, g_values=gv, method=method,
        branches=branches, diverged=bool(diverged),
        params={"alpha": alpha, "gamma_h": gamma_h, "w": w, "steps": steps},
    )


def write_trace(trace: FlowTrace, directory) -> Path:
    p = trace.params
    path = Path(directory) / flow_filename(trace.method, p["w"], p["gamma_h"], p["alpha"])
    trace.to_csv(path)
    return path
