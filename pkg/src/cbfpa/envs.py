"""Cartpole and unicycle simulators with original/additional stage costs."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, fields

import numpy as np

from ._accel import njit


class TerminationReason(str, enum.Enum):
    NONE = "none"
    BOUND_VIOLATION = "bound_violation"
    HORIZON_REACHED = "horizon_reached"


class UnicycleTask(str, enum.Enum):
    AVOID_ONLY = "avoid_only"
    AVOID_PLUS_GOAL = "avoid_plus_goal"
    TWO_OBSTACLES = "two_obstacles"


@dataclass(frozen=True)
class EnvState:
    x: np.ndarray
    t: int = 0
    terminal: bool = False
    termination_reason: TerminationReason = TerminationReason.NONE


@dataclass(frozen=True)
class Transition:
    x_t: np.ndarray
    u_t: np.ndarray
    x_next: np.ndarray
    cost_original: float
    cost_additional: float
    # true only for bound violations; horizon truncation still bootstraps
    terminal: bool


@dataclass(frozen=True)
class CartpoleParams:
    l: float = 0.5
    g: float = 9.8
    m_c: float = 1.0
    m_p: float = 0.1
    dt: float = 0.05
    force_scale: float = 10.0
    theta_limit: float = 0.418
    x_limit: float = 4.8
    upright_band: float = 0.2095
    target_x: float = 2.0
    horizon: int = 200

    def __post_init__(self):
        for name in ("l", "g", "m_c", "m_p", "dt", "force_scale", "theta_limit", "x_limit", "upright_band"):
            if not getattr(self, name) > 0:
                raise ValueError(f"CartpoleParams.{name} must be positive")


@dataclass(frozen=True)
class Obstacle:
    center: tuple
    collision_radius: float

    def distance(self, px, py) -> float:
        return math.hypot(px - self.center[0], py - self.center[1])

    def collides(self, px, py) -> bool:
        return self.distance(px, py) <= self.collision_radius


@dataclass(frozen=True)
class UnicycleParams:
    dt: float = 0.1
    x_bounds: tuple = (-2.4, 2.4)
    y_bounds: tuple = (-1.8, 1.6)
    v_bounds: tuple = (-1.0, 1.0)
    omega_bounds: tuple = (-3.0, 3.0)
    obstacles: tuple = (Obstacle((-0.5, 0.0), 0.595), Obstacle((0.5, 0.2), 0.42))
    goal: tuple = (1.5, 0.0)
    horizon: int = 200
    task: UnicycleTask = UnicycleTask.AVOID_ONLY

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("UnicycleParams.dt must be positive")
        for ob in self.obstacles:
            if not ob.collision_radius > 0:
                raise ValueError("obstacle collision radii must be positive")
        gx, gy = self.goal
        if not (self.x_bounds[0] <= gx <= self.x_bounds[1] and self.y_bounds[0] <= gy <= self.y_bounds[1]):
            raise ValueError("goal must lie inside the arena bounds")
        object.__setattr__(self, "task", UnicycleTask(self.task))


# ---------------------------------------------------------------------------
# Cartpole

@njit
def _cartpole_kernel(x, x_dot, th, th_dot, force, l, g, m_c, m_p, dt):
    total = m_c + m_p
    s = math.sin(th)
    c = math.cos(th)
    temp = (force + l * m_p * th_dot * th_dot * s) / total
    th_acc = (g * s - c * temp) / (l * (4.0 / 3.0 - m_p * c * c / total))
    x_acc = temp - l * m_p * th_acc * c / total
    return x + dt * x_dot, x_dot + dt * x_acc, th + dt * th_dot, th_dot + dt * th_acc


def cartpole_step(p: CartpoleParams, state, u):
    """One Euler step; ``u`` is saturated to ``[-1, 1]`` before scaling to a force."""
    u_sat = min(max(float(np.asarray(u).reshape(-1)[0]), -1.0), 1.0)
    x, x_dot, th, th_dot = (float(v) for v in state)
    out = _cartpole_kernel(x, x_dot, th, th_dot, p.force_scale * u_sat, p.l, p.g, p.m_c, p.m_p, p.dt)
    return np.array(out)


def cartpole_accelerations(p: CartpoleParams, state, u):
    """``(x_acc, theta_acc)`` for a given state and unscaled input."""
    _, x_dot, th, th_dot = (float(v) for v in state)
    nxt = _cartpole_kernel(0.0, x_dot, th, th_dot, p.force_scale * float(u), p.l, p.g, p.m_c, p.m_p, 1.0)
    return nxt[1] - x_dot, nxt[3] - th_dot


def cartpole_energy(p: CartpoleParams, state) -> float:
    """Mechanical energy of the cart and a uniform rod of half-length ``l``."""
    _, x_dot, th, th_dot = (float(v) for v in state)
    kinetic = (0.5 * (p.m_c + p.m_p) * x_dot ** 2 + p.m_p * p.l * x_dot * th_dot * math.cos(th)
               + 0.5 * (4.0 / 3.0) * p.m_p * p.l ** 2 * th_dot ** 2)
    return kinetic + p.m_p * p.g * p.l * math.cos(th)


def cartpole_costs(state, u=None, p: CartpoleParams = CartpoleParams()):
    """``(original, additional)`` stage costs: upright reward and distance to the target."""
    x, x_dot, th, _ = (float(v) for v in state)
    original = -1.0 if -p.upright_band <= th <= p.upright_band else 0.0
    additional = 0.1 * (x - p.target_x) ** 2 + 0.001 * x_dot ** 2
    return original, additional


def cartpole_baseline_costs(state, u, actor_out, pretrained_out, w, p: CartpoleParams = CartpoleParams()):
    """``(morl, bc)`` stage costs of the multi-objective and behaviour-cloning baselines."""
    original, additional = cartpole_costs(state, u, p)
    diff = np.asarray(actor_out, dtype=float) - np.asarray(pretrained_out, dtype=float)
    return original + w * additional, additional + w * float(np.sum(diff * diff))


def cartpole_out_of_bounds(p: CartpoleParams, state) -> bool:
    return abs(state[2]) > p.theta_limit or abs(state[0]) > p.x_limit


# ---------------------------------------------------------------------------
# Unicycle

@njit
def _unicycle_kernel(px, py, th, v, omega, dt):
    px = px + dt * v * math.cos(th)
    py = py + dt * v * math.sin(th)
    th = th + dt * omega
    th = (th + math.pi) % (2.0 * math.pi) - math.pi
    return px, py, th


def unicycle_step(p: UnicycleParams, state, u):
    """Euler step of the unicycle with saturated ``(v, omega)`` and wrapped heading."""
    u = np.asarray(u, dtype=float).reshape(-1)
    v = min(max(float(u[0]), p.v_bounds[0]), p.v_bounds[1])
    om = min(max(float(u[1]), p.omega_bounds[0]), p.omega_bounds[1])
    return np.array(_unicycle_kernel(float(state[0]), float(state[1]), float(state[2]), v, om, p.dt))


def unicycle_costs(state, task=UnicycleTask.AVOID_ONLY, p: UnicycleParams = UnicycleParams()):
    """``(original, additional)`` stage costs for a unicycle task.

    Avoid tasks: original rewards distance from the origin and charges 100 for
    touching the first obstacle; additional is the distance to the goal.
    Two-obstacle task: the original is the goal distance plus the first
    obstacle's collision charge; additional is the goal distance plus 10 for
    touching the second obstacle.
    """
    task = UnicycleTask(task)
    px, py = float(state[0]), float(state[1])
    goal_dist = math.hypot(px - p.goal[0], py - p.goal[1])
    hit_first = p.obstacles[0].collides(px, py)
    if task is UnicycleTask.TWO_OBSTACLES:
        original = goal_dist + (100.0 if hit_first else 0.0)
        additional = goal_dist + (10.0 if p.obstacles[1].collides(px, py) else 0.0)
        return original, additional
    original = -(px * px + py * py) + (100.0 if hit_first else 0.0)
    return original, goal_dist


def unicycle_out_of_bounds(p: UnicycleParams, state) -> bool:
    return not (p.x_bounds[0] <= state[0] <= p.x_bounds[1] and p.y_bounds[0] <= state[1] <= p.y_bounds[1])


def unicycle_collisions(p: UnicycleParams, state, task) -> bool:
    """Whether ``state`` touches any obstacle that matters for ``task``."""
    px, py = float(state[0]), float(state[1])
    if p.obstacles[0].collides(px, py):
        return True
    return UnicycleTask(task) is UnicycleTask.TWO_OBSTACLES and p.obstacles[1].collides(px, py)


# ---------------------------------------------------------------------------
# Environment wrappers

class Cartpole:
    state_dim = 4
    action_dim = 1
    action_bound = 1.0
    reset_low = np.full(4, -0.05)
    reset_high = np.full(4, 0.05)

    def __init__(self, params: CartpoleParams | None = None):
        self.params = params or CartpoleParams()

    @property
    def horizon(self) -> int:
        return self.params.horizon

    def reset(self, rng) -> EnvState:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        return EnvState(rng.uniform(self.reset_low, self.reset_high))

    def costs(self, x, u):
        return cartpole_costs(x, u, self.params)

    def step(self, state: EnvState, u, horizon=None):
        horizon = self.horizon if horizon is None else horizon
        u = np.clip(np.asarray(u, dtype=float).reshape(-1), -1.0, 1.0)
        x_next = cartpole_step(self.params, state.x, u)
        c_orig, c_add = cartpole_costs(state.x, u, self.params)
        return _advance(state, u, x_next, c_orig, c_add, cartpole_out_of_bounds(self.params, x_next), horizon)


class Unicycle:
    state_dim = 3
    action_dim = 2
    reset_low = np.array([-1.9, -0.2, -0.2])
    reset_high = np.array([1.5, 0.2, 0.2])

    def __init__(self, params: UnicycleParams | None = None):
        self.params = params or UnicycleParams()

    @property
    def action_bound(self) -> np.ndarray:
        return np.array([self.params.v_bounds[1], self.params.omega_bounds[1]])

    @property
    def horizon(self) -> int:
        return self.params.horizon

    def reset(self, rng) -> EnvState:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        return EnvState(rng.uniform(self.reset_low, self.reset_high))

    def costs(self, x, u):
        return unicycle_costs(x, self.params.task, self.params)

    def step(self, state: EnvState, u, horizon=None):
        horizon = self.horizon if horizon is None else horizon
        p = self.params
        u = np.asarray(u, dtype=float).reshape(-1)
        u = np.array([np.clip(u[0], *p.v_bounds), np.clip(u[1], *p.omega_bounds)])
        x_next = unicycle_step(p, state.x, u)
        c_orig, c_add = unicycle_costs(state.x, p.task, p)
        return _advance(state, u, x_next, c_orig, c_add, unicycle_out_of_bounds(p, x_next), horizon)


def _advance(state, u, x_next, c_orig, c_add, violated, horizon):
    t = state.t + 1
    if violated:
        reason = TerminationReason.BOUND_VIOLATION
    elif t >= horizon:
        reason = TerminationReason.HORIZON_REACHED
    else:
        reason = TerminationReason.NONE
    nxt = EnvState(x_next, t, reason is not TerminationReason.NONE, reason)
    return nxt, Transition(state.x, u, x_next, float(c_orig), float(c_add), bool(violated))


def reset(env, seed) -> EnvState:
    return env.reset(np.random.default_rng(seed))


def write_episode_csv(transitions, path) -> None:
    """Episode log: step, state, action, both costs, terminal flag."""
    if not transitions:
        raise ValueError("no transitions to write")
    n_x = transitions[0].x_t.size
    n_u = transitions[0].u_t.size
    header = (["step"] + [f"x_{i}" for i in range(n_x)] + [f"u_{i}" for i in range(n_u)]
              + ["cost_original", "cost_additional", "terminal"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for k, tr in enumerate(transitions):
            writer.writerow([k] + [repr(float(v)) for v in tr.x_t] + [repr(float(v)) for v in tr.u_t]
                            + [repr(tr.cost_original), repr(tr.cost_additional), int(tr.terminal)])


def _build(cls, overrides):
    names = {f.name for f in fields(cls)}
    unknown = set(overrides) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**overrides)


def make_env(kind: str, overrides: dict | None = None):
    """Environment from a name and a mapping of parameter overrides (as read from a config file)."""
    overrides = dict(overrides or {})
    if kind == "cartpole":
        return Cartpole(_build(CartpoleParams, overrides))
    if kind == "unicycle":
        if "obstacles" in overrides:
            overrides["obstacles"] = tuple(Obstacle(tuple(o["center"]), float(o["collision_radius"]))
                                           for o in overrides["obstacles"])
        for key in ("x_bounds", "y_bounds", "v_bounds", "omega_bounds", "goal"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        return Unicycle(_build(UnicycleParams, overrides))
    raise ValueError(f"unknown environment {kind!r}")
