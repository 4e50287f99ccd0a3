"""DDPG pretraining and CBF-PA policy adaptation (actor-critic with a barrier-filtered actor step)."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import cbf_core, nn


class Mode(str, enum.Enum):
    PRETRAIN = "pretrain"
    ADAPT_CBFPA = "adapt_cbfpa"
    ADAPT_MORL = "adapt_morl"
    ADAPT_BC = "adapt_bc"
    ADAPT_PLAIN = "adapt_plain"
    FIT_CRITIC = "fit_critic"  # policy evaluation: actor frozen, original cost


class BaselineVariant(str, enum.Enum):
    MORL = "morl"
    BEHAVIOR_CLONE = "behavior_clone"
    PLAIN = "plain"


class CostColumn(str, enum.Enum):
    ORIGINAL = "original"
    ADDITIONAL = "additional"
    TRAIN = "train"


class DivergenceError(RuntimeError):
    def __init__(self, episode, message="non-finite parameters"):
        super().__init__(f"episode {episode}: {message}")
        self.episode = episode


# ---------------------------------------------------------------------------
# Replay memory

@dataclass
class Batch:
    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    cost_original: np.ndarray
    cost_additional: np.ndarray
    cost_train: np.ndarray
    terminal: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def cost(self, which) -> np.ndarray:
        return getattr(self, f"cost_{CostColumn(which).value}")

    @classmethod
    def from_transitions(cls, transitions, cost_train=None):
        tr = list(transitions)
        orig = np.array([t.cost_original for t in tr])
        return cls(
            x=np.array([t.x_t for t in tr], dtype=float),
            u=np.array([t.u_t for t in tr], dtype=float),
            x_next=np.array([t.x_next for t in tr], dtype=float),
            cost_original=orig,
            cost_additional=np.array([t.cost_additional for t in tr]),
            cost_train=orig.copy() if cost_train is None else np.asarray(cost_train, dtype=float),
            terminal=np.array([t.terminal for t in tr], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity ring of transitions with seeded uniform sampling."""

    def __init__(self, capacity, state_dim, action_dim, rng):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.rng = rng
        self.x = np.zeros((capacity, state_dim))
        self.u = np.zeros((capacity, action_dim))
        self.x_next = np.zeros((capacity, state_dim))
        self.cost_original = np.zeros(capacity)
        self.cost_additional = np.zeros(capacity)
        self.cost_train = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, tr, cost_train=None):
        i = self._next
        self.x[i] = tr.x_t
        self.u[i] = tr.u_t
        self.x_next[i] = tr.x_next
        self.cost_original[i] = tr.cost_original
        self.cost_additional[i] = tr.cost_additional
        self.cost_train[i] = tr.cost_original if cost_train is None else cost_train
        self.terminal[i] = tr.terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = self.rng.integers(0, self.size, size=n)
        return Batch(self.x[idx], self.u[idx], self.x_next[idx], self.cost_original[idx],
                     self.cost_additional[idx], self.cost_train[idx], self.terminal[idx])


# ---------------------------------------------------------------------------
# Exploration noise

class GaussianNoise:
    def __init__(self, dim, rng, sigma=0.2):
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        self.dim, self.rng, self.sigma = dim, rng, float(sigma)

    def reset(self):
        pass

    def sample(self, scale=1.0) -> np.ndarray:
        if self.sigma == 0 or scale == 0:
            return np.zeros(self.dim)
        return scale * self.sigma * self.rng.standard_normal(self.dim)


class OUNoise:
    """``W <- W + theta (mu - W) dt + sigma sqrt(dt) xi``."""

    def __init__(self, dim, rng, sigma=0.2, theta=0.15, mu=0.0, dt=1.0, w0=None):
        if sigma < 0 or theta < 0:
            raise ValueError("sigma and theta must be nonnegative")
        self.dim, self.rng = dim, rng
        self.sigma, self.theta, self.mu, self.dt = float(sigma), float(theta), float(mu), float(dt)
        self.w0 = np.full(dim, self.mu) if w0 is None else np.asarray(w0, dtype=float)
        self.reset()

    def reset(self):
        self.state = self.w0.copy()

    def sample(self, scale=1.0) -> np.ndarray:
        xi = self.rng.standard_normal(self.dim) if self.sigma > 0 else np.zeros(self.dim)
        self.state = self.state + self.theta * (self.mu - self.state) * self.dt + self.sigma * math.sqrt(self.dt) * xi
        return scale * self.state


def exploration_noise(kind, dim, rng, **params):
    if kind == "gaussian":
        return GaussianNoise(dim, rng, **params)
    if kind in ("ou", "ornstein_uhlenbeck"):
        return OUNoise(dim, rng, **params)
    raise ValueError(f"unknown noise kind {kind!r}")


# ---------------------------------------------------------------------------
# Agents

@dataclass(frozen=True)
class AgentBundle:
    actor: nn.Mlp
    critic: nn.Mlp
    target_actor: nn.Mlp
    target_critic: nn.Mlp
    pretrained_actor: nn.Mlp | None = None
    pretrained_critic: nn.Mlp | None = None


def fresh_bundle(state_dim, action_dim, action_bound, rng, hidden=(64, 64)) -> AgentBundle:
    """Fresh actor (unit tanh output, rescaled by :func:`action_scale`) and critic."""
    actor = nn.init_mlp((state_dim, *hidden, action_dim), rng, "tanh", output_bound=1.0)
    critic = nn.init_mlp((state_dim + action_dim, *hidden, 1), rng, "tanh")
    return AgentBundle(actor, critic, actor, critic)


def action_scale(actor: nn.Mlp, action_bound) -> np.ndarray:
    """Per-component multiplier turning network outputs into environment actions."""
    bound = np.atleast_1d(np.asarray(action_bound, dtype=float))
    return bound / (actor.output_bound or 1.0)


def adaptation_bundle(pretrained_actor, pretrained_critic, rng, hidden=None) -> AgentBundle:
    """Start of adaptation: actor copied from the pretrained policy, fresh critic."""
    hidden = tuple(pretrained_critic.layer_sizes[1:-1]) if hidden is None else tuple(hidden)
    critic = nn.init_mlp((pretrained_critic.n_in, *hidden, 1), rng, "tanh")
    return AgentBundle(pretrained_actor, critic, pretrained_actor, critic, pretrained_actor, pretrained_critic)


def soft_update(target: nn.Mlp, online: nn.Mlp, tau: float) -> nn.Mlp:
    if not target.same_architecture(online):
        raise ValueError("soft_update requires matching architectures")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if tau == 1.0:
        return online
    if tau == 0.0:
        return target
    return nn.unflatten(target, tau * nn.flatten(online) + (1.0 - tau) * nn.flatten(target))


# ---------------------------------------------------------------------------
# Critic

def td_targets(bundle: AgentBundle, batch: Batch, which_cost, discount=1.0, use_targets=True, scale=None):
    actor = bundle.target_actor if use_targets else bundle.actor
    critic = bundle.target_critic if use_targets else bundle.critic
    u_next, _ = nn.forward_batch(actor, batch.x_next)
    if scale is not None:
        u_next = u_next * scale
    q_next, _ = nn.forward_batch(critic, np.hstack([batch.x_next, u_next]))
    boot = np.where(batch.terminal, 0.0, q_next[:, 0])
    return batch.cost(which_cost) + discount * boot


def td_loss_grad(bundle: AgentBundle, batch: Batch, which_cost=CostColumn.TRAIN, discount=1.0,
                 use_targets=True, scale=None) -> nn.GradReport:
    """Mean squared TD residual and its gradient w.r.t. the online critic."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    target = td_targets(bundle, batch, which_cost, discount, use_targets, scale)
    q, cache = nn.forward_batch(bundle.critic, np.hstack([batch.x, batch.u]))
    resid = q[:, 0] - target
    n = len(batch)
    grad, _ = nn.backward_batch(bundle.critic, cache, (2.0 / n) * resid[:, None])
    return nn.GradReport(float(np.mean(resid * resid)), grad)


def critic_update(bundle: AgentBundle, batch: Batch, alpha_q, which_cost=CostColumn.TRAIN, discount=1.0,
                  use_targets=True, optimizer=None, scale=None):
    """One descent step on the TD loss; returns ``(bundle, loss)``."""
    rep = td_loss_grad(bundle, batch, which_cost, discount, use_targets, scale)
    theta = nn.flatten(bundle.critic)
    step = alpha_q * rep.grad if optimizer is None else optimizer.step(rep.grad, alpha_q)
    return replace(bundle, critic=nn.unflatten(bundle.critic, theta - step)), rep.value


# ---------------------------------------------------------------------------
# Actor

@dataclass
class ActorTerms:
    lie: cbf_core.LieTerms
    grad_q_mean: np.ndarray
    q_hat_ref: np.ndarray  # Q_hat(x, mu*(x)) per sample
    q_hat_now: np.ndarray  # Q_hat(x, mu(x)) per sample


def actor_terms(bundle: AgentBundle, batch: Batch, gamma_h, w, margin=0.0, scale=None) -> ActorTerms:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if bundle.pretrained_actor is None or bundle.pretrained_critic is None:
        raise ValueError("CBF actor terms need a pretrained actor and critic")
    states = batch.x
    n = len(batch)
    u, a_cache = nn.forward_batch(bundle.actor, states)
    if scale is not None:
        u = u * scale
    q_hat, du_hat = nn.action_gradient(bundle.pretrained_critic, states, u)
    _, du_q = nn.action_gradient(bundle.critic, states, u)
    if scale is not None:
        du_hat, du_q = du_hat * scale, du_q * scale
    g_hat_sum, g_q_sum, dots = nn.backward_pair_dot(bundle.actor, a_cache, du_hat, du_q)
    u_ref, _ = nn.forward_batch(bundle.pretrained_actor, states)
    if scale is not None:
        u_ref = u_ref * scale
    q_hat_ref, _ = nn.forward_batch(bundle.pretrained_critic, np.hstack([states, u_ref]))
    q_hat_ref = q_hat_ref[:, 0]
    # L_f = mean_i(g_hat_i . g_i), L_g = -mean_i g_hat_i
    l_f = float(np.mean(dots))
    l_g = -g_hat_sum / n
    h = float(np.mean(q_hat_ref - q_hat)) - margin
    lie = cbf_core.make_lie_terms(l_f, l_g, h, gamma_h, w)
    return ActorTerms(lie, g_q_sum / n, q_hat_ref, q_hat)


def cbf_actor_terms(bundle: AgentBundle, batch: Batch, gamma_h, w, margin=0.0, scale=None) -> cbf_core.LieTerms:
    """Sample-average Lie terms of the surrogate barrier ``E[Q_hat(mu*) - Q_hat(mu)]``."""
    return actor_terms(bundle, batch, gamma_h, w, margin, scale).lie


def _clip(v, max_norm):
    if max_norm is None:
        return v
    n = float(np.linalg.norm(v))
    return v * (max_norm / n) if n > max_norm else v


def actor_update_cbfpa(bundle: AgentBundle, batch: Batch, alpha_mu, gamma_h, w, margin=0.0,
                       force_inactive=False, scale=None, max_norm=None):
    """Barrier-filtered actor step; returns ``(bundle, decision, terms)``.

    ``max_norm`` rescales the filtered direction (not its orientation).
    """
    terms = actor_terms(bundle, batch, gamma_h, w, margin, scale)
    if force_inactive:
        p = terms.grad_q_mean.size
        decision = cbf_core.CbfDecision(np.zeros(p), 0.0, cbf_core.Branch.INACTIVE,
                                        cbf_core.constraint_residual(terms.lie, np.zeros(p), 0.0))
    elif w == 0:
        decision = cbf_core.fixed_relaxation_controller(terms.lie, 0.0)
    else:
        decision = cbf_core.closed_form_controller(terms.lie)
    theta = nn.flatten(bundle.actor)
    new = nn.unflatten(bundle.actor, theta - alpha_mu * _clip(terms.grad_q_mean - decision.a, max_norm))
    return replace(bundle, actor=new), decision, terms


def policy_gradient(bundle: AgentBundle, batch: Batch, scale=None) -> np.ndarray:
    """Mean actor-parameter gradient of ``Q(x, mu(x))``."""
    u, a_cache = nn.forward_batch(bundle.actor, batch.x)
    if scale is not None:
        u = u * scale
    _, du = nn.action_gradient(bundle.critic, batch.x, u)
    if scale is not None:
        du = du * scale
    g, _ = nn.backward_batch(bundle.actor, a_cache, du / len(batch))
    return g


def actor_update_baseline(bundle: AgentBundle, batch: Batch, alpha_mu, variant=BaselineVariant.PLAIN,
                          optimizer=None, scale=None, max_norm=None):
    """Plain DDPG actor step against the variant's critic; returns ``(bundle, grad)``."""
    BaselineVariant(variant)
    g = _clip(policy_gradient(bundle, batch, scale), max_norm)
    step = alpha_mu * g if optimizer is None else optimizer.step(g, alpha_mu)
    return replace(bundle, actor=nn.unflatten(bundle.actor, nn.flatten(bundle.actor) - step)), g


class Adam:
    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Training loop

@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 200
    horizon: int | None = None
    batch_size: int = 64
    tau: float = 0.005
    alpha_q: float = 1e-3
    epsilon: float = 0.1
    gamma_h: float = 1.0
    w: float = 1.0
    baseline_w: float = 1.0
    discount: float = 0.99
    noise_kind: str = "gaussian"
    noise_sigma: float = 0.2
    noise_anneal: bool = True
    ou_theta: float = 0.15
    seed: int = 0
    buffer_capacity: int = 100_000
    hidden: tuple = (64, 64)
    optimizer: str = "sgd"  # critic
    actor_optimizer: str = "sgd"  # ignored by the CBF-PA actor, which always takes the plain step
    use_targets: bool = True
    warmup_steps: int = 0
    critic_warmup_steps: int = 0
    margin: float = 0.0
    rl_slack_fraction: float = 0.1
    max_grad_norm: float | None = None
    # bound-violation steps are valued as if the last stage cost repeated forever
    absorbing_terminal: bool = False

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not self.alpha_q > 0:
            raise ValueError("alpha_q must be positive")
        if not self.gamma_h > 0:
            raise ValueError("gamma_h must be positive")
        if self.w < 0 or self.baseline_w < 0:
            raise ValueError("w and baseline_w must be nonnegative")
        if self.episodes < 0 or self.batch_size < 1:
            raise ValueError("episodes must be >= 0 and batch_size >= 1")
        if self.absorbing_terminal and not self.discount < 1.0:
            raise ValueError("absorbing_terminal needs discount < 1")
        for name in ("optimizer", "actor_optimizer"):
            if getattr(self, name) not in ("sgd", "adam"):
                raise ValueError(f"unknown {name} {getattr(self, name)!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def alpha_mu(self) -> float:
        return self.epsilon * self.alpha_q

    def as_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpisodeLog:
    episode: int
    ep_cost_original: float
    ep_cost_additional_mean: float
    c_star_mean: float
    h_term_mean: float
    actor_grad_norm: float
    critic_loss: float
    steps: int
    surrogate_violations: int = 0


LOG_COLUMNS = ["episode", "ep_cost_original", "ep_cost_additional_mean", "c_star_mean", "h_term_mean",
               "actor_grad_norm", "critic_loss"]


@dataclass
class TrainResult:
    bundle: AgentBundle
    log: list = field(default_factory=list)
    branch_counts: dict = field(default_factory=dict)

    @property
    def policy(self) -> nn.Mlp:
        """The returned policy (the target actor, as the loop returns the copied networks)."""
        return self.bundle.target_actor


def _train_cost(mode, cfg, tr, bundle, scale):
    if mode in (Mode.PRETRAIN, Mode.FIT_CRITIC):
        return tr.cost_original
    if mode is Mode.ADAPT_MORL:
        return tr.cost_original + cfg.baseline_w * tr.cost_additional
    if mode is Mode.ADAPT_BC:
        ref = nn.forward(bundle.pretrained_actor, tr.x_t)
        if scale is not None:
            ref = ref * scale
        diff = tr.u_t - ref
        return tr.cost_additional + cfg.baseline_w * float(diff @ diff)
    return tr.cost_additional


def train(cfg: TrainConfig, env, mode, bundle: AgentBundle | None = None) -> TrainResult:
    """Run the actor-critic loop for ``cfg.episodes`` episodes.

    ``PRETRAIN`` starts from fresh networks and learns the original cost.  The
    adaptation modes need a bundle whose pretrained actor/critic are set and
    whose actor equals the pretrained actor.
    """
    mode = Mode(mode)
    ss = np.random.SeedSequence(cfg.seed)
    init_rng, env_rng, buf_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    if mode is Mode.PRETRAIN:
        if bundle is None:
            bundle = fresh_bundle(env.state_dim, env.action_dim, env.action_bound, init_rng, cfg.hidden)
    elif mode is Mode.FIT_CRITIC:
        if bundle is None:
            raise ValueError("fit_critic needs a bundle holding the actor to evaluate")
    elif bundle is None or bundle.pretrained_actor is None:
        raise ValueError(f"{mode.value} needs a bundle with a pretrained actor and critic")
    if cfg.episodes == 0:
        return TrainResult(bundle)

    scale = action_scale(bundle.actor, env.action_bound)
    scale = None if np.all(scale == 1.0) else scale
    bound = np.atleast_1d(np.asarray(env.action_bound, dtype=float))
    horizon = cfg.horizon or env.horizon
    buf = ReplayBuffer(cfg.buffer_capacity, env.state_dim, env.action_dim, buf_rng)
    noise_params = {"sigma": cfg.noise_sigma}
    if cfg.noise_kind != "gaussian":
        noise_params["theta"] = cfg.ou_theta
    noise = exploration_noise(cfg.noise_kind, env.action_dim, noise_rng, **noise_params)
    opt_c = Adam(bundle.critic.n_params) if cfg.optimizer == "adam" else None
    opt_a = Adam(bundle.actor.n_params) if cfg.actor_optimizer == "adam" and mode is not Mode.ADAPT_CBFPA else None
    counts = {b.name: 0 for b in cbf_core.Branch}
    logs = []
    total_steps = 0
    for ep in range(cfg.episodes):
        noise.reset()
        sigma_scale = (1.0 - ep / cfg.episodes) if cfg.noise_anneal else 1.0
        state = env.reset(env_rng)
        c_orig = []
        c_add = []
        c_stars, h_terms, grad_norms, losses = [], [], [], []
        violations = 0
        while not state.terminal:
            u = nn.forward(bundle.actor, state.x)
            if scale is not None:
                u = u * scale
            u = np.clip(u + bound * noise.sample(sigma_scale), -bound, bound)
            state, tr = env.step(state, u, horizon)
            c_train = _train_cost(mode, cfg, tr, bundle, scale)
            if cfg.absorbing_terminal and tr.terminal:
                c_train /= 1.0 - cfg.discount
            buf.add(tr, c_train)
            c_orig.append(tr.cost_original)
            c_add.append(tr.cost_additional)
            total_steps += 1
            if len(buf) < cfg.batch_size or total_steps <= cfg.warmup_steps:
                continue
            batch = buf.sample(cfg.batch_size)
            bundle, loss = critic_update(bundle, batch, cfg.alpha_q, CostColumn.TRAIN, cfg.discount,
                                         cfg.use_targets, opt_c, scale)
            losses.append(loss)
            if mode is not Mode.FIT_CRITIC and total_steps > cfg.warmup_steps + cfg.critic_warmup_steps:
                if mode is Mode.ADAPT_CBFPA:
                    bundle, d, terms = actor_update_cbfpa(bundle, batch, cfg.alpha_mu, cfg.gamma_h, cfg.w,
                                                          cfg.margin, scale=scale, max_norm=cfg.max_grad_norm)
                    counts[d.branch.name] += 1
                    c_stars.append(d.c_star)
                    h_terms.append(terms.lie.h)
                    grad_norms.append(float(np.linalg.norm(terms.grad_q_mean - d.a)))
                    slack = cfg.rl_slack_fraction * float(np.mean(np.abs(terms.q_hat_ref)))
                    violations += terms.lie.h < -d.c_star - slack
                else:
                    variant = {Mode.ADAPT_MORL: BaselineVariant.MORL, Mode.ADAPT_BC: BaselineVariant.BEHAVIOR_CLONE}
                    bundle, g = actor_update_baseline(bundle, batch, cfg.alpha_mu, variant.get(mode, BaselineVariant.PLAIN),
                                                      opt_a, scale, cfg.max_grad_norm)
                    grad_norms.append(float(np.linalg.norm(g)))
            bundle = replace(bundle,
                             target_critic=soft_update(bundle.target_critic, bundle.critic, cfg.tau),
                             target_actor=soft_update(bundle.target_actor, bundle.actor, cfg.tau))
        if not (np.all(np.isfinite(nn.flatten(bundle.actor))) and np.all(np.isfinite(nn.flatten(bundle.critic)))):
            raise DivergenceError(ep)
        logs.append(EpisodeLog(
            episode=ep,
            ep_cost_original=float(np.sum(c_orig)),
            ep_cost_additional_mean=float(np.mean(c_add)),
            c_star_mean=float(np.mean(c_stars)) if c_stars else 0.0,
            h_term_mean=float(np.mean(h_terms)) if h_terms else 0.0,
            actor_grad_norm=float(np.mean(grad_norms)) if grad_norms else 0.0,
            critic_loss=float(np.mean(losses)) if losses else 0.0,
            steps=len(c_orig),
            surrogate_violations=int(violations),
        ))
    if mode is Mode.PRETRAIN:
        bundle = replace(bundle, pretrained_actor=bundle.target_actor, pretrained_critic=bundle.target_critic)
    return TrainResult(bundle, logs, counts)


# ---------------------------------------------------------------------------
# Evaluation

@dataclass
class Rollout:
    states: np.ndarray
    actions: np.ndarray
    cost_original: float
    cost_additional_mean: float
    steps: int
    terminated_early: bool


def rollout(env, actor: nn.Mlp, x0, horizon) -> Rollout:
    """Noise-free episode from ``x0``."""
    from .envs import EnvState

    scale = action_scale(actor, env.action_bound)
    state = EnvState(np.asarray(x0, dtype=float))
    xs, us, co, ca = [state.x], [], [], []
    early = False
    while not state.terminal:
        u = nn.forward(actor, state.x) * scale
        state, tr = env.step(state, u, horizon)
        xs.append(state.x)
        us.append(tr.u_t)
        co.append(tr.cost_original)
        ca.append(tr.cost_additional)
        early = tr.terminal
    return Rollout(np.array(xs), np.array(us), float(np.sum(co)), float(np.mean(ca)), len(us), early)


def evaluate(env, actor: nn.Mlp, seeds, horizon=None) -> list:
    horizon = horizon or env.horizon
    return [rollout(env, actor, env.reset(np.random.default_rng(s)).x, horizon) for s in seeds]
