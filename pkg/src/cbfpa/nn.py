"""Small feedforward networks with reverse-mode gradients over a flat parameter vector.

Flattening order is layer-major; inside a layer the weight matrix
``(n_out, n_in)`` is laid out row-major, followed by the bias vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

ACTIVATIONS = ("tanh", "relu")
CHECKPOINT_MAGIC = "# cbfpa-mlp v1"


@dataclass(frozen=True)
class Mlp:
    layer_sizes: tuple
    weights: tuple
    biases: tuple
    activations: tuple  # one per hidden layer
    output_bound: float | None = None  # None: identity output, else bound * tanh

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def same_architecture(self, other: "Mlp") -> bool:
        return (
            tuple(self.layer_sizes) == tuple(other.layer_sizes)
            and tuple(self.activations) == tuple(other.activations)
            and self.output_bound == other.output_bound
        )


@dataclass
class GradReport:
    value: float
    grad: np.ndarray
    relative_fd_error: float | None = None


def init_mlp(layer_sizes, rng, activation="tanh", output_bound=None) -> Mlp:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialisation."""
    layer_sizes = tuple(int(s) for s in layer_sizes)
    if len(layer_sizes) < 2 or min(layer_sizes) < 1:
        raise ValueError(f"bad layer sizes {layer_sizes}")
    acts = (activation,) * (len(layer_sizes) - 2) if isinstance(activation, str) else tuple(activation)
    ws, bs = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        lim = 1.0 / math.sqrt(n_in)
        ws.append(rng.uniform(-lim, lim, size=(n_out, n_in)))
        bs.append(rng.uniform(-lim, lim, size=n_out))
    return make_mlp(layer_sizes, ws, bs, acts, output_bound)


def make_mlp(layer_sizes, weights, biases, activations=None, output_bound=None) -> Mlp:
    layer_sizes = tuple(int(s) for s in layer_sizes)
    n_hidden = len(layer_sizes) - 2
    activations = ("tanh",) * n_hidden if activations is None else tuple(activations)
    if len(activations) != n_hidden:
        raise ValueError(f"expected {n_hidden} hidden activations, got {len(activations)}")
    for act in activations:
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
    ws = tuple(np.array(w, dtype=float) for w in weights)
    bs = tuple(np.array(b, dtype=float).reshape(-1) for b in biases)
    for i, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        if ws[i].shape != (n_out, n_in) or bs[i].shape != (n_out,):
            raise ValueError(f"layer {i}: expected W{(n_out, n_in)}, b({n_out},)")
    if output_bound is not None:
        output_bound = float(output_bound)
        if output_bound <= 0:
            raise ValueError("output_bound must be positive")
    return Mlp(layer_sizes, ws, bs, activations, output_bound)


def flatten(net: Mlp) -> np.ndarray:
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.reshape(-1))
        parts.append(b)
    return np.concatenate(parts)


def unflatten(net: Mlp, vec) -> Mlp:
    """Network with ``net``'s architecture and parameters taken from ``vec``."""
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (net.n_params,):
        raise ValueError(f"expected {net.n_params} parameters, got shape {vec.shape}")
    ws, bs = [], []
    i = 0
    for n_in, n_out in zip(net.layer_sizes[:-1], net.layer_sizes[1:]):
        ws.append(vec[i:i + n_in * n_out].reshape(n_out, n_in).copy())
        i += n_in * n_out
        bs.append(vec[i:i + n_out].copy())
        i += n_out
    return replace(net, weights=tuple(ws), biases=tuple(bs))


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name, z, a):
    return 1.0 - a * a if name == "tanh" else (z > 0).astype(float)


def forward_batch(net: Mlp, x):
    """Evaluate on rows of ``x``; returns ``(y, cache)`` with ``cache`` for backprop."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise ValueError(f"input must have shape (N, {net.n_in}), got {x.shape}")
    acts = [x]
    pre = []
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        pre.append(z)
        if i < last:
            h = _act(net.activations[i], z)
        elif net.output_bound is not None:
            h = net.output_bound * np.tanh(z)
        else:
            h = z
        acts.append(h)
    return h, (acts, pre)


def forward(net: Mlp, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != net.n_in:
        raise ValueError(f"input length {x.size} does not match first layer ({net.n_in})")
    return forward_batch(net, x[None, :])[0][0]


def backward_batch(net: Mlp, cache, dy, per_sample=False):
    """Backpropagate output cotangents ``dy`` (N, n_out).

    Returns ``(dparams, dx)``: ``dparams`` is the summed flat gradient ``(p,)``,
    or one row per sample ``(N, p)`` when ``per_sample`` is set.
    """
    acts, pre = cache
    n = acts[0].shape[0]
    delta = np.asarray(dy, dtype=float).reshape(n, net.n_out)
    last = len(net.weights) - 1
    if net.output_bound is not None:
        t = acts[-1] / net.output_bound
        delta = delta * net.output_bound * (1.0 - t * t)
    grads = [None] * (2 * len(net.weights))
    for i in range(last, -1, -1):
        a_in = acts[i]
        if per_sample:
            grads[2 * i] = (delta[:, :, None] * a_in[:, None, :]).reshape(n, -1)
            grads[2 * i + 1] = delta
        else:
            grads[2 * i] = (delta.T @ a_in).reshape(-1)
            grads[2 * i + 1] = delta.sum(axis=0)
        dx = delta @ net.weights[i]
        if i > 0:
            delta = dx * _act_grad(net.activations[i - 1], pre[i - 1], acts[i])
    return np.concatenate(grads, axis=-1), dx


def backward_pair_dot(net: Mlp, cache, dy_a, dy_b):
    """Backpropagate two cotangents through one forward pass.

    Returns ``(grad_a, grad_b, dots)``: the two summed flat gradients and,
    per sample, the inner product of the two per-sample parameter gradients.
    Each per-sample layer gradient is an outer product ``delta a^T``, so the
    inner product factors as ``(delta_a . delta_b)(|a|^2 + 1)`` with the bias.
    """
    acts, pre = cache
    n = acts[0].shape[0]
    da = np.asarray(dy_a, dtype=float).reshape(n, net.n_out)
    db = np.asarray(dy_b, dtype=float).reshape(n, net.n_out)
    if net.output_bound is not None:
        t = acts[-1] / net.output_bound
        d = net.output_bound * (1.0 - t * t)
        da, db = da * d, db * d
    ga, gb = [None] * (2 * len(net.weights)), [None] * (2 * len(net.weights))
    dots = np.zeros(n)
    for i in range(len(net.weights) - 1, -1, -1):
        a_in = acts[i]
        dots += np.einsum("ij,ij->i", da, db) * (np.einsum("ij,ij->i", a_in, a_in) + 1.0)
        ga[2 * i], ga[2 * i + 1] = (da.T @ a_in).reshape(-1), da.sum(axis=0)
        gb[2 * i], gb[2 * i + 1] = (db.T @ a_in).reshape(-1), db.sum(axis=0)
        if i > 0:
            dg = _act_grad(net.activations[i - 1], pre[i - 1], acts[i])
            da, db = (da @ net.weights[i]) * dg, (db @ net.weights[i]) * dg
    return np.concatenate(ga), np.concatenate(gb), dots


def grad_scalar_output(net: Mlp, x) -> GradReport:
    """Gradient of a scalar-output network w.r.t. its flattened parameters."""
    if net.n_out != 1:
        raise ValueError(f"network output has {net.n_out} components; expected a scalar")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    y, cache = forward_batch(net, x)
    g, _ = backward_batch(net, cache, np.ones((1, 1)))
    return GradReport(float(y[0, 0]), g)


def compose_grad(critic: Mlp, actor: Mlp, state) -> GradReport:
    """Gradient of ``critic(state, actor(state))`` w.r.t. the actor parameters only."""
    state = np.asarray(state, dtype=float).reshape(1, -1)
    vals, grads = compose_grad_batch(critic, actor, state)
    return GradReport(float(vals[0]), grads.sum(axis=0) if grads.ndim == 2 else grads)


def compose_grad_batch(critic: Mlp, actor: Mlp, states, per_sample=True):
    """Batched ``Q(x, mu(x))`` values and actor-parameter gradients.

    Returns ``(values (N,), grads)``; ``grads`` is ``(N, p)`` per sample or the
    summed ``(p,)`` vector.
    """
    states = np.asarray(states, dtype=float)
    if critic.n_out != 1:
        raise ValueError("critic must have a scalar output")
    if critic.n_in != states.shape[1] + actor.n_out or actor.n_in != states.shape[1]:
        raise ValueError(
            f"dimension mismatch: state {states.shape[1]}, actor {actor.n_in}->{actor.n_out}, critic in {critic.n_in}"
        )
    u, a_cache = forward_batch(actor, states)
    q, c_cache = forward_batch(critic, np.hstack([states, u]))
    _, dxu = backward_batch(critic, c_cache, np.ones_like(q))
    du = dxu[:, states.shape[1]:]
    g, _ = backward_batch(actor, a_cache, du, per_sample=per_sample)
    return q[:, 0], g


def action_gradient(critic: Mlp, states, actions):
    """``dQ/du`` for each row, shape (N, m)."""
    states = np.asarray(states, dtype=float)
    q, cache = forward_batch(critic, np.hstack([states, actions]))
    _, dxu = backward_batch(critic, cache, np.ones_like(q))
    return q[:, 0], dxu[:, states.shape[1]:]


def finite_difference_grad(fn, params, step=1e-5) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    out = np.empty_like(params)
    for i in range(params.size):
        up = params.copy()
        dn = params.copy()
        up[i] += step
        dn[i] -= step
        out[i] = (fn(up) - fn(dn)) / (2 * step)
    return out


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def check_grad_scalar_output(net: Mlp, x, step=1e-5) -> GradReport:
    report = grad_scalar_output(net, x)
    fd = finite_difference_grad(lambda v: forward(unflatten(net, v), x)[0], flatten(net), step)
    report.relative_fd_error = relative_error(report.grad, fd)
    return report


def check_compose_grad(critic: Mlp, actor: Mlp, state, step=1e-5) -> GradReport:
    report = compose_grad(critic, actor, state)
    state = np.asarray(state, dtype=float)

    def value(v):
        u = forward(unflatten(actor, v), state)
        return forward(critic, np.concatenate([state, u]))[0]

    fd = finite_difference_grad(value, flatten(actor), step)
    report.relative_fd_error = relative_error(report.grad, fd)
    return report


def save_checkpoint(net: Mlp, path) -> None:
    """Text checkpoint: header lines, then one parameter per line."""
    lines = [
        CHECKPOINT_MAGIC,
        "layer_sizes," + ",".join(str(s) for s in net.layer_sizes),
        "activations," + ",".join(net.activations),
        "output_bound," + ("none" if net.output_bound is None else repr(net.output_bound)),
        f"params,{net.n_params}",
    ]
    lines.extend(repr(float(v)) for v in flatten(net))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> Mlp:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a cbfpa network checkpoint")
    header = {}
    for line in lines[1:5]:
        key, _, rest = line.partition(",")
        header[key] = rest.split(",") if rest else []
    sizes = [int(s) for s in header["layer_sizes"]]
    acts = header["activations"]
    bound = header["output_bound"][0]
    n = int(header["params"][0])
    values = np.array([float(v) for v in lines[5:5 + n]])
    if values.size != n:
        raise ValueError(f"{path}: expected {n} parameters, found {values.size}")
    template = make_mlp(sizes, [np.zeros((b, a)) for a, b in zip(sizes[:-1], sizes[1:])],
                        [np.zeros(b) for b in sizes[1:]], acts, None if bound == "none" else float(bound))
    return unflatten(template, values)
