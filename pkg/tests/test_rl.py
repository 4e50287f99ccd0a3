import numpy as np
import pytest

from cbfpa import cbf_core, envs, nn, rl
from cbfpa.cbf_core import Branch


def linear(n_in, n_out, w, b, bound=None):
    return nn.make_mlp((n_in, n_out), [np.asarray(w, dtype=float)], [np.asarray(b, dtype=float)],
                       output_bound=bound)


def make_batch(rng, n, state_dim=2, action_dim=1, terminal=None):
    x = rng.normal(size=(n, state_dim))
    return rl.Batch(
        x=x,
        u=rng.uniform(-1, 1, size=(n, action_dim)),
        x_next=x + 0.1 * rng.normal(size=(n, state_dim)),
        cost_original=rng.normal(size=n),
        cost_additional=rng.normal(size=n),
        cost_train=rng.normal(size=n),
        terminal=np.zeros(n, dtype=bool) if terminal is None else np.asarray(terminal),
    )


def scripted_bundle(rng):
    actor = linear(2, 1, [[0.3, -0.5]], [0.1])
    pre_actor = linear(2, 1, [[0.2, -0.4]], [0.0])
    critic = linear(3, 1, [[0.7, -0.2, 1.5]], [0.05])
    pre_critic = linear(3, 1, [[-0.3, 0.4, -2.0]], [0.2])
    return rl.AgentBundle(actor, critic, actor, critic, pre_actor, pre_critic)


# --- replay & noise ---------------------------------------------------------------

def test_replay_ring_and_determinism():
    tr = lambda k: envs.Transition(np.full(2, k, dtype=float), np.array([k * 0.1]), np.zeros(2), -k, k, False)
    buf = rl.ReplayBuffer(3, 2, 1, np.random.default_rng(0))
    for k in range(5):
        buf.add(tr(k), cost_train=2 * k)
    assert len(buf) == 3
    assert sorted(buf.x[:, 0]) == [2.0, 3.0, 4.0]
    a = buf.sample(10)
    buf2 = rl.ReplayBuffer(3, 2, 1, np.random.default_rng(0))
    for k in range(5):
        buf2.add(tr(k), cost_train=2 * k)
    b = buf2.sample(10)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.cost_train, 2 * a.x[:, 0])


def test_replay_empty_sample_and_bad_capacity():
    with pytest.raises(ValueError):
        rl.ReplayBuffer(0, 1, 1, np.random.default_rng(0))
    with pytest.raises(ValueError, match="empty"):
        rl.ReplayBuffer(4, 1, 1, np.random.default_rng(0)).sample(2)


def test_zero_sigma_noise_is_zero():
    g = rl.exploration_noise("gaussian", 3, np.random.default_rng(0), sigma=0.0)
    assert all(not np.any(g.sample()) for _ in range(10))


def test_gaussian_noise_mean():
    n = 100_000
    g = rl.exploration_noise("gaussian", 1, np.random.default_rng(1), sigma=0.7)
    xs = np.array([g.sample()[0] for _ in range(n)])
    assert abs(xs.mean()) <= 3 * 0.7 / np.sqrt(n)


def test_ou_without_diffusion_decays_geometrically():
    ou = rl.exploration_noise("ou", 1, np.random.default_rng(0), sigma=0.0, theta=0.2, mu=1.0, dt=0.5,
                              w0=np.array([3.0]))
    vals = [ou.sample()[0] for _ in range(6)]
    expected = [1.0 + 2.0 * 0.9 ** (k + 1) for k in range(6)]
    np.testing.assert_allclose(vals, expected, rtol=1e-14)


def test_noise_seeded_and_validated():
    a = rl.exploration_noise("ou", 2, np.random.default_rng(5), sigma=0.3)
    b = rl.exploration_noise("ou", 2, np.random.default_rng(5), sigma=0.3)
    np.testing.assert_array_equal([a.sample() for _ in range(5)], [b.sample() for _ in range(5)])
    with pytest.raises(ValueError):
        rl.exploration_noise("pink", 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        rl.exploration_noise("gaussian", 1, np.random.default_rng(0), sigma=-1.0)


# --- soft update --------------------------------------------------------------------

def test_soft_update_extremes_and_midpoint():
    rng = np.random.default_rng(0)
    a, b = nn.init_mlp((2, 3, 1), rng), nn.init_mlp((2, 3, 1), rng)
    np.testing.assert_array_equal(nn.flatten(rl.soft_update(a, b, 1.0)), nn.flatten(b))
    np.testing.assert_array_equal(nn.flatten(rl.soft_update(a, b, 0.0)), nn.flatten(a))
    np.testing.assert_allclose(nn.flatten(rl.soft_update(a, b, 0.5)), 0.5 * (nn.flatten(a) + nn.flatten(b)))
    with pytest.raises(ValueError):
        rl.soft_update(a, nn.init_mlp((2, 4, 1), rng), 0.5)
    with pytest.raises(ValueError):
        rl.soft_update(a, b, 1.5)


# --- critic -------------------------------------------------------------------------

def test_td_loss_zero_when_fit_exactly():
    rng = np.random.default_rng(0)
    b = scripted_bundle(rng)
    batch = make_batch(rng, 6)
    target = rl.td_targets(b, batch, "train", 0.9)
    q, _ = nn.forward_batch(b.critic, np.hstack([batch.x, batch.u]))
    batch.cost_train = batch.cost_train + (q[:, 0] - target)
    rep = rl.td_loss_grad(b, batch, "train", 0.9)
    assert rep.value == pytest.approx(0.0, abs=1e-24)
    assert np.max(np.abs(rep.grad)) < 1e-12


def test_td_loss_linear_critic_hand_gradient():
    rng = np.random.default_rng(1)
    b = scripted_bundle(rng)
    batch = make_batch(rng, 1)
    c, d = b.critic.weights[0][0], b.critic.biases[0][0]
    z = np.concatenate([batch.x[0], batch.u[0]])
    u_next = b.target_actor.weights[0][0] @ batch.x_next[0] + b.target_actor.biases[0][0]
    q_next = c @ np.concatenate([batch.x_next[0], [u_next]]) + d
    r = c @ z + d - batch.cost_additional[0] - 0.95 * q_next
    rep = rl.td_loss_grad(b, batch, "additional", 0.95)
    assert rep.value == pytest.approx(r * r, rel=1e-12)
    np.testing.assert_allclose(rep.grad, np.concatenate([2 * r * z, [2 * r]]), rtol=1e-12)


def test_td_terminal_drops_bootstrap():
    rng = np.random.default_rng(2)
    b = scripted_bundle(rng)
    batch = make_batch(rng, 5, terminal=[True] * 5)
    q, _ = nn.forward_batch(b.critic, np.hstack([batch.x, batch.u]))
    rep = rl.td_loss_grad(b, batch, "original", 1.0)
    assert rep.value == pytest.approx(np.mean((q[:, 0] - batch.cost_original) ** 2), rel=1e-12)


def test_td_default_discount_is_one_and_strict_mode_uses_online_nets():
    rng = np.random.default_rng(3)
    b = scripted_bundle(rng)
    b = rl.AgentBundle(b.actor, b.critic, b.pretrained_actor, b.pretrained_critic,
                       b.pretrained_actor, b.pretrained_critic)
    batch = make_batch(rng, 4)
    t_default = rl.td_targets(b, batch, "train")
    u_next, _ = nn.forward_batch(b.target_actor, batch.x_next)
    q_next, _ = nn.forward_batch(b.target_critic, np.hstack([batch.x_next, u_next]))
    np.testing.assert_allclose(t_default, batch.cost_train + q_next[:, 0])
    u_on, _ = nn.forward_batch(b.actor, batch.x_next)
    q_on, _ = nn.forward_batch(b.critic, np.hstack([batch.x_next, u_on]))
    np.testing.assert_allclose(rl.td_targets(b, batch, "train", use_targets=False), batch.cost_train + q_on[:, 0])


def test_td_empty_batch_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        rl.td_loss_grad(scripted_bundle(rng), make_batch(rng, 0))


def test_critic_update_is_plain_gradient_step():
    rng = np.random.default_rng(4)
    actor = nn.init_mlp((2, 8, 1), rng, output_bound=1.0)
    critic = nn.init_mlp((3, 8, 1), rng)
    b = rl.AgentBundle(actor, critic, actor, critic)
    batch = make_batch(rng, 16)
    same, _ = rl.critic_update(b, batch, 0.0, "train", 0.99)
    np.testing.assert_array_equal(nn.flatten(same.critic), nn.flatten(critic))
    new, loss = rl.critic_update(b, batch, 0.01, "train", 0.99)
    g = rl.td_loss_grad(b, batch, "train", 0.99).grad
    np.testing.assert_allclose(nn.flatten(new.critic) - nn.flatten(critic), -0.01 * g, rtol=0, atol=1e-12)
    assert loss > 0


# --- actor ----------------------------------------------------------------------

def test_cbf_terms_scripted_oracle():
    rng = np.random.default_rng(5)
    b = scripted_bundle(rng)
    batch = make_batch(rng, 2)
    gamma_h, w = 2.0, 0.5
    # linear nets: d/d(theta) Q(x, mu(x)) = c_u * [x, 1] for every sample
    cu_hat = b.pretrained_critic.weights[0][0, 2]
    cu = b.critic.weights[0][0, 2]
    feats = np.hstack([batch.x, np.ones((2, 1))])
    g_hat, g_q = cu_hat * feats, cu * feats
    l_f = np.mean(np.sum(g_hat * g_q, axis=1))
    l_g = -g_hat.mean(axis=0)

    def q_hat(actor, x):
        u = actor.weights[0][0] @ x + actor.biases[0][0]
        return b.pretrained_critic.weights[0][0] @ np.concatenate([x, [u]]) + b.pretrained_critic.biases[0][0]

    h = np.mean([q_hat(b.pretrained_actor, x) - q_hat(b.actor, x) for x in batch.x])
    t = rl.cbf_actor_terms(b, batch, gamma_h, w)
    assert t.l_f == pytest.approx(l_f, rel=1e-12)
    np.testing.assert_allclose(t.l_g, l_g, rtol=1e-12)
    assert t.h == pytest.approx(h, rel=1e-12, abs=1e-15)
    assert t.l_a == pytest.approx(l_f + gamma_h * h, rel=1e-12)

    # the full update against the same hand values
    new, d, _ = rl.actor_update_cbfpa(b, batch, 0.1, gamma_h, w)
    ref = cbf_core.closed_form_controller(cbf_core.make_lie_terms(l_f, l_g, h, gamma_h, w))
    expected = nn.flatten(b.actor) - 0.1 * (g_q.mean(axis=0) - ref.a)
    np.testing.assert_allclose(nn.flatten(new.actor), expected, rtol=1e-12)
    assert d.branch is ref.branch


def test_h_term_zero_at_pretrained_policy():
    rng = np.random.default_rng(6)
    actor = nn.init_mlp((4, 8, 1), rng, output_bound=1.0)
    critic = nn.init_mlp((5, 8, 1), rng)
    b = rl.adaptation_bundle(actor, critic, rng)
    t = rl.cbf_actor_terms(b, make_batch(rng, 32, state_dim=4), 1.0, 1.0)
    assert t.h == 0.0


def test_action_blind_pretrained_critic_gives_zero_lie_terms():
    rng = np.random.default_rng(7)
    b = scripted_bundle(rng)
    blind = linear(3, 1, [[0.3, -0.1, 0.0]], [0.0])
    b = rl.AgentBundle(b.actor, b.critic, b.actor, b.critic, b.pretrained_actor, blind)
    t = rl.cbf_actor_terms(b, make_batch(rng, 8), 1.0, 1.0)
    assert t.l_f == 0.0 and not np.any(t.l_g)


def test_zero_step_leaves_actor_unchanged():
    rng = np.random.default_rng(8)
    b = scripted_bundle(rng)
    batch = make_batch(rng, 4)
    new, _, _ = rl.actor_update_cbfpa(b, batch, 0.0, 1.0, 1.0)
    np.testing.assert_array_equal(nn.flatten(new.actor), nn.flatten(b.actor))
    new, _ = rl.actor_update_baseline(b, batch, 0.0, "morl")
    np.testing.assert_array_equal(nn.flatten(new.actor), nn.flatten(b.actor))


def test_plain_step_equals_forced_inactive_cbf_step():
    rng = np.random.default_rng(9)
    actor = nn.init_mlp((2, 6, 1), rng, output_bound=1.0)
    critic = nn.init_mlp((3, 6, 1), rng)
    b = rl.AgentBundle(actor, critic, actor, critic, nn.init_mlp((2, 6, 1), rng, output_bound=1.0),
                       nn.init_mlp((3, 6, 1), rng))
    batch = make_batch(rng, 10)
    plain, _ = rl.actor_update_baseline(b, batch, 0.05, "plain")
    forced, d, _ = rl.actor_update_cbfpa(b, batch, 0.05, 1.0, 1.0, force_inactive=True)
    assert d.branch is Branch.INACTIVE
    np.testing.assert_allclose(nn.flatten(plain.actor), nn.flatten(forced.actor), rtol=0, atol=1e-15)


def test_baseline_step_scripted():
    rng = np.random.default_rng(10)
    b = scripted_bundle(rng)
    batch = make_batch(rng, 3)
    cu = b.critic.weights[0][0, 2]
    g = cu * np.hstack([batch.x, np.ones((3, 1))]).mean(axis=0)
    new, got = rl.actor_update_baseline(b, batch, 0.2, "behavior_clone")
    np.testing.assert_allclose(got, g, rtol=1e-12)
    np.testing.assert_allclose(nn.flatten(new.actor), nn.flatten(b.actor) - 0.2 * g, rtol=1e-12)


def test_first_adaptation_step_is_inactive_when_l_f_nonnegative():
    rng = np.random.default_rng(11)
    actor = nn.init_mlp((4, 8, 1), rng, output_bound=1.0)
    critic = nn.init_mlp((5, 8, 1), rng)
    b = rl.adaptation_bundle(actor, critic, rng)
    # the online critic equals the pretrained one, so L_f = mean |grad Q_hat|^2 >= 0
    b = rl.AgentBundle(b.actor, critic, b.target_actor, critic, actor, critic)
    batch = make_batch(rng, 16, state_dim=4)
    new, d, _ = rl.actor_update_cbfpa(b, batch, 0.01, 1.0, 1.0)
    plain, _ = rl.actor_update_baseline(b, batch, 0.01, "plain")
    assert d.branch is Branch.INACTIVE
    np.testing.assert_array_equal(nn.flatten(new.actor), nn.flatten(plain.actor))


def test_actor_terms_need_pretrained_networks():
    rng = np.random.default_rng(0)
    actor = nn.init_mlp((2, 3, 1), rng)
    critic = nn.init_mlp((3, 3, 1), rng)
    with pytest.raises(ValueError, match="pretrained"):
        rl.cbf_actor_terms(rl.AgentBundle(actor, critic, actor, critic), make_batch(rng, 2), 1.0, 1.0)


# --- config & loop ------------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(epsilon=1.5), dict(epsilon=0.0), dict(tau=0.0), dict(alpha_q=-1.0),
                                 dict(gamma_h=0.0), dict(w=-1.0), dict(optimizer="rmsprop")])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        rl.TrainConfig(**bad)


def test_train_config_dict_roundtrip():
    cfg = rl.TrainConfig(episodes=3, hidden=[8, 8])
    assert rl.TrainConfig.from_dict(cfg.as_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        rl.TrainConfig.from_dict({"episodez": 3})


def test_zero_episodes_returns_input_bundle():
    env = envs.Cartpole()
    rng = np.random.default_rng(0)
    b = rl.fresh_bundle(4, 1, 1.0, rng, (8,))
    res = rl.train(rl.TrainConfig(episodes=0), env, "pretrain", b)
    assert res.bundle is b and res.log == []


def test_adapt_mode_requires_pretrained_bundle():
    with pytest.raises(ValueError, match="pretrained"):
        rl.train(rl.TrainConfig(episodes=1), envs.Cartpole(), "adapt_cbfpa")


def _short(mode, seed=0, **kw):
    env = envs.Cartpole()
    cfg = rl.TrainConfig(episodes=3, horizon=40, batch_size=16, hidden=(8, 8), seed=seed, **kw)
    pre = rl.train(cfg, env, "pretrain")
    if mode == "pretrain":
        return pre
    b = rl.adaptation_bundle(pre.bundle.pretrained_actor, pre.bundle.pretrained_critic, np.random.default_rng(seed))
    return rl.train(cfg, env, mode, b)


def test_training_is_deterministic():
    a, b = _short("adapt_cbfpa"), _short("adapt_cbfpa")
    assert [vars(x) for x in a.log] == [vars(x) for x in b.log]
    np.testing.assert_array_equal(nn.flatten(a.bundle.actor), nn.flatten(b.bundle.actor))


@pytest.mark.parametrize("mode", ["pretrain", "adapt_cbfpa", "adapt_morl", "adapt_bc"])
def test_training_modes_run(mode):
    res = _short(mode)
    assert len(res.log) == 3
    assert all(np.isfinite(l.critic_loss) for l in res.log)
    if mode == "adapt_cbfpa":
        assert sum(res.branch_counts.values()) > 0
        assert res.branch_counts["HARD_ACTIVE"] == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_episode():
    with pytest.raises(rl.DivergenceError, match="episode"):
        _short("pretrain", alpha_q=1e200)


def test_rollout_without_noise_is_reproducible():
    env = envs.Unicycle()
    actor = nn.init_mlp((3, 8, 2), np.random.default_rng(0), output_bound=1.0)
    a = rl.evaluate(env, actor, [1, 2], horizon=30)
    b = rl.evaluate(env, actor, [1, 2], horizon=30)
    np.testing.assert_array_equal(a[0].states, b[0].states)
    assert a[0].steps <= 30
    assert np.all(np.abs(a[0].actions[:, 1]) <= 3.0)


def _recorded_adds(monkeypatch, **kw):
    seen = []
    orig = rl.ReplayBuffer.add

    def add(self, tr, cost_train=None):
        seen.append((tr.terminal, tr.cost_original, cost_train))
        return orig(self, tr, cost_train)

    monkeypatch.setattr(rl.ReplayBuffer, "add", add)
    cfg = rl.TrainConfig(episodes=4, horizon=60, batch_size=8, hidden=(4,), seed=3, discount=0.9, **kw)
    rl.train(cfg, envs.Cartpole(), "pretrain")
    return seen


@pytest.mark.parametrize("absorbing", [False, True])
def test_absorbing_terminal_scales_only_terminal_costs(monkeypatch, absorbing):
    seen = _recorded_adds(monkeypatch, absorbing_terminal=absorbing)
    assert any(t for t, _, _ in seen), "no bound violation happened; pick another seed"
    for terminal, c, stored in seen:
        expect = c / (1 - 0.9) if absorbing and terminal else c
        assert stored == pytest.approx(expect, rel=1e-15)


def test_absorbing_terminal_needs_discount():
    with pytest.raises(ValueError, match="discount"):
        rl.TrainConfig(absorbing_terminal=True, discount=1.0)


def test_clip_rescales_only_long_vectors():
    v = np.array([3.0, 4.0])
    np.testing.assert_array_equal(rl._clip(v, None), v)
    np.testing.assert_array_equal(rl._clip(v, 10.0), v)
    np.testing.assert_allclose(rl._clip(v, 1.0), [0.6, 0.8], rtol=1e-15)


def test_grad_clipping_bounds_actor_step():
    rng = np.random.default_rng(11)
    b = scripted_bundle(rng)
    batch = make_batch(rng, 5)
    new, g = rl.actor_update_baseline(b, batch, 1.0, "plain", max_norm=1e-3)
    assert np.linalg.norm(nn.flatten(new.actor) - nn.flatten(b.actor)) == pytest.approx(1e-3, rel=1e-12)
    new, _, _ = rl.actor_update_cbfpa(b, batch, 1.0, 1.0, 1.0, max_norm=1e-3)
    assert np.linalg.norm(nn.flatten(new.actor) - nn.flatten(b.actor)) <= 1e-3 * (1 + 1e-12)
