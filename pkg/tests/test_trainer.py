import math

import pytest
import torch

from gsb import objectives as ob
from gsb import trainer as tr
from gsb.dynamics import TimeGrid, simulate
from gsb.problems import make_problem

from conftest import small_nets

D = torch.float64

TINY = dict(hidden_policy=8, hidden_critic=8, hidden_critic_only=8, embed_dim=8, batch=8,
            pair_batch=16, td_batch=2, eval_batch=16, buffer_capacity=3)


def tiny_problem(name="gaussian", **kw):
    base = dict(T=0.1, dt=0.02)
    base.update(kw)
    return make_problem(name, **base)


def snapshot(modules):
    return [p.detach().clone() for m in modules for p in m.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_replay_buffer_fifo():
    buf = tr.ReplayBuffer(capacity=4)
    for i in range(7):
        buf.add(i)
    assert len(buf) == 4 and list(buf.store) == [3, 4, 5, 6]


def test_replay_buffer_uniform():
    buf = tr.ReplayBuffer(capacity=5)
    for i in range(5):
        buf.add(i)
    g = torch.Generator().manual_seed(0)
    counts = [0] * 5
    n = 5000
    for _ in range(n):
        counts[buf.sample(g)] += 1
    chi2 = sum((c - n / 5) ** 2 / (n / 5) for c in counts)
    assert chi2 < 18.5  # 0.999 quantile, 4 dof


def test_replay_buffer_pairs_in_range():
    p = tiny_problem()
    nets = small_nets()
    r = simulate(nets, p, TimeGrid(p.T, 5), 6, 0)
    buf = tr.ReplayBuffer(2)
    buf.add(r)
    got, steps, samples = buf.sample_pairs(100, torch.Generator().manual_seed(1))
    assert got is r and steps.max() < 5 and samples.max() < 6


def test_replay_buffer_validation():
    with pytest.raises(ValueError):
        tr.ReplayBuffer(0)
    with pytest.raises(ValueError):
        tr.ReplayBuffer(2).sample(torch.Generator())


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        tr.TrainConfig(K=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(mode="nope")
    with pytest.raises(ValueError):
        tr.TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        tr.TrainConfig(net_dtype="float16")
    assert tr.TrainConfig(net_dtype="float32").network_spec(2).dtype == "float32"
    cfg = tr.TrainConfig(K=3, betas=(0.8, 0.9), boundary_aware=False)
    assert cfg.td_mode == "single"
    assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_step_size_leaves_parameters():
    p = tiny_problem()
    cfg = tr.TrainConfig(K=1, n_stages=1, lr_policy=0.0, lr_critic=0.0, **TINY)
    state = tr.TrainState.create(p, cfg, small_nets())
    before = snapshot(state.nets.side_modules("phi") + state.nets.side_modules("theta"))
    tr.train_stage_phi(state)
    assert len(state.buffer_fwd) == 1 and len(state.buffer_bwd) == 0
    tr.train_stage_theta(state)
    assert len(state.buffer_bwd) == 1
    after = snapshot(state.nets.side_modules("phi") + state.nets.side_modules("theta"))
    assert same(before, after)


@pytest.mark.parametrize("mode", ["actor_critic", "critic"])
def test_stage_isolation(mode):
    p = tiny_problem("vneck")
    cfg = tr.TrainConfig(K=2, n_stages=1, mode=mode, **TINY)
    state = tr.TrainState.create(p, cfg, small_nets(mode=mode))
    n = state.nets
    theta = snapshot(n.side_modules("theta") + [n.Y_ema])
    phi = snapshot(n.side_modules("phi") + [n.Yhat_ema])
    tr.train_stage_phi(state)
    assert same(theta, snapshot(n.side_modules("theta") + [n.Y_ema]))
    assert not same(phi, snapshot(n.side_modules("phi") + [n.Yhat_ema]))
    phi = snapshot(n.side_modules("phi") + [n.Yhat_ema])
    tr.train_stage_theta(state)
    assert same(phi, snapshot(n.side_modules("phi") + [n.Yhat_ema]))


def test_ema_follows_each_step():
    p = tiny_problem()
    cfg = tr.TrainConfig(K=1, n_stages=1, ema_rate=0.5, **TINY)
    state = tr.TrainState.create(p, cfg, small_nets())
    ema_before = snapshot([state.nets.Yhat_ema])
    tr.train_stage_phi(state)
    online = snapshot([state.nets.Yhat])
    for e0, o, e1 in zip(ema_before, online, snapshot([state.nets.Yhat_ema])):
        assert torch.allclose(e1, 0.5 * e0 + 0.5 * o)


def test_alternation_order_and_step_count(monkeypatch):
    calls = []
    real = tr.simulate

    def spy(nets, problem, grid, batch, seed, direction, **kw):
        calls.append(("rollout", direction))
        return real(nets, problem, grid, batch, seed, direction, **kw)

    real_side = tr.side_loss

    def spy_side(state, on, off):
        calls.append(("update", on.side))
        assert off.direction == on.direction
        return real_side(state, on, off)

    monkeypatch.setattr(tr, "simulate", spy)
    monkeypatch.setattr(tr, "side_loss", spy_side)
    p = tiny_problem()
    cfg = tr.TrainConfig(K=2, n_stages=2, eval_every=0, **TINY)
    res = tr.run_training(p, cfg, small_nets())
    stage = [("rollout", "forward"), ("update", "phi"), ("update", "phi"),
             ("rollout", "backward"), ("update", "theta"), ("update", "theta")]
    assert calls == stage * 2
    assert res.nets.step == 2 * cfg.K * cfg.n_stages
    assert len(res.loss_log) == 2 * cfg.K * cfg.n_stages


def test_off_policy_rollouts_only_feed_td(monkeypatch):
    seen = {"ipf": [], "fk": []}
    real_ipf, real_fk = ob.loss_ipf, ob.loss_fk
    monkeypatch.setattr(ob, "loss_ipf", lambda r, *a, **k: seen["ipf"].append(r) or real_ipf(r, *a, **k))
    monkeypatch.setattr(ob, "loss_fk", lambda r, *a, **k: seen["fk"].append(r) or real_fk(r, *a, **k))
    p = tiny_problem()
    cfg = tr.TrainConfig(K=3, n_stages=2, eval_every=0, **TINY)
    state = tr.TrainState.create(p, cfg, small_nets())
    for _ in range(2):
        tr.train_stage_phi(state)
        on = state.buffer_fwd.store[-1]
        assert all(r is on for r in seen["ipf"] + seen["fk"])
        seen["ipf"].clear()
        seen["fk"].clear()


def test_nan_loss_aborts(monkeypatch):
    monkeypatch.setattr(ob, "loss_ipf", lambda *a, **k: torch.tensor(float("nan"), dtype=D, requires_grad=True))
    p = tiny_problem()
    cfg = tr.TrainConfig(K=1, n_stages=1, **TINY)
    with pytest.raises(tr.TrainingError, match="non-finite"):
        tr.run_training(p, cfg, small_nets())


def test_zero_stages_returns_initial_networks():
    p = tiny_problem()
    nets = small_nets()
    before = snapshot(nets.side_modules("theta") + nets.side_modules("phi"))
    res = tr.run_training(p, tr.TrainConfig(K=1, n_stages=0, **TINY), nets)
    assert res.history == [] and same(before, snapshot(res.nets.side_modules("theta") + res.nets.side_modules("phi")))


def test_seed_determinism():
    p = tiny_problem("stunnel")
    cfg = tr.TrainConfig(K=2, n_stages=2, seed=5, **TINY)
    a = tr.run_training(p, cfg)
    b = tr.run_training(p, cfg)
    assert [r.to_json() for r in a.history] == [r.to_json() for r in b.history]
    assert a.loss_log == b.loss_log
    c = tr.run_training(p, tr.TrainConfig(K=2, n_stages=2, seed=6, **TINY))
    assert a.loss_log != c.loss_log


def test_metrics_emitted_every_stage():
    p = tiny_problem("opinion", T=0.06)
    seen = []
    res = tr.run_training(p, tr.TrainConfig(K=1, n_stages=3, **TINY),
                          callback=lambda s, r: seen.append((s.stage, r)))
    assert [s for s, _ in seen] == [0, 1, 2] and len(res.history) == 3
    assert res.history[0].directional_histogram is not None


def test_training_reduces_ipf_on_fixed_rollout():
    # a short phi-stage with a large step size should lower the objective it optimizes
    p = tiny_problem("gaussian", T=0.5, dt=0.05)
    cfg = tr.TrainConfig(K=30, n_stages=1, lr_policy=3e-3, lr_critic=3e-3, pair_batch=64, **{
        k: v for k, v in TINY.items() if k != "pair_batch"})
    state = tr.TrainState.create(p, cfg, small_nets())
    tr.train_stage_phi(state)
    ipf = [row["loss_ipf_phi"] for row in state.loss_log]
    assert sum(ipf[-5:]) / 5 < sum(ipf[:5]) / 5
