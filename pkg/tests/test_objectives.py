import math

import pytest
import torch
from torch import nn

from gsb import objectives as ob
from gsb.autodiff import backward
from gsb.dynamics import TimeGrid, simulate
from gsb.nets import NetworkSet
from gsb.problems import GaussianSpec, Geometry, make_problem

from conftest import small_nets

D = torch.float64


def rollouts(nets, problem, n_steps=12, batch=10, seed=0):
    g = TimeGrid(problem.T, n_steps)
    return (simulate(nets, problem, g, batch, seed, "forward"),
            simulate(nets, problem, g, batch, seed + 1, "backward"))


# ---------------------------------------------------------------------------
# norms


def test_huber_branches():
    r = torch.tensor([0.5, -0.5, 2.0, -3.0], dtype=D)
    assert torch.equal(ob.huber(r), torch.tensor([0.125, 0.125, 1.5, 2.5], dtype=D))


def test_loss_td_constant_residual_l1():
    vals = torch.full((11, 4), 2.0, dtype=D)
    tgt = torch.full((11, 4), 1.25, dtype=D)
    assert ob.loss_td(vals, tgt, 1.0, "l1").item() == pytest.approx(0.75)
    assert ob.loss_td(vals, tgt, 3.0, "l1").item() == pytest.approx(2.25)


def test_loss_td_shape_mismatch():
    with pytest.raises(ValueError):
        ob.loss_td(torch.zeros(3, 2, dtype=D), torch.zeros(3, 3, dtype=D), 1.0)


# ---------------------------------------------------------------------------
# IPF


@pytest.mark.parametrize("mode", ["actor_critic", "critic"])
def test_ipf_does_not_depend_on_interaction(mode):
    base = make_problem("vneck", T=0.5)
    nets = small_nets(mode=mode)
    fwd, bwd = rollouts(nets, base)
    variants = [base.with_(interactions=[]),
                base.with_(interactions=["entropy"]),
                base.with_(interactions=["obstacle"], geometry=Geometry("v_neck").to_dict()),
                base.with_(interactions=["congestion"])]
    for r in (fwd, bwd):
        vals = [ob.loss_ipf(r, nets, p).item() for p in variants]
        for v in vals[1:]:
            assert abs(v - vals[0]) <= 1e-12 * abs(vals[0])


def test_ipf_integrand_by_hand():
    nets = small_nets()
    p = make_problem("gaussian")
    fwd, _ = rollouts(nets, p)
    steps, samples = torch.tensor([0, 3, 7]), torch.tensor([1, 4, 9])
    got = ob.ipf_integrand(fwd, nets, p, steps, samples)
    x, t = fwd.X[steps, samples], fwd.times()[steps]
    zh = nets.Zhat(x, t)
    h = 1e-6
    div = torch.zeros(3, dtype=D)
    with torch.no_grad():
        for i in range(2):
            e = torch.zeros(2, dtype=D)
            e[i] = h
            div += (nets.Zhat(x + e, t)[:, i] - nets.Zhat(x - e, t)[:, i]) / (2 * h)
    ref = 0.5 * (zh ** 2).sum(-1) + (zh * fwd.Z[steps, samples]).sum(-1) + nets.sigma * div
    assert torch.allclose(got, ref, rtol=1e-6, atol=1e-8)


def test_ipf_direction_checks(nets2):
    fwd, bwd = rollouts(nets2, make_problem("gaussian"))
    with pytest.raises(ValueError):
        ob.loss_ipf_phi(bwd, nets2, make_problem("gaussian"))
    with pytest.raises(ValueError):
        ob.loss_ipf_theta(fwd, nets2, make_problem("gaussian"))


def test_ipf_gradient_isolated_to_own_side(nets2):
    p = make_problem("gaussian")
    fwd, _ = rollouts(nets2, p)
    loss = ob.loss_ipf_phi(fwd, nets2, p)
    g_theta = backward(loss, [q for m in nets2.side_modules("theta") for q in m.parameters()])
    g_phi = backward(loss, [q for m in nets2.side_modules("phi") for q in m.parameters()])
    assert all(g.abs().sum() == 0 for g in g_theta)
    assert sum(g.abs().sum() for g in g_phi) > 0


# ---------------------------------------------------------------------------
# TD targets


@pytest.mark.parametrize("name", ["vneck", "stunnel", "opinion"])
def test_multi_step_targets_telescope(name):
    p = make_problem(name, T=0.3)
    nets = small_nets(seed=3)
    for r in rollouts(nets, p, n_steps=15, batch=12, seed=4):
        samples = torch.arange(6)
        multi = ob.td_targets(r, nets, p, samples, "multi")
        single = ob.td_targets(r, nets, p, samples, "single")
        assert torch.equal(multi.increments, single.increments)
        diff = multi.values - multi.values[0]
        cum = torch.cat([torch.zeros(1, 6, dtype=D), torch.cumsum(single.increments, 0)])
        assert torch.allclose(diff, cum, rtol=0, atol=1e-12 * max(1.0, cum.abs().max().item()))


def test_single_step_target_is_ema_value_plus_increment(nets2):
    p = make_problem("gaussian")
    fwd, _ = rollouts(nets2, p)
    s = torch.arange(5)
    tg = ob.td_targets(fwd, nets2, p, s, "single")
    N = fwd.grid.n_steps
    ema = nets2.Yhat_ema(fwd.X[:N, s].reshape(-1, 2), fwd.times()[:N].repeat_interleave(5)).reshape(N, 5)
    assert torch.allclose(tg.values[1:], ema + tg.increments, atol=1e-13)


def _fd_div(field, x, t, h=1e-6):
    out = torch.zeros(x.shape[0], dtype=D)
    for i in range(x.shape[1]):
        e = torch.zeros(x.shape[1], dtype=D)
        e[i] = h
        out += (field(x + e, t)[:, i] - field(x - e, t)[:, i]) / (2 * h)
    return out


def test_increments_against_independent_recomputation():
    # congestion uses the step population; drift and divergence recomputed here by hand
    p = make_problem("stunnel", T=0.2)
    nets = small_nets(seed=8)
    fwd, bwd = rollouts(nets, p, n_steps=6, batch=9, seed=2)
    s = torch.tensor([0, 4, 7])
    with torch.no_grad():
        for r, own, other_sign in ((fwd, nets.Zhat, -1.0), (bwd, nets.Z, 1.0)):
            inc, _ = ob.td_increments(r, nets, p, s)
            for k in range(r.grid.n_steps):
                x, t = r.X[k, s], r.times()[k]
                z = own(x, t)
                zo = r.Z[k, s]
                div = nets.sigma * _fd_div(own, x, t)
                F = p.interaction(x, r.X[k])
                drift = 0.5 * (z * z).sum(-1) + div + (z * zo).sum(-1) - F
                ref = drift * r.grid.dt + (z * r.dW[k, s]).sum(-1)
                assert torch.allclose(inc[k], ref, rtol=1e-6, atol=1e-7)


def test_boundary_anchor_uses_log_density(nets2):
    p = make_problem("vneck")
    fwd, bwd = rollouts(nets2, p)
    s = torch.arange(4)
    with torch.no_grad():
        a_f = p.rho0.log_density(fwd.X[0, s]) - nets2.Y_ema(fwd.X[0, s], 0.0)
        a_b = p.rho_target.log_density(bwd.X[0, s]) - nets2.Yhat_ema(bwd.X[0, s], p.T)
    assert torch.allclose(ob.td_targets(fwd, nets2, p, s).values[0], a_f)
    assert torch.allclose(ob.td_targets(bwd, nets2, p, s).values[0], a_b)


def test_boundary_free_targets_skip_first_row(nets2):
    p = make_problem("gaussian")
    fwd, _ = rollouts(nets2, p)
    tg = ob.td_targets(fwd, nets2, p, torch.arange(3), "single", boundary_aware=False)
    assert tg.start == 1
    vals = ob.value_series(fwd, nets2, torch.arange(3)).detach()
    shifted = vals.clone()
    shifted[0] += 100.0
    assert ob.loss_td(shifted, tg, 1.0).item() == ob.loss_td(vals, tg, 1.0).item()


def test_td_gradient_only_into_online_value_net(nets2):
    p = make_problem("gaussian")
    _, bwd = rollouts(nets2, p)
    s = torch.arange(4)
    tg = ob.td_targets(bwd, nets2, p, s)
    loss = ob.loss_td(ob.value_series(bwd, nets2, s), tg, p.T)
    groups = {"Y": nets2.Y, "Z": nets2.Z, "Yhat": nets2.Yhat, "Zhat": nets2.Zhat,
              "Y_ema": nets2.Y_ema, "Yhat_ema": nets2.Yhat_ema}
    for name, m in groups.items():
        params = list(m.parameters())
        if name == "Y_ema" or name == "Yhat_ema":
            assert not any(q.requires_grad for q in params)
            continue
        grads = backward(loss, params) if loss.requires_grad else []
        total = sum(g.abs().sum().item() for g in grads)
        assert (total > 0) == (name == "Y"), name


def test_unknown_td_mode(nets2):
    fwd, _ = rollouts(nets2, make_problem("gaussian"))
    with pytest.raises(ValueError):
        ob.td_targets(fwd, nets2, make_problem("gaussian"), mode="triple")


# ---------------------------------------------------------------------------
# FK


def test_fk_residual_quadratic_value():
    class Quad(nn.Module):
        def forward(self, x, t):
            return 0.5 * (x * x).sum(-1)

    class Zero(nn.Module):
        def forward(self, x, t):
            return torch.zeros_like(x)

    nets = NetworkSet(Quad(), Quad(), Zero(), Zero(), sigma=1.0)
    x = torch.tensor([[3.0, 4.0], [0.0, -1.0]], dtype=D)
    r = ob.fk_residual(nets, "theta", x, 0.0)
    assert torch.allclose(r.norm(dim=-1), torch.tensor([5.0, 1.0], dtype=D))


def test_fk_undefined_in_critic_mode():
    nets = small_nets(mode="critic")
    with pytest.raises(ValueError):
        ob.fk_residual(nets, "theta", torch.zeros(2, 2, dtype=D), 0.0)


# ---------------------------------------------------------------------------
# exact discrete fixed point on a 1-D toy


class LinearValue(nn.Module):
    """V(x, t) = a x + s * sigma^2 a^2 t / 2 with s = +1 (Yhat) or -1 (Y)."""

    def __init__(self, a, sigma, sign):
        super().__init__()
        self.a, self.sigma, self.sign = a, sigma, sign

    def forward(self, x, t):
        t = torch.as_tensor(t, dtype=D)
        return self.a * x[:, 0] + self.sign * 0.5 * self.sigma ** 2 * self.a ** 2 * t


class ConstField(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = c

    def forward(self, x, t):
        return 0.0 * x + self.c


@pytest.mark.parametrize("mode", ["single", "multi"])
def test_linear_fixed_point_zero_losses(mode):
    sigma, a, c = 0.8, 0.7, -0.4
    p = make_problem("gaussian", d=1, sigma=sigma, T=1.0, rho0=GaussianSpec((0.0,), (1.0,)),
                     rho_target=GaussianSpec((0.0,), (2.0,)))
    nets = NetworkSet(LinearValue(c, sigma, -1), LinearValue(a, sigma, +1),
                      ConstField(sigma * c), ConstField(sigma * a), sigma=sigma)
    const = 0.5 * (sigma * a) ** 2 + sigma ** 2 * a * c
    const_theta = 0.5 * (sigma * c) ** 2 + sigma ** 2 * a * c
    for seed in range(3):
        fwd, bwd = rollouts(nets, p, n_steps=40, batch=64, seed=seed)
        s = torch.arange(64)
        for r in (fwd, bwd):
            tg = ob.td_targets(r, nets, p, s, mode, boundary_aware=False)
            tg.start = 0
            assert ob.loss_td(ob.value_series(r, nets, s), tg, p.T).item() < 1e-8
            assert ob.loss_fk(r, nets).item() < 1e-8
        assert ob.loss_ipf(fwd, nets, p).item() == pytest.approx(p.T * const, abs=1e-8)
        assert ob.loss_ipf(bwd, nets, p).item() == pytest.approx(p.T * const_theta, abs=1e-8)


class Identity(nn.Module):
    def forward(self, x, t):
        return x


class ZeroVec(nn.Module):
    def forward(self, x, t):
        return 0.0 * x


class ZeroScalar(nn.Module):
    def forward(self, x, t):
        return 0.0 * x.sum(-1)


def test_ipf_worked_examples():
    p = make_problem("vneck", T=0.2)  # constant drift: divergence zero
    zero = NetworkSet(ZeroScalar(), ZeroScalar(), ZeroVec(), ZeroVec(), sigma=1.0)
    g = TimeGrid(p.T, 10)
    fwd = simulate(zero, p, g, 16, 0, "forward")
    assert ob.loss_ipf(fwd, zero, p).item() == 0.0
    ident = NetworkSet(ZeroScalar(), ZeroScalar(), ZeroVec(), Identity(), sigma=1.0)
    q = make_problem("gaussian")
    fwd = simulate(ident, q, TimeGrid(1.0, 10), 16, 0, "forward")
    steps, samples = ob.all_pairs(fwd)
    got = ob.ipf_integrand(fwd, ident, q, steps, samples)
    x = fwd.X[steps, samples]
    assert torch.allclose(got, 0.5 * (x * x).sum(-1) + 2.0, atol=1e-12)


def test_zero_networks_boundary_free_targets_constant():
    p = make_problem("gaussian")
    zero = NetworkSet(ZeroScalar(), ZeroScalar(), ZeroVec(), ZeroVec(), sigma=1.0)
    fwd = simulate(zero, p, TimeGrid(1.0, 10), 8, 0, "forward")
    for mode in ("single", "multi"):
        tg = ob.td_targets(fwd, zero, p, torch.arange(8), mode, boundary_aware=False)
        assert torch.equal(tg.values, torch.zeros_like(tg.values))


def test_targets_unchanged_by_online_perturbation_of_other_side():
    p = make_problem("vneck", T=0.2)
    nets = small_nets(seed=2)
    fwd, _ = rollouts(nets, p)
    s = torch.arange(5)
    before = ob.td_targets(fwd, nets, p, s).values.clone()
    with torch.no_grad():
        for m in nets.side_modules("theta"):
            for q in m.parameters():
                q.add_(0.3)
    assert torch.equal(ob.td_targets(fwd, nets, p, s).values, before)


def test_fk_zero_when_policy_is_scaled_value_gradient():
    nets = small_nets(seed=4)
    sigma = 1.3
    Y = nets.Y

    class GradPolicy(nn.Module):
        def forward(self, x, t):
            from gsb.autodiff import input_gradient
            return sigma * input_gradient(Y, x, t, create_graph=True)

    ac = NetworkSet(Y, nets.Yhat, GradPolicy(), nets.Zhat, sigma=sigma)
    x = torch.randn(6, 2, dtype=D)
    assert ob.fk_residual(ac, "theta", x, 0.3).abs().max().item() < 1e-12
