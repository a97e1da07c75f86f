"""Training objectives evaluated on stored rollouts.

A forward rollout (X^theta, Z^theta, dW) trains the phi side (Yhat, Zhat); a
backward rollout (Xbar^phi, Zhat^phi, dW) trains the theta side (Y, Z).  The
stored policy of the opposite side is treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .autodiff import default_divergence_mode, input_gradient, value_and_divergence
from .dynamics import Rollout, drift_Y_backward, drift_Yhat_forward


def huber(r: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    a = r.abs()
    return torch.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def pointwise_norm(r: torch.Tensor, norm: str, vector: bool = False) -> torch.Tensor:
    """Elementwise huber/l1 penalty, summed over the last axis for vectors."""
    if norm == "huber":
        out = huber(r)
    elif norm == "l1":
        out = r.abs()
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return out.sum(-1) if vector else out


def _check_direction(rollout: Rollout, direction: str) -> None:
    if rollout.direction != direction:
        raise ValueError(f"expected a {direction} rollout, got {rollout.direction}")


def _gather(rollout: Rollout, steps: torch.Tensor, samples: torch.Tensor):
    times = rollout.times()
    return rollout.X[steps, samples], times[steps], rollout.Z[steps, samples]


def _div_sign(side: str) -> float:
    # div(sigma Zhat - f) on the phi side, div(sigma Z + f) on the theta side
    return -1.0 if side == "phi" else 1.0


def all_pairs(rollout: Rollout, last: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Every (step, sample) index pair; steps 0..N-1 unless ``last``."""
    n = rollout.grid.n_steps + (1 if last else 0)
    steps = torch.arange(n).repeat_interleave(rollout.batch)
    samples = torch.arange(rollout.batch).repeat(n)
    return steps, samples


def ipf_integrand(rollout: Rollout, nets, problem, steps, samples, div_mode=None,
                  n_probes: int = 8, generator=None) -> torch.Tensor:
    side = rollout.side
    x, t, other = _gather(rollout, steps, samples)
    mode = div_mode or default_divergence_mode(problem.d)
    z, div = value_and_divergence(nets.policy_fn(side), x, t, mode, n_probes, generator,
                                  create_graph=True)
    div_term = nets.sigma * div + _div_sign(side) * problem.drift_divergence(x)
    return 0.5 * (z * z).sum(-1) + (z * other).sum(-1) + div_term


def loss_ipf(rollout: Rollout, nets, problem, steps=None, samples=None, **kw) -> torch.Tensor:
    """Time-integrated mean of the IPF integrand over (step, sample) pairs
    (left Riemann sum on steps 0..N-1; a uniform subsample estimates it)."""
    if steps is None:
        steps, samples = all_pairs(rollout)
    return rollout.grid.T * ipf_integrand(rollout, nets, problem, steps, samples, **kw).mean()


def loss_ipf_phi(rollout: Rollout, nets, problem, steps=None, samples=None, **kw) -> torch.Tensor:
    _check_direction(rollout, "forward")
    return loss_ipf(rollout, nets, problem, steps, samples, **kw)


def loss_ipf_theta(rollout: Rollout, nets, problem, steps=None, samples=None, **kw) -> torch.Tensor:
    _check_direction(rollout, "backward")
    return loss_ipf(rollout, nets, problem, steps, samples, **kw)


# ---------------------------------------------------------------------------
# TD targets


@dataclass
class TdTargetSeries:
    mode: str                 # "single" | "multi"
    values: torch.Tensor      # [N+1, m]; row k is the target at grid index k
    start: int                # first grid index that carries a target
    boundary_aware: bool
    increments: torch.Tensor  # [N, m] single-step increments delta Y_k
    samples: torch.Tensor     # [m] sample ids in the rollout


def _population_interaction(problem, x, pops, log_rho):
    """F at x [N, m, d] with the step-k batch pops[k] [B, d] as population."""
    N, m, d = x.shape
    flat = x.reshape(N * m, d)
    F = torch.zeros(N * m, dtype=x.dtype)
    if "entropy" in problem.interactions:
        F = F + log_rho + 1.0
    if "congestion" in problem.interactions:
        sq = torch.cdist(x, pops) ** 2
        F = F + (2.0 / (sq + 1.0)).mean(-1).reshape(-1)
    if "obstacle" in problem.interactions:
        from .problems import F_obstacle
        F = F + F_obstacle(flat, problem.geometry)
    return F


@torch.no_grad()
def _ema_values(net, x, t):
    return net(x, t)


def td_increments(rollout: Rollout, nets, problem, samples: torch.Tensor, div_mode=None,
                  n_probes: int = 8, generator=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-step increments delta_k = drift_k dt + z_k^T dW_k ([N, m]) and the
    EMA value network at steps 0..N-1 ([N, m]).  All detached."""
    side = rollout.side
    N, dt, sigma = rollout.grid.n_steps, rollout.grid.dt, nets.sigma
    m = samples.shape[0]
    d = problem.d
    x3 = rollout.X[:N][:, samples]
    x = x3.reshape(N * m, d)
    t = rollout.times()[:N].repeat_interleave(m)
    other = rollout.Z[:N][:, samples].reshape(N * m, d)
    dW = rollout.dW[:, samples].reshape(N * m, d)
    mode = div_mode or default_divergence_mode(d)
    z, div = value_and_divergence(nets.policy_fn(side, target=True), x, t, mode, n_probes,
                                  generator, create_graph=False)
    div_term = sigma * div + _div_sign(side) * problem.drift_divergence(x)
    own_ema = nets.value_net(side, target=True)
    v_ema = _ema_values(own_ema, x, t)
    log_rho = None
    if problem.needs_log_rho:
        other_ema = nets.value_net("theta" if side == "phi" else "phi", target=True)
        log_rho = v_ema + _ema_values(other_ema, x, t)
    F = _population_interaction(problem, x3, rollout.X[:N], log_rho)
    if side == "phi":
        drift = drift_Yhat_forward(other, z, div_term, F)
    else:
        drift = drift_Y_backward(z, other, div_term, F)
    inc = drift * dt + (z * dW).sum(-1)
    return inc.reshape(N, m).detach(), v_ema.reshape(N, m).detach()


@torch.no_grad()
def boundary_anchor(rollout: Rollout, nets, problem, samples: torch.Tensor) -> torch.Tensor:
    """log rho0 - Y(X_0, 0) on forward rollouts, log rho_target - Yhat(Xbar_0, T) on backward."""
    x0 = rollout.X[0, samples]
    t0 = rollout.times()[0]
    if rollout.side == "phi":
        return problem.rho0.log_density(x0) - nets.value_net("theta", target=True)(x0, t0)
    return problem.rho_target.log_density(x0) - nets.value_net("phi", target=True)(x0, t0)


def td_targets(rollout: Rollout, nets, problem, samples=None, mode: str = "multi",
               boundary_aware: bool = True, **kw) -> TdTargetSeries:
    if mode not in ("single", "multi"):
        raise ValueError(f"unknown TD mode {mode!r}")
    if samples is None:
        samples = torch.arange(rollout.batch)
    inc, v_ema = td_increments(rollout, nets, problem, samples, **kw)
    N = rollout.grid.n_steps
    values = torch.empty(N + 1, samples.shape[0], dtype=inc.dtype)
    if boundary_aware:
        anchor = boundary_anchor(rollout, nets, problem, samples)
    else:
        anchor = v_ema[0]
    values[0] = anchor
    if mode == "multi":
        values[1:] = anchor + torch.cumsum(inc, 0)
    else:
        values[1:] = v_ema + inc
    start = 0 if boundary_aware else 1
    return TdTargetSeries(mode, values, start, boundary_aware, inc, samples)


def td_targets_phi(rollout, nets, problem, samples=None, mode="multi", boundary_aware=True, **kw):
    _check_direction(rollout, "forward")
    return td_targets(rollout, nets, problem, samples, mode, boundary_aware, **kw)


def td_targets_theta(rollout, nets, problem, samples=None, mode="multi", boundary_aware=True, **kw):
    _check_direction(rollout, "backward")
    return td_targets(rollout, nets, problem, samples, mode, boundary_aware, **kw)


def value_series(rollout: Rollout, nets, samples: torch.Tensor, target: bool = False) -> torch.Tensor:
    """Online (or EMA) value network of the rollout's side at every grid point, [N+1, m]."""
    net = nets.value_net(rollout.side, target)
    N = rollout.grid.n_steps
    m = samples.shape[0]
    x = rollout.X[:, samples].reshape((N + 1) * m, -1)
    t = rollout.times().repeat_interleave(m)
    return net(x, t).reshape(N + 1, m)


def loss_td(values: torch.Tensor, targets: TdTargetSeries | torch.Tensor, T: float,
            norm: str = "huber", start: int | None = None) -> torch.Tensor:
    """T times the mean penalty of ``values - targets`` over grid rows ``start..N``."""
    if isinstance(targets, TdTargetSeries):
        start = targets.start if start is None else start
        targets = targets.values
    start = start or 0
    if values.shape != targets.shape:
        raise ValueError(f"series shapes differ: {tuple(values.shape)} vs {tuple(targets.shape)}")
    r = values[start:] - targets[start:].detach()
    return T * pointwise_norm(r, norm).mean()


def fk_residual(nets, side: str, x: torch.Tensor, t) -> torch.Tensor:
    """sigma * grad V(x, t) - policy(x, t), differentiable in both networks."""
    if nets.mode != "actor_critic":
        raise ValueError("FK loss is defined only for the actor-critic parametrization")
    grad = input_gradient(nets.value_net(side), x, t, create_graph=True)
    policy = nets.Z if side == "theta" else nets.Zhat
    return nets.sigma * grad - policy(x, t)


def loss_fk(rollout: Rollout, nets, steps=None, samples=None, norm: str = "huber") -> torch.Tensor:
    if steps is None:
        steps, samples = all_pairs(rollout)
    x, t, _ = _gather(rollout, steps, samples)
    r = fk_residual(nets, rollout.side, x, t)
    return rollout.grid.T * pointwise_norm(r, norm, vector=True).mean()
