"""Euler-Maruyama rollouts of the controlled forward/backward SDEs and the
dt-coefficients of the value processes along them."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from . import DTYPE

MAX_ABS_STATE = 1e6


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if self.T <= 0 or self.n_steps < 1:
            raise ValueError("need T > 0 and n_steps >= 1")

    @classmethod
    def from_dt(cls, T: float, dt: float) -> "TimeGrid":
        return cls(T, int(round(T / dt)))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    def times(self) -> torch.Tensor:
        return torch.arange(self.n_steps + 1, dtype=DTYPE) * self.dt

    def t(self, k: int, direction: str = "forward") -> float:
        """Network time argument at grid index k; backward rollouts run on s = T - t."""
        return k * self.dt if direction == "forward" else self.T - k * self.dt


@dataclass(frozen=True)
class Rollout:
    direction: str            # "forward" (X^theta, starts at rho0) or "backward" (Xbar^phi, starts at rho_target)
    X: torch.Tensor           # [N+1, B, d]
    Z: torch.Tensor           # [N+1, B, d] policy outputs (Z_theta forward, Zhat_phi backward)
    dW: torch.Tensor          # [N, B, d]
    grid: TimeGrid
    xi: torch.Tensor | None = None   # [N, d] information vectors for the party drift
    stage: int = 0

    @property
    def batch(self) -> int:
        return self.X.shape[1]

    @property
    def side(self) -> str:
        """Which parameters this rollout trains: forward rollouts train phi."""
        return "phi" if self.direction == "forward" else "theta"

    def times(self) -> torch.Tensor:
        ts = self.grid.times()
        return ts if self.direction == "forward" else self.grid.T - ts


def _policy_side(direction: str) -> str:
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    return "theta" if direction == "forward" else "phi"


def simulate(nets, problem, grid: TimeGrid, batch: int, seed, direction: str = "forward",
             stage: int = 0, x0: torch.Tensor | None = None) -> Rollout:
    """Sample one rollout.  Forward: dX = (f + sigma Z) dt + sigma dW from rho0.
    Backward: dXbar = (-f + sigma Zhat) ds + sigma dW from rho_target.

    The base drift sees the current batch as the population.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    side = _policy_side(direction)
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    N, dt, sigma = grid.n_steps, grid.dt, problem.sigma
    boundary = problem.rho0 if direction == "forward" else problem.rho_target
    x = boundary.sample(batch, gen) if x0 is None else x0.to(DTYPE).clone()
    dW = torch.randn(N, batch, problem.d, generator=gen, dtype=DTYPE) * math.sqrt(dt)
    xi = torch.stack([problem.sample_xi(gen) for _ in range(N)]) if problem.needs_xi else None
    sign = 1.0 if direction == "forward" else -1.0

    X = torch.empty(N + 1, batch, problem.d, dtype=DTYPE)
    Z = torch.empty_like(X)
    X[0] = x
    for k in range(N):
        t = grid.t(k, direction)
        z = nets.policy(side, x, t)
        f = problem.base_drift(x, x, None if xi is None else xi[k])
        x = x + (sign * f + sigma * z) * dt + sigma * dW[k]
        bad = not torch.isfinite(x).all()
        big = x.abs().max().item() if not bad else float("nan")
        if bad or big > MAX_ABS_STATE:
            raise SimulationError(f"{direction} rollout diverged at step {k + 1}: max|X| = {big}")
        Z[k] = z
        X[k + 1] = x
    Z[N] = nets.policy(side, x, grid.t(N, direction))
    return Rollout(direction, X, Z, dW, grid, xi, stage)


def simulate_forward(nets, problem, grid, batch, seed, **kw) -> Rollout:
    return simulate(nets, problem, grid, batch, seed, "forward", **kw)


def simulate_backward(nets, problem, grid, batch, seed, **kw) -> Rollout:
    return simulate(nets, problem, grid, batch, seed, "backward", **kw)


def replay(rollout: Rollout, problem) -> torch.Tensor:
    """Rebuild the states from X_0, the stored policy outputs and noise."""
    sign = 1.0 if rollout.direction == "forward" else -1.0
    dt, sigma = rollout.grid.dt, problem.sigma
    x = rollout.X[0].clone()
    out = [x]
    for k in range(rollout.grid.n_steps):
        f = problem.base_drift(x, x, None if rollout.xi is None else rollout.xi[k])
        x = x + (sign * f + sigma * rollout.Z[k]) * dt + sigma * rollout.dW[k]
        out.append(x)
    return torch.stack(out)


# dt-coefficients of the value processes ------------------------------------

def _sq(v: torch.Tensor) -> torch.Tensor:
    return (v * v).sum(-1)


def _dot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-1)


def drift_Y_forward(Z: torch.Tensor, F: torch.Tensor) -> torch.Tensor:
    """dY_t = (|Z|^2 / 2 + F) dt + Z^T dW."""
    return 0.5 * _sq(Z) + F


def drift_Yhat_forward(Z: torch.Tensor, Zhat: torch.Tensor, div_term: torch.Tensor,
                       F: torch.Tensor) -> torch.Tensor:
    """dYhat_t = (|Zhat|^2 / 2 + div(sigma Zhat - f) + Zhat^T Z - F) dt + Zhat^T dW."""
    return 0.5 * _sq(Zhat) + div_term + _dot(Zhat, Z) - F


def drift_Y_backward(Z: torch.Tensor, Zhat: torch.Tensor, div_term: torch.Tensor,
                     F: torch.Tensor) -> torch.Tensor:
    """dY_s = (|Z|^2 / 2 + div(sigma Z + f) + Z^T Zhat - F) ds + Z^T dW."""
    return 0.5 * _sq(Z) + div_term + _dot(Z, Zhat) - F


def drift_Yhat_backward(Zhat: torch.Tensor, F: torch.Tensor) -> torch.Tensor:
    """dYhat_s = (|Zhat|^2 / 2 + F) ds + Zhat^T dW."""
    return 0.5 * _sq(Zhat) + F


def export_snapshots(rollout: Rollout, path, steps=None) -> Path:
    """CSV with columns step, sample_id, x_1..x_d for the chosen grid indices."""
    path = Path(path)
    N = rollout.grid.n_steps
    if steps is None:
        steps = snapshot_steps(N)
    d = rollout.X.shape[-1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "sample_id"] + [f"x_{i + 1}" for i in range(d)])
        for k in steps:
            for b, row in enumerate(rollout.X[k].tolist()):
                w.writerow([k, b] + [repr(v) for v in row])
    return path


def snapshot_steps(n_steps: int, count: int = 5) -> list[int]:
    """``count`` evenly spaced grid indices including 0 and n_steps."""
    return [round(i * n_steps / (count - 1)) for i in range(count)]
