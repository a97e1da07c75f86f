"""Alternating training: forward rollout -> K phi-updates -> backward rollout
-> K theta-updates, with replay buffers and EMA value targets."""

from __future__ import annotations

import logging
import random
import time
from collections import deque
from dataclasses import dataclass, field, asdict, fields

import torch

from . import objectives as ob
from .dynamics import TimeGrid, simulate
from .metrics import (MetricReport, directional_similarity, fbsde_violation, obstacle_mass,
                      sinkhorn_divergence)
from .nets import NetworkSet, NetworkSpec

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class ReplayBuffer:
    """FIFO store of rollouts for off-policy TD samples."""

    def __init__(self, capacity: int = 20):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.store: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.store)

    def add(self, rollout) -> None:
        self.store.append(rollout)

    def sample(self, generator: torch.Generator):
        if not self.store:
            raise ValueError("replay buffer is empty")
        i = int(torch.randint(0, len(self.store), (1,), generator=generator))
        return self.store[i]

    def sample_pairs(self, n: int, generator: torch.Generator):
        """Uniform rollout, then ``n`` uniform (step, sample) pairs from it."""
        r = self.sample(generator)
        steps = torch.randint(0, r.grid.n_steps, (n,), generator=generator)
        samples = torch.randint(0, r.batch, (n,), generator=generator)
        return r, steps, samples


@dataclass
class TrainConfig:
    mode: str = "actor_critic"
    K: int = 250
    n_stages: int = 40
    batch: int = 256                  # trajectories per rollout
    pair_batch: int = 512             # (step, sample) pairs for IPF / FK
    td_batch: int = 8                 # whole trajectories per TD term
    lr_policy: float = 1e-4
    lr_critic: float = 3e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    grad_clip: float | None = None
    ema_rate: float = 0.99
    w_ipf: float = 1.0
    w_td: float = 1.0
    w_fk: float = 1.0
    boundary_aware: bool = True
    td_mode: str = "multi"
    td_norm: str = "huber"
    fk_norm: str | None = None        # None: the problem's choice
    buffer_capacity: int = 20
    div_mode: str | None = None       # None: exact for d <= 3, Hutchinson otherwise
    n_probes: int = 8
    seed: int = 0
    eval_every: int = 1
    eval_batch: int = 1000
    eval_violation: bool = False
    hidden_policy: int = 256
    hidden_critic: int = 128
    hidden_critic_only: int = 200
    x_kind: str = "mlp"
    n_blocks: int = 5
    embed_dim: int = 128
    net_dtype: str = "float64"        # "float32" halves network cost; dynamics stay float64

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.n_stages < 0:
            raise ValueError("n_stages must be >= 0")
        if self.mode not in ("actor_critic", "critic"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.net_dtype not in ("float32", "float64"):
            raise ValueError(f"unknown network dtype {self.net_dtype!r}")
        self.betas = tuple(self.betas)
        if not self.boundary_aware:
            # without boundary densities only single-step targets are defined
            self.td_mode = "single"

    def network_spec(self, d: int) -> NetworkSpec:
        return NetworkSpec(d=d, mode=self.mode, policy_hidden=self.hidden_policy,
                           critic_hidden=self.hidden_critic, critic_only_hidden=self.hidden_critic_only,
                           x_kind=self.x_kind, n_blocks=self.n_blocks, embed_dim=self.embed_dim,
                           dtype=self.net_dtype)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, cfg: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(cfg) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**cfg)


def _optimizer(nets: NetworkSet, side: str, cfg: TrainConfig) -> torch.optim.Optimizer:
    value = nets.value_net(side)
    groups = [{"params": list(value.parameters()), "lr": cfg.lr_critic}]
    policy = nets.Z if side == "theta" else nets.Zhat
    if policy is not None:
        groups.append({"params": list(policy.parameters()), "lr": cfg.lr_policy})
    return torch.optim.AdamW(groups, weight_decay=cfg.weight_decay, betas=cfg.betas)


@dataclass
class TrainState:
    problem: object
    config: TrainConfig
    nets: NetworkSet
    grid: TimeGrid
    generator: torch.Generator
    opt_theta: torch.optim.Optimizer
    opt_phi: torch.optim.Optimizer
    buffer_fwd: ReplayBuffer
    buffer_bwd: ReplayBuffer
    stage: int = 0
    history: list = field(default_factory=list)
    loss_log: list = field(default_factory=list)

    @classmethod
    def create(cls, problem, config: TrainConfig, nets: NetworkSet | None = None) -> "TrainState":
        torch.manual_seed(config.seed)
        random.seed(config.seed)
        if nets is None:
            nets = NetworkSet.build(config.network_spec(problem.d), problem.sigma, seed=config.seed)
        gen = torch.Generator().manual_seed(config.seed + 1)
        grid = TimeGrid.from_dt(problem.T, problem.dt)
        return cls(problem, config, nets, grid, gen,
                   _optimizer(nets, "theta", config), _optimizer(nets, "phi", config),
                   ReplayBuffer(config.buffer_capacity), ReplayBuffer(config.buffer_capacity))

    def next_seed(self) -> int:
        return int(torch.randint(0, 2 ** 31 - 1, (1,), generator=self.generator))


LOSS_COLUMNS = ("stage", "step", "loss_ipf_theta", "loss_ipf_phi", "loss_td_theta",
                "loss_td_phi", "loss_fk_theta", "loss_fk_phi")


def side_loss(state: TrainState, on, off) -> tuple[torch.Tensor, dict]:
    """IPF + TD(on) + TD(off) + FK on one side; returns the total and its parts."""
    cfg, nets, problem, gen = state.config, state.nets, state.problem, state.generator
    steps = torch.randint(0, on.grid.n_steps, (cfg.pair_batch,), generator=gen)
    samples = torch.randint(0, on.batch, (cfg.pair_batch,), generator=gen)
    kw = dict(div_mode=cfg.div_mode, n_probes=cfg.n_probes, generator=gen)
    parts = {}
    parts["ipf"] = ob.loss_ipf(on, nets, problem, steps, samples, **kw)
    td = 0.0
    for r in (on, off):
        m = min(cfg.td_batch, r.batch)
        traj = torch.randperm(r.batch, generator=gen)[:m]
        targets = ob.td_targets(r, nets, problem, traj, cfg.td_mode, cfg.boundary_aware, **kw)
        values = ob.value_series(r, nets, traj)
        td = td + ob.loss_td(values, targets, r.grid.T, cfg.td_norm)
    parts["td"] = td
    total = cfg.w_ipf * parts["ipf"] + cfg.w_td * parts["td"]
    if nets.mode == "actor_critic":
        parts["fk"] = ob.loss_fk(on, nets, steps, samples, cfg.fk_norm or problem.fk_norm)
        total = total + cfg.w_fk * parts["fk"]
    return total, parts


def _train_stage(state: TrainState, side: str):
    cfg, nets = state.config, state.nets
    direction = "forward" if side == "phi" else "backward"
    buffer = state.buffer_fwd if side == "phi" else state.buffer_bwd
    opt = state.opt_phi if side == "phi" else state.opt_theta
    params = [p for m in nets.side_modules(side) for p in m.parameters()]
    with torch.no_grad():
        on = simulate(nets, state.problem, state.grid, cfg.batch, state.next_seed(), direction,
                      stage=state.stage)
    buffer.add(on)
    for k in range(cfg.K):
        off = buffer.sample(state.generator)
        loss, parts = side_loss(state, on, off)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite {side} loss at stage {state.stage}, iteration {k}: "
                                + ", ".join(f"{n}={float(torch.as_tensor(v).detach()):.4g}" for n, v in parts.items()))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        nets.update_ema(side, cfg.ema_rate)
        nets.step += 1
        row = {c: "" for c in LOSS_COLUMNS}
        row.update(stage=state.stage, step=nets.step)
        for n, v in parts.items():
            row[f"loss_{n}_{side}"] = float(v.detach()) if torch.is_tensor(v) else float(v)
        state.loss_log.append(row)
    return state


def train_stage_phi(state: TrainState) -> TrainState:
    return _train_stage(state, "phi")


def train_stage_theta(state: TrainState) -> TrainState:
    return _train_stage(state, "theta")


def evaluate(nets: NetworkSet, problem, seed: int, batch: int = 1000, stage: int = 0,
             violation: bool = False, grid: TimeGrid | None = None) -> MetricReport:
    """Sinkhorn distance of the forward terminal cloud to rho_target (and the
    backward terminal cloud to rho0), obstacle mass, optional FBSDE violation."""
    grid = grid or TimeGrid.from_dt(problem.T, problem.dt)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        fwd = simulate(nets, problem, grid, batch, gen, "forward", stage=stage)
        bwd = simulate(nets, problem, grid, batch, gen, "backward", stage=stage)
        target = problem.rho_target.sample(batch, gen)
        source = problem.rho0.sample(batch, gen)
    report = MetricReport(
        stage=stage,
        W2_sinkhorn=sinkhorn_divergence(fwd.X[-1], target),
        W2_backward=sinkhorn_divergence(bwd.X[-1], source),
        obstacle_mass=obstacle_mass(fwd, problem.geometry) if "obstacle" in problem.interactions else 0.0,
    )
    if problem.drift == "polarize":
        report.directional_histogram = asdict(directional_similarity(fwd.X[-1]))
    if violation:
        report.td_violation_theta, report.td_violation_phi, report.fk_violation = \
            fbsde_violation(nets, problem, fwd, bwd)
    return report


@dataclass
class TrainResult:
    nets: NetworkSet
    history: list
    loss_log: list
    state: TrainState


def run_training(problem, config: TrainConfig, nets: NetworkSet | None = None,
                 callback=None) -> TrainResult:
    """Alternate phi- and theta-stages ``config.n_stages`` times.

    ``callback(state, report)`` runs after every stage (report may be None
    when the stage is not evaluated).
    """
    state = TrainState.create(problem, config, nets)
    for stage in range(config.n_stages):
        state.stage = stage
        t0 = time.time()
        train_stage_phi(state)
        train_stage_theta(state)
        report = None
        if config.eval_every and ((stage + 1) % config.eval_every == 0 or stage + 1 == config.n_stages):
            report = evaluate(state.nets, problem, seed=config.seed + 1000 + stage,
                              batch=config.eval_batch, stage=stage, violation=config.eval_violation,
                              grid=state.grid)
            state.history.append(report)
            log.info("stage %d: W2=%.4f W2_bwd=%.4f obstacle=%.4f (%.1fs)", stage, report.W2_sinkhorn,
                     report.W2_backward, report.obstacle_mass, time.time() - t0)
        if callback is not None:
            callback(state, report)
    return TrainResult(state.nets, state.history, state.loss_log, state)
