"""Evaluation: Sinkhorn divergence, FBSDE violation, obstacle mass,
directional similarity."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import torch

from . import DTYPE
from . import objectives as ob


# ---------------------------------------------------------------------------
# Sinkhorn divergence.  Cost C(x, y) = |x - y|^2 / 2 and eps = blur^2, the
# convention of the geomloss "sinkhorn" loss with p=2.


def _softmin(eps: float, C: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    return -eps * torch.logsumexp(h[None, :] - C / eps, dim=1)


def _cost(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape[1] <= 8:
        # elementwise differences keep C(x, y) bitwise equal to C(y, x)^T
        return 0.5 * ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    return 0.5 * torch.cdist(x, y) ** 2


def _eps_schedule(diameter: float, blur: float, scaling: float) -> list[float]:
    eps = [diameter ** 2]
    while math.sqrt(eps[-1]) * scaling > blur:
        eps.append((math.sqrt(eps[-1]) * scaling) ** 2)
    eps.append(blur ** 2)
    return eps


@dataclass
class SinkhornInfo:
    iterations: int = 0
    residual: float = 0.0


OVER_RELAXATION = 1.8


def _converge(step, value_of, f, eps, tol, max_iter):
    """Apply ``step`` until the dual value moves by less than ``tol``."""
    value, res, it = value_of(f), float("inf"), 0
    while it < max_iter:
        f = step(f, eps)
        new = value_of(f)
        it += 1
        res = abs(new - value)
        value = new
        if res < tol or not math.isfinite(new):
            break
    return f, value, res, it


def _ot_value(x, y, a_log, b_log, eps_list, tol, max_iter, info: SinkhornInfo) -> float:
    """Entropic OT dual value <a, f> + <b, g> by eps-scaling.

    Every eps level is iterated to a stable dual value before the next one
    starts.  A single sweep per level (the usual annealing shortcut) leaves
    mass stuck between well-separated clusters, and fixing that at the final
    eps alone would take tens of thousands of sweeps.
    """
    Cxy = _cost(x, y)
    Cyx = Cxy.T.contiguous()
    a, b = a_log.exp(), b_log.exp()

    def value_of(fg):
        return ((a * fg[0]).sum() + (b * fg[1]).sum()).item()

    def relaxed(omega):
        def step(fg, eps):
            f = (1 - omega) * fg[0] + omega * _softmin(eps, Cxy, b_log + fg[1] / eps)
            g = (1 - omega) * fg[1] + omega * _softmin(eps, Cyx, a_log + f / eps)
            return f, g
        return step

    fg = (_softmin(eps_list[0], Cxy, b_log), _softmin(eps_list[0], Cyx, a_log))
    for eps in eps_list:
        start = fg
        fg, value, res, it = _converge(relaxed(OVER_RELAXATION), value_of, fg, eps, tol, max_iter)
        if not math.isfinite(value):
            # over-relaxation left its basin: redo the level with plain updates
            fg, value, res, it = _converge(relaxed(1.0), value_of, start, eps, tol, max_iter)
        info.iterations = max(info.iterations, it)
    # a closing plain sweep removes the oscillation over-relaxation leaves behind
    fg = relaxed(1.0)(fg, eps_list[-1])
    value = value_of(fg)
    info.residual = max(info.residual, res)
    return value


def _self_value(x, a_log, eps_list, tol, max_iter, info: SinkhornInfo) -> float:
    """OT_eps(P, P) through the symmetric averaged update."""
    C = _cost(x, x)
    a = a_log.exp()

    def step(f, eps):
        return 0.5 * (f + _softmin(eps, C, a_log + f / eps))

    def value_of(f):
        return 2 * (a * f).sum().item()

    f = _softmin(eps_list[0], C, a_log)
    for eps in eps_list:
        f, value, res, it = _converge(step, value_of, f, eps, tol, max_iter)
        info.iterations = max(info.iterations, it)
    info.residual = max(info.residual, res)
    return value


def _canonical(P: torch.Tensor, Q: torch.Tensor) -> bool:
    """True when (P, Q) is already in canonical order (used for exact symmetry)."""
    if P.shape != Q.shape:
        return P.shape[0] < Q.shape[0]
    diff = (P != Q).flatten().nonzero()
    if diff.numel() == 0:
        return True
    i = diff[0, 0]
    return bool(P.flatten()[i] < Q.flatten()[i])


def sinkhorn_divergence(P: torch.Tensor, Q: torch.Tensor, blur: float = 0.05,
                        scaling: float = 0.5, tol: float = 1e-7, max_iter: int = 3000,
                        return_info: bool = False):
    """Debiased entropic OT between uniform point clouds,
    ``S = OT(P, Q) - OT(P, P) / 2 - OT(Q, Q) / 2``."""
    P = torch.as_tensor(P, dtype=DTYPE)
    Q = torch.as_tensor(Q, dtype=DTYPE)
    if P.dim() != 2 or Q.dim() != 2 or P.shape[1] != Q.shape[1]:
        raise ValueError(f"point clouds must share a dimension: {tuple(P.shape)} vs {tuple(Q.shape)}")
    if P.shape[0] == 0 or Q.shape[0] == 0:
        raise ValueError("empty point cloud")
    if not _canonical(P, Q):
        P, Q = Q, P
    with torch.no_grad():
        both = torch.cat([P, Q])
        diameter = max((both.max(0).values - both.min(0).values).norm().item(), blur)
        eps_list = _eps_schedule(diameter, blur, scaling)
        a_log = torch.full((P.shape[0],), -math.log(P.shape[0]), dtype=DTYPE)
        b_log = torch.full((Q.shape[0],), -math.log(Q.shape[0]), dtype=DTYPE)
        info = SinkhornInfo()
        aa = _self_value(P, a_log, eps_list, tol, max_iter, info)
        if P.shape == Q.shape and torch.equal(P, Q):
            return (0.0, info) if return_info else 0.0
        ab = _ot_value(P, Q, a_log, b_log, eps_list, tol, max_iter, info)
        bb = _self_value(Q, b_log, eps_list, tol, max_iter, info)
        val = max(ab - 0.5 * aa - 0.5 * bb, 0.0)
    return (val, info) if return_info else val


# ---------------------------------------------------------------------------


def obstacle_mass(states, geometry) -> float:
    """Fraction of all (step, sample) states inside the obstacle set."""
    X = states.X if hasattr(states, "X") else torch.as_tensor(states, dtype=DTYPE)
    if geometry is None:
        return 0.0
    flat = X.reshape(-1, X.shape[-1])
    return geometry.contains(flat).to(DTYPE).mean().item()


@dataclass
class DirectionalHistogram:
    edges: list
    counts: list
    n_pairs: int
    skipped_zero: int

    def mass(self, lo: float, hi: float) -> float:
        """Fraction of pairs whose bin lies inside [lo, hi]."""
        tot = sum(self.counts)
        if tot == 0:
            return 0.0
        sel = sum(c for c, a, b in zip(self.counts, self.edges[:-1], self.edges[1:]) if a >= lo - 1e-12 and b <= hi + 1e-12)
        return sel / tot


def pairwise_cosines(X: torch.Tensor) -> tuple[torch.Tensor, int]:
    X = torch.as_tensor(X, dtype=DTYPE)
    norms = X.norm(dim=-1)
    keep = norms > 0
    Y = X[keep] / norms[keep, None]
    G = Y @ Y.T
    iu = torch.triu_indices(Y.shape[0], Y.shape[0], offset=1)
    return G[iu[0], iu[1]].clamp(-1.0, 1.0), int((~keep).sum())


def directional_similarity(cloud: torch.Tensor, bins: int = 40, max_points: int = 2000,
                           seed: int = 0) -> DirectionalHistogram:
    """Histogram of pairwise cosines of the cloud over [-1, 1]."""
    cloud = torch.as_tensor(cloud, dtype=DTYPE)
    if cloud.shape[0] < 2:
        raise ValueError("need at least two points")
    if cloud.shape[0] > max_points:
        gen = torch.Generator().manual_seed(seed)
        cloud = cloud[torch.randperm(cloud.shape[0], generator=gen)[:max_points]]
    cos, skipped = pairwise_cosines(cloud)
    counts = torch.histc(cos, bins=bins, min=-1.0, max=1.0)
    edges = torch.linspace(-1.0, 1.0, bins + 1)
    return DirectionalHistogram(edges.tolist(), [int(c) for c in counts.tolist()], int(cos.numel()), skipped)


def polarized_fraction(cloud: torch.Tensor, threshold: float = 0.8, max_points: int = 2000,
                       seed: int = 0) -> float:
    """Fraction of pairs with |cos| > threshold."""
    cloud = torch.as_tensor(cloud, dtype=DTYPE)
    if cloud.shape[0] > max_points:
        gen = torch.Generator().manual_seed(seed)
        cloud = cloud[torch.randperm(cloud.shape[0], generator=gen)[:max_points]]
    cos, _ = pairwise_cosines(cloud)
    return (cos.abs() > threshold).to(DTYPE).mean().item()


# ---------------------------------------------------------------------------


@torch.no_grad()
def _td_violation(rollout, nets, problem, samples, td_mode, boundary_aware):
    tg = ob.td_targets(rollout, nets, problem, samples, td_mode, boundary_aware)
    vals = ob.value_series(rollout, nets, samples)
    return ob.loss_td(vals, tg, rollout.grid.T, "huber").item()


def fbsde_violation(nets, problem, fwd, bwd, samples: int = 64, td_mode: str = "multi",
                    boundary_aware: bool = True) -> tuple[float, float, float]:
    """(TD(theta), TD(phi), FK(theta)) on the given rollouts, no gradients kept."""
    s_f = torch.arange(min(samples, fwd.batch))
    s_b = torch.arange(min(samples, bwd.batch))
    td_phi = _td_violation(fwd, nets, problem, s_f, td_mode, boundary_aware)
    td_theta = _td_violation(bwd, nets, problem, s_b, td_mode, boundary_aware)
    if nets.mode == "critic":
        fk = 0.0
    else:
        steps, samp = ob.all_pairs(bwd)
        sel = samp < samples
        fk = ob.loss_fk(bwd, nets, steps[sel], samp[sel], problem.fk_norm).item()
    return td_theta, td_phi, fk


@dataclass
class MetricReport:
    stage: int
    W2_sinkhorn: float
    td_violation_theta: float = 0.0
    td_violation_phi: float = 0.0
    fk_violation: float = 0.0
    obstacle_mass: float = 0.0
    W2_backward: float | None = None
    directional_histogram: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)
