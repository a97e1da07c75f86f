"""MFG instances: boundary distributions, base drifts, interactions, obstacles."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import torch

from . import DTYPE

OBSTACLE_COST = 1500.0


def _t(v) -> torch.Tensor:
    return torch.as_tensor(v, dtype=DTYPE)


# ---------------------------------------------------------------------------
# boundary distributions


@dataclass(frozen=True)
class GaussianSpec:
    mean: tuple
    cov: tuple     # diagonal entries (length d) or full matrix rows

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        cov = self.cov
        if cov and isinstance(cov[0], (list, tuple)):
            object.__setattr__(self, "cov", tuple(tuple(float(c) for c in row) for row in cov))
        else:
            object.__setattr__(self, "cov", tuple(float(c) for c in cov))
        if self.diagonal:
            if len(self.cov) != self.d or min(self.cov) <= 0:
                raise ValueError("diagonal covariance must have d positive entries")
            return
        m = self.cov_matrix()
        if m.shape != (self.d, self.d) or not torch.allclose(m, m.T):
            raise ValueError("covariance must be a symmetric d x d matrix")
        if torch.linalg.eigvalsh(m).min() <= 0:
            raise ValueError("covariance is not positive definite")

    @property
    def d(self) -> int:
        return len(self.mean)

    def cov_matrix(self) -> torch.Tensor:
        c = _t(self.cov)
        return torch.diag(c) if c.dim() == 1 else c

    @property
    def diagonal(self) -> bool:
        return not (self.cov and isinstance(self.cov[0], tuple))

    def sample(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(n, self.d, generator=generator, dtype=DTYPE)
        if self.diagonal:
            return _t(self.mean) + eps * _t(self.cov).sqrt()
        L = torch.linalg.cholesky(self.cov_matrix())
        return _t(self.mean) + eps @ L.T

    def log_density(self, x: torch.Tensor) -> torch.Tensor:
        if self.diagonal:
            var = _t(self.cov)
            maha = ((x - _t(self.mean)) ** 2 / var).sum(-1)
            return -0.5 * (maha + torch.log(var).sum() + self.d * math.log(2 * math.pi))
        cov = self.cov_matrix()
        L = torch.linalg.cholesky(cov)
        diff = (x - _t(self.mean)).T
        sol = torch.linalg.solve_triangular(L, diff, upper=False)
        maha = (sol ** 2).sum(0)
        logdet = 2.0 * torch.log(torch.diagonal(L)).sum()
        return -0.5 * (maha + logdet + self.d * math.log(2 * math.pi))

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "mean": list(self.mean),
                "cov": list(self.cov) if self.diagonal else [list(r) for r in self.cov]}


@dataclass(frozen=True)
class MixtureSpec:
    """Equal-weight Gaussian mixture."""
    components: tuple

    def __post_init__(self):
        if not self.components:
            raise ValueError("mixture needs at least one component")
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def d(self) -> int:
        return self.components[0].d

    @property
    def weights(self) -> torch.Tensor:
        k = len(self.components)
        return torch.full((k,), 1.0 / k, dtype=DTYPE)

    def sample(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        k = len(self.components)
        which = torch.randint(0, k, (n,), generator=generator)
        out = torch.empty(n, self.d, dtype=DTYPE)
        draws = [c.sample(n, generator) for c in self.components]
        for j in range(k):
            mask = which == j
            out[mask] = draws[j][mask]
        return out

    def log_density(self, x: torch.Tensor) -> torch.Tensor:
        comps = torch.stack([c.log_density(x) for c in self.components], 0)
        return torch.logsumexp(comps, 0) - math.log(len(self.components))

    def to_dict(self) -> dict:
        return {"kind": "mixture", "components": [c.to_dict() for c in self.components]}


def ring_mixture(radius: float = 16.0, n: int = 8, var: float = 1.0) -> MixtureSpec:
    comps = [GaussianSpec((radius * math.cos(2 * math.pi * k / n), radius * math.sin(2 * math.pi * k / n)),
                          (var, var)) for k in range(n)]
    return MixtureSpec(tuple(comps))


def boundary_from_dict(cfg: dict):
    if cfg["kind"] == "gaussian":
        return GaussianSpec(tuple(cfg["mean"]), tuple(tuple(r) if isinstance(r, list) else r for r in cfg["cov"]))
    if cfg["kind"] == "mixture":
        return MixtureSpec(tuple(boundary_from_dict(c) for c in cfg["components"]))
    if cfg["kind"] == "ring":
        return ring_mixture(cfg.get("radius", 16.0), cfg.get("n", 8), cfg.get("var", 1.0))
    raise ValueError(f"unknown boundary kind {cfg['kind']!r}")


def sample_boundary(spec, batch: int, seed: int | torch.Generator) -> torch.Tensor:
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    return spec.sample(batch, gen)


def log_density(spec, x: torch.Tensor) -> torch.Tensor:
    return spec.log_density(x)


# ---------------------------------------------------------------------------
# obstacle geometry.  Shapes are not analytic in the source figures; these are
# documented stand-ins.  Boundary points count as inside.


def _ellipses_inside(x, ellipses) -> torch.Tensor:
    inside = torch.zeros(x.shape[0], dtype=torch.bool)
    for (cx, cy), (ax, ay) in ellipses:
        r = ((x[:, 0] - cx) / ax) ** 2 + ((x[:, 1] - cy) / ay) ** 2
        inside |= r <= 1.0
    return inside


DEFAULT_GEOMETRY = {
    # three axis-aligned ellipses between the origin and the target ring
    "gmm_obstacles": {"ellipses": [[[8.0, 0.0], [1.0, 2.5]],
                                   [[-5.66, 5.66], [1.5, 1.5]],
                                   [[0.0, -8.0], [2.5, 1.0]]]},
    # obstacle where |x2| >= sqrt(width^2 + (slope * x1)^2): an hourglass corridor
    "v_neck": {"width": 1.0, "slope": 0.7},
    # two elliptical walls forcing an S-shaped passage
    "s_tunnel": {"ellipses": [[[-3.0, -4.0], [1.5, 5.0]],
                              [[3.0, 4.0], [1.5, 5.0]]]},
}


@dataclass(frozen=True)
class Geometry:
    kind: str
    params: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if self.kind not in DEFAULT_GEOMETRY:
            raise ValueError(f"unknown obstacle geometry {self.kind!r}")
        merged = dict(DEFAULT_GEOMETRY[self.kind])
        merged.update(self.params or {})
        object.__setattr__(self, "params", merged)

    def contains(self, x: torch.Tensor) -> torch.Tensor:
        p = self.params
        if self.kind == "v_neck":
            bound = torch.sqrt(p["width"] ** 2 + (p["slope"] * x[:, 0]) ** 2)
            return x[:, 1].abs() >= bound
        return _ellipses_inside(x, p["ellipses"])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params}


# ---------------------------------------------------------------------------
# mean-field interactions


def F_entropy(x: torch.Tensor, log_rho: torch.Tensor) -> torch.Tensor:
    return log_rho + 1.0


def F_congestion(x: torch.Tensor, population: torch.Tensor) -> torch.Tensor:
    if population.shape[0] == 0:
        raise ValueError("empty population")
    sq = torch.cdist(x, population) ** 2
    return (2.0 / (sq + 1.0)).mean(-1)


def F_obstacle(x: torch.Tensor, geometry: Geometry | str) -> torch.Tensor:
    if isinstance(geometry, str):
        geometry = Geometry(geometry)
    return OBSTACLE_COST * geometry.contains(x).to(x.dtype)


# ---------------------------------------------------------------------------
# party-model polarization drift


def sqrt_normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Row-wise ``v / ||v||^(1/2)``; rows with norm below ``eps`` map to 0."""
    n = v.norm(dim=-1, keepdim=True)
    safe = torch.where(n < eps, torch.ones_like(n), n)
    return torch.where(n < eps, torch.zeros_like(v), v / safe.sqrt())


def agreement(x: torch.Tensor, y: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
    """[n, m] matrix of +1 where sign<x, xi> == sign<y, xi>, else -1."""
    sx = torch.sign(x @ xi)
    sy = torch.sign(y @ xi)
    return torch.where(sx[:, None] == sy[None, :], 1.0, -1.0).to(x.dtype)


def polarize_drift(x: torch.Tensor, population: torch.Tensor, xi: torch.Tensor,
                   scale: float = 1.0) -> torch.Tensor:
    """``scale * f / ||f||^(1/2)`` with ``f(x) = mean_y a(x, y; xi) * y / ||y||^(1/2)``."""
    if population.shape[0] == 0:
        raise ValueError("empty population")
    ybar = sqrt_normalize(population)
    sy = torch.sign(population @ xi)
    sx = torch.sign(x @ xi)
    total = ybar.sum(0)
    f = torch.empty_like(x)
    # a(x, y) only depends on the sign class of x: agree-sum minus disagree-sum
    for c in (-1.0, 0.0, 1.0):
        rows = sx == c
        if rows.any():
            same = ybar[sy == c].sum(0)
            f[rows] = (2.0 * same - total) / population.shape[0]
    return scale * sqrt_normalize(f)


# ---------------------------------------------------------------------------
# problem container


@dataclass(frozen=True)
class MfgProblem:
    name: str
    d: int
    sigma: float
    T: float
    dt: float
    rho0: object
    rho_target: object
    drift: str = "zero"                 # zero | constant | polarize
    drift_vector: tuple = ()
    polarize_scale: float = 1.0
    interactions: tuple = ()            # subset of entropy, congestion, obstacle
    geometry: Geometry | None = None
    K: int = 250
    stages: int = 40
    fk_norm: str = "huber"

    def __post_init__(self):
        if self.sigma <= 0 or self.T <= 0 or self.dt <= 0:
            raise ValueError("sigma, T and dt must be positive")
        if self.rho0.d != self.d or self.rho_target.d != self.d:
            raise ValueError("boundary dimension does not match d")
        if self.drift not in ("zero", "constant", "polarize"):
            raise ValueError(f"unknown drift {self.drift!r}")
        if self.drift == "constant" and len(self.drift_vector) != self.d:
            raise ValueError("constant drift needs a length-d vector")
        for name in self.interactions:
            if name not in ("entropy", "congestion", "obstacle"):
                raise ValueError(f"unknown interaction {name!r}")
        if "obstacle" in self.interactions and self.geometry is None:
            raise ValueError("obstacle interaction needs a geometry")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def needs_xi(self) -> bool:
        return self.drift == "polarize"

    @property
    def needs_log_rho(self) -> bool:
        return "entropy" in self.interactions

    def sample_xi(self, generator: torch.Generator) -> torch.Tensor:
        return torch.randn(self.d, generator=generator, dtype=DTYPE)

    def base_drift(self, x: torch.Tensor, population: torch.Tensor,
                   xi: torch.Tensor | None = None) -> torch.Tensor:
        if self.drift == "zero":
            return torch.zeros_like(x)
        if self.drift == "constant":
            return _t(self.drift_vector).expand_as(x).clone()
        if xi is None:
            raise ValueError("polarize drift needs an information vector xi")
        return polarize_drift(x, population, xi, self.polarize_scale)

    def drift_divergence(self, x: torch.Tensor) -> torch.Tensor:
        # zero/constant drifts are divergence free; the party drift is piecewise
        # constant in x, so its divergence vanishes almost everywhere
        return torch.zeros(x.shape[0], dtype=x.dtype)

    def interaction(self, x: torch.Tensor, population: torch.Tensor | None = None,
                    log_rho: torch.Tensor | None = None) -> torch.Tensor:
        F = torch.zeros(x.shape[0], dtype=x.dtype)
        if "entropy" in self.interactions:
            if log_rho is None:
                raise ValueError("entropy interaction needs a log-density estimate")
            F = F + F_entropy(x, log_rho)
        if "congestion" in self.interactions:
            F = F + F_congestion(x, population)
        if "obstacle" in self.interactions:
            F = F + F_obstacle(x, self.geometry)
        return F

    def with_(self, **changes) -> "MfgProblem":
        cfg = self.to_dict()
        cfg.update(changes)
        return problem_from_dict(cfg)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "d": self.d, "sigma": self.sigma, "T": self.T, "dt": self.dt,
            "rho0": self.rho0.to_dict(), "rho_target": self.rho_target.to_dict(),
            "drift": self.drift, "drift_vector": list(self.drift_vector),
            "polarize_scale": self.polarize_scale, "interactions": list(self.interactions),
            "geometry": self.geometry.to_dict() if self.geometry is not None else None,
            "K": self.K, "stages": self.stages, "fk_norm": self.fk_norm,
        }


def problem_from_dict(cfg: dict) -> MfgProblem:
    cfg = dict(cfg)
    cfg["rho0"] = boundary_from_dict(cfg["rho0"]) if isinstance(cfg["rho0"], dict) else cfg["rho0"]
    cfg["rho_target"] = (boundary_from_dict(cfg["rho_target"]) if isinstance(cfg["rho_target"], dict)
                         else cfg["rho_target"])
    geo = cfg.get("geometry")
    if isinstance(geo, dict):
        cfg["geometry"] = Geometry(geo["kind"], geo.get("params", {}))
    cfg["drift_vector"] = tuple(cfg.get("drift_vector", ()))
    cfg["interactions"] = tuple(cfg.get("interactions", ()))
    return MfgProblem(**cfg)


def _opinion_cov(d: int) -> tuple:
    return (4.0,) + (0.25,) * (d - 1)


def make_problem(name: str, **overrides) -> MfgProblem:
    """Default settings for the named problem, with keyword overrides."""
    if name == "gmm":
        base = dict(name="gmm", d=2, sigma=1.0, T=1.0, dt=0.01,
                    rho0=GaussianSpec((0.0, 0.0), (1.0, 1.0)),
                    rho_target=ring_mixture(16.0, 8, 1.0),
                    drift="zero", interactions=("obstacle",),
                    geometry=Geometry("gmm_obstacles"), K=250, stages=40, fk_norm="l1")
    elif name == "vneck":
        base = dict(name="vneck", d=2, sigma=1.0, T=2.0, dt=0.01,
                    rho0=GaussianSpec((-7.0, 0.0), (0.2, 0.2)),
                    rho_target=GaussianSpec((7.0, 0.0), (0.2, 0.2)),
                    drift="constant", drift_vector=(6.0, 0.0),
                    interactions=("obstacle", "entropy"),
                    geometry=Geometry("v_neck"), K=250, stages=40, fk_norm="huber")
    elif name == "stunnel":
        base = dict(name="stunnel", d=2, sigma=1.0, T=3.0, dt=0.01,
                    rho0=GaussianSpec((-11.0, -1.0), (0.5, 0.5)),
                    rho_target=GaussianSpec((11.0, 1.0), (0.5, 0.5)),
                    drift="constant", drift_vector=(6.0, 0.0),
                    interactions=("obstacle", "congestion"),
                    geometry=Geometry("s_tunnel"), K=500, stages=30, fk_norm="huber")
    elif name == "opinion":
        base = dict(name="opinion", d=2, sigma=0.1, T=3.0, dt=0.01,
                    rho0=GaussianSpec((0.0, 0.0), (0.5, 0.25)),
                    rho_target=GaussianSpec((0.0, 0.0), (3.0, 3.0)),
                    drift="polarize", polarize_scale=1.0, interactions=("entropy",),
                    K=100, stages=40, fk_norm="l1")
    elif name == "opinion_1k":
        d = int(overrides.pop("d", 1000))
        base = dict(name="opinion_1k", d=d, sigma=0.5, T=3.0, dt=0.006,
                    rho0=GaussianSpec((0.0,) * d, _opinion_cov(d)),
                    rho_target=GaussianSpec((0.0,) * d, (3.0,) * d),
                    drift="polarize", polarize_scale=6.0, interactions=("entropy",),
                    K=250, stages=90, fk_norm="l1")
    elif name == "gaussian":
        # closed-form bridge N(0, I) -> N(0, 4I) with no interaction
        base = dict(name="gaussian", d=2, sigma=1.0, T=1.0, dt=0.01,
                    rho0=GaussianSpec((0.0, 0.0), (1.0, 1.0)),
                    rho_target=GaussianSpec((0.0, 0.0), (4.0, 4.0)),
                    drift="zero", interactions=(), K=250, stages=10, fk_norm="huber")
    else:
        raise ValueError(f"unknown problem {name!r}; known: {', '.join(PROBLEM_NAMES)}")
    base.update(overrides)
    return MfgProblem(**base)


PROBLEM_NAMES = ("gmm", "vneck", "stunnel", "opinion", "opinion_1k", "gaussian")


def load_toml(text: str) -> dict:
    try:
        import tomllib
    except ImportError:  # python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)


def load_problem(path) -> MfgProblem:
    """Read a problem from JSON or TOML.  A ``base`` key names a built-in problem
    whose defaults are then overridden by the remaining keys."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        cfg = load_toml(text)
    else:
        cfg = json.loads(text)
    if "base" in cfg:
        base = make_problem(cfg.pop("base")).to_dict()
        base.update(cfg)
        cfg = base
    return problem_from_dict(cfg)
