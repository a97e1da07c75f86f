"""Field networks ``out_mod(x_mod(x) + t_mod(embed(t)))`` and the network set."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict

import torch
from torch import nn

from . import DTYPE
from .autodiff import input_gradient


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding: sines in the first half, cosines in the second.

    ``t`` may be a python float or a tensor of shape [n]; the result has
    shape [n, dim] (or [dim] for a scalar).
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    t = torch.as_tensor(t, dtype=DTYPE)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=DTYPE) * 2.0 / dim)
    args = t[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int = 128, max_period: float = 10000.0):
        super().__init__()
        if dim <= 0 or dim % 2:
            raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
        self.dim = dim
        self.max_period = max_period

    def forward(self, t):
        return timestep_embedding(t, self.dim, self.max_period)


def mlp(sizes: list[int]) -> nn.Sequential:
    """Linear layers with SiLU in between (none after the last)."""
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b, dtype=DTYPE))
        if i < len(sizes) - 2:
            layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class ResBlock(nn.Module):
    # pre-activation block: h + W2 silu(W1 silu(h)); no normalization
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width, dtype=DTYPE)
        self.fc2 = nn.Linear(width, width, dtype=DTYPE)
        self.act = nn.SiLU()

    def forward(self, h):
        return h + self.fc2(self.act(self.fc1(self.act(h))))


class ResidualStack(nn.Module):
    def __init__(self, d_in: int, width: int, n_blocks: int = 5):
        super().__init__()
        self.inp = nn.Linear(d_in, width, dtype=DTYPE)
        self.blocks = nn.ModuleList([ResBlock(width) for _ in range(n_blocks)])

    def forward(self, x):
        h = self.inp(x)
        for block in self.blocks:
            h = block(h)
        return h


@dataclass
class Arch:
    d: int
    hidden: int = 128
    vector: bool = False          # R^d output (Z nets) vs scalar (Y nets)
    x_kind: str = "mlp"           # "mlp" or "resnet"
    n_blocks: int = 5
    embed_dim: int = 128
    max_period: float = 10000.0
    zero_last: bool = True
    dtype: str = "float64"        # parameter precision; inputs and outputs stay float64


NET_DTYPES = {"float64": torch.float64, "float32": torch.float32}


class FieldNetwork(nn.Module):
    """``out = out_mod(x_mod(x) + t_mod(embed(t)))`` evaluated on a batch."""

    def __init__(self, arch: Arch):
        super().__init__()
        self.arch = arch
        h = arch.hidden
        self.embed = TimeEmbedding(arch.embed_dim, arch.max_period)
        self.t_mod = mlp([arch.embed_dim, h, h])
        if arch.x_kind == "mlp":
            self.x_mod = mlp([arch.d, h, h, h, h])
        elif arch.x_kind == "resnet":
            self.x_mod = ResidualStack(arch.d, h, arch.n_blocks)
        else:
            raise ValueError(f"unknown x_mod kind {arch.x_kind!r}")
        out_dim = arch.d if arch.vector else 1
        self.out_mod = mlp([h, h, h, out_dim])
        if arch.zero_last:
            nn.init.zeros_(self.out_mod[-1].weight)
            nn.init.zeros_(self.out_mod[-1].bias)
        if arch.dtype not in NET_DTYPES:
            raise ValueError(f"unknown network dtype {arch.dtype!r}")
        self.dtype = NET_DTYPES[arch.dtype]
        self.to(self.dtype)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=x.dtype)
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        h = x.to(self.dtype)
        out = self.out_mod(self.x_mod(h) + self.t_mod(self.embed(t).to(self.dtype))).to(x.dtype)
        return out if self.arch.vector else out[:, 0]


def ema_update(target: nn.Module, online: nn.Module, rate: float) -> nn.Module:
    """``target <- rate * target + (1 - rate) * online`` for every parameter."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"EMA rate must lie in [0, 1], got {rate}")
    with torch.no_grad():
        for pt, po in zip(target.parameters(), online.parameters()):
            if pt.shape != po.shape:
                raise ValueError(f"shape mismatch {tuple(pt.shape)} vs {tuple(po.shape)}")
            pt.mul_(rate).add_(po, alpha=1.0 - rate)
    return target


def _frozen_copy(net: nn.Module) -> nn.Module:
    twin = copy.deepcopy(net)
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin


@dataclass
class NetworkSpec:
    d: int
    mode: str = "actor_critic"    # or "critic"
    policy_hidden: int = 256
    critic_hidden: int = 128
    critic_only_hidden: int = 200
    x_kind: str = "mlp"
    n_blocks: int = 5
    embed_dim: int = 128
    dtype: str = "float64"

    def critic_arch(self) -> Arch:
        h = self.critic_only_hidden if self.mode == "critic" else self.critic_hidden
        return Arch(self.d, h, False, self.x_kind, self.n_blocks, self.embed_dim, dtype=self.dtype)

    def policy_arch(self) -> Arch:
        return Arch(self.d, self.policy_hidden, True, self.x_kind, self.n_blocks, self.embed_dim,
                    dtype=self.dtype)


class NetworkSet:
    """Value networks ``Y`` (theta) and ``Yhat`` (phi), policies ``Z``/``Zhat``
    and EMA targets of the two value networks.

    In critic mode the policies are not separate networks: ``Z = sigma * grad Y``
    and ``Zhat = sigma * grad Yhat``.
    """

    def __init__(self, Y, Yhat, Z=None, Zhat=None, sigma: float = 1.0,
                 mode: str = "actor_critic", spec: NetworkSpec | None = None):
        if mode not in ("actor_critic", "critic"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "actor_critic" and (Z is None or Zhat is None):
            raise ValueError("actor-critic mode needs policy networks Z and Zhat")
        self.mode = mode
        self.sigma = float(sigma)
        self.spec = spec
        self.Y, self.Yhat = Y, Yhat
        self.Z, self.Zhat = (Z, Zhat) if mode == "actor_critic" else (None, None)
        self.Y_ema = _frozen_copy(Y)
        self.Yhat_ema = _frozen_copy(Yhat)
        self.step = 0

    @classmethod
    def build(cls, spec: NetworkSpec, sigma: float, seed: int = 0) -> "NetworkSet":
        torch.manual_seed(seed)
        Y = FieldNetwork(spec.critic_arch())
        Yhat = FieldNetwork(spec.critic_arch())
        Z = Zhat = None
        if spec.mode == "actor_critic":
            Z = FieldNetwork(spec.policy_arch())
            Zhat = FieldNetwork(spec.policy_arch())
        return cls(Y, Yhat, Z, Zhat, sigma, spec.mode, spec)

    # side "theta" owns (Y, Z); side "phi" owns (Yhat, Zhat)
    def value_net(self, side: str, target: bool = False):
        if side == "theta":
            return self.Y_ema if target else self.Y
        if side == "phi":
            return self.Yhat_ema if target else self.Yhat
        raise ValueError(f"unknown side {side!r}")

    def policy_fn(self, side: str, target: bool = False):
        """Callable ``(x, t) -> [n, d]`` for Z (theta) or Zhat (phi).

        ``target`` only matters in critic mode, where the policy is derived
        from the EMA value network.
        """
        if self.mode == "actor_critic":
            return self.Z if side == "theta" else self.Zhat
        net = self.value_net(side, target)
        sigma = self.sigma
        return lambda x, t: sigma * input_gradient(net, x, t, create_graph=True)

    def policy(self, side: str, x: torch.Tensor, t, create_graph: bool = False) -> torch.Tensor:
        if self.mode == "actor_critic":
            net = self.Z if side == "theta" else self.Zhat
            if create_graph:
                return net(x, t)
            with torch.no_grad():
                return net(x, t)
        net = self.value_net(side)
        return self.sigma * input_gradient(net, x, t, create_graph=create_graph)

    def side_modules(self, side: str) -> list[nn.Module]:
        if side == "theta":
            return [m for m in (self.Y, self.Z) if m is not None]
        if side == "phi":
            return [m for m in (self.Yhat, self.Zhat) if m is not None]
        raise ValueError(f"unknown side {side!r}")

    def update_ema(self, side: str, rate: float) -> None:
        if side == "theta":
            ema_update(self.Y_ema, self.Y, rate)
        else:
            ema_update(self.Yhat_ema, self.Yhat, rate)

    # ---- checkpointing -------------------------------------------------
    def state(self) -> dict:
        nets = {"Y": self.Y, "Yhat": self.Yhat, "Y_ema": self.Y_ema, "Yhat_ema": self.Yhat_ema}
        if self.mode == "actor_critic":
            nets.update(Z=self.Z, Zhat=self.Zhat)
        return {
            "format": "gsb-checkpoint/1",
            "mode": self.mode,
            "sigma": self.sigma,
            "step": self.step,
            "spec": asdict(self.spec) if self.spec is not None else None,
            "params": {k: v.state_dict() for k, v in nets.items()},
        }

    def save(self, path, extra: dict | None = None) -> None:
        blob = self.state()
        blob["extra"] = extra or {}
        torch.save(blob, path)

    @classmethod
    def from_state(cls, blob: dict) -> "NetworkSet":
        if blob.get("format") != "gsb-checkpoint/1" or blob.get("spec") is None:
            raise ValueError("not a gsb checkpoint")
        spec = NetworkSpec(**blob["spec"])
        nets = cls.build(spec, blob["sigma"])
        params = blob["params"]
        try:
            for name in ("Y", "Yhat", "Y_ema", "Yhat_ema") + (("Z", "Zhat") if spec.mode == "actor_critic" else ()):
                getattr(nets, name).load_state_dict(params[name])
        except (RuntimeError, KeyError) as err:
            raise ValueError(f"checkpoint does not match its architecture descriptor: {err}") from err
        nets.step = blob["step"]
        return nets

    @classmethod
    def load(cls, path) -> tuple["NetworkSet", dict]:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        return cls.from_state(blob), blob.get("extra", {})
