import pytest
import torch

from gsb.nets import NetworkSet, NetworkSpec

torch.set_num_threads(1)


def small_nets(d=2, mode="actor_critic", sigma=1.0, seed=0, hidden=16, randomize=True):
    """Tiny network set; ``randomize`` replaces the zero-initialized output
    layers so every network has a non-trivial response."""
    spec = NetworkSpec(d=d, mode=mode, policy_hidden=hidden, critic_hidden=hidden,
                       critic_only_hidden=hidden, embed_dim=8)
    nets = NetworkSet.build(spec, sigma, seed=seed)
    if randomize:
        g = torch.Generator().manual_seed(seed + 100)
        with torch.no_grad():
            for m in [nets.Y, nets.Yhat, nets.Z, nets.Zhat]:
                if m is None:
                    continue
                for p in m.parameters():
                    p.copy_(0.4 * torch.randn(p.shape, generator=g, dtype=p.dtype))
            nets.Y_ema.load_state_dict(nets.Y.state_dict())
            nets.Yhat_ema.load_state_dict(nets.Yhat.state_dict())
    return nets


@pytest.fixture
def nets2():
    return small_nets()
