"""Mean-field games with hard boundary distributions, solved as generalized
Schrödinger bridges with forward-backward SDEs and TD-style objectives."""

import torch

__version__ = "0.1.0"

DTYPE = torch.float64
