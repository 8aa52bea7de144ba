"""Parameter-tree utilities shared by the networks and the trainer:
seeded initialization, conversion to/from checkpoint arrays, gradient
bookkeeping."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn


def seed_parameters_(module: nn.Module, seed: int) -> None:
    """Re-initialize every conv/linear weight from a dedicated generator so
    construction is a pure function of the seed.  Uses the standard
    fan-in-scaled uniform ranges; other parameters (e.g. attention
    temperatures) keep their constructed values."""
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                # weight.shape[1] is in_channels/groups, so this covers
                # depth-wise convolutions too
                fan_in = m.weight.shape[1] * (
                    m.weight.shape[2] * m.weight.shape[3] if m.weight.ndim == 4 else 1
                )
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)


def set_requires_grad_(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def module_to_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a module's parameters into float32 arrays for the container."""
    out = {}
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype != np.float32:
            raise TypeError(f"{prefix}{name}: checkpointed modules must be float32")
        out[prefix + name] = arr
    return out


def arrays_to_module_(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Load container arrays into a module; missing names or shape mismatches
    raise via load_state_dict."""
    state = {}
    for name in module.state_dict():
        key = prefix + name
        if key not in arrays:
            raise KeyError(f"checkpoint is missing array {key!r}")
        state[name] = torch.from_numpy(arrays[key].copy())
    module.load_state_dict(state)


def grad_is_zero(module: nn.Module) -> bool:
    """True when no parameter of the module carries a nonzero gradient."""
    for p in module.parameters():
        if p.grad is not None and p.grad.abs().max().item() != 0.0:
            return False
    return True


def all_grads_nonzero(module: nn.Module) -> list[str]:
    """Names of parameters whose gradient is missing or identically zero."""
    dead = []
    for name, p in module.named_parameters():
        if p.grad is None or p.grad.abs().max().item() == 0.0:
            dead.append(name)
    return dead
