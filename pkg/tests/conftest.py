"""Shared fixtures and oracle helpers for the test suite."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from ctdenoise.imaging import Slice, default_phantom_spec, generate_phantom


def make_dataset(n: int, size: int = 64, seed_base: int = 1000) -> list[tuple[Slice, Slice]]:
    """(noisy, clean) pairs from the default phantom generator."""
    pairs = []
    for i in range(n):
        clean, noisy = generate_phantom(default_phantom_spec(seed_base + i, size))
        pairs.append((noisy, clean))
    return pairs


# ---------------------------------------------------------------------------
# Finite-difference oracles
# ---------------------------------------------------------------------------

FD_STEP = 1e-4
FD_REL_TOL = 1e-3
FD_ABS_FLOOR = 1e-8


def fd_gradient(scalar_fn, tensor: torch.Tensor, step: float = FD_STEP) -> torch.Tensor:
    """Central finite differences of a scalar-valued closure w.r.t. every
    entry of ``tensor`` (mutated in place and restored)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = float(scalar_fn())
            flat[i] = orig - step
            f_minus = float(scalar_fn())
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def fd_gradient_entries(scalar_fn, tensor: torch.Tensor, indices, step: float = FD_STEP):
    """Central differences for a subset of flat indices of one tensor."""
    flat = tensor.data.view(-1)
    out = []
    with torch.no_grad():
        for i in indices:
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = float(scalar_fn())
            flat[i] = orig - step
            f_minus = float(scalar_fn())
            flat[i] = orig
            out.append((f_plus - f_minus) / (2.0 * step))
    return out


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor,
                       abs_floor: float = FD_ABS_FLOOR) -> float:
    """Worst-case |a - n| / max(|a|, |n|) over entries, ignoring pairs where
    both magnitudes sit below the floor (0/0 noise)."""
    a = analytic.detach().double().view(-1)
    n = numeric.detach().double().view(-1)
    scale = torch.maximum(a.abs(), n.abs())
    keep = scale > abs_floor
    if not keep.any():
        return 0.0
    return float(((a - n).abs()[keep] / scale[keep]).max())


def assert_grads_match(analytic, numeric, rel_tol: float = FD_REL_TOL) -> None:
    err = max_relative_error(analytic, numeric)
    assert err <= rel_tol, f"gradient mismatch: max relative error {err:.3e} > {rel_tol}"


@pytest.fixture(scope="session")
def phantom_pair():
    clean, noisy = generate_phantom(default_phantom_spec(7, 64))
    return noisy, clean
