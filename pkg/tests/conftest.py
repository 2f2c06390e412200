"""Shared oracles and fixtures.

The finite-difference oracle and the loop-based Haar/nearest-neighbor
oracles live here so every test checks library code against an
independent computation path.
"""

import numpy as np
import pytest

from vxs.nn import ParamStore
from vxs.optim import OptimizerConfig
from vxs.prior import PriorConfig
from vxs.inr import ModelSpec
from vxs.training import TrainConfig


def central_diff_grads(f, params: dict, step=1e-3):
    """Central finite differences of a scalar function of named arrays."""
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = f(params)
            flat[i] = keep - step
            dn = f(params)
            flat[i] = keep
            gflat[i] = (up - dn) / (2 * step)
        grads[name] = g
    return grads


def max_rel_err(got: dict, want: dict) -> float:
    worst = 0.0
    for name in want:
        diff = np.abs(got[name] - want[name]).max()
        scale = max(np.abs(want[name]).max(), 1e-8)
        worst = max(worst, diff / scale)
    return worst


def store_from(arrays: dict) -> ParamStore:
    ps = ParamStore()
    for k, v in arrays.items():
        ps.add(k, np.asarray(v, dtype=np.float64))
    return ps


def brute_dwt_axis(x, axis):
    """Loop-based orthonormal Haar analysis along one axis (test oracle)."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    n = x.shape[-1] // 2
    lo = np.zeros(x.shape[:-1] + (n,))
    hi = np.zeros_like(lo)
    s = 1.0 / np.sqrt(2.0)
    for i in range(n):
        lo[..., i] = (x[..., 2 * i] + x[..., 2 * i + 1]) * s
        hi[..., i] = (x[..., 2 * i] - x[..., 2 * i + 1]) * s
    return np.moveaxis(lo, -1, axis), np.moveaxis(hi, -1, axis)


def brute_dwt3(data):
    """Independent 3-D Haar oracle composed from the axis loop."""
    parts = {"": np.asarray(data, dtype=np.float64)}
    for axis in range(3):
        parts = {
            name + suffix: arr
            for name, block in parts.items()
            for suffix, arr in zip("LH", brute_dwt_axis(block, axis))
        }
    return parts


def brute_nearest(z, codewords):
    """Exhaustive nearest-codeword search (python loop oracle)."""
    best_i, best_d = 0, None
    for i, e in enumerate(codewords):
        d = float(np.sum((np.asarray(z, dtype=np.float64) - e) ** 2))
        if best_d is None or d < best_d:
            best_i, best_d = i, d
    return best_i, best_d


@pytest.fixture(scope="session")
def tiny_sizes():
    """Small but non-degenerate sizes shared by the pipeline tests."""
    return {
        "dims": (8, 16, 16),
        "prior": PriorConfig(width=16, codebook_size=8, tokens_per_branch=4, bottleneck_tokens=2),
        "spec": ModelSpec(hidden_width=24, coord_embed_bands=3),
    }


@pytest.fixture(scope="session")
def fast_cfg():
    return TrainConfig(
        epochs_teacher=2, epochs_student=2, block_batch=2, coord_batch=512, seed=0,
        optimizer=OptimizerConfig(learning_rate_max=1e-3, learning_rate_min=1e-5),
    )
