"""Single-level separable 3-D Haar analysis/synthesis and the band split.

The orthonormal Haar pair (filters +-1/sqrt(2)) gives perfect
reconstruction and coefficients simple enough to verify by hand, which is
why it is the only family here.  Dims must be even along every axis; there
is no implicit boundary padding.

``split_bands`` derives the full-resolution low/high component volumes:
``low`` is the synthesis of the LLL band alone and ``high`` the residual,
refined one rounding step so that ``low + high`` reproduces the source
bit-for-bit in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .volume import Volume

__all__ = ["WaveletBands", "BandPair", "BAND_NAMES", "dwt3", "idwt3", "split_bands"]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)

# First letter filters depth, second height, third width; L = low-pass.
BAND_NAMES = ("LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH")


@dataclass(frozen=True)
class WaveletBands:
    """Eight half-resolution coefficient arrays of one analysis pass.

    Flattened coefficient layout is band-then-row-major: iterate
    ``BAND_NAMES`` order, each band as a C-contiguous (d/2, h/2, w/2) array.
    """

    bands: dict[str, np.ndarray]
    input_dims: tuple[int, int, int]
    family: str = "haar"

    def __post_init__(self):
        half = tuple(s // 2 for s in self.input_dims)
        for name in BAND_NAMES:
            if name not in self.bands:
                raise DimensionError(f"missing band {name}")
            if self.bands[name].shape != half:
                raise DimensionError(
                    f"band {name} has shape {self.bands[name].shape}, expected {half}"
                )

    def energy(self) -> float:
        return float(sum((b * b).sum() for b in self.bands.values()))


@dataclass(frozen=True)
class BandPair:
    """Full-resolution low/high component volumes with ``low + high == source``."""

    low: Volume
    high: Volume


def _check_even(dims):
    if any(s % 2 for s in dims):
        raise DimensionError(f"dims must be even along every axis, got {tuple(dims)}")


def _analyze_axis(x, axis):
    xm = np.moveaxis(x, axis, -1)
    even = xm[..., 0::2]
    odd = xm[..., 1::2]
    lo = (even + odd) * _INV_SQRT2
    hi = (even - odd) * _INV_SQRT2
    return np.moveaxis(lo, -1, axis), np.moveaxis(hi, -1, axis)


def _synthesize_axis(lo, hi, axis):
    lom = np.moveaxis(lo, axis, -1)
    him = np.moveaxis(hi, axis, -1)
    out = np.empty(lom.shape[:-1] + (2 * lom.shape[-1],), dtype=np.result_type(lom, him))
    out[..., 0::2] = (lom + him) * _INV_SQRT2
    out[..., 1::2] = (lom - him) * _INV_SQRT2
    return np.moveaxis(out, -1, axis)


def dwt3(v: Volume) -> WaveletBands:
    """Orthonormal Haar analysis applied along depth, then height, then width."""
    _check_even(v.dims)
    x = v.data.astype(np.float64)
    ld, hd = _analyze_axis(x, 0)
    parts = {"L": ld, "H": hd}
    for axis in (1, 2):
        parts = {
            name + suffix: arr
            for name, half in parts.items()
            for suffix, arr in zip("LH", _analyze_axis(half, axis))
        }
    bands = {name: np.ascontiguousarray(parts[name]) for name in BAND_NAMES}
    return WaveletBands(bands=bands, input_dims=v.dims)


def idwt3(b: WaveletBands) -> Volume:
    """Exact synthesis inverse of :func:`dwt3`."""
    parts = {name: band.astype(np.float64) for name, band in b.bands.items()}
    for axis in (2, 1, 0):
        merged = {}
        for name in {n[:-1] for n in parts}:
            merged[name] = _synthesize_axis(parts[name + "L"], parts[name + "H"], axis)
        parts = merged
    data = parts[""]
    if data.shape != tuple(b.input_dims):
        raise DimensionError(f"synthesized shape {data.shape} != input dims {b.input_dims}")
    return Volume(data, value_range=(float(data.min()), float(data.max())))


def split_bands(v: Volume) -> BandPair:
    """Full-resolution low/high split of a volume.

    ``low`` is the synthesis of the LLL band alone, evaluated in its exact
    algebraic form for Haar (the 2x2x2 blockwise mean, so constants are
    preserved bit-for-bit); ``high`` is the residual, refined one rounding
    step so the pair sums back to the source exactly.  Both components
    share the source dims and feed the same feature extractor downstream.
    """
    _check_even(v.dims)
    src = v.data.astype(np.float64)
    d, h, w = v.dims
    mean = src.reshape(d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(1, 3, 5))
    low = np.repeat(np.repeat(np.repeat(mean, 2, 0), 2, 1), 2, 2)
    # one rounding refinement makes low + high == src hold bitwise
    high = src - low
    low = src - high
    high = src - low
    return BandPair(
        low=Volume(low, source_id=f"{v.source_id}|low"),
        high=Volume(high, source_id=f"{v.source_id}|high"),
    )
