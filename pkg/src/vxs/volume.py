"""Volume ingestion, normalization, block cropping and synthetic fields.

A :class:`Volume` is an immutable 3-D scalar field.  Raw files are packed
little-endian scalars in row-major (depth-major) order with a JSON sidecar
``{dims, element_kind, value_range}``; no medical container formats are
parsed here.  All training and metrics operate on [0, 1] intensities, so
``normalize`` is the single place where dynamic range is fixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DegenerateRangeError, DimensionError, MalformedInputError

__all__ = [
    "Volume",
    "BlockSet",
    "load_raw",
    "save_raw",
    "load_with_sidecar",
    "normalize",
    "crop_blocks",
    "synth_volume",
    "volume_from_source_id",
    "ELEMENT_KINDS",
]

ELEMENT_KINDS = {
    "uint8": np.dtype("<u1"),
    "int16": np.dtype("<i2"),
    "float32": np.dtype("<f4"),
}


@dataclass(frozen=True)
class Volume:
    """One 3-D block of intensities plus its range metadata.

    ``data`` is float32 for stored/normalized volumes; derived component
    volumes (wavelet low/high parts) may carry float64.  Arrays are marked
    read-only so a Volume never mutates after construction.
    """

    data: np.ndarray
    value_range: tuple[float, float] = None
    source_id: str = ""

    def __post_init__(self):
        arr = self.data
        if arr.ndim != 3:
            raise DimensionError(f"volume data must be 3-D, got shape {arr.shape}")
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"volume dims must all be >= 1, got {arr.shape}")
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        vr = self.value_range
        if vr is None:
            vr = (float(arr.min()), float(arr.max()))
        object.__setattr__(self, "value_range", (float(vr[0]), float(vr[1])))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_voxels(self) -> int:
        return self.data.size

    @property
    def is_normalized(self) -> bool:
        return self.value_range == (0.0, 1.0)


@dataclass(frozen=True)
class BlockSet:
    """Ordered blocks with identical dims; index order is the conditioning identity."""

    blocks: tuple[Volume, ...]
    block_dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "block_dims", tuple(int(d) for d in self.block_dims))
        for b in self.blocks:
            if b.dims != self.block_dims:
                raise DimensionError(f"block dims {b.dims} != shared dims {self.block_dims}")

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def __getitem__(self, i) -> Volume:
        return self.blocks[i]

    @property
    def voxels_per_block(self) -> int:
        d, h, w = self.block_dims
        return d * h * w


def load_raw(path, dims, element_kind) -> Volume:
    """Read a packed little-endian scalar file into an un-normalized Volume.

    Parameters
    ----------
    path : file location
    dims : (depth, height, width) voxel counts
    element_kind : one of ``uint8``, ``int16``, ``float32``

    The file size must equal ``d*h*w`` times the element size; the returned
    value_range is populated from the actual data min/max.
    """
    if element_kind not in ELEMENT_KINDS:
        raise ArgumentError(f"unknown element_kind {element_kind!r}")
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise DimensionError(f"dims must all be positive, got {dims}")
    dt = ELEMENT_KINDS[element_kind]
    raw = Path(path).read_bytes()
    expected = dims[0] * dims[1] * dims[2] * dt.itemsize
    if len(raw) != expected:
        raise MalformedInputError(
            f"{path}: expected {expected} bytes for dims {dims} ({element_kind}), got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=dt).astype(np.float32).reshape(dims)
    return Volume(data, source_id=f"file:{path}")


def save_raw(volume: Volume, path, element_kind="float32"):
    """Write the raw file plus its JSON sidecar; returns the sidecar path."""
    if element_kind not in ELEMENT_KINDS:
        raise ArgumentError(f"unknown element_kind {element_kind!r}")
    dt = ELEMENT_KINDS[element_kind]
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(volume.data.astype(dt)).tobytes())
    sidecar = path.with_suffix(path.suffix + ".json") if path.suffix != ".raw" else path.with_suffix(".json")
    sidecar.write_text(json.dumps({
        "dims": list(volume.dims),
        "element_kind": element_kind,
        "value_range": list(volume.value_range),
    }))
    return sidecar


def load_with_sidecar(path) -> Volume:
    """Load a raw file whose dims/kind come from the JSON sidecar next to it."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise MalformedInputError(f"no sidecar {sidecar} for {path}")
    meta = json.loads(sidecar.read_text())
    vol = load_raw(path, tuple(meta["dims"]), meta["element_kind"])
    if "value_range" in meta:
        vol = Volume(vol.data, value_range=tuple(meta["value_range"]), source_id=vol.source_id)
    return vol


def normalize(v: Volume, mode="minmax", window=None) -> Volume:
    """Map intensities affinely into [0, 1].

    ``minmax`` rescales by the volume's recorded value_range (so an already
    normalized volume passes through unchanged); ``window=(lo, hi)`` clamps
    to the window first.  A constant-range volume under minmax raises
    ``DegenerateRangeError`` -- use window mode for those.
    """
    if mode == "minmax":
        vmin, vmax = v.value_range
        if vmax <= vmin:
            raise DegenerateRangeError(
                f"value_range ({vmin}, {vmax}) has no spread; use window mode"
            )
        data = (v.data - vmin) / (vmax - vmin)
    elif mode == "window":
        if window is None:
            raise ArgumentError("window mode requires window=(lo, hi)")
        lo, hi = float(window[0]), float(window[1])
        if hi <= lo:
            raise ArgumentError(f"window needs hi > lo, got ({lo}, {hi})")
        data = (np.clip(v.data, lo, hi) - lo) / (hi - lo)
    else:
        raise ArgumentError(f"unknown normalize mode {mode!r}")
    return Volume(data.astype(v.data.dtype, copy=False), value_range=(0.0, 1.0), source_id=v.source_id)


def crop_blocks(v: Volume, block_dims, anchor="center") -> BlockSet:
    """Crop fixed-size blocks out of a volume.

    ``center`` yields one block centered in the volume; ``grid`` tiles
    non-overlapping blocks from the origin in row-major order, dropping
    any remainder.
    """
    block_dims = tuple(int(d) for d in block_dims)
    if any(b > s for b, s in zip(block_dims, v.dims)):
        raise DimensionError(f"block dims {block_dims} exceed volume dims {v.dims}")
    if any(b < 1 for b in block_dims):
        raise DimensionError(f"block dims must be positive, got {block_dims}")
    blocks = []
    if anchor == "center":
        start = [(s - b) // 2 for s, b in zip(v.dims, block_dims)]
        sl = tuple(slice(st, st + b) for st, b in zip(start, block_dims))
        blocks.append(Volume(v.data[sl].copy(), value_range=v.value_range,
                             source_id=f"{v.source_id}[center]"))
    elif anchor == "grid":
        counts = [s // b for s, b in zip(v.dims, block_dims)]
        for i in range(counts[0]):
            for j in range(counts[1]):
                for k in range(counts[2]):
                    sl = tuple(slice(idx * b, (idx + 1) * b)
                               for idx, b in zip((i, j, k), block_dims))
                    blocks.append(Volume(v.data[sl].copy(), value_range=v.value_range,
                                         source_id=f"{v.source_id}[grid:{i},{j},{k}]"))
    else:
        raise ArgumentError(f"unknown anchor {anchor!r}")
    return BlockSet(tuple(blocks), block_dims)


def _coord_grids(dims):
    d, h, w = dims
    return np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")


def _blobs_field(dims, rng):
    zz, yy, xx = _coord_grids(dims)
    n = int(rng.integers(3, 9))
    out = np.zeros(dims, dtype=np.float64)
    for _ in range(n):
        center = [rng.uniform(0, s - 1) for s in dims]
        sigma = [rng.uniform(0.12, 0.25) * s for s in dims]
        amp = rng.uniform(0.4, 1.0)
        out += amp * np.exp(
            -((zz - center[0]) ** 2 / (2 * sigma[0] ** 2)
              + (yy - center[1]) ** 2 / (2 * sigma[1] ** 2)
              + (xx - center[2]) ** 2 / (2 * sigma[2] ** 2))
        )
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo)


def _stripes_field(dims, rng, period):
    lo = 0.10 + 0.10 * rng.random()
    hi = 0.80 + 0.15 * rng.random()
    k = np.arange(dims[2])
    on = (k % period) < (period + 1) // 2
    row = np.where(on, hi, lo)
    return np.broadcast_to(row, dims).astype(np.float64)


def _checker_field(dims, rng, cell):
    lo = 0.10 + 0.10 * rng.random()
    hi = 0.80 + 0.15 * rng.random()
    zz, yy, xx = _coord_grids(dims)
    parity = ((zz // cell) + (yy // cell) + (xx // cell)) % 2
    return np.where(parity == 0, lo, hi).astype(np.float64)


def synth_volume(kind, dims, seed, period=2, cell=2) -> Volume:
    """Deterministic synthetic test volume in [0, 1].

    Kinds: ``smooth_blobs`` (band-limited sum of <= 8 Gaussian bumps),
    ``stripes`` (two alternating levels with the given period along width),
    ``checker`` (3-D checkerboard with the given cell size), and ``mixed``
    (blobs plus a stripe overlay; carries both low and high frequencies).
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise DimensionError(f"dims must all be positive, got {dims}")
    if period < 1 or cell < 1:
        raise ArgumentError(f"period/cell must be >= 1, got {period}/{cell}")
    rng = np.random.default_rng([int(seed), 0xB10C])
    if kind == "smooth_blobs":
        field_ = _blobs_field(dims, rng)
    elif kind == "stripes":
        field_ = _stripes_field(dims, rng, int(period))
    elif kind == "checker":
        field_ = _checker_field(dims, rng, int(cell))
    elif kind == "mixed":
        blobs = _blobs_field(dims, rng)
        stripes = _stripes_field(dims, rng, int(period))
        field_ = 0.6 * blobs + 0.4 * stripes
        field_ = (field_ - field_.min()) / (field_.max() - field_.min())
    else:
        raise ArgumentError(f"unknown synth kind {kind!r}")
    sid = f"synth:kind={kind};dims={dims[0]},{dims[1]},{dims[2]};seed={int(seed)};period={int(period)};cell={int(cell)}"
    return Volume(field_.astype(np.float32), value_range=(0.0, 1.0), source_id=sid)


def volume_from_source_id(source_id: str) -> Volume:
    """Regenerate a synthetic volume from its ``synth:`` source id."""
    if not source_id.startswith("synth:"):
        raise ArgumentError(f"cannot regenerate non-synthetic source {source_id!r}")
    fields = dict(part.split("=", 1) for part in source_id[len("synth:"):].split(";"))
    dims = tuple(int(x) for x in fields["dims"].split(","))
    return synth_volume(fields["kind"], dims, int(fields["seed"]),
                        period=int(fields.get("period", 2)), cell=int(fields.get("cell", 2)))
