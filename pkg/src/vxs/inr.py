"""The conditional implicit network: coordinates + quantized priors -> intensity.

Per coordinate the pipeline is: sinusoidal coordinate embedding, a linear
lift to the hidden width, one or more residual blocks that cross-attend
from the coordinate stream to the K quantized prior tokens (queries are
coordinate features, keys/values the tokens), a sine-activated MLP and a
linear scalar head.  Every stage is per-coordinate, so predictions are
pure in (coords, priors, params) and batches may be carved up freely.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError, ShapeError
from .nn import ParamStore, attention, glorot_uniform, sine_layer_uniform
from .prior import PriorTokens

__all__ = [
    "ModelSpec",
    "CoordBatch",
    "embed_coords",
    "inr_param_shapes",
    "init_inr_params",
    "predict_graph",
    "predict",
    "voxel_coords",
    "epoch_permutation",
    "sample_coords",
    "full_grid_coords",
]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture sizes for one implicit network (teacher or student)."""

    coord_embed_bands: int = 6
    hidden_width: int = 128
    mlp_depth: int = 4
    transformer_blocks: int = 1
    sine_omega0: float = 30.0
    role: str = "teacher"

    def __post_init__(self):
        if self.coord_embed_bands < 0:
            raise ArgumentError(f"coord_embed_bands must be >= 0, got {self.coord_embed_bands}")
        if self.sine_omega0 <= 0:
            raise ArgumentError(f"sine_omega0 must be positive, got {self.sine_omega0}")
        if self.mlp_depth < 2:
            raise ArgumentError(f"mlp_depth must be >= 2, got {self.mlp_depth}")
        if self.hidden_width < 1 or self.transformer_blocks < 0:
            raise ArgumentError("hidden_width must be >= 1 and transformer_blocks >= 0")
        if self.role not in ("teacher", "student"):
            raise ArgumentError(f"role must be teacher or student, got {self.role!r}")

    @property
    def embed_width(self) -> int:
        return 3 + 6 * self.coord_embed_bands


@dataclass(frozen=True)
class CoordBatch:
    """Coordinates in [-1, 1]^3 with their ground-truth intensities."""

    coords: np.ndarray
    targets: np.ndarray
    block_index: int = 0

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ShapeError(f"coords must be (n, 3), got {self.coords.shape}")
        if len(self.coords) != len(self.targets):
            raise ShapeError(f"{len(self.coords)} coords vs {len(self.targets)} targets")
        if np.abs(self.coords).max(initial=0.0) > 1.0 + 1e-9:
            raise ArgumentError("coordinates must lie in [-1, 1]^3")


def embed_coords(coords: np.ndarray, bands: int) -> np.ndarray:
    """Concatenate raw coords with sin/cos of ``2^j * pi * coord`` per band.

    Output width is ``3 + 6 * bands``; ``bands=0`` returns the raw coords.
    """
    if bands < 0:
        raise ArgumentError(f"bands must be >= 0, got {bands}")
    coords = np.asarray(coords)
    if bands == 0:
        return coords
    parts = [coords]
    for j in range(bands):
        phase = (2.0 ** j) * np.pi * coords
        parts.append(np.sin(phase))
        parts.append(np.cos(phase))
    return np.concatenate(parts, axis=-1)


# parameters ------------------------------------------------------------------


def inr_param_shapes(spec: ModelSpec, prior_width: int) -> dict[str, tuple]:
    h = spec.hidden_width
    v = prior_width
    shapes = {"in/W": (spec.embed_width, h), "in/b": (h,)}
    for i in range(spec.transformer_blocks):
        shapes[f"blk{i}/lnq/g"] = (h,)
        shapes[f"blk{i}/lnq/b"] = (h,)
        shapes[f"blk{i}/att/Wq"] = (h, h)
        shapes[f"blk{i}/att/Wk"] = (v, h)
        shapes[f"blk{i}/att/Wv"] = (v, h)
        shapes[f"blk{i}/att/Wo"] = (h, h)
        shapes[f"blk{i}/lnf/g"] = (h,)
        shapes[f"blk{i}/lnf/b"] = (h,)
        shapes[f"blk{i}/ffn/W1"] = (h, 2 * h)
        shapes[f"blk{i}/ffn/b1"] = (2 * h,)
        shapes[f"blk{i}/ffn/W2"] = (2 * h, h)
        shapes[f"blk{i}/ffn/b2"] = (h,)
    shapes["lnout/g"] = (h,)
    shapes["lnout/b"] = (h,)
    for j in range(spec.mlp_depth):
        shapes[f"mlp{j}/W"] = (h, h)
        shapes[f"mlp{j}/b"] = (h,)
    shapes["head/W"] = (h, 1)
    shapes["head/b"] = (1,)
    return shapes


def inr_param_count(spec: ModelSpec, prior_width: int) -> int:
    return sum(prod(s) for s in inr_param_shapes(spec, prior_width).values())


def init_inr_params(spec: ModelSpec, prior_width: int, rng, dtype=np.float32) -> ParamStore:
    ps = ParamStore()
    for name, shape in inr_param_shapes(spec, prior_width).items():
        if name.endswith("/g"):
            ps.add(name, np.ones(shape, dtype=dtype))
        elif name.endswith("/b") or name.endswith("b1") or name.endswith("b2"):
            ps.add(name, np.zeros(shape, dtype=dtype))
        elif name.startswith("mlp"):
            first = name == "mlp0/W"
            omega = spec.sine_omega0 if first else 1.0
            ps.add(name, sine_layer_uniform(rng, shape, omega=omega, first=first, dtype=dtype))
        elif "ffn" in name or name == "head/W":
            ps.add(name, sine_layer_uniform(rng, shape, omega=1.0, dtype=dtype))
        else:
            ps.add(name, glorot_uniform(rng, shape, dtype))
    return ps


# forward ---------------------------------------------------------------------


def predict_graph(embedded: np.ndarray, z_q: Tensor, tensors, spec: ModelSpec) -> Tensor:
    """Batched forward over (n_blocks, n_coords, embed_width) inputs.

    ``z_q`` carries the per-block prior tokens (n_blocks, K, width); the
    output is (n_blocks, n_coords) unclamped intensities.
    """
    if embedded.shape[-1] != spec.embed_width:
        raise ShapeError(f"embedding width {embedded.shape[-1]} vs spec {spec.embed_width}")
    h = spec.hidden_width
    scale = 1.0 / np.sqrt(h)
    x = ad.add(ad.matmul(Tensor(embedded), tensors["in/W"]), tensors["in/b"])
    for i in range(spec.transformer_blocks):
        xq = ad.layer_norm(x, tensors[f"blk{i}/lnq/g"], tensors[f"blk{i}/lnq/b"])
        att = attention(
            ad.matmul(xq, tensors[f"blk{i}/att/Wq"]),
            ad.matmul(z_q, tensors[f"blk{i}/att/Wk"]),
            ad.matmul(z_q, tensors[f"blk{i}/att/Wv"]),
            scale,
        )
        x = ad.add(x, ad.matmul(att, tensors[f"blk{i}/att/Wo"]))
        xf = ad.layer_norm(x, tensors[f"blk{i}/lnf/g"], tensors[f"blk{i}/lnf/b"])
        hid = ad.sine(ad.add(ad.matmul(xf, tensors[f"blk{i}/ffn/W1"]), tensors[f"blk{i}/ffn/b1"]))
        x = ad.add(x, ad.add(ad.matmul(hid, tensors[f"blk{i}/ffn/W2"]), tensors[f"blk{i}/ffn/b2"]))
    x = ad.layer_norm(x, tensors["lnout/g"], tensors["lnout/b"])
    for j in range(spec.mlp_depth):
        omega = spec.sine_omega0 if j == 0 else 1.0
        x = ad.sine(ad.add(ad.matmul(x, tensors[f"mlp{j}/W"]), tensors[f"mlp{j}/b"]), omega)
    y = ad.add(ad.matmul(x, tensors["head/W"]), tensors["head/b"])
    return ad.reshape(y, y.shape[:-1])


def predict(coords, priors: PriorTokens, params: ParamStore, spec: ModelSpec) -> np.ndarray:
    """Evaluation-mode intensities for one block; output is unclamped.

    ``coords`` may be a CoordBatch or an (n, 3) array in [-1, 1]^3.
    """
    pts = coords.coords if isinstance(coords, CoordBatch) else np.asarray(coords)
    emb = embed_coords(pts, spec.coord_embed_bands).astype(np.float32)[None]
    z_q = Tensor(np.asarray(priors.z_q, dtype=np.float32)[None])
    out = predict_graph(emb, z_q, params.tensors(requires_grad=False), spec)
    return out.data[0]


# coordinate sampling -----------------------------------------------------------


def voxel_coords(flat_idx: np.ndarray, dims) -> np.ndarray:
    """Map flat voxel indices to centers in [-1, 1]^3 (degenerate axes map to 0)."""
    ijk = np.unravel_index(np.asarray(flat_idx), dims)
    cols = []
    for axis, size in enumerate(dims):
        if size == 1:
            cols.append(np.zeros(len(np.atleast_1d(ijk[axis]))))
        else:
            cols.append(2.0 * ijk[axis] / (size - 1) - 1.0)
    return np.stack(cols, axis=-1)


def epoch_permutation(n_voxels: int, seed: int, epoch: int) -> np.ndarray:
    """The fixed random visit order of all voxels for one (seed, epoch)."""
    return np.random.default_rng([int(seed), 0xC00D, int(epoch)]).permutation(n_voxels)


def sample_coords(dims, batch_size: int, seed: int, epoch_position) -> tuple[np.ndarray, np.ndarray]:
    """Walk the per-epoch permutation of voxel centers without replacement.

    ``epoch_position`` is ``(epoch, step)``; successive steps within an
    epoch cover every voxel exactly once (the last batch may be short).
    Returns ``(coords, flat_indices)``.
    """
    dims = tuple(int(d) for d in dims)
    total = prod(dims)
    if batch_size > total:
        raise ArgumentError(f"batch_size {batch_size} exceeds {total} voxels")
    epoch, step = epoch_position
    n_steps = -(-total // batch_size)
    if not 0 <= step < n_steps:
        raise ArgumentError(f"step {step} outside [0, {n_steps}) for this epoch")
    perm = epoch_permutation(total, seed, epoch)
    idx = perm[step * batch_size:(step + 1) * batch_size]
    return voxel_coords(idx, dims), idx


def full_grid_coords(dims) -> np.ndarray:
    """All voxel centers in row-major order, shape (n_voxels, 3)."""
    return voxel_coords(np.arange(prod(dims)), tuple(int(d) for d in dims))
