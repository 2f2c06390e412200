"""Per-block prior tokens: feature extraction, attention fusion, quantization.

The pipeline turns each volume block into K quantized latent tokens:

* a compact trainable 3-stage strided 3-D convolutional encoder (kernel 2,
  stride 2 per stage, total stride 8) with a per-cell projection and
  spatial mean-pooling into ``tokens_per_branch`` embeddings per branch;
* per-branch residual self-attention, concatenation with learnable
  positions, then cross-attention with learnable bottleneck query tokens;
* nearest-codeword quantization against a learnable codebook with a
  straight-through gradient: downstream gradients reach the continuous
  tokens as if quantization were identity, while codewords learn only
  through the quantization loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError, DimensionError, ShapeError, StateError
from .nn import ParamStore, attention, glorot_uniform, sine_layer_uniform
from .volume import Volume

__all__ = [
    "PriorConfig",
    "Codebook",
    "PriorTokens",
    "extractor_param_shapes",
    "init_extractor_params",
    "extract_features_graph",
    "extract_features",
    "fusion_param_shapes",
    "init_fusion_params",
    "fuse_graph",
    "fuse",
    "init_codebook",
    "nearest_codewords",
    "quantize",
    "quantize_st",
    "quantization_loss",
    "reset_dead_codes",
]

BRANCHES = ("high", "low", "raw")


@dataclass(frozen=True)
class PriorConfig:
    """Sizes of the prior pipeline.

    Desk-scale defaults; the published-scale operating point (width 512,
    codebook 256) is reachable through the same fields.
    """

    width: int = 64
    codebook_size: int = 64
    tokens_per_branch: int = 8
    bottleneck_tokens: int = 4
    branches: tuple[str, ...] = BRANCHES

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ArgumentError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.bottleneck_tokens < 1:
            raise ArgumentError(f"bottleneck_tokens must be >= 1, got {self.bottleneck_tokens}")
        if not self.branches or any(b not in BRANCHES for b in self.branches):
            raise ArgumentError(f"branches must be a non-empty subset of {BRANCHES}")

    @property
    def channels(self) -> tuple[int, int, int]:
        return (max(4, self.width // 4), max(8, self.width // 2), self.width)


@dataclass
class Codebook:
    """``codebook_size`` learnable codewords of the prior width, plus usage counters."""

    codewords: np.ndarray
    usage_counts: np.ndarray = None

    def __post_init__(self):
        if self.codewords.ndim != 2 or self.codewords.shape[0] < 2:
            raise ArgumentError(f"codewords must be (d >= 2, width), got {self.codewords.shape}")
        if not np.all(np.isfinite(self.codewords)):
            raise ArgumentError("codewords must all be finite")
        if self.usage_counts is None:
            self.usage_counts = np.zeros(self.codewords.shape[0], dtype=np.int64)
        if self.usage_counts.shape != (self.codewords.shape[0],):
            raise ShapeError(
                f"usage_counts length {self.usage_counts.shape} vs {self.codewords.shape[0]} codewords"
            )

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    @property
    def width(self) -> int:
        return self.codewords.shape[1]


@dataclass(frozen=True)
class PriorTokens:
    """Continuous fused tokens, their quantized counterparts, and codeword indices."""

    z: np.ndarray
    z_q: np.ndarray
    indices: np.ndarray


def init_codebook(cfg: PriorConfig, rng, dtype=np.float32) -> Codebook:
    cw = rng.normal(0.0, 1.0, size=(cfg.codebook_size, cfg.width)).astype(dtype)
    return Codebook(codewords=cw)


# feature extraction ---------------------------------------------------------


def extractor_param_shapes(cfg: PriorConfig) -> dict[str, tuple]:
    c1, c2, c3 = cfg.channels
    return {
        "s1/W": (8, c1), "s1/b": (c1,),
        "s2/W": (8 * c1, c2), "s2/b": (c2,),
        "s3/W": (8 * c2, c3), "s3/b": (c3,),
        "proj/W": (c3, cfg.width), "proj/b": (cfg.width,),
    }


def init_extractor_params(cfg: PriorConfig, rng, dtype=np.float32) -> ParamStore:
    ps = ParamStore()
    for name, shape in extractor_param_shapes(cfg).items():
        if name.endswith("/b"):
            ps.add(name, np.zeros(shape, dtype=dtype))
        elif name == "proj/W":
            ps.add(name, glorot_uniform(rng, shape, dtype))
        else:
            ps.add(name, sine_layer_uniform(rng, shape, omega=1.0, dtype=dtype))
    return ps


def _merge_cells(x: Tensor) -> Tensor:
    """(nb, d, h, w, c) -> (nb, d/2, h/2, w/2, 8c) non-overlapping 2x2x2 grouping."""
    nb, d, h, w, c = x.shape
    x = ad.reshape(x, (nb, d // 2, 2, h // 2, 2, w // 2, 2, c))
    x = ad.permute(x, (0, 1, 3, 5, 2, 4, 6, 7))
    return ad.reshape(x, (nb, d // 2, h // 2, w // 2, 8 * c))


def _merge_cells_np(x: np.ndarray) -> np.ndarray:
    nb, d, h, w, c = x.shape
    x = x.reshape(nb, d // 2, 2, h // 2, 2, w // 2, 2, c)
    x = np.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    return np.ascontiguousarray(x.reshape(nb, d // 2, h // 2, w // 2, 8 * c))


def check_extractor_dims(dims, cfg: PriorConfig):
    if any(s % 8 for s in dims):
        raise DimensionError(f"dims {tuple(dims)} must be divisible by the total stride 8")
    cells = (dims[0] // 8) * (dims[1] // 8) * (dims[2] // 8)
    if cells % cfg.tokens_per_branch:
        raise DimensionError(
            f"pooled grid of {cells} cells is not divisible into {cfg.tokens_per_branch} token groups"
        )


def extract_features_graph(vols: np.ndarray, tensors, cfg: PriorConfig) -> Tensor:
    """Differentiable extractor over a stack of blocks.

    ``vols`` has shape (n_blocks, D, H, W); output is (n_blocks, T_b, width).
    """
    check_extractor_dims(vols.shape[1:], cfg)
    x = Tensor(_merge_cells_np(vols[..., None]))
    for stage in ("s1", "s2", "s3"):
        x = ad.sine(ad.add(ad.matmul(x, tensors[f"{stage}/W"]), tensors[f"{stage}/b"]))
        if stage != "s3":
            x = _merge_cells(x)
    x = ad.add(ad.matmul(x, tensors["proj/W"]), tensors["proj/b"])
    nb = x.shape[0]
    cells = x.shape[1] * x.shape[2] * x.shape[3]
    t_b = cfg.tokens_per_branch
    x = ad.reshape(x, (nb, t_b, cells // t_b, cfg.width))
    return ad.tmean(x, axis=2)


def extract_features(v: Volume, branch_params: ParamStore, cfg: PriorConfig = None) -> np.ndarray:
    """Evaluation-mode embeddings (tokens_per_branch, width) for one volume."""
    cfg = cfg or PriorConfig()
    vols = v.data.astype(np.float32)[None]
    out = extract_features_graph(vols, branch_params.tensors(requires_grad=False), cfg)
    return out.data[0]


# fusion ---------------------------------------------------------------------


def fusion_param_shapes(cfg: PriorConfig) -> dict[str, tuple]:
    v = cfg.width
    shapes = {}
    for br in cfg.branches:
        shapes[f"{br}/ln/g"] = (v,)
        shapes[f"{br}/ln/b"] = (v,)
        for w in ("Wq", "Wk", "Wv", "Wo"):
            shapes[f"{br}/att/{w}"] = (v, v)
    seq_len = len(cfg.branches) * cfg.tokens_per_branch + cfg.bottleneck_tokens
    shapes["pos"] = (seq_len, v)
    shapes["zf"] = (cfg.bottleneck_tokens, v)
    for w in ("Wq", "Wk", "Wv", "Wo"):
        shapes[f"mca/{w}"] = (v, v)
    return shapes


def init_fusion_params(cfg: PriorConfig, rng, dtype=np.float32) -> ParamStore:
    ps = ParamStore()
    for name, shape in fusion_param_shapes(cfg).items():
        if name.endswith("ln/g"):
            ps.add(name, np.ones(shape, dtype=dtype))
        elif name.endswith("ln/b"):
            ps.add(name, np.zeros(shape, dtype=dtype))
        elif name == "pos":
            ps.add(name, rng.normal(0.0, 0.02, size=shape).astype(dtype))
        elif name == "zf":
            ps.add(name, rng.normal(0.0, 1.0, size=shape).astype(dtype))
        else:
            ps.add(name, glorot_uniform(rng, shape, dtype))
    return ps


def fuse_graph(feats: dict[str, Tensor], tensors, cfg: PriorConfig) -> Tensor:
    """Fuse per-branch token stacks into exactly K bottleneck tokens.

    Per branch: residual single-head self-attention over its tokens with a
    layer-norm front (``E = MSA(LN(w)) + w``).  The branch outputs are
    concatenated, learnable positions added over the whole sequence, and
    the bottleneck tokens (plus their own position slots) query the
    sequence through cross-attention.
    """
    v = cfg.width
    scale = 1.0 / np.sqrt(v)
    es = []
    nb = None
    for br in cfg.branches:
        w = feats[br]
        if w.shape[-1] != v or w.shape[-2] != cfg.tokens_per_branch:
            raise ShapeError(f"branch {br}: tokens {w.shape} vs ({cfg.tokens_per_branch}, {v})")
        nb = w.shape[0]
        xn = ad.layer_norm(w, tensors[f"{br}/ln/g"], tensors[f"{br}/ln/b"])
        att = attention(
            ad.matmul(xn, tensors[f"{br}/att/Wq"]),
            ad.matmul(xn, tensors[f"{br}/att/Wk"]),
            ad.matmul(xn, tensors[f"{br}/att/Wv"]),
            scale,
        )
        es.append(ad.add(ad.matmul(att, tensors[f"{br}/att/Wo"]), w))
    seq = es[0] if len(es) == 1 else ad.concat(es, axis=1)
    s = len(cfg.branches) * cfg.tokens_per_branch
    k = cfg.bottleneck_tokens
    seq = ad.add(seq, ad.narrow(tensors["pos"], 0, 0, s))
    queries = ad.broadcast_to(
        ad.add(tensors["zf"], ad.narrow(tensors["pos"], 0, s, k)), (nb, k, v)
    )
    att = attention(
        ad.matmul(queries, tensors["mca/Wq"]),
        ad.matmul(seq, tensors["mca/Wk"]),
        ad.matmul(seq, tensors["mca/Wv"]),
        scale,
    )
    return ad.matmul(att, tensors["mca/Wo"])


def fuse(branch_features: dict[str, np.ndarray], fusion_params: ParamStore,
         cfg: PriorConfig = None) -> np.ndarray:
    """Evaluation-mode fusion of one block's branch features into (K, width)."""
    cfg = cfg or PriorConfig()
    feats = {br: Tensor(np.asarray(branch_features[br])[None]) for br in cfg.branches}
    out = fuse_graph(feats, fusion_params.tensors(requires_grad=False), cfg)
    return out.data[0]


# quantization ---------------------------------------------------------------


def nearest_codewords(z: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """Nearest codeword index per token by Euclidean distance, lowest index on ties."""
    if z.shape[-1] != codewords.shape[1]:
        raise ShapeError(f"token width {z.shape[-1]} vs codeword width {codewords.shape[1]}")
    diff = z[..., None, :].astype(np.float64) - codewords.astype(np.float64)
    return np.argmin((diff * diff).sum(axis=-1), axis=-1)


def quantize(z: np.ndarray, cb: Codebook) -> PriorTokens:
    """Map each token to its nearest codeword; increments usage counters."""
    z = np.asarray(z)
    idx = nearest_codewords(z, cb.codewords)
    np.add.at(cb.usage_counts, idx.ravel(), 1)
    return PriorTokens(z=z, z_q=cb.codewords[idx], indices=idx)


def quantize_st(z: Tensor, codeword_tensor: Tensor, cb: Codebook):
    """In-graph quantization with the straight-through gradient contract.

    Returns ``(z_q, indices, codeword_rows)`` where ``z_q`` carries identity
    gradients back to ``z`` and ``codeword_rows`` is the differentiable
    codebook lookup used by the quantization loss.
    """
    idx = nearest_codewords(z.data, cb.codewords)
    np.add.at(cb.usage_counts, idx.ravel(), 1)
    rows = ad.gather_rows(codeword_tensor, idx)
    z_q = ad.add(z, ad.stop_gradient(ad.sub(rows, z)))
    return z_q, idx, rows


def quantization_loss(z, z_q):
    """Mean over tokens of squared Euclidean distance ``|sg[z] - z_q|^2``.

    The continuous tokens are gradient-stopped, so only codewords learn
    from this term.  Accepts arrays (returns float) or tensors (returns a
    graph node).
    """
    graph = isinstance(z, Tensor) or isinstance(z_q, Tensor)
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    qt = z_q if isinstance(z_q, Tensor) else Tensor(np.asarray(z_q, dtype=np.float64))
    if zt.shape != qt.shape:
        raise ShapeError(f"quantization_loss: shapes {zt.shape} vs {qt.shape}")
    d = ad.sub(ad.stop_gradient(zt), qt)
    loss = ad.tmean(ad.tsum(ad.mul(d, d), axis=-1))
    return loss if graph else float(loss.data)


def reset_dead_codes(cb: Codebook, z_samples, threshold: int, rng=None) -> Codebook:
    """Re-seed under-used codewords from recent encoder outputs.

    Codewords whose usage count since the last reset is below ``threshold``
    are replaced by randomly chosen rows of ``z_samples``; all counters
    reset to zero.  Mitigates codebook collapse; disabled by passing
    threshold 0.
    """
    if threshold < 0:
        raise ArgumentError(f"threshold must be >= 0, got {threshold}")
    dead = cb.usage_counts < threshold
    if dead.any():
        samples = np.asarray(z_samples).reshape(-1, cb.width) if z_samples is not None else np.empty((0, cb.width))
        if samples.size == 0:
            raise StateError(f"{int(dead.sum())} dead codewords but no encoder samples to re-seed from")
        rng = rng or np.random.default_rng(0)
        pick = rng.integers(0, samples.shape[0], size=int(dead.sum()))
        cb.codewords[dead] = samples[pick].astype(cb.codewords.dtype)
    cb.usage_counts[:] = 0
    return cb
