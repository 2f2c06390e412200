"""Two-stage optimization: joint teacher fitting, then student distillation.

Stage 1 trains one conditional network over every block at once: per step,
a group of blocks is pushed through wavelet-split -> feature extraction ->
fusion -> quantization, the network predicts a coordinate batch for each
block, and AdamW minimizes ``L = L_recon + gamma * L_quant`` under a
cosine-annealed learning rate.

Stage 2 freezes the codebook and distills into a student with a single
raw-image branch and roughly half the total parameters, minimizing
``L_code + beta1 * L_KD + beta2 * L_out`` (discrete code alignment,
temperature-softened latent divergence, and three-way output alignment).

Every run can write a JSON manifest (config, seeds, per-epoch losses,
final metrics) beside its artifacts.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError, ConfigError, NumericError, ShapeError
from .inr import (CoordBatch, ModelSpec, embed_coords, epoch_permutation, full_grid_coords,
                  init_inr_params, inr_param_count, predict_graph, voxel_coords)
from .metrics import psnr
from .nn import ParamStore, kl_softmax, mse
from .optim import OptimizerConfig, adamw_step, cosine_lr
from .prior import (Codebook, PriorConfig, extractor_param_shapes, extract_features_graph,
                    fusion_param_shapes, init_codebook, init_extractor_params,
                    init_fusion_params, fuse_graph, quantization_loss, quantize_st,
                    reset_dead_codes, check_extractor_dims)
from .volume import BlockSet, Volume
from .wavelet import split_bands

__all__ = [
    "TrainConfig",
    "TeacherState",
    "StudentState",
    "UnconditionedState",
    "init_teacher",
    "train_teacher",
    "teacher_loss",
    "code_alignment_loss",
    "output_alignment_loss",
    "distill_student",
    "init_student",
    "student_spec_for",
    "spec_for_budget",
    "teacher_param_count",
    "student_param_count",
    "train_unconditioned",
    "block_psnrs",
    "save_state",
    "load_state",
    "write_manifest",
]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for both stages.

    ``optimizer.total_steps`` is re-derived from the epoch/batch geometry
    of each run so the cosine schedule always spans the whole run.
    """

    epochs_teacher: int = 300
    epochs_student: int = 150
    block_batch: int = 4
    coord_batch: int = 4096
    gamma: float = 0.25
    beta1: float = 0.5
    beta2: float = 1.0
    tau: float = 2.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    fine_tune_teacher: bool = False
    dead_code_threshold: int = 1
    extractor_lr_scale: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.gamma, self.beta1, self.beta2) < 0:
            raise ArgumentError("gamma/beta1/beta2 must be >= 0")
        if self.tau <= 0:
            raise ArgumentError(f"tau must be positive, got {self.tau}")
        if min(self.epochs_teacher, self.epochs_student) < 0 or min(self.block_batch, self.coord_batch) < 1:
            raise ArgumentError("epoch counts must be >= 0 and batch sizes >= 1")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def paper_scale_config(seed=0) -> tuple["TrainConfig", ModelSpec, PriorConfig]:
    """The published operating point: 800/400 epochs, lr 1e-5, width-512 priors, 256 codes."""
    cfg = TrainConfig(
        epochs_teacher=800, epochs_student=400, block_batch=4, seed=seed,
        optimizer=OptimizerConfig(learning_rate_max=1e-5, learning_rate_min=1e-7),
    )
    spec = ModelSpec(hidden_width=512, transformer_blocks=1, mlp_depth=4)
    prior = PriorConfig(width=512, codebook_size=256, tokens_per_branch=8, bottleneck_tokens=4)
    return cfg, spec, prior


# states ----------------------------------------------------------------------


@dataclass
class TeacherState:
    inr_params: ParamStore
    extractor_params: dict[str, ParamStore]
    fusion_params: ParamStore
    codebook: Codebook
    codebook_params: ParamStore
    model_spec: ModelSpec
    prior_cfg: PriorConfig
    block_dims: tuple[int, int, int]
    per_block_indices: np.ndarray = None
    loss_history: list = field(default_factory=list)
    sources: list = field(default_factory=list)

    @property
    def n_params(self) -> int:
        return (self.inr_params.n_params + self.fusion_params.n_params
                + sum(ps.n_params for ps in self.extractor_params.values()))

    kind = "teacher"


@dataclass
class StudentState(TeacherState):
    kind = "student"


@dataclass
class UnconditionedState:
    """Conditioning-free baseline: K shared learnable tokens plus the same network."""

    inr_params: ParamStore
    token_params: ParamStore
    model_spec: ModelSpec
    prior_cfg: PriorConfig
    block_dims: tuple[int, int, int]
    loss_history: list = field(default_factory=list)

    @property
    def n_params(self) -> int:
        return self.inr_params.n_params + self.token_params.n_params


# parameter accounting ---------------------------------------------------------


def _shapes_count(shapes) -> int:
    return sum(int(np.prod(s)) for s in shapes.values())


def teacher_param_count(spec: ModelSpec, prior: PriorConfig) -> int:
    """Trainable parameters excluding the (shared) codebook."""
    return (inr_param_count(spec, prior.width)
            + len(prior.branches) * _shapes_count(extractor_param_shapes(prior))
            + _shapes_count(fusion_param_shapes(prior)))


student_param_count = teacher_param_count


def spec_for_budget(target_params: int, prior: PriorConfig, template: ModelSpec,
                    max_width=2048) -> ModelSpec:
    """Pick the hidden width whose total parameter count lands nearest the target."""
    best, best_err = None, None
    for w in range(4, max_width + 1):
        cand = replace(template, hidden_width=w)
        err = abs(teacher_param_count(cand, prior) - target_params)
        if best_err is None or err < best_err:
            best, best_err = cand, err
    return best


def student_spec_for(teacher_spec: ModelSpec, teacher_prior: PriorConfig) -> tuple[ModelSpec, PriorConfig]:
    """Student sizing: raw branch only, hidden width chosen for a ~0.5 parameter ratio."""
    student_prior = replace(teacher_prior, branches=("raw",))
    target = teacher_param_count(teacher_spec, teacher_prior) / 2
    template = replace(teacher_spec, role="student")
    spec = spec_for_budget(int(round(target)), student_prior, template,
                           max_width=max(8, 2 * teacher_spec.hidden_width))
    return spec, student_prior


# initialization ----------------------------------------------------------------


def _rng(seed, *tags):
    return np.random.default_rng([int(seed)] + [int(t) for t in tags])


_BRANCH_TAG = {"high": 1, "low": 2, "raw": 3}


def init_teacher(block_dims, cfg: TrainConfig, model_spec: ModelSpec = None,
                 prior_cfg: PriorConfig = None, codebook: Codebook = None,
                 seed_tag: int = 0) -> TeacherState:
    model_spec = model_spec or ModelSpec()
    prior_cfg = prior_cfg or PriorConfig()
    check_extractor_dims(block_dims, prior_cfg)
    dt = cfg.np_dtype
    ext = {br: init_extractor_params(prior_cfg, _rng(cfg.seed, seed_tag, _BRANCH_TAG[br]), dt)
           for br in prior_cfg.branches}
    fus = init_fusion_params(prior_cfg, _rng(cfg.seed, seed_tag, 10), dt)
    inr = init_inr_params(model_spec, prior_cfg.width, _rng(cfg.seed, seed_tag, 11), dt)
    if codebook is None:
        codebook = init_codebook(prior_cfg, _rng(cfg.seed, seed_tag, 12), dt)
    elif codebook.width != prior_cfg.width:
        raise ConfigError(f"codebook width {codebook.width} vs prior width {prior_cfg.width}")
    cb_params = ParamStore()
    cb_params.add("codewords", codebook.codewords)
    return TeacherState(inr_params=inr, extractor_params=ext, fusion_params=fus,
                        codebook=codebook, codebook_params=cb_params,
                        model_spec=model_spec, prior_cfg=prior_cfg,
                        block_dims=tuple(int(d) for d in block_dims))


# shared forward pieces ----------------------------------------------------------


def _branch_volumes(blocks: BlockSet, branches, dtype) -> dict[str, np.ndarray]:
    """Stacked per-branch input volumes (N, D, H, W) for the whole block set."""
    raw = np.stack([b.data for b in blocks]).astype(dtype)
    out = {}
    if "raw" in branches:
        out["raw"] = raw
    if "high" in branches or "low" in branches:
        lows, highs = [], []
        for b in blocks:
            pair = split_bands(b)
            lows.append(pair.low.data)
            highs.append(pair.high.data)
        if "low" in branches:
            out["low"] = np.stack(lows).astype(dtype)
        if "high" in branches:
            out["high"] = np.stack(highs).astype(dtype)
    return out


def _prior_graph(state: TeacherState, vols, ext_tensors, fus_tensors, cb_tensor):
    feats = {br: extract_features_graph(vols[br], ext_tensors[br], state.prior_cfg)
             for br in state.prior_cfg.branches}
    z = fuse_graph(feats, fus_tensors, state.prior_cfg)
    z_q, idx, rows = quantize_st(z, cb_tensor, state.codebook)
    return z, z_q, idx, rows


def _validate_blocks(blocks: BlockSet, prior_cfg: PriorConfig):
    if len(blocks) < 1:
        raise ArgumentError("need at least one block")
    for b in blocks:
        if not b.is_normalized:
            raise ArgumentError(f"block {b.source_id!r} is not normalized to [0, 1]")
    if any(s % 2 for s in blocks.block_dims):
        raise ArgumentError(f"block dims {blocks.block_dims} must be even for the wavelet split")
    check_extractor_dims(blocks.block_dims, prior_cfg)


def _block_groups(n, block_batch):
    return [list(range(i, min(i + block_batch, n))) for i in range(0, n, block_batch)]


def teacher_loss(block: Volume, state: TeacherState, gamma: float,
                 coords: CoordBatch = None) -> tuple[float, dict]:
    """Single-block training objective ``L_t = L_recon + gamma * L_quant``.

    Without an explicit coordinate batch the full voxel grid is used.
    Returns the total plus its components; the total is recombined from
    the reported components so the decomposition identity is exact.
    """
    dt = next(iter(state.inr_params.items()))[1].dtype
    vols = _branch_volumes(BlockSet((block,), block.dims), state.prior_cfg.branches, dt)
    if coords is None:
        pts = full_grid_coords(block.dims)
        targets = block.data.reshape(1, -1).astype(dt)
    else:
        pts = coords.coords
        targets = np.asarray(coords.targets, dtype=dt).reshape(1, -1)
    emb = embed_coords(pts, state.model_spec.coord_embed_bands).astype(dt)[None]
    ext_t = {br: state.extractor_params[br].tensors(requires_grad=False) for br in state.prior_cfg.branches}
    z, z_q, _, rows = _prior_graph(state, vols, ext_t,
                                   state.fusion_params.tensors(requires_grad=False),
                                   state.codebook_params.tensors(requires_grad=False)["codewords"])
    pred = predict_graph(emb, z_q, state.inr_params.tensors(requires_grad=False), state.model_spec)
    l_recon = float(mse(pred, Tensor(targets)).data)
    l_quant = float(quantization_loss(z, rows).data)
    if not np.isfinite(l_recon) or not np.isfinite(l_quant):
        raise NumericError(f"non-finite teacher loss: recon={l_recon}, quant={l_quant}")
    total = l_recon + gamma * l_quant
    return total, {"recon": l_recon, "quant": l_quant, "total": total}


# teacher training -----------------------------------------------------------------


def train_teacher(blocks: BlockSet, cfg: TrainConfig, model_spec: ModelSpec = None,
                  prior_cfg: PriorConfig = None, run_dir=None) -> TeacherState:
    """Stage-1 optimization of the shared conditional network over all blocks.

    Per epoch every voxel of every block is visited exactly once through a
    fixed per-epoch permutation; one optimizer step is taken per block
    group and coordinate batch.  Under-used codewords are re-seeded from
    recent encoder outputs at epoch boundaries (``cfg.dead_code_threshold``).
    """
    model_spec = model_spec or ModelSpec()
    prior_cfg = prior_cfg or PriorConfig()
    _validate_blocks(blocks, prior_cfg)
    state = init_teacher(blocks.block_dims, cfg, model_spec, prior_cfg)
    state.sources = [b.source_id for b in blocks]
    t0 = time.perf_counter()
    dt = cfg.np_dtype
    vols = _branch_volumes(blocks, prior_cfg.branches, dt)
    targets_flat = np.stack([b.data.reshape(-1) for b in blocks]).astype(dt)

    n_vox = blocks.voxels_per_block
    bs = min(cfg.coord_batch, n_vox)
    batches = -(-n_vox // bs)
    groups = _block_groups(len(blocks), cfg.block_batch)
    steps_per_epoch = len(groups) * batches
    opt = replace(cfg.optimizer, total_steps=max(1, cfg.epochs_teacher * steps_per_epoch))
    dead_rng = _rng(cfg.seed, 20)
    group_vols = [{br: vols[br][g] for br in vols} for g in groups]

    step = 0
    z_reservoir = []
    for epoch in range(cfg.epochs_teacher):
        perm = epoch_permutation(n_vox, cfg.seed, epoch)
        acc = {"loss": 0.0, "recon": 0.0, "quant": 0.0}
        for gi, group in enumerate(groups):
            for bi in range(batches):
                idx = perm[bi * bs:(bi + 1) * bs]
                emb = embed_coords(voxel_coords(idx, blocks.block_dims),
                                   model_spec.coord_embed_bands).astype(dt)
                emb = np.broadcast_to(emb[None], (len(group),) + emb.shape)
                tgt = targets_flat[group][:, idx]

                ext_t = {br: state.extractor_params[br].tensors() for br in prior_cfg.branches}
                fus_t = state.fusion_params.tensors()
                inr_t = state.inr_params.tensors()
                cb_t = state.codebook_params.tensors()
                z, z_q, _, rows = _prior_graph(state, group_vols[gi], ext_t, fus_t, cb_t["codewords"])
                pred = predict_graph(emb, z_q, inr_t, model_spec)
                l_recon = mse(pred, Tensor(tgt))
                l_quant = quantization_loss(z, rows)
                loss = ad.add(l_recon, ad.mul(l_quant, cfg.gamma))
                lf = float(loss.data)
                if not np.isfinite(lf):
                    raise NumericError(
                        f"non-finite teacher loss at epoch {epoch}, blocks {group}"
                    )
                loss.backward()
                step += 1
                adamw_step(state.inr_params, state.inr_params.collect_grads(inr_t), opt, step)
                adamw_step(state.fusion_params, state.fusion_params.collect_grads(fus_t), opt, step)
                for br in prior_cfg.branches:
                    adamw_step(state.extractor_params[br],
                               state.extractor_params[br].collect_grads(ext_t[br]),
                               opt, step, lr_scale=cfg.extractor_lr_scale)
                adamw_step(state.codebook_params, state.codebook_params.collect_grads(cb_t), opt, step)

                rf = float(l_recon.data)
                qf = float(l_quant.data)
                acc["loss"] += rf + cfg.gamma * qf
                acc["recon"] += rf
                acc["quant"] += qf
                if len(z_reservoir) > 63:
                    z_reservoir.pop(0)
                z_reservoir.append(z.data.reshape(-1, prior_cfg.width).copy())
        state.loss_history.append({
            "epoch": epoch,
            "loss": acc["loss"] / steps_per_epoch,
            "recon": acc["recon"] / steps_per_epoch,
            "quant": acc["quant"] / steps_per_epoch,
            "lr": cosine_lr(min(step, opt.total_steps), opt),
        })
        if cfg.dead_code_threshold:
            reset_dead_codes(state.codebook, np.concatenate(z_reservoir),
                             cfg.dead_code_threshold, dead_rng)

    state.per_block_indices = record_indices(state, blocks)
    if run_dir is not None:
        metrics = {"psnr_per_block": block_psnrs(state, blocks)}
        write_manifest(run_dir, state, cfg, metrics,
                       timings={"encode_seconds": time.perf_counter() - t0})
    return state


def record_indices(state: TeacherState, blocks: BlockSet) -> np.ndarray:
    """Evaluation-mode forward pass that freezes each block's codeword indices."""
    dt = next(iter(state.inr_params.items()))[1].dtype
    vols = _branch_volumes(blocks, state.prior_cfg.branches, dt)
    out = []
    for group in _block_groups(len(blocks), 8):
        ext_t = {br: state.extractor_params[br].tensors(requires_grad=False)
                 for br in state.prior_cfg.branches}
        gv = {br: vols[br][group] for br in vols}
        _, _, idx, _ = _prior_graph(state, gv, ext_t,
                                    state.fusion_params.tensors(requires_grad=False),
                                    state.codebook_params.tensors(requires_grad=False)["codewords"])
        out.append(idx)
    return np.concatenate(out, axis=0)


def predict_block(state, block_index: int, coords=None, chunk=16384) -> np.ndarray:
    """Evaluate the network for one block's stored indices; unclamped output."""
    if state.per_block_indices is None:
        raise ArgumentError("state has no recorded per-block indices yet")
    dt = next(iter(state.inr_params.items()))[1].dtype
    z_q = state.codebook.codewords[state.per_block_indices[block_index]].astype(dt)
    pts = full_grid_coords(state.block_dims) if coords is None else np.asarray(coords)
    tensors = state.inr_params.tensors(requires_grad=False)
    outs = []
    for lo in range(0, len(pts), chunk):
        emb = embed_coords(pts[lo:lo + chunk], state.model_spec.coord_embed_bands).astype(dt)[None]
        outs.append(predict_graph(emb, Tensor(z_q[None]), tensors, state.model_spec).data[0])
    return np.concatenate(outs)


def block_psnrs(state, blocks: BlockSet) -> list[float]:
    """Decoded PSNR per block (network output clamped to [0, 1])."""
    vals = []
    for i, block in enumerate(blocks):
        rec = np.clip(predict_block(state, i), 0.0, 1.0).reshape(state.block_dims)
        vals.append(psnr(rec.astype(np.float64), block.data.astype(np.float64)))
    return vals


# distillation losses -----------------------------------------------------------


def _pair_loss(a, b):
    d = ad.sub(a, b)
    return ad.tmean(ad.tsum(ad.mul(d, d), axis=-1))


def code_alignment_loss(z_s, z_q_s, z_q_t):
    """Discrete alignment ``|z_s - sg[z_q_s]|^2 + |z_q_t - z_q_s|^2``.

    Per-token squared distances averaged over tokens.  The first term is
    the student commitment (its quantized tokens gradient-stopped); in
    training the second term reaches the student encoder through the
    straight-through tensor passed as ``z_q_s``.
    """
    graph = any(isinstance(x, Tensor) for x in (z_s, z_q_s, z_q_t))
    zs = z_s if isinstance(z_s, Tensor) else Tensor(np.asarray(z_s, dtype=np.float64))
    zqs = z_q_s if isinstance(z_q_s, Tensor) else Tensor(np.asarray(z_q_s, dtype=np.float64))
    zqt = z_q_t if isinstance(z_q_t, Tensor) else Tensor(np.asarray(z_q_t, dtype=np.float64))
    if zs.shape != zqs.shape or zqs.shape != zqt.shape:
        raise ShapeError(f"code_alignment_loss: shapes {zs.shape}/{zqs.shape}/{zqt.shape}")
    loss = ad.add(_pair_loss(zs, ad.stop_gradient(zqs)), _pair_loss(zqt, zqs))
    return loss if graph else float(loss.data)


def output_alignment_loss(pred_s, pred_t, targets):
    """Mean over coordinates of ``(s-t)^2 + (s-X)^2 + (t-X)^2``."""
    graph = any(isinstance(x, Tensor) for x in (pred_s, pred_t, targets))
    s = pred_s if isinstance(pred_s, Tensor) else Tensor(np.asarray(pred_s, dtype=np.float64))
    t = pred_t if isinstance(pred_t, Tensor) else Tensor(np.asarray(pred_t, dtype=np.float64))
    x = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets, dtype=np.float64))
    if s.shape != t.shape or t.shape != x.shape:
        raise ShapeError(f"output_alignment_loss: shapes {s.shape}/{t.shape}/{x.shape}")
    d1, d2, d3 = ad.sub(s, t), ad.sub(s, x), ad.sub(t, x)
    loss = ad.tmean(ad.add(ad.mul(d1, d1), ad.add(ad.mul(d2, d2), ad.mul(d3, d3))))
    return loss if graph else float(loss.data)


def init_student(teacher: TeacherState, cfg: TrainConfig, student_spec: ModelSpec = None,
                 student_prior: PriorConfig = None) -> StudentState:
    if student_spec is None or student_prior is None:
        student_spec, student_prior = student_spec_for(teacher.model_spec, teacher.prior_cfg)
    if student_prior.width != teacher.codebook.width:
        raise ConfigError(
            f"student prior width {student_prior.width} vs shared codebook width {teacher.codebook.width}"
        )
    state = init_teacher(teacher.block_dims, cfg, student_spec, student_prior,
                         codebook=teacher.codebook, seed_tag=1)
    return StudentState(**{k: getattr(state, k) for k in (
        "inr_params", "extractor_params", "fusion_params", "codebook", "codebook_params",
        "model_spec", "prior_cfg", "block_dims")})


def distill_student(teacher: TeacherState, blocks: BlockSet, cfg: TrainConfig,
                    terms=("code", "kd", "out"), student_spec: ModelSpec = None,
                    student_prior: PriorConfig = None, run_dir=None) -> StudentState:
    """Stage-2 distillation into a half-size raw-branch student.

    The codebook is frozen (both models quantize against the teacher's
    codewords); the teacher is frozen too unless ``cfg.fine_tune_teacher``
    lets its network weights follow the output-alignment gradients.
    ``terms`` toggles loss components for ablations.
    """
    if teacher.per_block_indices is None:
        raise ArgumentError("teacher must be trained (indices recorded) before distillation")
    student = init_student(teacher, cfg, student_spec, student_prior)
    student.sources = [b.source_id for b in blocks]
    _validate_blocks(blocks, student.prior_cfg)
    t0 = time.perf_counter()
    dt = cfg.np_dtype
    t_vols = _branch_volumes(blocks, teacher.prior_cfg.branches, dt)
    s_vols = _branch_volumes(blocks, student.prior_cfg.branches, dt)
    targets_flat = np.stack([b.data.reshape(-1) for b in blocks]).astype(dt)

    n_vox = blocks.voxels_per_block
    bs = min(cfg.coord_batch, n_vox)
    batches = -(-n_vox // bs)
    groups = _block_groups(len(blocks), cfg.block_batch)
    steps_per_epoch = len(groups) * batches
    opt = replace(cfg.optimizer, total_steps=max(1, cfg.epochs_student * steps_per_epoch))

    step = 0
    for epoch in range(cfg.epochs_student):
        perm = epoch_permutation(n_vox, cfg.seed, epoch)
        acc = {"loss": 0.0, "code": 0.0, "kd": 0.0, "out": 0.0}
        for gi, group in enumerate(groups):
            gt_vols = {br: t_vols[br][group] for br in t_vols}
            gs_vols = {br: s_vols[br][group] for br in s_vols}
            for bi in range(batches):
                idx = perm[bi * bs:(bi + 1) * bs]
                emb = embed_coords(voxel_coords(idx, blocks.block_dims),
                                   teacher.model_spec.coord_embed_bands).astype(dt)
                emb = np.broadcast_to(emb[None], (len(group),) + emb.shape)
                tgt = Tensor(targets_flat[group][:, idx])

                # teacher side: frozen except (optionally) its network weights
                t_ext = {br: teacher.extractor_params[br].tensors(requires_grad=False)
                         for br in teacher.prior_cfg.branches}
                t_fus = teacher.fusion_params.tensors(requires_grad=False)
                t_inr = teacher.inr_params.tensors(requires_grad=cfg.fine_tune_teacher)
                cb_const = teacher.codebook_params.tensors(requires_grad=False)["codewords"]
                z_t, zq_t, _, rows_t = _prior_graph(teacher, gt_vols, t_ext, t_fus, cb_const)
                pred_t = predict_graph(emb, zq_t, t_inr, teacher.model_spec)

                # student side
                s_ext = {br: student.extractor_params[br].tensors() for br in student.prior_cfg.branches}
                s_fus = student.fusion_params.tensors()
                s_inr = student.inr_params.tensors()
                z_s, zq_s, _, rows_s = _prior_graph(student, gs_vols, s_ext, s_fus, cb_const)
                pred_s = predict_graph(emb, zq_s, s_inr, student.model_spec)

                l_code = code_alignment_loss(z_s, zq_s, ad.stop_gradient(rows_t))
                l_kd = kl_softmax(z_t, z_s, cfg.tau)
                l_out = output_alignment_loss(pred_s, pred_t, tgt)
                parts = []
                if "code" in terms:
                    parts.append(l_code)
                if "kd" in terms:
                    parts.append(ad.mul(l_kd, cfg.beta1))
                if "out" in terms:
                    parts.append(ad.mul(l_out, cfg.beta2))
                loss = parts[0]
                for p in parts[1:]:
                    loss = ad.add(loss, p)
                lf = float(loss.data)
                if not np.isfinite(lf):
                    raise NumericError(f"non-finite distillation loss at epoch {epoch}, blocks {group}")
                loss.backward()
                step += 1
                adamw_step(student.inr_params, student.inr_params.collect_grads(s_inr), opt, step)
                adamw_step(student.fusion_params, student.fusion_params.collect_grads(s_fus), opt, step)
                for br in student.prior_cfg.branches:
                    adamw_step(student.extractor_params[br],
                               student.extractor_params[br].collect_grads(s_ext[br]),
                               opt, step, lr_scale=cfg.extractor_lr_scale)
                if cfg.fine_tune_teacher:
                    adamw_step(teacher.inr_params, teacher.inr_params.collect_grads(t_inr), opt, step)

                cf, kf, of = float(l_code.data), float(l_kd.data), float(l_out.data)
                acc["code"] += cf
                acc["kd"] += kf
                acc["out"] += of
                acc["loss"] += ((cf if "code" in terms else 0.0)
                                + (cfg.beta1 * kf if "kd" in terms else 0.0)
                                + (cfg.beta2 * of if "out" in terms else 0.0))
        student.loss_history.append({k: v / steps_per_epoch for k, v in acc.items()} | {"epoch": epoch})

    student.per_block_indices = record_indices(student, blocks)
    if run_dir is not None:
        metrics = {"psnr_per_block": block_psnrs(student, blocks)}
        write_manifest(run_dir, student, cfg, metrics,
                       timings={"encode_seconds": time.perf_counter() - t0})
    return student


# conditioning-free baseline ------------------------------------------------------


def train_unconditioned(blocks: BlockSet, cfg: TrainConfig, param_budget: int = None,
                        spec_template: ModelSpec = None, prior_cfg: PriorConfig = None,
                        epochs: int = None) -> UnconditionedState:
    """Joint fit of all blocks with constant learnable tokens (no conditioning).

    The prior pipeline is replaced by K free tokens shared across blocks;
    the hidden width is chosen so the total parameter count matches
    ``param_budget`` (a fair capacity-matched baseline).
    """
    prior_cfg = prior_cfg or PriorConfig()
    spec_template = spec_template or ModelSpec()
    epochs = cfg.epochs_teacher if epochs is None else epochs
    free = prior_cfg.bottleneck_tokens * prior_cfg.width
    if param_budget is not None:
        best, best_err = spec_template, None
        for w in range(4, 4 * spec_template.hidden_width + 1):
            cand = replace(spec_template, hidden_width=w)
            err = abs(inr_param_count(cand, prior_cfg.width) + free - param_budget)
            if best_err is None or err < best_err:
                best, best_err = cand, err
        spec = best
    else:
        spec = spec_template
    dt = cfg.np_dtype
    inr = init_inr_params(spec, prior_cfg.width, _rng(cfg.seed, 30), dt)
    tokens = ParamStore()
    tokens.add("tokens", _rng(cfg.seed, 31).normal(0, 1, (prior_cfg.bottleneck_tokens, prior_cfg.width)).astype(dt))
    state = UnconditionedState(inr_params=inr, token_params=tokens, model_spec=spec,
                               prior_cfg=prior_cfg, block_dims=blocks.block_dims)

    targets_flat = np.stack([b.data.reshape(-1) for b in blocks]).astype(dt)
    n_vox = blocks.voxels_per_block
    bs = min(cfg.coord_batch, n_vox)
    batches = -(-n_vox // bs)
    groups = _block_groups(len(blocks), cfg.block_batch)
    opt = replace(cfg.optimizer, total_steps=max(1, epochs * len(groups) * batches))
    step = 0
    for epoch in range(epochs):
        perm = epoch_permutation(n_vox, cfg.seed, epoch)
        total = 0.0
        for group in groups:
            for bi in range(batches):
                idx = perm[bi * bs:(bi + 1) * bs]
                emb = embed_coords(voxel_coords(idx, blocks.block_dims), spec.coord_embed_bands).astype(dt)
                emb = np.broadcast_to(emb[None], (len(group),) + emb.shape)
                inr_t = state.inr_params.tensors()
                tok_t = state.token_params.tensors()
                z_q = ad.broadcast_to(tok_t["tokens"],
                                      (len(group), prior_cfg.bottleneck_tokens, prior_cfg.width))
                pred = predict_graph(emb, z_q, inr_t, spec)
                loss = mse(pred, Tensor(targets_flat[group][:, idx]))
                lf = float(loss.data)
                if not np.isfinite(lf):
                    raise NumericError(f"non-finite unconditioned loss at epoch {epoch}")
                loss.backward()
                step += 1
                adamw_step(state.inr_params, state.inr_params.collect_grads(inr_t), opt, step)
                adamw_step(state.token_params, state.token_params.collect_grads(tok_t), opt, step)
                total += lf
        state.loss_history.append({"epoch": epoch, "loss": total / (len(groups) * batches)})
    return state


def unconditioned_psnrs(state: UnconditionedState, blocks: BlockSet, chunk=16384) -> list[float]:
    spec = state.model_spec
    dt = next(iter(state.inr_params.items()))[1].dtype
    tensors = state.inr_params.tensors(requires_grad=False)
    tokens = state.token_params["tokens"].astype(dt)
    pts = full_grid_coords(state.block_dims)
    outs = []
    for lo in range(0, len(pts), chunk):
        emb = embed_coords(pts[lo:lo + chunk], spec.coord_embed_bands).astype(dt)[None]
        outs.append(predict_graph(emb, Tensor(tokens[None]), tensors, spec).data[0])
    rec = np.clip(np.concatenate(outs), 0.0, 1.0).reshape(state.block_dims)
    return [psnr(rec, b.data.astype(np.float64)) for b in blocks]


# persistence ----------------------------------------------------------------------


def save_state(state: TeacherState, path):
    """Full trainer state (all stores + codebook + indices) as one .npz."""
    arrays = {}
    for name, arr in state.inr_params.items():
        arrays[f"inr::{name}"] = arr
    for br, ps in state.extractor_params.items():
        for name, arr in ps.items():
            arrays[f"ext.{br}::{name}"] = arr
    for name, arr in state.fusion_params.items():
        arrays[f"fus::{name}"] = arr
    arrays["codebook"] = state.codebook.codewords
    arrays["usage_counts"] = state.codebook.usage_counts
    if state.per_block_indices is not None:
        arrays["indices"] = state.per_block_indices
    meta = {
        "kind": state.kind,
        "model_spec": asdict(state.model_spec),
        "prior_cfg": asdict(state.prior_cfg),
        "block_dims": list(state.block_dims),
        "sources": state.sources,
        "loss_history": state.loss_history,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_state(path) -> TeacherState:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        spec = ModelSpec(**meta["model_spec"])
        prior = PriorConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in meta["prior_cfg"].items()})
        cls = StudentState if meta["kind"] == "student" else TeacherState
        inr, fus = ParamStore(), ParamStore()
        ext = {br: ParamStore() for br in prior.branches}
        for key in data.files:
            if key.startswith("inr::"):
                inr.add(key[5:], data[key])
            elif key.startswith("fus::"):
                fus.add(key[5:], data[key])
            elif key.startswith("ext."):
                br, name = key[4:].split("::", 1)
                ext[br].add(name, data[key])
        cb = Codebook(codewords=data["codebook"], usage_counts=data["usage_counts"])
        cb_params = ParamStore()
        cb_params.add("codewords", cb.codewords)
        state = cls(inr_params=inr, extractor_params=ext, fusion_params=fus, codebook=cb,
                    codebook_params=cb_params, model_spec=spec, prior_cfg=prior,
                    block_dims=tuple(meta["block_dims"]),
                    per_block_indices=data["indices"] if "indices" in data.files else None)
        state.sources = meta.get("sources", [])
        state.loss_history = meta.get("loss_history", [])
    return state


def write_manifest(run_dir, state, cfg: TrainConfig, metrics=None, timings=None) -> Path:
    """JSON run record: full config, seeds, per-epoch losses, final metrics."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "kind": state.kind,
        "config": asdict(cfg),
        "model_spec": asdict(state.model_spec),
        "prior_cfg": asdict(state.prior_cfg),
        "block_dims": list(state.block_dims),
        "n_params": state.n_params,
        "corpus": state.sources,
        "loss_history": state.loss_history,
        "metrics": metrics or {},
        "timings": timings or {},
    }
    path = run_dir / f"{state.kind}_manifest.json"
    path.write_text(json.dumps(doc, indent=2))
    return path
