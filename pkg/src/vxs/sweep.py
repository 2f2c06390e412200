"""Rate-distortion sweeps, ablation runners, and encode/decode timing.

``rd_sweep`` sizes the network by binary search so the on-disk container
hits each requested compression ratio within +-10%, trains that
configuration, measures PSNR/SSIM/wall-clock, and emits CSV + JSON.

``timing_report`` aggregates run manifests and re-runs the counterfactual
baseline: independent per-block sine-MLP fits at matched total parameter
budget and matched step schedule, the comparison behind the joint-encoding
speed claim.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .container import compression_ratio, decode, serialize
from .errors import ArgumentError
from .inr import ModelSpec, embed_coords, epoch_permutation, full_grid_coords, init_inr_params, \
    inr_param_count, predict_graph, voxel_coords
from .metrics import RDPoint, psnr, ssim, write_rd_csv, write_rd_json
from .nn import ParamStore, mse
from .optim import adamw_step
from .prior import PriorConfig
from .training import (TrainConfig, block_psnrs, distill_student, init_teacher,
                       spec_for_budget, teacher_param_count, train_teacher)
from .autodiff import Tensor
from .volume import BlockSet, volume_from_source_id

__all__ = [
    "config_digest",
    "dry_container_size",
    "width_for_ratio",
    "rd_sweep",
    "fit_independent",
    "timing_report",
    "frequency_ablation",
    "distillation_ablation",
]

SOURCE_BYTES_PER_VOXEL = 4


def config_digest(cfg: TrainConfig, spec: ModelSpec, prior: PriorConfig) -> str:
    blob = json.dumps({"train": asdict(cfg), "model": asdict(spec), "prior": asdict(prior)},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def dry_container_size(blocks: BlockSet, cfg: TrainConfig, spec: ModelSpec,
                       prior: PriorConfig) -> int:
    """Exact container byte count for a configuration, without training."""
    state = init_teacher(blocks.block_dims, cfg, spec, prior)
    state.per_block_indices = np.zeros((len(blocks), prior.bottleneck_tokens), dtype=np.int64)
    return len(serialize(state))


def width_for_ratio(target: float, blocks: BlockSet, cfg: TrainConfig, template: ModelSpec,
                    prior: PriorConfig, width_bounds=(6, 512), tolerance=0.10):
    """Find a hidden width whose container lands within tolerance of the ratio.

    The achieved ratio decreases monotonically in width; a binary search
    brackets the target and nearby widths are scanned.  Returns
    ``(width, predicted_ratio)`` or raises ``ArgumentError`` when no width
    in bounds reaches the window.
    """
    lo, hi = width_bounds

    def ratio_at(w):
        size = dry_container_size(blocks, cfg, replace(template, hidden_width=w), prior)
        return compression_ratio(size, blocks, SOURCE_BYTES_PER_VOXEL)

    r_lo, r_hi = ratio_at(lo), ratio_at(hi)
    if target > r_lo * (1 + tolerance) or target < r_hi * (1 - tolerance):
        raise ArgumentError(
            f"ratio {target} unreachable in width bounds {width_bounds} "
            f"(achievable {r_hi:.2f}..{r_lo:.2f})"
        )
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ratio_at(mid) >= target:
            lo = mid
        else:
            hi = mid
    best, best_rel = None, None
    for w in range(max(width_bounds[0], lo - 2), min(width_bounds[1], hi + 2) + 1):
        rel = abs(ratio_at(w) - target) / target
        if best_rel is None or rel < best_rel:
            best, best_rel = w, rel
    if best_rel > tolerance:
        raise ArgumentError(f"no width lands within {tolerance:.0%} of ratio {target}")
    return best, ratio_at(best)


def rd_sweep(blocks: BlockSet, ratio_targets, cfg: TrainConfig, template: ModelSpec = None,
             prior: PriorConfig = None, out_dir=None, tolerance=0.10):
    """One trained operating point per requested compression ratio.

    Returns ``(points, failures)``; a failed target is recorded and the
    sweep continues.  With ``out_dir`` set, containers plus
    ``rd_points.csv`` / ``rd_points.json`` / ``rd_failures.json`` land there.
    """
    template = template or ModelSpec()
    prior = prior or PriorConfig()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    points, failures = [], []
    for target in ratio_targets:
        try:
            width, predicted = width_for_ratio(target, blocks, cfg, template, prior,
                                               tolerance=tolerance)
            spec = replace(template, hidden_width=width)
            t0 = time.perf_counter()
            state = train_teacher(blocks, cfg, spec, prior)
            blob = serialize(state)
            encode_s = time.perf_counter() - t0
            actual = compression_ratio(len(blob), blocks, SOURCE_BYTES_PER_VOXEL)
            if abs(actual - target) / target > tolerance:
                raise ArgumentError(f"achieved ratio {actual:.2f} misses target {target}")
            t0 = time.perf_counter()
            decoded = [decode(blob, i) for i in range(len(blocks))]
            decode_s = time.perf_counter() - t0
            point = RDPoint(
                ratio=actual,
                psnr_db=float(np.mean([psnr(d, b) for d, b in zip(decoded, blocks)])),
                ssim=float(np.mean([ssim(d, b) for d, b in zip(decoded, blocks)])),
                encode_seconds=encode_s,
                decode_seconds=decode_s,
                config_digest=config_digest(cfg, spec, prior),
            )
            points.append(point)
            if out_dir is not None:
                (out_dir / f"point_r{target}.vxs").write_bytes(blob)
        except Exception as err:  # per-point failure record; the sweep continues
            failures.append({"target": target, "error": f"{type(err).__name__}: {err}"})
    if out_dir is not None:
        write_rd_csv(points, out_dir / "rd_points.csv")
        write_rd_json(points, out_dir / "rd_points.json")
        (out_dir / "rd_failures.json").write_text(json.dumps(failures, indent=2))
    return points, failures


# counterfactual baseline ------------------------------------------------------


def fit_independent(blocks: BlockSet, cfg: TrainConfig, total_param_budget: int,
                    epochs: int = None, mlp_depth: int = 4):
    """One plain sine-MLP fit per block at a matched total budget and schedule.

    Each block gets ``total_param_budget / N`` parameters and the same
    per-block coordinate visits as a joint run (same epoch count, batch
    size and permutations).  Returns ``(psnrs, wall_seconds)``.
    """
    epochs = cfg.epochs_teacher if epochs is None else epochs
    per_block = total_param_budget / len(blocks)
    template = ModelSpec(coord_embed_bands=6, mlp_depth=mlp_depth, transformer_blocks=0,
                         hidden_width=8)
    best, best_err = None, None
    for w in range(4, 513):
        cand = replace(template, hidden_width=w)
        err = abs(inr_param_count(cand, 1) - per_block)
        if best_err is None or err < best_err:
            best, best_err = cand, err
    spec = best
    dt = cfg.np_dtype
    dims = blocks.block_dims
    n_vox = blocks.voxels_per_block
    bs = min(cfg.coord_batch, n_vox)
    batches = -(-n_vox // bs)
    opt = replace(cfg.optimizer, total_steps=max(1, epochs * batches))
    dummy_tokens = np.zeros((1, 1, 1), dtype=dt)

    t0 = time.perf_counter()
    psnrs = []
    for bi, block in enumerate(blocks):
        params = init_inr_params(spec, 1, np.random.default_rng([cfg.seed, 40, bi]), dt)
        flat = block.data.reshape(-1).astype(dt)
        step = 0
        for epoch in range(epochs):
            perm = epoch_permutation(n_vox, cfg.seed, epoch)
            for s in range(batches):
                idx = perm[s * bs:(s + 1) * bs]
                emb = embed_coords(voxel_coords(idx, dims), spec.coord_embed_bands).astype(dt)[None]
                tensors = params.tensors()
                pred = predict_graph(emb, Tensor(dummy_tokens), tensors, spec)
                loss = mse(pred, Tensor(flat[idx][None]))
                loss.backward()
                step += 1
                adamw_step(params, params.collect_grads(tensors), opt, step)
        emb = embed_coords(full_grid_coords(dims), spec.coord_embed_bands).astype(dt)
        rec = np.empty(n_vox, dtype=np.float64)
        tensors = params.tensors(requires_grad=False)
        for lo in range(0, n_vox, 16384):
            rec[lo:lo + 16384] = predict_graph(emb[lo:lo + 16384][None], Tensor(dummy_tokens),
                                               tensors, spec).data[0]
        psnrs.append(psnr(np.clip(rec, 0, 1).reshape(dims), block.data.astype(np.float64)))
    return psnrs, time.perf_counter() - t0


def timing_report(run_dir, run_baseline: bool = True) -> dict:
    """Wall-clock totals from run manifests plus the joint-vs-independent ratio.

    Scans ``run_dir`` for ``*manifest.json`` files written by training
    runs.  With ``run_baseline`` the synthetic corpus is regenerated from
    the manifest and the matched-budget independent fits are timed.
    """
    run_dir = Path(run_dir)
    manifests = sorted(run_dir.glob("*manifest.json"))
    if not manifests:
        raise FileNotFoundError(f"no run manifests under {run_dir}")
    report = {"runs": []}
    for path in manifests:
        doc = json.loads(path.read_text())
        n_blocks = max(1, len(doc.get("corpus", [])))
        entry = {
            "manifest": path.name,
            "kind": doc.get("kind"),
            "encode_seconds": doc.get("timings", {}).get("encode_seconds"),
            "decode_seconds_per_block": doc.get("timings", {}).get("decode_seconds_per_block"),
            "encode_seconds_per_block": None,
            "n_blocks": n_blocks,
        }
        if entry["encode_seconds"] is not None:
            entry["encode_seconds_per_block"] = entry["encode_seconds"] / n_blocks
        if run_baseline and doc.get("kind") == "teacher" and doc.get("corpus"):
            blocks = BlockSet(tuple(volume_from_source_id(s) for s in doc["corpus"]),
                              tuple(doc["block_dims"]))
            cfg = TrainConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                                 for k, v in doc["config"].items() if k != "optimizer"},
                              optimizer=_opt_from(doc["config"]["optimizer"]))
            psnrs, wall = fit_independent(blocks, cfg, doc["n_params"])
            entry["independent_encode_seconds"] = wall
            entry["independent_psnr_per_block"] = psnrs
            if entry["encode_seconds"]:
                entry["joint_vs_independent_speedup"] = wall / entry["encode_seconds"]
        report["runs"].append(entry)
    return report


def _opt_from(doc):
    from .optim import OptimizerConfig
    return OptimizerConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()})


# ablation runners ----------------------------------------------------------------


def frequency_ablation(blocks: BlockSet, cfg: TrainConfig, template: ModelSpec = None,
                       prior: PriorConfig = None) -> dict:
    """Raw-only vs high+low+raw priors at equal total parameter budget."""
    template = template or ModelSpec()
    prior = prior or PriorConfig()
    full_prior = replace(prior, branches=("high", "low", "raw"))
    raw_prior = replace(prior, branches=("raw",))
    budget = teacher_param_count(template, full_prior)
    raw_spec = spec_for_budget(budget, raw_prior, template)
    full_state = train_teacher(blocks, cfg, template, full_prior)
    raw_state = train_teacher(blocks, cfg, raw_spec, raw_prior)
    return {
        "full": {"psnr_per_block": block_psnrs(full_state, blocks),
                 "n_params": full_state.n_params},
        "raw_only": {"psnr_per_block": block_psnrs(raw_state, blocks),
                     "n_params": raw_state.n_params},
    }


def distillation_ablation(blocks: BlockSet, cfg: TrainConfig, teacher=None,
                          template: ModelSpec = None, prior: PriorConfig = None) -> dict:
    """Full three-term distillation vs the output-alignment-only variant."""
    if teacher is None:
        teacher = train_teacher(blocks, cfg, template, prior)
    full = distill_student(teacher, blocks, cfg, terms=("code", "kd", "out"))
    out_only = distill_student(teacher, blocks, cfg, terms=("out",))
    return {
        "teacher": {"psnr_per_block": block_psnrs(teacher, blocks)},
        "full": {"psnr_per_block": block_psnrs(full, blocks)},
        "out_only": {"psnr_per_block": block_psnrs(out_only, blocks)},
    }
