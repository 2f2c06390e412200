"""Command-line surface tying the pipeline together.

Verbs: ``synth``, ``train``, ``distill``, ``encode`` (train + serialize),
``decode``, ``eval``, ``sweep``, ``ablate``, ``dump``.  A single JSON
config document mirrors TrainConfig / ModelSpec / PriorConfig::

    {"train": {"epochs_teacher": 120, "seed": 3,
               "optimizer": {"learning_rate_max": 3e-4}},
     "model": {"hidden_width": 96},
     "prior": {"width": 64, "codebook_size": 64}}

Exit code is zero only when every requested unit of work succeeded.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import container as ct
from .errors import VxsError
from .inr import ModelSpec
from .metrics import psnr, ssim
from .optim import OptimizerConfig
from .prior import PriorConfig
from .sweep import (SOURCE_BYTES_PER_VOXEL, distillation_ablation, frequency_ablation,
                    rd_sweep, timing_report)
from .training import (TrainConfig, block_psnrs, distill_student, load_state, save_state,
                       train_teacher, write_manifest)
from .volume import BlockSet, load_with_sidecar, normalize, save_raw, synth_volume

__all__ = ["main", "load_config", "load_corpus", "write_corpus"]


def load_config(path) -> tuple[TrainConfig, ModelSpec, PriorConfig]:
    doc = json.loads(Path(path).read_text()) if path else {}
    train_doc = dict(doc.get("train", {}))
    opt = OptimizerConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in train_doc.pop("optimizer", {}).items()})
    cfg = TrainConfig(optimizer=opt, **train_doc)
    spec = ModelSpec(**doc.get("model", {}))
    prior_doc = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.get("prior", {}).items()}
    prior = PriorConfig(**prior_doc)
    return cfg, spec, prior


def write_corpus(blocks: BlockSet, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    members = []
    for i, b in enumerate(blocks):
        name = f"vol_{i:03d}.raw"
        save_raw(b, out_dir / name)
        members.append(name)
    listing = {"block_dims": list(blocks.block_dims), "members": members,
               "sources": [b.source_id for b in blocks]}
    path = out_dir / "corpus.json"
    path.write_text(json.dumps(listing, indent=2))
    return path


def load_corpus(corpus_dir, normalize_mode=None) -> BlockSet:
    corpus_dir = Path(corpus_dir)
    listing = json.loads((corpus_dir / "corpus.json").read_text())
    blocks = []
    for name in listing["members"]:
        vol = load_with_sidecar(corpus_dir / name)
        if not vol.is_normalized:
            vol = normalize(vol, mode=normalize_mode or "minmax")
        blocks.append(vol)
    return BlockSet(tuple(blocks), tuple(listing["block_dims"]))


def _add_common(p):
    p.add_argument("--config", default=None, help="JSON config document")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out-dir", default=None, help="artifact directory")


def _cfg_from(args):
    cfg, spec, prior = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg, spec, prior


def _cmd_synth(args):
    cfg, _, _ = _cfg_from(args)
    dims = tuple(int(x) for x in args.dims.split(","))
    kinds = args.kinds.split(",")
    seed0 = cfg.seed if args.seed is None else args.seed
    blocks = tuple(synth_volume(kinds[i % len(kinds)], dims, seed0 + i)
                   for i in range(args.count))
    path = write_corpus(BlockSet(blocks, dims), args.out_dir or "corpus")
    print(f"wrote {args.count} blocks to {path.parent}")
    return 0


def _cmd_train(args):
    cfg, spec, prior = _cfg_from(args)
    blocks = load_corpus(args.corpus)
    out = Path(args.out_dir or "run")
    state = train_teacher(blocks, cfg, spec, prior, run_dir=out)
    save_state(state, out / "teacher_state.npz")
    vals = block_psnrs(state, blocks)
    print(f"teacher: {state.n_params} params, PSNR per block {[round(v, 2) for v in vals]}")
    return 0


def _cmd_distill(args):
    cfg, _, _ = _cfg_from(args)
    teacher = load_state(args.teacher)
    blocks = load_corpus(args.corpus)
    out = Path(args.out_dir or "run-student")
    terms = tuple(args.terms.split(","))
    student = distill_student(teacher, blocks, cfg, terms=terms, run_dir=out)
    save_state(student, out / "student_state.npz")
    vals = block_psnrs(student, blocks)
    print(f"student: {student.n_params} params, PSNR per block {[round(v, 2) for v in vals]}")
    return 0


def _cmd_encode(args):
    cfg, spec, prior = _cfg_from(args)
    blocks = load_corpus(args.corpus)
    out_dir = Path(args.out_dir or Path(args.out).parent or ".")
    t0 = time.perf_counter()
    state = train_teacher(blocks, cfg, spec, prior)
    if args.student:
        state = distill_student(state, blocks, cfg)
    blob = ct.serialize(state, half_precision=args.half)
    encode_s = time.perf_counter() - t0
    Path(args.out).write_bytes(blob)
    save_state(state, out_dir / f"{state.kind}_state.npz")
    t0 = time.perf_counter()
    vals = [psnr(ct.decode(blob, i), b) for i, b in enumerate(blocks)]
    decode_s = time.perf_counter() - t0
    write_manifest(out_dir, state, cfg,
                   metrics={"psnr_per_block": vals,
                            "ratio": ct.compression_ratio(len(blob), blocks, SOURCE_BYTES_PER_VOXEL)},
                   timings={"encode_seconds": encode_s,
                            "decode_seconds_per_block": decode_s / len(blocks)})
    print(f"encoded {len(blocks)} blocks -> {args.out} "
          f"({len(blob)} bytes, ratio {ct.compression_ratio(len(blob), blocks, SOURCE_BYTES_PER_VOXEL):.2f}, "
          f"mean PSNR {np.mean(vals):.2f} dB)")
    return 0


def _cmd_decode(args):
    blob = Path(args.container).read_bytes()
    header = ct.read_header(blob)
    out_dir = Path(args.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = range(header["n_blocks"]) if args.block is None else [args.block]
    for i in indices:
        vol = ct.decode(blob, i)
        target = Path(args.out) if (args.out and args.block is not None) else out_dir / f"block_{i:03d}.raw"
        save_raw(vol, target)
        print(f"decoded block {i} -> {target}")
    return 0


def _cmd_eval(args):
    blob = Path(args.container).read_bytes()
    blocks = load_corpus(args.corpus)
    rows = []
    for i, b in enumerate(blocks):
        rec = ct.decode(blob, i)
        rows.append({"block": i, "psnr_db": psnr(rec, b), "ssim": ssim(rec, b)})
    report = {
        "ratio": ct.compression_ratio(len(blob), blocks, SOURCE_BYTES_PER_VOXEL),
        "container_bytes": len(blob),
        "mean_psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
        "blocks": rows,
    }
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_sweep(args):
    cfg, spec, prior = _cfg_from(args)
    blocks = load_corpus(args.corpus)
    targets = [float(x) for x in args.targets.split(",")]
    points, failures = rd_sweep(blocks, targets, cfg, spec, prior,
                                out_dir=args.out_dir or "sweep")
    for p in points:
        print(f"ratio {p.ratio:8.2f}  psnr {p.psnr_db:6.2f} dB  ssim {p.ssim:.4f}")
    for f in failures:
        print(f"FAILED target {f['target']}: {f['error']}", file=sys.stderr)
    return 1 if failures else 0


def _cmd_ablate(args):
    cfg, spec, prior = _cfg_from(args)
    blocks = load_corpus(args.corpus)
    if args.which == "frequency":
        report = frequency_ablation(blocks, cfg, spec, prior)
    else:
        report = distillation_ablation(blocks, cfg, template=spec, prior=prior)
    text = json.dumps(report, indent=2)
    out_dir = Path(args.out_dir or "ablate")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{args.which}_ablation.json").write_text(text)
    print(text)
    return 0


def _cmd_dump(args):
    print(ct.dump_header(Path(args.container).read_bytes()))
    return 0


def _cmd_timing(args):
    print(json.dumps(timing_report(args.run_dir, run_baseline=not args.no_baseline), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vxs", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic block corpus")
    p.add_argument("--dims", default="16,64,64")
    p.add_argument("--kind", dest="kinds", default="mixed",
                   help="comma list cycled over blocks: smooth_blobs,stripes,checker,mixed")
    p.add_argument("--count", type=int, default=4)
    _add_common(p)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="stage-1 teacher training")
    p.add_argument("--corpus", required=True)
    _add_common(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("distill", help="stage-2 student distillation")
    p.add_argument("--corpus", required=True)
    p.add_argument("--teacher", required=True, help="teacher_state.npz from train")
    p.add_argument("--terms", default="code,kd,out")
    _add_common(p)
    p.set_defaults(fn=_cmd_distill)

    p = sub.add_parser("encode", help="train and serialize a container")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="container path (.vxs)")
    p.add_argument("--student", action="store_true", help="distill before serializing")
    p.add_argument("--half", action="store_true", help="16-bit parameter payload")
    _add_common(p)
    p.set_defaults(fn=_cmd_encode)

    p = sub.add_parser("decode", help="reconstruct blocks from a container")
    p.add_argument("--container", required=True)
    p.add_argument("--block", type=int, default=None, help="single block index (default: all)")
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(fn=_cmd_decode)

    p = sub.add_parser("eval", help="PSNR/SSIM of a container against its corpus")
    p.add_argument("--container", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("sweep", help="rate-distortion sweep over ratio targets")
    p.add_argument("--corpus", required=True)
    p.add_argument("--targets", default="8,16,32")
    _add_common(p)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("ablate", help="frequency-prior or distillation ablation")
    p.add_argument("--corpus", required=True)
    p.add_argument("--which", choices=("frequency", "distillation"), default="frequency")
    _add_common(p)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("dump", help="print a container header as JSON")
    p.add_argument("--container", required=True)
    _add_common(p)
    p.set_defaults(fn=_cmd_dump)

    p = sub.add_parser("timing", help="encode/decode timing report from run manifests")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--no-baseline", action="store_true")
    _add_common(p)
    p.set_defaults(fn=_cmd_timing)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except VxsError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
