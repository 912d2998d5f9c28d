"""Operator surface: gen | train | infer | eval.

Every command is seed-reproducible and writes a manifest sufficient to
re-run it.  Exit codes: 0 ok, 1 internal failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .autodiff import UsageError
from .config import ConfigError, RunConfig
from .data import (
    DatasetSpec,
    generate_synthetic,
    list_sequences,
    load_label_png,
    load_sequence,
    save_label_png,
    unpad,
    voc_palette,
)
from .engine import TrainingDiverged, infer_sequence, train_toy
from .flow import BlockMatchingFlow, ExternalFlow, GroundTruthFlow, ZeroFlow, FlowEstimator
from .geometry import flow_to_color
from .metrics import FrameScore, aggregate, score_sequence, write_reports
from .network import load_checkpoint

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _write_manifest(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"version": __version__, **payload}
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise UsageError(f"spec file {spec_path} does not exist")
    try:
        doc = json.loads(spec_path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"spec {spec_path} is not valid JSON: {exc}") from exc
    spec = DatasetSpec.from_json(doc)
    t0 = time.perf_counter()
    names = generate_synthetic(spec, args.out, frames_override=args.frames)
    _write_manifest(
        Path(args.out),
        {
            "command": "gen",
            "spec": doc,
            "frames_override": args.frames,
            "sequences": names,
            "seconds": time.perf_counter() - t0,
        },
    )
    print(f"generated {len(names)} sequences under {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    t0 = time.perf_counter()
    ckpt = train_toy(cfg, args.data, args.out, resume=args.resume, progress=_print_progress if args.verbose else None)
    _write_manifest(
        Path(args.out),
        {
            "command": "train",
            "config": cfg.to_json(),
            "config_hash": cfg.hash(),
            "data": str(args.data),
            "checkpoint": str(ckpt),
            "seconds": time.perf_counter() - t0,
        },
    )
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _print_progress(rec: dict) -> None:
    print(f"step {rec['step']:5d} stage {rec['stage']} loss {rec['loss']:.4f} lr {rec['lr']:.2e}")


# ---------------------------------------------------------------------------
# infer


def _estimator_for(seq, source: str, cfg: RunConfig) -> FlowEstimator:
    if source == "zero":
        return ZeroFlow()
    if source == "block":
        return BlockMatchingFlow(cfg.flow.block_radius, cfg.flow.block_size, cfg.flow.block_median)
    if source == "gt":
        if not seq.flows:
            raise UsageError(f"sequence {seq.name} carries no ground-truth flow files")
        return GroundTruthFlow(seq.flows)
    if source.startswith("external:"):
        return ExternalFlow(Path(source.split(":", 1)[1]) / seq.name)
    raise UsageError(f"unknown flow source {source!r}")


def cmd_infer(args) -> int:
    ckpt_dir = Path(args.ckpt)
    if not ckpt_dir.exists():
        raise UsageError(f"checkpoint {ckpt_dir} does not exist")
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    model, _ = load_checkpoint(ckpt_dir)
    out_root = Path(args.out)
    names = list_sequences(args.data)
    entries = []
    t0 = time.perf_counter()
    for idx, name in enumerate(names):
        seq = load_sequence(args.data, name)
        estimator = _estimator_for(seq, args.flow, cfg)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, idx]))
        result = infer_sequence(
            model,
            seq,
            estimator,
            mem_stride=cfg.memory.eval_stride,
            capacity=cfg.memory.capacity,
            rng=rng,
        )
        seq_dir = out_root / name
        seq_dir.mkdir(parents=True, exist_ok=True)
        for t, hard in enumerate(result.hard):
            save_label_png(seq_dir / f"{t:05d}.png", unpad(hard, seq.orig_hw))
        if args.overlay:
            _write_overlays(out_root / "overlay" / name, seq, result.hard)
        if args.flow_vis:
            _write_flow_vis(out_root / "flowvis" / name, seq, estimator)
        entries.append(result.manifest)
        print(
            f"{name}: {seq.num_frames} frames, "
            f"FPS {result.fps_including_flow:.2f} ({result.fps_excluding_flow:.2f})"
        )
    total = time.perf_counter() - t0
    frames_total = sum(e["frames"] for e in entries)
    flow_total = sum(e["frames"] / max(e["fps_including_flow"], 1e-9) - e["frames"] / max(e["fps_excluding_flow"], 1e-9) for e in entries)
    _write_manifest(
        out_root,
        {
            "command": "infer",
            "checkpoint": str(ckpt_dir),
            "config_hash": cfg.hash(),
            "flow_source": args.flow,
            "sequences": entries,
            "fps_including_flow": frames_total / max(total, 1e-9),
            "fps_excluding_flow": frames_total / max(total - flow_total, 1e-9),
            "seconds": total,
        },
    )
    return EXIT_OK


def _write_overlays(out_dir: Path, seq, hard_labels: list[np.ndarray]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    palette = np.array(voc_palette(), dtype=np.float32).reshape(256, 3) / 255.0
    for t, lab in enumerate(hard_labels):
        frame = unpad(seq.frames[t], seq.orig_hw).transpose(1, 2, 0)
        lab = unpad(lab, seq.orig_hw)
        color = palette[lab]
        fg = (lab > 0)[..., None]
        blend = np.where(fg, 0.5 * frame + 0.5 * color, frame)
        Image.fromarray((np.clip(blend, 0, 1) * 255).astype(np.uint8)).save(out_dir / f"{t:05d}.png")


def _write_flow_vis(out_dir: Path, seq, estimator: FlowEstimator) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for t in range(1, seq.num_frames):
        field = estimator.estimate(seq.frames[t], seq.frames[t - 1], pair_key=t)
        Image.fromarray(flow_to_color(field)).save(out_dir / f"{t:05d}.png")


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    gt_root = Path(args.gt)
    pred_root = Path(args.pred)
    names = list_sequences(gt_root)
    missing = [n for n in names if not (pred_root / n).is_dir()]
    if missing:
        raise UsageError(f"prediction directory is missing sequences: {missing}")
    records: list[FrameScore] = []
    for name in names:
        seq = load_sequence(gt_root, name)
        gt_labels = [unpad(seq.annotations[t], seq.orig_hw) for t in range(seq.num_frames)]
        preds = []
        for t in range(seq.num_frames):
            p = pred_root / name / f"{t:05d}.png"
            if not p.exists():
                raise UsageError(f"missing prediction {p}")
            preds.append(load_label_png(p))
        records.extend(score_sequence(preds, gt_labels, seq.first_annotation, sequence=name))
    report = aggregate(records)
    write_reports(records, report, args.out, csv_path=args.csv)
    print(f"{'sequence/object':<24} {'J':>8} {'F':>8}")
    for (seq_name, oid), scores in sorted(report.per_object.items()):
        print(f"{seq_name + '/' + str(oid):<24} {scores['J']:>8.4f} {scores['F']:>8.4f}")
    print(f"{'mean':<24} {report.mean_j:>8.4f} {report.mean_f:>8.4f}  J&F {report.j_and_f:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warpvos", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render a synthetic dataset")
    p.add_argument("--spec", required=True, help="dataset spec JSON")
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--frames", type=int, default=None, help="override frames per sequence")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="two-stage toy training")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--data", required=True, help="training dataset root")
    p.add_argument("--out", required=True, help="output directory (checkpoint + loss curve)")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="propagate first-frame masks through sequences")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--flow", default="gt", help="zero | gt | block | external:<dir>")
    p.add_argument("--out", required=True, help="prediction output root")
    p.add_argument("--config", default=None, help="optional run config JSON")
    p.add_argument("--overlay", action="store_true", help="write RGB overlays")
    p.add_argument("--flow-vis", action="store_true", help="write flow color-wheel PNGs")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="prediction root (palette PNGs)")
    p.add_argument("--gt", required=True, help="ground-truth dataset root")
    p.add_argument("--out", default="report.json", help="summary JSON path")
    p.add_argument("--csv", default=None, help="optional CSV export path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
