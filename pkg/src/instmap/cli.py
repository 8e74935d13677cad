"""Command-line entry point: fuse, summarize-likelihood, evaluate, synth."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import synth
from .camera import CameraIntrinsics
from .detections import LabelSpace, PayloadError
from .evaluation import evaluate_multi, format_ap_table, load_gt_points
from .fusion import AnnotatedFrame, AnnotatedInstance, build_statistical_matrix, summarize_evidence
from .pipeline import (
    ConfigError,
    PipelineConfig,
    export_map,
    iter_directory_frames,
    load_predictions,
    make_source,
    run_sequence,
)

logger = logging.getLogger("instmap")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar=f.name.upper(), help=argparse.SUPPRESS)


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {
        name[4:]: val for name, val in vars(args).items() if name.startswith("cfg_") and val is not None
    }
    if not overrides:
        return cfg
    merged = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    merged.update(overrides)
    return PipelineConfig.from_mapping(merged)


def cmd_fuse(args) -> int:
    cfg = _config(args)
    root = Path(args.input)
    if not root.is_dir():
        raise CliError(f"input directory not found: {root}")
    space = cfg.label_space()
    source = None if args.geometry_only else make_source(cfg, root, space)
    result = run_sequence(cfg, iter_directory_frames(root), source, space)
    paths = export_map(result, args.output)
    rep = result.report
    print(
        f"{rep.frames} frames, {rep.detection_frames} detection frames, "
        f"{len(result.map)} instances -> {paths['instances'].parent}"
    )
    return 0


def _annotated_log(path: Path, space: LabelSpace) -> list[AnnotatedFrame]:
    log = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            prompt = frozenset(_open(space, name, path, n) for name in rec["prompt"])
            insts = rec.get("instances")
            if insts is not None:
                insts = [
                    AnnotatedInstance(
                        _closed(space, inst["class"], path, n),
                        frozenset(_open(space, lb, path, n) for lb in inst["labels"]),
                    )
                    for inst in insts
                ]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CliError(f"{path}:{n}: malformed log record: {exc}") from None
        log.append(AnnotatedFrame(prompt, insts))
    return log


def _open(space, name, path, n) -> int:
    idx = space.open_index(name)
    if idx is None:
        raise CliError(f"{path}:{n}: unknown open-set label '{name}'")
    return idx


def _closed(space, name, path, n) -> int:
    idx = space.closed_index(name)
    if idx is None:
        raise CliError(f"{path}:{n}: unknown closed-set class '{name}'")
    return idx


def cmd_summarize(args) -> int:
    cfg = _config(args)
    space = cfg.label_space()
    path = Path(args.log)
    if not path.is_file():
        raise CliError(f"annotated log not found: {path}")
    ev = summarize_evidence(_annotated_log(path, space), space.n_open, space.n_closed)
    m = build_statistical_matrix(ev, space)
    m.save_csv(args.output, space)
    if args.evidence:
        ev.save_csv(args.evidence, space)
    print(f"{ev.skipped_frames} frames skipped; matrix written to {args.output}")
    return 0


def cmd_evaluate(args) -> int:
    pred = Path(args.pred)
    gt_path = Path(args.gt)
    if gt_path.is_dir():
        gt_path = gt_path / "gt.txt"
    for p in (pred, gt_path):
        if not p.exists():
            raise CliError(f"not found: {p}")
    cfg = _config(args)
    space = cfg.label_space()
    cell = args.cell if args.cell else cfg.voxel_length
    results = evaluate_multi(load_predictions(pred), load_gt_points(gt_path), tuple(args.iou), cell)
    print(format_ap_table(results, space.closed_set))
    return 0


def cmd_synth(args) -> int:
    space = LabelSpace.default()
    names = args.classes.split(",") if args.classes else ["cabinet", "chair", "table", "sofa", "bookshelf"]
    classes = []
    for name in names:
        c = space.closed_index(name)
        if c is None:
            raise CliError(f"unknown class '{name}'")
        classes.append(c)
    scene = synth.generate_scene(args.objects, classes, seed=args.seed)
    k = CameraIntrinsics.from_fov(args.width, args.height, args.hfov)
    model = synth.noisy_label_model(space, args.label_noise, synth.default_confusers(space), set(classes))
    corr = synth.Corruption(split_prob=args.split, dropout_prob=args.dropout)
    seq = synth.render_sequence(
        scene, synth.orbit_trajectory(args.frames), k, model, corr, args.stride, args.seed, args.window
    )
    synth.write_sequence(seq, args.output, space, args.voxel_length)
    print(f"{len(seq.frames)} frames, {len(scene.objects)} objects -> {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="instmap", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fuse", help="fuse an RGB-D sequence into an instance map")
    p.add_argument("--config")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--geometry-only", action="store_true", help="skip detections")
    _add_config_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("summarize-likelihood", help="label likelihood matrix from an annotated log")
    p.add_argument("--config")
    p.add_argument("--log", required=True, help="JSON lines: {frame, prompt, instances}")
    p.add_argument("--output", required=True)
    p.add_argument("--evidence", help="also write the raw evidence counts")
    _add_config_flags(p)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("evaluate", help="AP of an exported map against ground truth")
    p.add_argument("--config")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=float, nargs="+", default=[0.5])
    p.add_argument("--cell", type=float, help="voxel size of the IoU (default: voxel_length)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a synthetic box-scene sequence")
    p.add_argument("--output", required=True)
    p.add_argument("--objects", type=int, default=5)
    p.add_argument("--classes", help="comma-separated closed-set classes")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--width", type=int, default=240)
    p.add_argument("--height", type=int, default=180)
    p.add_argument("--hfov", type=float, default=70.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--split", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--voxel-length", type=float, default=0.02, help="ground-truth point spacing")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (CliError, ConfigError, PayloadError, FileNotFoundError, ValueError) as exc:
        print(f"instmap {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
