"""Command-line interface.

Subcommands cover the whole workflow: ``synth`` generates datasets,
``finetune`` adapts the segmenter, ``train-tracker`` fits the propagation
model, ``track`` runs the two-stage pipeline, ``eval`` scores predictions
against ground truth, and ``report`` renders comparison tables.

Exit codes: 0 success, 2 usage/configuration, 3 data, 4 numeric. Failures
print a single machine-parseable line ``ERROR <code>: <message>`` on
stderr. ``SURGSEG_CKPT_DIR`` supplies a default directory for checkpoint
paths that do not resolve as given.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .checkpoint import load_segmenter, save_segmenter
from .data import (
    DatasetManifest,
    MotionSpec,
    frame_pairs,
    load_dataset,
    load_mask_png,
    synth_dataset,
    write_sequence,
)
from .encoder import ViTConfig
from .errors import ConfigError, DataError, SurgSegError
from .metrics import SegReport, aggregate, frame_score
from .pipeline import PipelineConfig, run_pipeline, write_predicted_masks
from .report import ReportRow, render_csv, render_table, write_report_files
from .segmenter import BoxPrompt, build_segmenter
from .tracker import MemoryConfig, TrackerConfig, build_tracker, load_tracker, save_tracker, train_tracker
from .training import TrainConfig, fine_tune

CKPT_ENV = "SURGSEG_CKPT_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # noqa: D102 - argparse hook
        self.print_usage(sys.stderr)
        print(f"ERROR 2: {message}", file=sys.stderr)
        raise SystemExit(2)


def _resolve_ckpt(path_str: str) -> Path:
    path = Path(path_str)
    if path.exists():
        return path
    env_dir = os.environ.get(CKPT_ENV)
    if env_dir and not path.is_absolute():
        candidate = Path(env_dir) / path
        if candidate.exists():
            return candidate
    raise DataError(f"checkpoint not found: {path_str}")


def _vit_for_frames(frame_size: int) -> ViTConfig:
    if frame_size % 8 != 0:
        raise DataError(f"frame size {frame_size} not divisible by patch size 8")
    return ViTConfig(image_size=frame_size)


def _cmd_synth(args: argparse.Namespace) -> int:
    motion = MotionSpec(num_instruments=args.instruments, occluder=not args.no_occluder)
    seqs = synth_dataset(args.seed, args.sequences, args.frames, args.size, motion)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seq in seqs:
        write_sequence(seq, out)
    DatasetManifest(root=out, split=args.split, sequences=[s.seq_id for s in seqs]).save()
    print(f"wrote {len(seqs)} sequence(s) x {args.frames} frames to {out}")
    return 0


def _cmd_finetune(args: argparse.Namespace) -> int:
    seqs = load_dataset(args.data, require_masks=True)
    pairs = frame_pairs(seqs)
    val_pairs = frame_pairs(load_dataset(args.val_data, require_masks=True)) if args.val_data else None

    vit = _vit_for_frames(seqs[0].frame_size)
    seg = build_segmenter(vit, seed=args.seed)
    targets = tuple(t.strip() for t in args.targets.split(",") if t.strip())
    seg.inject_adapters(rank=args.rank, alpha=args.alpha, targets=targets, seed=args.seed)

    cfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        rank=args.rank,
        alpha=args.alpha,
        targets=targets,
    )
    out = Path(args.out)
    log_dir = Path(args.log_dir) if args.log_dir else out.parent / f"{out.stem}_logs"
    record = fine_tune(seg, pairs, cfg, val_pairs=val_pairs, log_dir=log_dir)
    sha = save_segmenter(out, seg)
    final = record.epochs[-1]
    val = "" if final.val_miou is None else f", val mIoU {final.val_miou:.4f}"
    print(f"fine-tuned {len(record.epochs)} epochs, final loss {final.mean_loss:.4f}{val}")
    print(f"wrote checkpoint {out} (sha256 {sha[:12]}), logs in {log_dir}")
    return 0


def _cmd_train_tracker(args: argparse.Namespace) -> int:
    seqs = load_dataset(args.data, require_masks=True)
    tracker = build_tracker(TrackerConfig(frame_size=seqs[0].frame_size), seed=args.seed)
    out = Path(args.out)
    log_dir = Path(args.log_dir) if args.log_dir else out.parent / f"{out.stem}_logs"
    record = train_tracker(
        tracker, seqs, steps=args.steps, learning_rate=args.lr, seed=args.seed, log_dir=log_dir
    )
    sha = save_tracker(out, tracker)
    print(f"trained tracker for {args.steps} steps, final loss {record.losses[-1]:.4f}")
    print(f"wrote checkpoint {out} (sha256 {sha[:12]}), logs in {log_dir}")
    return 0


def _parse_seed_indices(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part.strip()) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"--seed-frames must be comma-separated integers, got {text!r}") from exc


def _cmd_track(args: argparse.Namespace) -> int:
    segmenter = load_segmenter(_resolve_ckpt(args.ckpt_seg))
    tracker = load_tracker(_resolve_ckpt(args.ckpt_track)) if args.ckpt_track else None

    seed_indices = _parse_seed_indices(args.seed_frames) if args.seed_frames else None
    user_boxes = None
    if args.prompt == "user-box":
        if not args.box:
            raise ConfigError("--prompt user-box requires at least one --box")
        boxes = [BoxPrompt.parse(b) for b in args.box]
        indices = list(seed_indices) if seed_indices else list(range(args.seed_k))
        if len(boxes) != len(indices):
            raise ConfigError(f"{len(boxes)} boxes supplied for {len(indices)} seed frames")
        user_boxes = dict(zip(indices, boxes))

    cfg = PipelineConfig(
        seed_frames=args.seed_k,
        prompt_source=args.prompt,
        user_boxes=user_boxes,
        memory=MemoryConfig(
            capacity=args.mem_capacity, insert_period=args.mem_period, top_k=args.top_k
        ),
        seed_indices=seed_indices,
    )

    require_masks = args.prompt == "gt-box"
    video_root = Path(args.video)
    seqs = load_dataset(video_root, require_masks=require_masks)
    single = (video_root / "images").is_dir() and len(seqs) == 1
    out = Path(args.out)
    for seq in seqs:
        result = run_pipeline(seq, segmenter, tracker, cfg)
        dest = out if single else out / seq.seq_id
        paths = write_predicted_masks(result, seq, dest)
        print(f"{seq.seq_id}: wrote {len(paths)} masks to {dest}")
    return 0


def _collect_masks(root: Path) -> dict[str, dict[int, Path]]:
    """Map sequence label -> frame index -> mask path for a prediction or
    ground-truth directory (flat PNGs, a masks/ subdir, or sequence dirs)."""
    from .data import _numeric_index

    if not root.exists():
        raise DataError(f"mask directory not found: {root}")

    def flat(d: Path) -> dict[int, Path] | None:
        pngs = sorted(d.glob("*.png"))
        if pngs:
            return {_numeric_index(p): p for p in pngs}
        if (d / "masks").is_dir():
            return {_numeric_index(p): p for p in sorted((d / "masks").glob("*.png"))}
        return None

    direct = flat(root)
    if direct:
        return {"": direct}
    collected: dict[str, dict[int, Path]] = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        entry = flat(sub)
        if entry:
            collected[sub.name] = entry
    if not collected:
        raise DataError(f"no mask PNGs found under {root}")
    return collected


def _cmd_eval(args: argparse.Namespace) -> int:
    pred = _collect_masks(Path(args.pred))
    gt = _collect_masks(Path(args.gt))
    if len(pred) == 1 and len(gt) == 1:
        pairs = [(next(iter(pred.values())), next(iter(gt.values())))]
    else:
        missing = sorted(set(pred) - set(gt))
        if missing:
            raise DataError(f"prediction sequences missing from ground truth: {missing}")
        pairs = [(pred[name], gt[name]) for name in sorted(pred)]

    scores = []
    for pred_map, gt_map in pairs:
        for idx in sorted(pred_map):
            if idx not in gt_map:
                raise DataError(f"no ground-truth mask for frame {idx}")
            scores.append(
                frame_score(load_mask_png(pred_map[idx]), load_mask_png(gt_map[idx]), frame_index=idx)
            )
    report = aggregate(scores, dataset=args.dataset, model=args.model or Path(args.pred).name)
    paths = write_report_files(report, args.out, figures=not args.no_figure)
    print(render_table([ReportRow.from_report(report)]), end="")
    print(f"wrote report files to {Path(args.out)}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    rows = []
    for item in args.inputs.split(","):
        path = Path(item.strip())
        if path.is_dir():
            path = path / "report.json"
        if not path.exists():
            raise DataError(f"report not found: {path}")
        rows.append(ReportRow.from_report(SegReport.load_json(path)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = render_table(rows)
    (out / "comparison.txt").write_text(table)
    (out / "comparison.csv").write_text(render_csv(rows))
    if not args.no_figure:
        from .figures import save_metric_bars

        save_metric_bars(rows, out / "comparison.png")
    print(table, end="")
    print(f"wrote comparison files to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surgseg", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--sequences", type=int, default=1)
    p.add_argument("--instruments", type=int, default=1, choices=(1, 2))
    p.add_argument("--no-occluder", action="store_true")
    p.add_argument("--split", default="synth")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("finetune", help="fine-tune the segmenter with low-rank adapters")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-data")
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--targets", default="q,v")
    p.add_argument("--log-dir")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("train-tracker", help="train the memory tracker on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--log-dir")
    p.set_defaults(func=_cmd_train_tracker)

    p = sub.add_parser("track", help="run the two-stage pipeline over a video")
    p.add_argument("--video", required=True)
    p.add_argument("--ckpt-seg", required=True)
    p.add_argument("--ckpt-track")
    p.add_argument("--out", required=True)
    p.add_argument("--seed-k", type=int, default=1)
    p.add_argument("--seed-frames", help="explicit seed frame indices, e.g. 0,1,2")
    p.add_argument("--prompt", choices=("gt-box", "user-box"), default="gt-box")
    p.add_argument("--box", action="append", help="x_min,y_min,x_max,y_max (repeatable)")
    p.add_argument("--mem-capacity", type=int, default=16)
    p.add_argument("--mem-period", type=int, default=5)
    p.add_argument("--top-k", type=int, default=32)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", default="")
    p.add_argument("--model", default="")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="render a comparison table from saved reports")
    p.add_argument("--inputs", required=True, help="comma-separated report.json paths or dirs")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except SurgSegError as exc:
        message = " ".join(str(exc).split())
        print(f"ERROR {exc.exit_code}: {message}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
