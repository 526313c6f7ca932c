"""Shared training recipe and artifact writers used by the test suite.

Everything here is deterministic: fixed data seeds, fixed model seeds,
fixed optimizer schedules. The acceptance suite calls these twice to
verify byte-level reproducibility.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from surgseg.data import MotionSpec, VideoSequence, frame_pairs, synth_dataset
from surgseg.pipeline import PipelineConfig, run_pipeline, write_predicted_masks
from surgseg.segmenter import Segmenter, build_segmenter
from surgseg.tracker import Tracker, build_tracker, train_tracker
from surgseg.training import TrainConfig, TrainRecord, fine_tune

FINETUNE_CONFIG = TrainConfig(epochs=10, learning_rate=2e-3, batch_size=4, seed=0, rank=4)
TRACKER_STEPS = 2000
TRACKER_LR = 1e-3
TRACKER_SEED = 0
MODEL_SEED = 0


def build_train_seqs() -> list[VideoSequence]:
    one = synth_dataset(100, num_sequences=8, n_frames=40)
    two = synth_dataset(200, num_sequences=4, n_frames=40, motion=MotionSpec(num_instruments=2))
    return one + two


def build_eval_suite() -> list[VideoSequence]:
    return synth_dataset(500, num_sequences=5, n_frames=60)


def snapshot_params(module) -> dict[str, bytes]:
    return {
        name: p.detach().cpu().numpy().astype(np.float32).tobytes()
        for name, p in module.named_parameters()
    }


def train_segmenter_full(train_seqs) -> tuple[Segmenter, TrainRecord, dict[str, bytes]]:
    seg = build_segmenter(seed=MODEL_SEED)
    seg.inject_adapters(rank=FINETUNE_CONFIG.rank, seed=MODEL_SEED)
    pre_state = snapshot_params(seg)
    record = fine_tune(seg, frame_pairs(train_seqs), FINETUNE_CONFIG)
    return seg, record, pre_state


def train_tracker_full(train_seqs) -> Tracker:
    tracker = build_tracker(seed=TRACKER_SEED)
    train_tracker(tracker, train_seqs, steps=TRACKER_STEPS, learning_rate=TRACKER_LR,
                  seed=TRACKER_SEED)
    return tracker


def write_eval_artifacts(seg: Segmenter, tracker: Tracker, eval_seqs, root: Path) -> None:
    """Masks and reports for the three evaluation modes: pure segmentation,
    pipeline with k=1, pipeline with k=3."""
    for seq in eval_seqs:
        runs = {
            "seg": run_pipeline(seq, seg, None, PipelineConfig(seed_frames=len(seq)),
                                model_label="fine-tuned segmenter"),
            "k1": run_pipeline(seq, seg, tracker, PipelineConfig(seed_frames=1),
                               model_label="segmenter+tracker k=1"),
            "k3": run_pipeline(seq, seg, tracker, PipelineConfig(seed_frames=3),
                               model_label="segmenter+tracker k=3"),
        }
        for label, result in runs.items():
            write_predicted_masks(result, seq, root / label / seq.seq_id)
            result.report.save_json(root / label / f"{seq.seq_id}.report.json")


def pooled_mean_iou(report_dir: Path) -> float:
    from surgseg.metrics import SegReport

    ious = []
    for path in sorted(report_dir.glob("*.report.json")):
        ious.extend(s.iou for s in SegReport.load_json(path).scores)
    return float(np.mean(ious))


def counting_oracle(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    """Independent per-pixel TP/FP/FN/TN counting loop."""
    tp = fp = fn = tn = 0
    for y in range(pred.shape[0]):
        for x in range(pred.shape[1]):
            p, g = bool(pred[y, x]), bool(gt[y, x])
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif not p and g:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn
