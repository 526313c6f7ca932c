"""surgseg: two-stage surgical video segmentation.

A miniature promptable ViT segmenter, fine-tuned through low-rank
adapters on frozen base weights, masks the first frames of a video; a
permanent-memory key-value tracker propagates those masks through the
rest. Includes dataset ingestion, a synthetic video generator, IoU/Dice
metrics, and report rendering.
"""

from .encoder import ImageEncoder, ViTConfig, build_image_encoder
from .lora import (
    FreezePolicy,
    LoRAAdapter,
    adapted_forward,
    count_adapter_params,
    inject,
    lora_param_count,
    merge,
    trainable_count,
)
from .segmenter import BoxPrompt, Segmenter, bbox_from_mask, build_segmenter
from .training import TrainConfig, TrainRecord, fine_tune, grad_check, seg_loss
from .tracker import (
    MemoryBank,
    MemoryConfig,
    Tracker,
    TrackerConfig,
    build_tracker,
    memory_read,
    propagate,
    train_tracker,
)
from .metrics import FrameScore, SegReport, aggregate, frame_score, pooled_score
from .data import MotionSpec, VideoSequence, load_dataset, synth_dataset, synth_video
from .pipeline import PipelineConfig, PipelineResult, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "BoxPrompt",
    "FrameScore",
    "FreezePolicy",
    "ImageEncoder",
    "LoRAAdapter",
    "MemoryBank",
    "MemoryConfig",
    "MotionSpec",
    "PipelineConfig",
    "PipelineResult",
    "SegReport",
    "Segmenter",
    "Tracker",
    "TrackerConfig",
    "TrainConfig",
    "TrainRecord",
    "ViTConfig",
    "VideoSequence",
    "adapted_forward",
    "aggregate",
    "bbox_from_mask",
    "build_image_encoder",
    "count_adapter_params",
    "build_segmenter",
    "build_tracker",
    "fine_tune",
    "frame_score",
    "grad_check",
    "inject",
    "load_dataset",
    "lora_param_count",
    "memory_read",
    "merge",
    "pooled_score",
    "propagate",
    "run_pipeline",
    "seg_loss",
    "synth_dataset",
    "synth_video",
    "trainable_count",
    "train_tracker",
]
