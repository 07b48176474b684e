"""minircnn: a from-scratch two-stage object detector at desk scale.

Anchor generation, a region proposal network, RoI max-pooling, a softmax
classification head and SGD training, all built on a small float64
reverse-mode autodiff engine. See the README for the CLI and the
sklearn-style :class:`ShapeDetector` front end.
"""

from .boxes import (AnchorConfig, AnchorGrid, Box, BoxDelta, ScoredBox, clip,
                    decode, encode, generate_anchors, iou, nms)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (Annotation, DatasetManifest, load_manifest,
                   parse_annotations, prepare_input, save_manifest, split)
from .errors import (ConfigError, ContractError, DataError, FormatError,
                     MiniRcnnError, NumericError, ShapeError, ValidationError)
from .estimator import ShapeDetector
from .evaluation import (BenchmarkReport, EvalReport, benchmark_latency,
                         evaluate, evaluate_model, match)
from .model import (BackboneConfig, ConvLayer, Detection, DetectorConfig,
                    DetectorModel, MaxPoolLayer, Proposal, ReluLayer,
                    backbone_forward, default_backbone, detect,
                    generate_proposals, head_forward, roi_pool, rpn_forward)
from .ppm import load_ppm, save_ppm
from .synthetic import SyntheticSceneSpec, default_classes, generate_synthetic
from .targets import (HeadTargets, RpnTargets, assign_head_targets,
                      assign_rpn_targets, sample_rpn_minibatch)
from .training import (LossBreakdown, TrainConfig, TrainResult, save_loss_csv,
                       train_loop, train_on_samples, train_step)

__version__ = "0.1.0"

__all__ = [
    "AnchorConfig", "AnchorGrid", "Annotation", "BackboneConfig",
    "BenchmarkReport", "Box", "BoxDelta", "Checkpoint", "ConfigError",
    "ContractError", "ConvLayer", "DataError", "DatasetManifest", "Detection",
    "DetectorConfig", "DetectorModel", "EvalReport", "FormatError",
    "HeadTargets", "LossBreakdown", "MaxPoolLayer", "MiniRcnnError",
    "NumericError", "Proposal", "ReluLayer", "RpnTargets", "ScoredBox",
    "ShapeDetector", "ShapeError", "SyntheticSceneSpec", "TrainConfig",
    "TrainResult", "ValidationError", "assign_head_targets",
    "assign_rpn_targets", "backbone_forward", "benchmark_latency", "clip",
    "decode", "default_backbone", "default_classes", "detect", "encode",
    "evaluate", "evaluate_model", "generate_anchors", "generate_proposals",
    "generate_synthetic", "head_forward", "iou", "load_checkpoint",
    "load_manifest", "load_ppm", "match", "nms", "parse_annotations",
    "prepare_input", "roi_pool", "rpn_forward", "sample_rpn_minibatch",
    "save_checkpoint", "save_loss_csv", "save_manifest", "save_ppm", "split",
    "train_loop", "train_on_samples", "train_step",
]
