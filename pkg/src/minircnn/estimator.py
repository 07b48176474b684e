"""scikit-learn style front end for the detector.

``ShapeDetector`` wraps the whole train/detect pipeline behind the familiar
``fit`` / ``predict`` / ``score`` surface so it composes with sklearn
tooling (``get_params``, ``set_params``, ``clone``). ``fit`` accepts either
a :class:`~minircnn.data.DatasetManifest` or parallel sequences of raw
images and (label, box) target lists; ``predict`` takes raw images of any
size and returns detections in the input's own pixel coordinates.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .boxes import AnchorConfig, Box
from .data import DatasetManifest, prepare_input, rescale_box
from .errors import ValidationError
from .model import Detection, DetectorConfig, detect
from .training import (TrainConfig, TrainingSample, load_samples,
                       train_on_samples)
from .validation import check_image, check_targets


class ShapeDetector(BaseEstimator):
    """Two-stage object detector with an sklearn-compatible API.

    Parameters mirror the package defaults; see ``TrainConfig``,
    ``AnchorConfig`` and ``DetectorConfig`` for their meaning. Fitted
    attributes: ``classes_``, ``model_``, ``checkpoint_``, ``loss_history_``.
    """

    def __init__(self, image_size=128, iterations=2000, learning_rate=1e-3,
                 momentum=0.9, weight_decay=0.0, seed=0,
                 anchor_scales=(0.25, 0.5, 1.0, 2.0),
                 anchor_ratios=(0.5, 1.0, 2.0), anchor_base_size=64.0,
                 stride=16, head_hidden=256, roi_size=7,
                 confidence_threshold=0.5, rpn_batch=256, head_batch=32,
                 stop_loss=0.0, stop_window=100):
        self.image_size = image_size
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed
        self.anchor_scales = anchor_scales
        self.anchor_ratios = anchor_ratios
        self.anchor_base_size = anchor_base_size
        self.stride = stride
        self.head_hidden = head_hidden
        self.roi_size = roi_size
        self.confidence_threshold = confidence_threshold
        self.rpn_batch = rpn_batch
        self.head_batch = head_batch
        self.stop_loss = stop_loss
        self.stop_window = stop_window

    # ------------------------------------------------------------------
    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations, learning_rate=self.learning_rate,
            momentum=self.momentum, weight_decay=self.weight_decay,
            seed=self.seed, image_size=self.image_size,
            rpn_batch=self.rpn_batch, head_batch=self.head_batch,
            stop_loss=self.stop_loss, stop_window=self.stop_window,
            head_hidden=self.head_hidden, roi_size=self.roi_size)

    def _anchor_config(self) -> AnchorConfig:
        return AnchorConfig(stride=self.stride,
                            scales=tuple(self.anchor_scales),
                            ratios=tuple(self.anchor_ratios),
                            base_size=self.anchor_base_size)

    def _detector_config(self) -> DetectorConfig:
        return DetectorConfig(confidence_threshold=self.confidence_threshold)

    # ------------------------------------------------------------------
    def fit(self, X, y=None):
        """Train from a manifest (``y=None``) or images plus target lists."""
        cfg = self._train_config()
        if isinstance(X, DatasetManifest):
            if y is not None:
                raise ValidationError("y must be None when fitting a manifest")
            classes = X.classes
            records = X.train_records if X.split is not None else X.annotations
            samples = load_samples(X, records, cfg, self.stride)
        else:
            if y is None:
                raise ValidationError("fit needs targets unless X is a manifest")
            images = [check_image(x) for x in X]
            if len(images) != len(y):
                raise ValidationError("X and y have different lengths")
            targets = [check_targets(t, img.shape)
                       for img, t in zip(images, y)]
            classes = tuple(sorted({label for t in targets for label, _ in t}))
            lookup = {name: i for i, name in enumerate(classes)}
            samples = []
            for img, t in zip(images, targets):
                _, h, w = img.shape
                prepared = prepare_input(img, self.image_size, self.image_size,
                                         stride=self.stride)
                sx, sy = self.image_size / w, self.image_size / h
                boxes = [rescale_box(b, sx, sy) for _, b in t]
                samples.append(TrainingSample(
                    image=prepared,
                    gt_boxes=(np.stack([b.as_array() for b in boxes])
                              if boxes else np.zeros((0, 4))),
                    gt_labels=np.asarray([lookup[label] for label, _ in t],
                                         dtype=np.int64)))
        result = train_on_samples(samples, classes, cfg,
                                  anchors=self._anchor_config(),
                                  det_cfg=self._detector_config())
        self.classes_ = tuple(classes)
        self.checkpoint_ = result.checkpoint
        self.model_ = result.checkpoint.build_model()
        self.loss_history_ = result.history
        return self

    # ------------------------------------------------------------------
    def _predict_one(self, x) -> list[Detection]:
        img = check_image(x)
        _, h, w = img.shape
        prepared = prepare_input(img, self.image_size, self.image_size,
                                 stride=self.stride)
        dets = detect(prepared, self.model_, self._detector_config())
        sx, sy = w / self.image_size, h / self.image_size
        return [Detection(rescale_box(d.box, sx, sy), d.class_id, d.confidence)
                for d in dets]

    def predict(self, X) -> list[list[Detection]]:
        """Detections per image, boxes in the input image's coordinates."""
        check_is_fitted(self, "model_")
        return [self._predict_one(x) for x in X]

    def score(self, X, y) -> float:
        """Fraction of ground-truth boxes matched at IoU >= 0.5."""
        check_is_fitted(self, "model_")
        from .evaluation import evaluate
        lookup = {name: i for i, name in enumerate(self.classes_)}
        samples = []
        for x, t in zip(X, y):
            targets = check_targets(t)
            for label, _ in targets:
                if label not in lookup:
                    raise ValidationError(f"unknown class {label!r}")
            samples.append((x, [(lookup[label], box) for label, box in targets]))
        report = evaluate(lambda x: self._predict_one(x), samples,
                          n_classes=len(self.classes_), classes=self.classes_)
        return report.accuracy
