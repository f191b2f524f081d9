"""On-line detection module: per-class region classification + refinement.

One binary kernel classifier and one four-output ridge regressor per
class, over per-region feature vectors.  A region is a positive for
class n when it overlaps a class-n ground truth at IoU > 0.6 and a
negative when it stays below 0.3 against every class-n ground truth;
images without class-n objects contribute through the reservoir's
per-image buffers instead of explicit negatives.

Classes are independent: there is no softmax or cross-class
suppression, so one region may legitimately yield detections for
several classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, apply_targets, encode_targets, iou_matrix, nms
from .incremental import (
    DetectionReservoir,
    UntrainableClassError,
    detection_incremental_update,
)
from .kernels import train_rls
from .minibootstrap import BootstrapConfig, run_minibootstrap


@dataclass(frozen=True)
class DetectionConfig:
    """Inference-time thresholds and suppression settings."""

    score_threshold: float = 0.0
    nms_iou: float = 0.3
    max_detections: int = 100

    def __post_init__(self):
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in [0, 1]")


@dataclass(frozen=True)
class DetectionTrainConfig:
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    pos_iou: float = 0.6
    neg_iou: float = 0.3
    reg_lam: float = 1e-6
    inference: DetectionConfig = field(default_factory=DetectionConfig)


@dataclass
class OnlineDetectionModel:
    classifiers: dict
    regressors: dict
    config: DetectionConfig

    def __post_init__(self):
        if set(self.classifiers) != set(self.regressors):
            raise ValueError("classifier and regressor class sets differ")

    @property
    def class_ids(self) -> tuple:
        return tuple(sorted(self.classifiers))


@dataclass(frozen=True)
class Detection:
    """One scored, refined detection of one class."""

    class_id: int
    score: float
    box: Box
    proposal_index: int


def _proposal_arrays(proposals) -> tuple[np.ndarray, np.ndarray]:
    if not proposals:
        return np.empty((0, 0)), np.empty((0, 4))
    features = np.stack([np.asarray(p.feature, dtype=np.float64) for p in proposals])
    boxes = np.stack([p.box.as_array() for p in proposals])
    return features, boxes


def proposal_features(record) -> np.ndarray:
    """All per-region features of an image (the buffer source)."""
    features, _ = _proposal_arrays(record.proposals)
    return features


def detection_labeler(class_ids, pos_iou: float = 0.6, neg_iou: float = 0.3):
    """Per-record labeler keyed by class id.

    On an image without class-n ground truths the class's negatives are
    reported empty (the reservoir buffer substitutes for them); explicit
    negatives exist only where the class is present.
    """
    class_ids = tuple(class_ids)

    def labeler(record):
        features, boxes = _proposal_arrays(record.proposals)
        out = {}
        for n in class_ids:
            gts = np.array(
                [g.box.as_array() for g in record.gt_objects if g.class_id == n]
            ).reshape(-1, 4)
            if gts.shape[0] == 0 or features.shape[0] == 0:
                out[n] = ((), ())
                continue
            overlap = iou_matrix(boxes, gts).max(axis=1)
            out[n] = (features[overlap > pos_iou], features[overlap < neg_iou])
        return out

    return labeler


def detection_regression_labeler(class_ids, pos_iou: float = 0.6):
    """Box-offset samples: positives paired with their best ground truth."""
    class_ids = tuple(class_ids)

    def labeler(record):
        features, boxes = _proposal_arrays(record.proposals)
        out = {}
        for n in class_ids:
            gts = np.array(
                [g.box.as_array() for g in record.gt_objects if g.class_id == n]
            ).reshape(-1, 4)
            if gts.shape[0] == 0 or features.shape[0] == 0:
                out[n] = ((), ())
                continue
            overlap = iou_matrix(boxes, gts)
            best = overlap.max(axis=1)
            sel = best > pos_iou
            if not sel.any():
                out[n] = ((), ())
                continue
            matched = gts[overlap[sel].argmax(axis=1)]
            out[n] = (features[sel], encode_targets(boxes[sel], matched))
        return out

    return labeler


@dataclass
class DetectionTrainingSet:
    positives: np.ndarray
    negatives: np.ndarray
    reg_features: np.ndarray
    reg_targets: np.ndarray


def build_detection_training_sets(
    records,
    class_ids,
    pos_iou: float = 0.6,
    neg_iou: float = 0.3,
) -> dict:
    """Full per-class sets under the plain labeling rule, for inspection.

    Here an image without class-n ground truths contributes all its
    regions as class-n negatives (vacuously below the threshold); the
    reservoir path realizes the same distribution through its buffers.

    Raises:
        UntrainableClassError: listing every class that found no positive.
    """
    class_ids = tuple(class_ids)
    pos: dict[int, list] = {n: [] for n in class_ids}
    neg: dict[int, list] = {n: [] for n in class_ids}
    rx: dict[int, list] = {n: [] for n in class_ids}
    ry: dict[int, list] = {n: [] for n in class_ids}
    reg = detection_regression_labeler(class_ids, pos_iou)
    for record in records:
        features, boxes = _proposal_arrays(record.proposals)
        if features.shape[0] == 0:
            continue
        for n in class_ids:
            gts = np.array(
                [g.box.as_array() for g in record.gt_objects if g.class_id == n]
            ).reshape(-1, 4)
            if gts.shape[0] == 0:
                neg[n].append(features)
                continue
            overlap = iou_matrix(boxes, gts).max(axis=1)
            pos[n].append(features[overlap > pos_iou])
            neg[n].append(features[overlap < neg_iou])
        for n, (x, y) in reg(record).items():
            x = np.asarray(x, dtype=np.float64)
            if x.size:
                rx[n].append(np.atleast_2d(x))
                ry[n].append(np.atleast_2d(np.asarray(y, dtype=np.float64)))

    def stack(parts, width):
        parts = [p for p in parts if p.size]
        return np.concatenate(parts) if parts else np.empty((0, width))

    out = {}
    for n in class_ids:
        out[n] = DetectionTrainingSet(
            positives=stack(pos[n], 0),
            negatives=stack(neg[n], 0),
            reg_features=stack(rx[n], 0),
            reg_targets=stack(ry[n], 4),
        )
    starved = [n for n in class_ids if out[n].positives.shape[0] == 0]
    if starved:
        raise UntrainableClassError(starved)
    return out


def train_detection_from_reservoir(
    reservoir: DetectionReservoir,
    config: DetectionTrainConfig,
    seed,
) -> OnlineDetectionModel:
    """Mine per-class classifiers from the reservoir and fit regressors.

    Unlike the proposal module, a class that cannot be trained is an
    error: callers asked for it by name.
    """
    pool = reservoir.to_pool()
    starved = pool.untrainable_keys()
    if starved:
        raise UntrainableClassError(starved)
    result = run_minibootstrap(pool, reservoir.config, seed)
    if result.failures:
        raise RuntimeError(f"detection training failed: {result.failures}")
    regressors = {
        n: train_rls(reservoir.reg_features[n], reservoir.reg_targets[n], config.reg_lam)
        for n in result.classifiers
    }
    return OnlineDetectionModel(
        classifiers=result.classifiers,
        regressors=regressors,
        config=config.inference,
    )


def train_online_detection(
    records,
    class_ids,
    config: DetectionTrainConfig,
    seed,
) -> OnlineDetectionModel:
    """One-shot training path (single-sequence reservoir)."""
    reservoir = DetectionReservoir(config=config.bootstrap, seed=seed)
    detection_incremental_update(
        reservoir,
        records,
        class_ids,
        new_class_ids=class_ids,
        pos_iou=config.pos_iou,
        neg_iou=config.neg_iou,
    )
    return train_detection_from_reservoir(reservoir, config, seed)


def detect(model: OnlineDetectionModel, record, proposals=None) -> list:
    """Classify and refine regions; returns Detections, best first.

    Each class scores every region independently; scores below the
    threshold are dropped, the survivors' boxes are refined by the
    class regressor, suppressed per class, then merged, sorted by
    descending score and capped.
    """
    if proposals is None:
        proposals = record.proposals
    proposals = list(proposals)
    features, boxes = _proposal_arrays(proposals)
    detections: list[Detection] = []
    if features.shape[0] == 0:
        return detections
    for n in sorted(model.classifiers):
        scores = model.classifiers[n].decision_values(features)
        keep = np.nonzero(scores >= model.config.score_threshold)[0]
        if keep.size == 0:
            continue
        offsets = model.regressors[n].predict(features[keep])
        refined, ok = apply_targets(boxes[keep], offsets, record.image_size)
        keep, refined = keep[ok], refined[ok]
        if keep.size == 0:
            continue
        for i in nms(refined, scores[keep], model.config.nms_iou):
            detections.append(
                Detection(
                    class_id=n,
                    score=float(scores[keep[i]]),
                    box=Box.from_array(refined[i]),
                    proposal_index=int(keep[i]),
                )
            )
    detections.sort(key=lambda d: (-d.score, d.class_id, d.proposal_index))
    return detections[: model.config.max_detections]
