"""On-line proposal module: kernel objectness plus box refinement.

The convolutional objectness and refinement layers of a region proposal
network are replaced by A kernel classifiers and A four-output ridge
regressor banks, one pair per anchor shape, all reading the same
unrolled location features.  Classifiers are trained with the
hard-negative bootstrapping loop; regressors fit anchor-to-box offsets
on locations whose anchor overlaps a ground truth at IoU >= 0.6.

At inference every (location, shape) pair is scored, its anchor box is
refined by the shape's regressor, and the survivors of score ranking
plus non-maximum suppression become the image's proposals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    AnchorGrid,
    Box,
    apply_targets,
    encode_targets,
    label_anchors,
    nms,
)
from .incremental import RpnReservoir, rpn_incremental_update
from .kernels import KernelClassifier, RlsRegressor, train_rls
from .minibootstrap import BootstrapConfig, run_minibootstrap


@dataclass(frozen=True)
class ProposalConfig:
    """Inference-time ranking and suppression settings."""

    pre_nms_top_k: int = 1000
    nms_iou: float = 0.7
    post_nms_top_k: int = 300

    def __post_init__(self):
        if self.pre_nms_top_k < 1 or self.post_nms_top_k < 1:
            raise ValueError("top-k limits must be >= 1")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in [0, 1]")


@dataclass(frozen=True)
class RpnTrainConfig:
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    reg_iou: float = 0.7
    reg_lam: float = 1e-6
    proposals: ProposalConfig = field(default_factory=ProposalConfig)


@dataclass
class OnlineRpnModel:
    """A per-shape classifiers and regressor banks over one anchor grid.

    Shapes absent from ``classifiers`` were untrainable; their anchors
    score minus infinity and never surface in proposals.
    """

    grid: AnchorGrid
    classifiers: dict
    regressors: dict
    config: ProposalConfig
    failures: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in self.classifiers:
            if not 0 <= key < self.grid.num_shapes:
                raise ValueError(f"classifier key {key} outside anchor shapes")


def _location_features(record, grid: AnchorGrid) -> np.ndarray:
    rows, cols = grid.map_size
    if record.rpn_map.shape[:2] != (rows, cols):
        raise ValueError(
            f"record {record.image_id} map {record.rpn_map.shape[:2]} "
            f"does not match grid {(rows, cols)}"
        )
    return record.rpn_map.reshape(grid.num_locations, -1)


def _gt_array(record) -> np.ndarray:
    return np.array(
        [g.box.as_array() for g in record.gt_objects], dtype=np.float64
    ).reshape(-1, 4)


def rpn_labeler(grid: AnchorGrid, pos_iou: float = 0.7, neg_iou: float = 0.3):
    """Per-record classification labeler keyed by anchor-shape index."""

    def labeler(record):
        feats = _location_features(record, grid)
        labels, _, _ = label_anchors(grid.anchor_boxes, _gt_array(record), pos_iou, neg_iou)
        out = {}
        for a in range(grid.num_shapes):
            shape_labels = labels[a::grid.num_shapes]
            out[a] = (feats[shape_labels == 1], feats[shape_labels == -1])
        return out

    return labeler


def rpn_regression_labeler(grid: AnchorGrid, reg_iou: float = 0.7):
    """Per-record offset-regression labeler keyed by anchor-shape index.

    Only anchors genuinely overlapping a ground truth (IoU >= reg_iou)
    contribute; low-overlap anchors promoted to classification positives
    as a fallback are excluded, since their offsets are outliers.
    """

    def labeler(record):
        feats = _location_features(record, grid)
        gts = _gt_array(record)
        out = {}
        if gts.shape[0] == 0:
            return {a: ((), ()) for a in range(grid.num_shapes)}
        _, best_gt, best_iou = label_anchors(grid.anchor_boxes, gts)
        for a in range(grid.num_shapes):
            sel = best_iou[a::grid.num_shapes] >= reg_iou
            anchors = grid.anchor_boxes[a::grid.num_shapes][sel]
            matched = gts[best_gt[a::grid.num_shapes][sel]]
            out[a] = (feats[sel], encode_targets(anchors, matched) if sel.any() else ())
        return out

    return labeler


@dataclass
class RpnTrainingSet:
    positives: np.ndarray
    negatives: np.ndarray
    reg_features: np.ndarray
    reg_targets: np.ndarray


def build_rpn_training_sets(
    records,
    grid: AnchorGrid,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
    reg_iou: float = 0.7,
) -> dict:
    """Full (unsampled) per-shape training sets, for inspection and tests."""
    cls = rpn_labeler(grid, pos_iou, neg_iou)
    reg = rpn_regression_labeler(grid, reg_iou)
    pos: dict[int, list] = {a: [] for a in range(grid.num_shapes)}
    neg: dict[int, list] = {a: [] for a in range(grid.num_shapes)}
    rx: dict[int, list] = {a: [] for a in range(grid.num_shapes)}
    ry: dict[int, list] = {a: [] for a in range(grid.num_shapes)}
    for record in records:
        for a, (p, n) in cls(record).items():
            pos[a].append(np.atleast_2d(np.asarray(p, dtype=np.float64)))
            neg[a].append(np.atleast_2d(np.asarray(n, dtype=np.float64)))
        for a, (x, y) in reg(record).items():
            x = np.asarray(x, dtype=np.float64)
            if x.size:
                rx[a].append(np.atleast_2d(x))
                ry[a].append(np.atleast_2d(np.asarray(y, dtype=np.float64)))

    def stack(parts, width):
        parts = [p for p in parts if p.size]
        return np.concatenate(parts) if parts else np.empty((0, width))

    out = {}
    for a in range(grid.num_shapes):
        out[a] = RpnTrainingSet(
            positives=stack(pos[a], 0),
            negatives=stack(neg[a], 0),
            reg_features=stack(rx[a], 0),
            reg_targets=stack(ry[a], 4),
        )
    return out


def train_rpn_from_reservoir(
    reservoir: RpnReservoir,
    grid: AnchorGrid,
    config: RpnTrainConfig,
    seed,
) -> OnlineRpnModel:
    """Mine classifiers from the reservoir pool and fit regressor banks.

    Batch layout and kernel hyper-parameters come from the reservoir's
    own bootstrap config; ``config`` supplies the regression ridge and
    the inference settings.  Untrainable shapes are skipped with a
    warning and recorded on the model.
    """
    pool = reservoir.to_pool()
    result = run_minibootstrap(pool, reservoir.config, seed)
    for key, reason in result.failures.items():
        warnings.warn(f"anchor shape {key} untrainable: {reason}", stacklevel=2)
    regressors = {}
    for key, x in reservoir.reg_features.items():
        if key in result.classifiers and x.shape[0]:
            regressors[key] = train_rls(x, reservoir.reg_targets[key], config.reg_lam)
    return OnlineRpnModel(
        grid=grid,
        classifiers=result.classifiers,
        regressors=regressors,
        config=config.proposals,
        failures=result.failures,
    )


def train_online_rpn(records, grid: AnchorGrid, config: RpnTrainConfig, seed) -> OnlineRpnModel:
    """One-shot training path (single-sequence reservoir)."""
    reservoir = RpnReservoir(config=config.bootstrap, seed=seed)
    rpn_incremental_update(
        reservoir, records, grid, config.pos_iou, config.neg_iou, config.reg_iou
    )
    return train_rpn_from_reservoir(reservoir, grid, config, seed)


def propose(model: OnlineRpnModel, record) -> list:
    """Score, refine and suppress every anchor; returns (Box, score) pairs.

    The list is sorted by descending score, holds at most
    ``post_nms_top_k`` entries, and no two survivors overlap beyond the
    configured NMS IoU.
    """
    grid = model.grid
    feats = _location_features(record, grid)
    num_shapes = grid.num_shapes
    scores = np.full((grid.num_locations, num_shapes), -np.inf)
    boxes = grid.anchor_boxes.reshape(grid.num_locations, num_shapes, 4).copy()
    valid = np.zeros((grid.num_locations, num_shapes), dtype=bool)
    w_img, h_img = record.image_size
    for a, clf in model.classifiers.items():
        scores[:, a] = clf.decision_values(feats)
        reg = model.regressors.get(a)
        if reg is not None:
            refined, ok = apply_targets(boxes[:, a, :], reg.predict(feats), record.image_size)
            boxes[:, a, :] = refined
            valid[:, a] = ok
        else:
            raw = boxes[:, a, :]
            raw[:, 0::2] = np.clip(raw[:, 0::2], 0.0, w_img)
            raw[:, 1::2] = np.clip(raw[:, 1::2], 0.0, h_img)
            valid[:, a] = (raw[:, 2] > raw[:, 0]) & (raw[:, 3] > raw[:, 1])
    flat_scores = scores.reshape(-1)
    flat_scores[~valid.reshape(-1)] = -np.inf
    flat_boxes = boxes.reshape(-1, 4)
    order = np.argsort(-flat_scores, kind="stable")[: model.config.pre_nms_top_k]
    order = order[np.isfinite(flat_scores[order])]
    if order.size == 0:
        return []
    keep = nms(flat_boxes[order], flat_scores[order], model.config.nms_iou)
    keep = keep[: model.config.post_nms_top_k]
    return [
        (Box.from_array(flat_boxes[order[i]]), float(flat_scores[order[i]]))
        for i in keep
    ]
