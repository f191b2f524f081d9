"""Per-image negative reservoirs for cross-sequence incremental training.

A reservoir keeps, per binary problem key, the accumulated positives and
a per-image list of candidate negatives.  When a new image sequence
arrives, every stored per-image list is first downsampled to the new
quota ``ceil(num_batches * batch_size / total_images)`` and the new
images are then ingested under the same quota, so the memory budget
stays fixed no matter how many sequences have been absorbed.

Because each image's rows are only ever subsampled uniformly and
independently, the pool after any number of updates is distributed
exactly as if it had been collected from all sequences in one shot;
:func:`sampling_equivalence_test` verifies that property empirically on
an enumerable space.

The detection reservoir additionally keeps a per-image buffer drawn from
all proposal features of the image.  When a class has no recorded
negatives for some image (in particular on images that predate the
class), the buffer stands in for them at training time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.stats import chisquare

from .minibootstrap import (
    BootstrapConfig,
    NegativePool,
    per_image_quota,
    subsample_rows,
)
from .seeding import rng_for


class UntrainableClassError(ValueError):
    """A requested class has no positive samples to train on."""

    def __init__(self, keys, context: str = "training"):
        self.keys = tuple(keys)
        super().__init__(f"no positive samples for {context}: {list(self.keys)}")


def _as_features(a, width: int | None) -> tuple[np.ndarray, int | None]:
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        # zero-width placeholder until some image reveals the true width;
        # zero-row arrays are never concatenated downstream
        return np.empty((0, width or 0)), width
    a = np.atleast_2d(a)
    if width is not None and a.shape[1] != width:
        raise ValueError("feature width changed between images")
    return a, a.shape[1]


@dataclass
class SampleReservoir:
    """Positives plus quota-bounded per-image negatives, per problem key.

    ``labeler(record) -> {key: (positives, negatives)}`` supplies the raw
    per-image samples during :meth:`update`; an optional
    ``regression_labeler(record) -> {key: (features, targets)}`` feeds
    the side channel of box-offset samples, which are kept unsampled
    (they track the positives, which are never evicted).
    """

    config: BootstrapConfig
    seed: int = 0
    feature_dim: int | None = None
    num_images: int = 0
    updates: int = 0
    image_ids: list = field(default_factory=list)
    positives: dict = field(default_factory=dict)
    negatives: dict = field(default_factory=dict)
    reg_features: dict = field(default_factory=dict)
    reg_targets: dict = field(default_factory=dict)

    @property
    def quota(self) -> int:
        if self.num_images < 1:
            raise ValueError("reservoir holds no images yet")
        return per_image_quota(
            self.config.num_batches, self.config.batch_size, self.num_images
        )

    def keys(self):
        return self.positives.keys()

    def _require_new_ids(self, records) -> list:
        seen = set(self.image_ids)
        ids = []
        for position, record in enumerate(records):
            image_id = getattr(record, "image_id", self.num_images + position)
            if image_id in seen or image_id in ids:
                raise ValueError(f"image id {image_id!r} ingested twice")
            ids.append(image_id)
        return ids

    def _downsample_old(self, quota: int, t: int) -> None:
        for key, per_image in self.negatives.items():
            for image_id, rows in per_image.items():
                per_image[image_id] = subsample_rows(
                    rows, quota, rng_for(self.seed, "down", t, key, image_id)
                )

    def _blank_key(self, key) -> None:
        # a key first seen now gets explicit empty lists on all old images
        self.positives.setdefault(key, None)
        per_image = self.negatives.setdefault(key, {})
        for image_id in self.image_ids:
            if image_id not in per_image:
                per_image[image_id] = np.empty((0, self.feature_dim or 0))

    def _append_positives(self, key, rows: np.ndarray) -> None:
        current = self.positives.get(key)
        if current is None or current.shape[0] == 0:
            self.positives[key] = rows
        elif rows.shape[0]:
            self.positives[key] = np.concatenate([current, rows], axis=0)

    def _append_regression(self, key, x, y) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if x.size == 0:
            return
        if key in self.reg_features:
            self.reg_features[key] = np.concatenate([self.reg_features[key], x])
            self.reg_targets[key] = np.concatenate([self.reg_targets[key], y])
        else:
            self.reg_features[key] = x
            self.reg_targets[key] = y

    def update(self, records, labeler, regression_labeler=None) -> None:
        """Absorb one sequence: shrink old lists, ingest new images."""
        records = list(records)
        if not records:
            raise ValueError("need at least one record")
        new_ids = self._require_new_ids(records)
        t = self.updates + 1
        total = self.num_images + len(records)
        quota = per_image_quota(
            self.config.num_batches, self.config.batch_size, total
        )
        self._downsample_old(quota, t)
        known_keys = set(self.negatives)
        for image_id, record in zip(new_ids, records):
            labeled = labeler(record)
            for key in labeled.keys() - known_keys:
                known_keys.add(key)
                self._blank_key(key)
            for key in known_keys:
                pos, neg = labeled.get(key, ((), ()))
                pos, self.feature_dim = _as_features(pos, self.feature_dim)
                neg, self.feature_dim = _as_features(neg, self.feature_dim)
                if self.positives.get(key) is None:
                    self.positives[key] = pos
                else:
                    self._append_positives(key, pos)
                self.negatives[key][image_id] = subsample_rows(
                    neg, quota, rng_for(self.seed, "stage1", key, image_id)
                )
            if regression_labeler is not None:
                for key, (x, y) in regression_labeler(record).items():
                    self._append_regression(key, x, y)
            self.image_ids.append(image_id)
        if self.feature_dim is None:
            raise ValueError("labeler produced no features")
        empty = np.empty((0, self.feature_dim))
        for key in known_keys:
            if self.positives.get(key) is None:
                self.positives[key] = empty
        self.num_images = total
        self.updates = t

    def _negatives_for(self, key, image_id) -> np.ndarray:
        return self.negatives[key][image_id]

    def to_pool(self) -> NegativePool:
        """Materialize the minibootstrap stage-1 pool."""
        if self.num_images < 1:
            raise ValueError("reservoir holds no images yet")
        pool = NegativePool(
            feature_dim=self.feature_dim or 0, num_images=self.num_images
        )
        for key in self.positives:
            pool.positives[key] = self.positives[key]
            pool.negatives[key] = [
                self._negatives_for(key, image_id) for image_id in self.image_ids
            ]
        return pool


@dataclass
class RpnReservoir(SampleReservoir):
    """Per-anchor reservoir; keys are anchor-shape indices."""


@dataclass
class DetectionReservoir(SampleReservoir):
    """Per-class reservoir with per-image fallback buffers.

    ``buffers[image_id]`` holds a quota-bounded sample of all proposal
    features of that image; it substitutes for a class's negatives on
    any image whose recorded list is empty (images without that class's
    objects, and all images older than the class).
    """

    buffers: dict = field(default_factory=dict)

    def update(self, records, labeler, regression_labeler=None, buffer_extractor=None):
        records = list(records)
        if buffer_extractor is None:
            raise ValueError("detection updates need a buffer_extractor")
        new_ids = self._require_new_ids(records)
        t = self.updates + 1
        quota = per_image_quota(
            self.config.num_batches,
            self.config.batch_size,
            self.num_images + len(records),
        )
        for image_id, rows in self.buffers.items():
            self.buffers[image_id] = subsample_rows(
                rows, quota, rng_for(self.seed, "down-buffer", t, image_id)
            )
        for image_id, record in zip(new_ids, records):
            rows, self.feature_dim = _as_features(
                buffer_extractor(record), self.feature_dim
            )
            self.buffers[image_id] = subsample_rows(
                rows, quota, rng_for(self.seed, "buffer", image_id)
            )
        super().update(records, labeler, regression_labeler)

    def _negatives_for(self, key, image_id) -> np.ndarray:
        stored = self.negatives[key][image_id]
        if stored.shape[0]:
            return stored
        return self.buffers[image_id]


def rpn_incremental_update(
    reservoir: RpnReservoir,
    records,
    grid,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
    reg_iou: float = 0.7,
) -> None:
    """Absorb a sequence into the proposal-module reservoir."""
    from . import rpn  # late import keeps the module layers acyclic

    reservoir.update(
        records,
        rpn.rpn_labeler(grid, pos_iou, neg_iou),
        rpn.rpn_regression_labeler(grid, reg_iou),
    )


def detection_incremental_update(
    reservoir: DetectionReservoir,
    records,
    class_ids,
    new_class_ids=(),
    pos_iou: float = 0.6,
    neg_iou: float = 0.3,
) -> None:
    """Absorb a sequence into the detection reservoir.

    ``class_ids`` is the full set trained after this update; classes in
    ``new_class_ids`` must not exist in the reservoir yet and must find
    at least one positive in the new sequence.
    """
    from . import detection  # late import keeps the module layers acyclic

    new_class_ids = tuple(new_class_ids)
    clash = [c for c in new_class_ids if c in reservoir.keys()]
    if clash:
        raise ValueError(f"classes already in the reservoir: {clash}")
    before = {
        key: reservoir.positives[key].shape[0] for key in reservoir.keys()
    }
    reservoir.update(
        records,
        detection.detection_labeler(class_ids, pos_iou, neg_iou),
        detection.detection_regression_labeler(class_ids, pos_iou),
        buffer_extractor=detection.proposal_features,
    )
    starved = [
        c
        for c in new_class_ids
        if reservoir.positives[c].shape[0] - before.get(c, 0) == 0
    ]
    if starved:
        raise UntrainableClassError(starved, context="new classes")


def retrain_incremental(
    rpn_reservoir: RpnReservoir,
    detection_reservoir: DetectionReservoir,
    grid,
    records,
    new_class_ids,
    segmentation_model,
    config,
    seed,
):
    """Re-train proposal and detection modules from the reservoirs.

    Proposal and detection classifiers are rebuilt for every key from
    the reservoir contents (fixed batch budget); the segmentation model
    is extended with classifiers for ``new_class_ids`` trained on the new
    ``records`` only, while all previously trained per-class classifiers
    are carried over untouched.

    ``config`` is the pipeline training configuration bundling the
    ``rpn``, ``detection`` and ``segmentation`` sub-configs; returns the
    three updated models.
    """
    from . import detection, rpn, segmentation  # late import, see above

    rpn_model = rpn.train_rpn_from_reservoir(rpn_reservoir, grid, config.rpn, seed)
    det_model = detection.train_detection_from_reservoir(
        detection_reservoir, config.detection, seed
    )
    seg_model = segmentation.extend_segmentation(
        segmentation_model, records, new_class_ids, config.segmentation, seed
    )
    return rpn_model, det_model, seg_model


@dataclass(frozen=True)
class EquivalenceResult:
    statistic: float
    p_value: float
    dof: int
    num_subsets: int
    trials: int
    passed: bool


def sampling_equivalence_test(
    pool_size: int,
    subset_size: int,
    chain=(),
    trials: int = 150000,
    seed=0,
    sampler=subsample_rows,
    alpha: float = 0.01,
) -> EquivalenceResult:
    """Check that chained uniform subsampling is uniform overall.

    Repeatedly subsamples ``range(pool_size)`` down the ``chain`` of
    intermediate sizes and finally to ``subset_size``, counting how often
    each of the ``C(pool_size, subset_size)`` subsets appears; a
    chi-square goodness-of-fit test against the uniform distribution
    passes when the p-value exceeds ``alpha``.  ``sampler`` exists so a
    deliberately biased sampler can serve as a negative control.
    """
    sizes = [pool_size, *chain, subset_size]
    if any(b > a for a, b in zip(sizes, sizes[1:])) or subset_size < 1:
        raise ValueError(f"subsampling chain must be non-increasing: {sizes}")
    num_subsets = math.comb(pool_size, subset_size)
    if num_subsets > 10_000:
        raise ValueError(
            f"{num_subsets} possible subsets is too many to enumerate (max 10000)"
        )
    if trials < 50 * num_subsets:
        raise ValueError(
            f"need at least {50 * num_subsets} trials for {num_subsets} subsets"
        )
    index_of = {
        subset: i
        for i, subset in enumerate(combinations(range(pool_size), subset_size))
    }
    counts = np.zeros(num_subsets, dtype=np.int64)
    rng = rng_for(seed, "sampling-equivalence")
    base = np.arange(pool_size)
    for _ in range(trials):
        kept = base
        for size in sizes[1:]:
            kept = sampler(kept, size, rng)
        counts[index_of[tuple(sorted(int(v) for v in kept))]] += 1
    statistic, p_value = chisquare(counts)
    return EquivalenceResult(
        statistic=float(statistic),
        p_value=float(p_value),
        dof=num_subsets - 1,
        num_subsets=num_subsets,
        trials=trials,
        passed=bool(p_value > alpha),
    )
