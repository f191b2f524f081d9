"""Per-class detector tests: labeling, training paths, inference behavior."""

import numpy as np
import pytest

from oseg.detection import (
    DetectionConfig,
    DetectionTrainConfig,
    build_detection_training_sets,
    detect,
    detection_labeler,
    detection_regression_labeler,
    train_detection_from_reservoir,
    train_online_detection,
)
from oseg.geometry import Box, iou
from oseg.incremental import (
    DetectionReservoir,
    UntrainableClassError,
    detection_incremental_update,
)
from oseg.minibootstrap import BootstrapConfig
from oseg.synthetic import SyntheticWorld


class FakeGt:
    def __init__(self, class_id, box):
        self.class_id = class_id
        self.box = box


class FakeProposal:
    def __init__(self, index, box):
        self.box = box
        self.feature = np.array([float(index), 0.0, 0.0, 0.0])


class FakeRecord:
    def __init__(self, image_id, gts, boxes):
        self.image_id = image_id
        self.image_size = (320, 320)
        self.gt_objects = [FakeGt(c, Box(*b)) for c, b in gts]
        self.proposals = [FakeProposal(i, Box(*b)) for i, b in enumerate(boxes)]


def tags_of(rows):
    rows = np.asarray(rows)
    return set(int(v) for v in np.atleast_2d(rows)[:, 0]) if rows.size else set()


def train_config(sigma=0.5, lam=1e-4, threshold=0.0):
    return DetectionTrainConfig(
        bootstrap=BootstrapConfig(
            num_batches=4, batch_size=300, num_centers=200, sigma=sigma, lam=lam
        ),
        inference=DetectionConfig(score_threshold=threshold),
    )


class TestLabeling:
    gt = (40.0, 40.0, 100.0, 100.0)  # 60x60, class 0

    def record(self):
        boxes = [
            self.gt,                              # IoU 1
            (60.0, 40.0, 120.0, 100.0),           # shift w/3 = 20: IoU exactly 0.5
            (200.0, 200.0, 264.0, 264.0),         # disjoint
            (40.0, 40.0, 100.0, 94.0),            # 60x54 slice: IoU 0.9
        ]
        return FakeRecord(0, [(0, self.gt)], boxes)

    def test_threshold_sides(self):
        labeled = detection_labeler([0])(self.record())
        pos, neg = labeled[0]
        assert tags_of(pos) == {0, 3}
        assert tags_of(neg) == {2}          # the 0.5-IoU box is ignored

    def test_exact_half_iou_construction(self):
        record = self.record()
        assert iou(record.proposals[1].box, record.gt_objects[0].box) == 0.5

    def test_absent_class_reports_empty(self):
        labeled = detection_labeler([0, 1])(self.record())
        pos, neg = labeled[1]
        assert np.asarray(pos).size == 0
        assert np.asarray(neg).size == 0    # buffers stand in downstream

    def test_multi_class_sides_are_independent(self):
        gts = [(0, self.gt), (1, (200.0, 200.0, 264.0, 264.0))]
        boxes = [self.gt, (200.0, 200.0, 264.0, 264.0), (0.0, 150.0, 30.0, 180.0)]
        labeled = detection_labeler([0, 1])(FakeRecord(0, gts, boxes))
        assert tags_of(labeled[0][0]) == {0}
        assert tags_of(labeled[0][1]) == {1, 2}
        assert tags_of(labeled[1][0]) == {1}
        assert tags_of(labeled[1][1]) == {0, 2}

    def test_regression_targets_decode_onto_gt(self):
        from oseg.geometry import apply_targets

        record = self.record()
        regs = detection_regression_labeler([0])(record)
        feats, targets = regs[0]
        assert tags_of(feats) == {0, 3}
        boxes = np.array([record.proposals[i].box.as_array() for i in (0, 3)])
        decoded, ok = apply_targets(boxes, np.asarray(targets), record.image_size)
        assert ok.all()
        for row in decoded:
            assert iou(Box.from_array(row), record.gt_objects[0].box) > 0.999

    def test_no_proposals_reports_empty(self):
        record = FakeRecord(0, [(0, self.gt)], [])
        labeled = detection_labeler([0])(record)
        assert np.asarray(labeled[0][0]).size == 0
        assert np.asarray(labeled[0][1]).size == 0


class TestTrainingSets:
    def test_absent_class_takes_all_proposals_as_negatives(self):
        gt = (40.0, 40.0, 104.0, 104.0)
        with_cls = FakeRecord(0, [(0, gt)], [gt, (200.0, 200.0, 230.0, 230.0)])
        without = FakeRecord(1, [], [(10.0, 10.0, 50.0, 50.0), (60.0, 60.0, 90.0, 90.0)])
        sets = build_detection_training_sets([with_cls, without], [0])
        assert sets[0].positives.shape[0] == 1
        assert tags_of(sets[0].negatives) == {0, 1}  # both of the empty image's
        assert sets[0].reg_features.shape[0] == 1

    def test_starved_class_raises_with_keys(self):
        record = FakeRecord(0, [(0, (40.0, 40.0, 104.0, 104.0))], [(0.0, 0.0, 10.0, 10.0)])
        with pytest.raises(UntrainableClassError) as info:
            build_detection_training_sets([record], [0, 1])
        assert set(info.value.keys) == {0, 1}


def world_and_records(seed, class_names=("a", "b", "c"), n=25, **kw):
    world = SyntheticWorld(class_names=list(class_names), noise=0.0, seed=seed, **kw)
    return world, list(world.generate(n))


class TestTraining:
    def test_classifiers_separate_their_class(self):
        world, records = world_and_records(1, max_objects=2)
        model = train_online_detection(records, [0, 1, 2], train_config(), seed=0)
        assert model.class_ids == (0, 1, 2)
        for record in list(world.generate(6, start_id=100)):
            for gt in record.gt_objects:
                feat = world.detection_feature(record.image_id, gt.box)[None, :]
                far = world.detection_feature(record.image_id, Box(1.0, 1.0, 9.0, 9.0))[None, :]
                for n, clf in model.classifiers.items():
                    own = clf.decision_values(feat)[0]
                    bg = clf.decision_values(far)[0]
                    assert bg < 0
                    if n == gt.class_id:
                        assert own > 0
                    else:
                        assert own < 0

    def test_batch_equals_single_sequence_reservoir(self):
        _, records = world_and_records(2, n=12, max_objects=1)
        config = train_config()
        direct = train_online_detection(records, [0, 1, 2], config, seed=3)
        reservoir = DetectionReservoir(config=config.bootstrap, seed=3)
        detection_incremental_update(
            reservoir, records, [0, 1, 2], new_class_ids=[0, 1, 2]
        )
        staged = train_detection_from_reservoir(reservoir, config, seed=3)
        for n in direct.classifiers:
            np.testing.assert_array_equal(
                direct.classifiers[n].weights, staged.classifiers[n].weights
            )
            np.testing.assert_array_equal(
                direct.regressors[n].weights, staged.regressors[n].weights
            )

    def test_same_seed_reproducible(self):
        _, records = world_and_records(3, n=10, max_objects=1)
        a = train_online_detection(records, [0, 1, 2], train_config(), seed=7)
        b = train_online_detection(records, [0, 1, 2], train_config(), seed=7)
        for n in a.classifiers:
            np.testing.assert_array_equal(a.classifiers[n].weights, b.classifiers[n].weights)

    def test_missing_class_fails_loudly(self):
        _, records = world_and_records(4, n=8, max_objects=1, active_classes=[0, 1])
        with pytest.raises(UntrainableClassError) as info:
            train_online_detection(records, [0, 1, 2], train_config(), seed=0)
        assert 2 in info.value.keys


class TestDetect:
    def setup_method(self):
        self.world, records = world_and_records(5, n=30, max_objects=2)
        self.model = train_online_detection(records, [0, 1, 2], train_config(), seed=0)
        self.test_records = list(self.world.generate(8, start_id=200))

    def test_every_object_found_with_right_class(self):
        for record in self.test_records:
            detections = detect(self.model, record)
            for gt in record.gt_objects:
                hits = [d for d in detections if iou(d.box, gt.box) > 0.5]
                assert hits
                assert hits[0].class_id == gt.class_id

    def test_output_sorted_and_capped(self):
        capped = train_config()
        model = self.model
        for record in self.test_records:
            detections = detect(model, record)
            scores = [d.score for d in detections]
            assert scores == sorted(scores, reverse=True)
            assert len(detections) <= capped.inference.max_detections

    def test_per_class_suppression(self):
        for record in self.test_records:
            detections = detect(self.model, record)
            by_class = {}
            for d in detections:
                by_class.setdefault(d.class_id, []).append(d)
            for group in by_class.values():
                for i, a in enumerate(group):
                    for b in group[i + 1:]:
                        assert iou(a.box, b.box) <= self.model.config.nms_iou + 1e-12

    def test_empty_proposals_empty_result(self):
        record = self.test_records[0]
        assert detect(self.model, record, proposals=[]) == []

    def test_high_threshold_silences(self):
        model = train_online_detection(
            list(self.world.generate(10, start_id=300)),
            [0, 1, 2],
            train_config(threshold=1e9),
            seed=0,
        )
        assert detect(model, self.test_records[0]) == []

    def test_proposal_index_points_into_input(self):
        record = self.test_records[0]
        proposals = list(record.proposals)
        for d in detect(self.model, record, proposals=proposals):
            assert 0 <= d.proposal_index < len(proposals)
            # the refined box stays near its source proposal
            assert iou(d.box, proposals[d.proposal_index].box) > 0.3

    def test_explicit_proposals_override_record(self):
        record = self.test_records[0]
        gt = record.gt_objects[0]
        lone = [p for p in record.proposals if iou(p.box, gt.box) == 1.0][:1]
        assert lone
        detections = detect(self.model, record, proposals=lone)
        assert detections
        assert all(d.proposal_index == 0 for d in detections)
