"""Training protocols, stream-time accounting, model selection, inference.

Two protocols build the same three on-line modules from a dataset of
pre-extracted features.  ``ours`` makes a single pass and trains the
detector on the proposals stored with the dataset; ``ours_serial`` first
trains the proposal module, then featurizes its own proposals in a second
pass so the detector sees adapted regions.  Stream mode converts record
counts and declared FPS figures into a deterministic backlog calculation
instead of measuring hardware-bound extraction speed.
"""

from __future__ import annotations

import dataclasses
import platform
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import scipy

import oseg
from oseg.detection import (DetectionTrainConfig, detect,
                            detection_incremental_update,
                            train_detection_from_reservoir)
from oseg.evaluation import InstancePrediction, evaluate, proposal_recall
from oseg.feature_store import DatasetHeader, Proposal
from oseg.incremental import DetectionReservoir, RpnReservoir
from oseg.minibootstrap import BootstrapConfig
from oseg.model_io import PipelineModel
from oseg.rpn import (RpnTrainConfig, propose, rpn_incremental_update,
                      train_rpn_from_reservoir)
from oseg.seeding import rng_for
from oseg.segmentation import (SegmentationConfig, extend_segmentation,
                               predict_mask, train_online_segmentation)

PROTOCOLS = ("ours", "ours_serial")

# ledger phase names
ACQUISITION = "acquisition"
EXTRACTION_1 = "extraction-pass-1"
EXTRACTION_2 = "extraction-pass-2"
BACKLOG = "extraction-backlog"
RPN_TRAINING = "rpn-training"
DETECTION_TRAINING = "detection-training"
SEGMENTATION_TRAINING = "segmentation-training"


@dataclass(frozen=True)
class ProtocolConfig:
    """Every knob of a training run; mirrors the JSON config file 1:1."""

    protocol: str = "ours"
    num_batches: int = 10
    batch_size: int = 2000
    rpn_centers: int = 1000
    detection_centers: int = 1000
    segmentation_centers: int = 500
    pixel_fraction: float = 0.3
    rpn_sigma: float = 5.0
    rpn_lam: float = 1e-5
    detection_sigma: float = 5.0
    detection_lam: float = 1e-5
    segmentation_sigma: float = 5.0
    segmentation_lam: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; "
                             f"expected one of {PROTOCOLS}")
        for name in ("num_batches", "batch_size", "rpn_centers",
                     "detection_centers", "segmentation_centers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0.0 < self.pixel_fraction <= 1.0:
            raise ValueError("pixel_fraction must be in (0, 1]")
        for name in ("rpn_sigma", "detection_sigma", "segmentation_sigma"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("rpn_lam", "detection_lam", "segmentation_lam"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")

    def replace(self, **kw) -> "ProtocolConfig":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_json(tree: dict) -> "ProtocolConfig":
        known = {f.name for f in dataclasses.fields(ProtocolConfig)}
        extra = set(tree) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return ProtocolConfig(**tree)


@dataclass(frozen=True)
class ModuleConfigs:
    rpn: RpnTrainConfig
    detection: DetectionTrainConfig
    segmentation: SegmentationConfig


def module_configs(config: ProtocolConfig) -> ModuleConfigs:
    """Expand the flat run config into the three module train configs."""
    def pool(centers, sigma, lam):
        return BootstrapConfig(num_batches=config.num_batches,
                               batch_size=config.batch_size,
                               num_centers=centers, sigma=sigma, lam=lam)

    return ModuleConfigs(
        rpn=RpnTrainConfig(bootstrap=pool(config.rpn_centers,
                                          config.rpn_sigma, config.rpn_lam)),
        detection=DetectionTrainConfig(
            bootstrap=pool(config.detection_centers, config.detection_sigma,
                           config.detection_lam)),
        segmentation=SegmentationConfig(
            num_centers=config.segmentation_centers,
            sigma=config.segmentation_sigma, lam=config.segmentation_lam,
            subsample=config.pixel_fraction),
    )


def _module_seed(seed: int, tag: str) -> int:
    """Stable per-module child seed, independent of module call order."""
    return int(rng_for(seed, "module", tag).integers(0, 2**32))


@dataclass(frozen=True)
class TimingPhase:
    name: str
    seconds: float
    overlappable: bool = False


@dataclass
class TimingLedger:
    """Per-phase wall (or modeled) times of one training run.

    A phase flagged overlappable runs concurrently with data acquisition
    in stream mode and then stops counting toward the training time.
    """

    phases: list = field(default_factory=list)
    extraction_passes: int = 0

    def add(self, name: str, seconds: float, overlappable: bool = False,
            extraction: bool = False) -> None:
        self.phases.append(TimingPhase(name, float(seconds), overlappable))
        if extraction:
            self.extraction_passes += 1

    def seconds(self, name: str) -> float:
        return sum(p.seconds for p in self.phases if p.name == name)

    def total_seconds(self) -> float:
        return sum(p.seconds for p in self.phases)

    def post_acquisition_seconds(self) -> float:
        return sum(p.seconds for p in self.phases if p.name != ACQUISITION)

    def training_seconds(self, stream_mode: bool = False) -> float:
        """Reported training time; overlappable phases count only when
        there is no stream to hide them behind."""
        total = 0.0
        for p in self.phases:
            if p.name == ACQUISITION:
                continue
            if stream_mode and p.overlappable:
                continue
            total += p.seconds
        return total


@contextmanager
def _timed(ledger: TimingLedger, name: str, overlappable: bool = False,
           extraction: bool = False):
    start = time.perf_counter()
    yield
    ledger.add(name, time.perf_counter() - start, overlappable, extraction)


@dataclass(frozen=True)
class TrainResult:
    model: PipelineModel
    ledger: TimingLedger
    proposal_source: str
    adapted_image_ids: frozenset = frozenset()


class WorldFeaturizer:
    """Featurizes arbitrary boxes through the synthetic oracle."""

    def __init__(self, world):
        self.world = world

    def detection(self, image_id: int, box) -> np.ndarray:
        return self.world.detection_feature(image_id, box)

    def mask(self, image_id: int, box) -> np.ndarray:
        return self.world.mask_feature_grid(image_id, box)[0]


def featurizer_for(header: DatasetHeader) -> WorldFeaturizer:
    """Rebuild the generating oracle of a synthetic dataset header.

    Only boxes on records from that same dataset featurize meaningfully:
    the oracle replays image layouts from the header's generator seed, so
    a record produced under different generator settings (another seed,
    class roster, or object budget) belongs to a different oracle.
    """
    from oseg.synthetic import SyntheticWorld

    return WorldFeaturizer(SyntheticWorld.from_header(header))


def versions_block() -> dict:
    return {
        "oseg": oseg.__version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def build_manifest(config: ProtocolConfig, header: DatasetHeader,
                   num_records: int, dataset_hash=None) -> dict:
    """Reproducibility manifest: everything needed to re-run, no clocks."""
    return {
        "config": config.to_json(),
        "seed": config.seed,
        "protocol": config.protocol,
        "num_records": num_records,
        "class_names": list(header.class_names),
        "dataset_sha256": dataset_hash,
        "versions": versions_block(),
    }


def _materialize(records, ledger: TimingLedger):
    with _timed(ledger, ACQUISITION):
        out = list(records)
    if not out:
        raise ValueError("dataset holds no records")
    return out


def _present_class_ids(records) -> list:
    ids = sorted({g.class_id for r in records for g in r.gt_objects})
    if not ids:
        raise ValueError("dataset holds no ground-truth objects")
    return ids


def _check_sources(records, expected: str) -> None:
    for record in records:
        for p in record.proposals:
            if p.source != expected:
                raise ValueError(
                    f"image {record.image_id}: proposal source {p.source!r},"
                    f" expected {expected!r}")


def _train_detection_and_segmentation(records, class_ids, configs, config,
                                      ledger: TimingLedger):
    reservoir = DetectionReservoir(config=configs.detection.bootstrap,
                                   seed=_module_seed(config.seed, "detection"))
    detection_incremental_update(reservoir, records, class_ids,
                                 new_class_ids=class_ids,
                                 pos_iou=configs.detection.pos_iou,
                                 neg_iou=configs.detection.neg_iou)
    with _timed(ledger, DETECTION_TRAINING):
        det_model = train_detection_from_reservoir(
            reservoir, configs.detection, _module_seed(config.seed,
                                                       "detection"))
    with _timed(ledger, SEGMENTATION_TRAINING):
        seg_model = train_online_segmentation(
            records, class_ids, configs.segmentation,
            _module_seed(config.seed, "segmentation"))
    return det_model, seg_model


def train_ours(header: DatasetHeader, records, config: ProtocolConfig,
               dataset_hash=None) -> TrainResult:
    """Single-pass protocol: all three modules train from stored features.

    The detector reuses the proposals extracted before adaptation, so one
    extraction-equivalent pass covers the whole run and can overlap with
    acquisition in stream mode.
    """
    ledger = TimingLedger()
    records = _materialize(records, ledger)
    _check_sources(records, "stored")
    class_ids = _present_class_ids(records)
    configs = module_configs(config)

    with _timed(ledger, EXTRACTION_1, overlappable=True, extraction=True):
        rpn_reservoir = RpnReservoir(config=configs.rpn.bootstrap,
                                     seed=_module_seed(config.seed, "rpn"))
        rpn_incremental_update(rpn_reservoir, records, header.grid,
                               pos_iou=configs.rpn.pos_iou,
                               neg_iou=configs.rpn.neg_iou,
                               reg_iou=configs.rpn.reg_iou)
    with _timed(ledger, RPN_TRAINING):
        rpn_model = train_rpn_from_reservoir(rpn_reservoir, header.grid,
                                             configs.rpn,
                                             _module_seed(config.seed, "rpn"))
    det_model, seg_model = _train_detection_and_segmentation(
        records, class_ids, configs, config, ledger)

    manifest = build_manifest(config.replace(protocol="ours"), header,
                              len(records), dataset_hash)
    model = PipelineModel(class_names=header.class_names, rpn=rpn_model,
                          detection=det_model, segmentation=seg_model,
                          manifest=manifest)
    return TrainResult(model, ledger, proposal_source="stored")


def adapt_records(rpn_model, records, featurizer):
    """Replace stored proposals with featurized output of a trained RPN."""
    adapted = []
    for record in records:
        proposals = tuple(
            Proposal(box=box,
                     feature=featurizer.detection(record.image_id, box),
                     is_gt=False, source="adapted")
            for box, _ in propose(rpn_model, record))
        adapted.append(dataclasses.replace(record, proposals=proposals))
    return adapted


def train_ours_serial(header: DatasetHeader, records, config: ProtocolConfig,
                      featurizer, dataset_hash=None) -> TrainResult:
    """Two-pass protocol: the detector trains on adapted proposals.

    Pass 1 trains the proposal module from stored features; pass 2 runs it
    on every image and featurizes the resulting regions, which cannot
    overlap with acquisition because it needs the trained module.
    """
    ledger = TimingLedger()
    records = _materialize(records, ledger)
    _check_sources(records, "stored")
    class_ids = _present_class_ids(records)
    configs = module_configs(config)

    with _timed(ledger, EXTRACTION_1, overlappable=True, extraction=True):
        rpn_reservoir = RpnReservoir(config=configs.rpn.bootstrap,
                                     seed=_module_seed(config.seed, "rpn"))
        rpn_incremental_update(rpn_reservoir, records, header.grid,
                               pos_iou=configs.rpn.pos_iou,
                               neg_iou=configs.rpn.neg_iou,
                               reg_iou=configs.rpn.reg_iou)
    with _timed(ledger, RPN_TRAINING):
        rpn_model = train_rpn_from_reservoir(rpn_reservoir, header.grid,
                                             configs.rpn,
                                             _module_seed(config.seed, "rpn"))
    with _timed(ledger, EXTRACTION_2, overlappable=False, extraction=True):
        adapted = adapt_records(rpn_model, records, featurizer)
    _check_sources(adapted, "adapted")
    det_model, seg_model = _train_detection_and_segmentation(
        adapted, class_ids, configs, config, ledger)

    manifest = build_manifest(config.replace(protocol="ours_serial"), header,
                              len(records), dataset_hash)
    model = PipelineModel(class_names=header.class_names, rpn=rpn_model,
                          detection=det_model, segmentation=seg_model,
                          manifest=manifest)
    return TrainResult(model, ledger, proposal_source="adapted",
                       adapted_image_ids=frozenset(r.image_id
                                                   for r in adapted))


def train(header: DatasetHeader, records, config: ProtocolConfig,
          featurizer=None, dataset_hash=None) -> TrainResult:
    """Dispatch on ``config.protocol``."""
    if config.protocol == "ours":
        return train_ours(header, records, config, dataset_hash)
    if featurizer is None:
        featurizer = featurizer_for(header)
    return train_ours_serial(header, records, config, featurizer,
                             dataset_hash)


class IncrementalTrainer:
    """Grows one model over a stream of task sequences.

    Each ``add_sequence`` call folds new images (and optionally new
    classes) into fixed-size per-image reservoirs, retrains the proposal
    and detection modules from the reservoirs, and extends the
    segmentation model with classifiers for the new classes only;
    previously trained segmentation classifiers are never touched.
    """

    def __init__(self, header: DatasetHeader, config: ProtocolConfig,
                 dataset_hash=None):
        self.header = header
        self.config = config
        self.configs = module_configs(config)
        self.dataset_hash = dataset_hash
        self.rpn_reservoir = RpnReservoir(
            config=self.configs.rpn.bootstrap,
            seed=_module_seed(config.seed, "rpn"))
        self.detection_reservoir = DetectionReservoir(
            config=self.configs.detection.bootstrap,
            seed=_module_seed(config.seed, "detection"))
        self.segmentation_model = None
        self.class_ids: tuple = ()
        self.num_records = 0
        self.sequences = 0

    def add_sequence(self, records, new_class_ids=None) -> TrainResult:
        """Ingest one sequence and return the retrained pipeline.

        ``new_class_ids`` defaults to the classes present in the records
        that the model has not seen yet.
        """
        ledger = TimingLedger()
        records = _materialize(records, ledger)
        _check_sources(records, "stored")
        if new_class_ids is None:
            seen = {g.class_id for r in records for g in r.gt_objects}
            new_class_ids = sorted(seen - set(self.class_ids))
        new_class_ids = tuple(new_class_ids)
        class_ids = tuple(sorted(set(self.class_ids) | set(new_class_ids)))

        with _timed(ledger, EXTRACTION_1, overlappable=True,
                    extraction=True):
            rpn_incremental_update(self.rpn_reservoir, records,
                                   self.header.grid,
                                   pos_iou=self.configs.rpn.pos_iou,
                                   neg_iou=self.configs.rpn.neg_iou,
                                   reg_iou=self.configs.rpn.reg_iou)
            detection_incremental_update(
                self.detection_reservoir, records, class_ids,
                new_class_ids=new_class_ids,
                pos_iou=self.configs.detection.pos_iou,
                neg_iou=self.configs.detection.neg_iou)
        with _timed(ledger, RPN_TRAINING):
            rpn_model = train_rpn_from_reservoir(
                self.rpn_reservoir, self.header.grid, self.configs.rpn,
                _module_seed(self.config.seed, "rpn"))
        with _timed(ledger, DETECTION_TRAINING):
            det_model = train_detection_from_reservoir(
                self.detection_reservoir, self.configs.detection,
                _module_seed(self.config.seed, "detection"))
        with _timed(ledger, SEGMENTATION_TRAINING):
            seg_seed = _module_seed(self.config.seed, "segmentation")
            if self.segmentation_model is None:
                self.segmentation_model = train_online_segmentation(
                    records, new_class_ids, self.configs.segmentation,
                    seg_seed)
            else:
                self.segmentation_model = extend_segmentation(
                    self.segmentation_model, records, new_class_ids,
                    self.configs.segmentation, seg_seed)

        self.class_ids = class_ids
        self.num_records += len(records)
        self.sequences += 1
        manifest = build_manifest(self.config, self.header,
                                  self.num_records, self.dataset_hash)
        manifest["sequences"] = self.sequences
        model = PipelineModel(class_names=self.header.class_names,
                              rpn=rpn_model, detection=det_model,
                              segmentation=self.segmentation_model,
                              manifest=manifest)
        return TrainResult(model, ledger, proposal_source="stored")


def train_incremental(header: DatasetHeader, sequences,
                      config: ProtocolConfig,
                      dataset_hash=None) -> TrainResult:
    """Run ``IncrementalTrainer`` over a list of record sequences."""
    trainer = IncrementalTrainer(header, config, dataset_hash)
    result = None
    for records in sequences:
        result = trainer.add_sequence(records)
    if result is None:
        raise ValueError("need at least one sequence")
    return result


@dataclass(frozen=True)
class StreamResult:
    """Stream-mode timing: modeled extraction, measured training."""

    model: PipelineModel
    ledger: TimingLedger
    num_frames: int
    stream_seconds: float
    extraction_seconds: float
    residual_seconds: float
    training_seconds: float


def stream_residual(num_frames: int, stream_fps: float,
                    extraction_fps: float) -> float:
    """Backlog left when the stream ends: extraction capacity below the
    frame rate accumulates work that must drain before training starts."""
    if num_frames < 0:
        raise ValueError("frame count must be non-negative")
    if stream_fps <= 0 or extraction_fps <= 0:
        raise ValueError("FPS figures must be positive")
    return max(0.0, num_frames / extraction_fps - num_frames / stream_fps)


def simulate_stream(header: DatasetHeader, records, stream_fps: float,
                    extraction_fps: float, config: ProtocolConfig,
                    featurizer=None, dataset_hash=None) -> StreamResult:
    """Train while modeling acquisition and extraction as a timed stream.

    Frames arrive at ``stream_fps`` while extraction consumes them at
    ``extraction_fps``; extraction overlaps the stream, so only the
    backlog remaining at the last frame counts toward training time.  The
    on-line training phases (and the serial protocol's second pass) are
    measured for real and always count.
    """
    if stream_fps <= 0 or extraction_fps <= 0:
        raise ValueError("FPS figures must be positive")
    result = train(header, records, config, featurizer, dataset_hash)
    num_frames = result.model.manifest["num_records"]
    stream_seconds = num_frames / stream_fps
    extraction_seconds = num_frames / extraction_fps
    residual = stream_residual(num_frames, stream_fps, extraction_fps)

    ledger = TimingLedger()
    ledger.add(ACQUISITION, stream_seconds, overlappable=True)
    ledger.add(EXTRACTION_1, extraction_seconds, overlappable=True,
               extraction=True)
    if residual > 0.0:
        ledger.add(BACKLOG, residual)
    for phase in result.ledger.phases:
        if phase.name in (ACQUISITION, EXTRACTION_1):
            continue
        if phase.name == EXTRACTION_2:
            # the serial second pass re-featurizes every frame after
            # adaptation, so it is modeled at extraction speed and never
            # overlaps the stream
            ledger.add(EXTRACTION_2, num_frames / extraction_fps,
                       overlappable=False, extraction=True)
            continue
        ledger.add(phase.name, phase.seconds, phase.overlappable)
    return StreamResult(model=result.model, ledger=ledger,
                        num_frames=num_frames,
                        stream_seconds=stream_seconds,
                        extraction_seconds=extraction_seconds,
                        residual_seconds=residual,
                        training_seconds=ledger.training_seconds(
                            stream_mode=True))


def _grid_candidates(sigmas, lams):
    candidates = [(float(s), float(l)) for s in sigmas for l in lams]
    if not candidates:
        raise ValueError("empty hyper-parameter grid")
    return candidates


def _argmax_larger_lam(scored):
    """Pick the best (sigma, lam); ties go to the larger lam, then to the
    earlier grid entry."""
    best = None
    for sigma, lam, score in scored:
        if best is None or (score, lam) > (best[2], best[1]):
            best = (sigma, lam, score)
    return (best[0], best[1]), best[2]


def cross_validate(header: DatasetHeader, train_records, val_records,
                   config: ProtocolConfig, sigmas, lams,
                   featurizer=None) -> dict:
    """Grid-search kernel width and regularization per module.

    The proposal module maximizes validation recall at IoU 0.7; the
    detection and segmentation modules maximize validation mask mAP at
    IoU 0.5, searched sequentially in that order.  Returns
    ``{module: {"sigma", "lam", "score"}}``.
    """
    candidates = _grid_candidates(sigmas, lams)
    train_records = list(train_records)
    val_records = list(val_records)
    train_ids = {r.image_id for r in train_records}
    if train_ids & {r.image_id for r in val_records}:
        raise ValueError("validation split overlaps the training split")
    if featurizer is None:
        featurizer = featurizer_for(header)

    scored = []
    for sigma, lam in candidates:
        trial = config.replace(rpn_sigma=sigma, rpn_lam=lam)
        result = train_ours(header, train_records, trial)
        proposals = {r.image_id: propose(result.model.rpn, r)
                     for r in val_records}
        scored.append((sigma, lam,
                       proposal_recall(val_records, proposals, 0.7)))
    (rpn_sigma, rpn_lam), rpn_score = _argmax_larger_lam(scored)
    config = config.replace(rpn_sigma=rpn_sigma, rpn_lam=rpn_lam)

    def segm_map50(trial_config):
        result = train_ours(header, train_records, trial_config)
        preds = []
        for record in val_records:
            preds.extend(infer(result.model, record, featurizer))
        report = evaluate(preds, val_records, thresholds=(0.5,))
        return report.mean_ap("segm", 0.5)

    scored = [(s, l, segm_map50(config.replace(detection_sigma=s,
                                               detection_lam=l)))
              for s, l in candidates]
    (det_sigma, det_lam), det_score = _argmax_larger_lam(scored)
    config = config.replace(detection_sigma=det_sigma, detection_lam=det_lam)

    scored = [(s, l, segm_map50(config.replace(segmentation_sigma=s,
                                               segmentation_lam=l)))
              for s, l in candidates]
    (seg_sigma, seg_lam), seg_score = _argmax_larger_lam(scored)

    return {
        "rpn": {"sigma": rpn_sigma, "lam": rpn_lam, "score": rpn_score},
        "detection": {"sigma": det_sigma, "lam": det_lam,
                      "score": det_score},
        "segmentation": {"sigma": seg_sigma, "lam": seg_lam,
                         "score": seg_score},
    }


def apply_choices(config: ProtocolConfig, choices: dict) -> ProtocolConfig:
    """Fold cross-validation winners back into a run config."""
    return config.replace(
        rpn_sigma=choices["rpn"]["sigma"], rpn_lam=choices["rpn"]["lam"],
        detection_sigma=choices["detection"]["sigma"],
        detection_lam=choices["detection"]["lam"],
        segmentation_sigma=choices["segmentation"]["sigma"],
        segmentation_lam=choices["segmentation"]["lam"])


def infer(model: PipelineModel, record, featurizer=None,
          use_stored_proposals: bool = False,
          with_masks: bool = True) -> list:
    """Full-image predictions: propose, featurize, detect, mask.

    With ``use_stored_proposals`` the detector runs on the proposals
    stored in the record instead of the proposal module's output; mask
    features always come from the featurizer because refined boxes never
    exist in the store.  ``with_masks=False`` yields box-only predictions
    and is the one combination that works without a featurizer.
    """
    if use_stored_proposals:
        proposals = record.proposals
    else:
        if featurizer is None:
            raise ValueError("proposal featurization needs a featurizer")
        proposals = [
            Proposal(box=box,
                     feature=featurizer.detection(record.image_id, box),
                     is_gt=False, source="adapted")
            for box, _ in propose(model.rpn, record)]
    detections = detect(model.detection, record, proposals=proposals)
    predictions = []
    for d in detections:
        mask = None
        if with_masks:
            if featurizer is None:
                raise ValueError("mask prediction needs a featurizer")
            mask_features = featurizer.mask(record.image_id, d.box)
            mask = predict_mask(model.segmentation, d.class_id, d.box,
                                mask_features, record.image_size)
        predictions.append(InstancePrediction(
            image_id=record.image_id, class_id=d.class_id,
            score=float(d.score), box=d.box, mask=mask))
    return predictions


def infer_dataset(model: PipelineModel, records, featurizer=None,
                  use_stored_proposals: bool = False,
                  with_masks: bool = True) -> list:
    """Predictions for every record, concatenated in record order."""
    out = []
    for record in records:
        out.extend(infer(model, record, featurizer, use_stored_proposals,
                         with_masks))
    return out
