"""Adding object classes on-line without retraining the old ones.

Feature reservoirs keep a fixed-budget sample of every image seen so
far, so a new class can be trained later: its negatives are drawn from
the stored reservoirs, existing classifiers refit against the enlarged
pool, and the per-class segmentation models of old classes are not
touched at all.  The demo trains on two classes, evaluates, then feeds
a second sequence where a third class appears.
"""

import warnings

from oseg import pipeline
from oseg.evaluation import evaluate
from oseg.model_io import classifier_bytes
from oseg.pipeline import ProtocolConfig, WorldFeaturizer
from oseg.synthetic import SyntheticWorld


def score(model, records, featurizer):
    preds = pipeline.infer_dataset(model, records, featurizer)
    return 100.0 * evaluate(preds, records).mean_ap("segm", 0.5)


def main():
    world = SyntheticWorld(class_names=("mug", "bowl", "drill"),
                           noise=0.1, seed=23, active_classes=(0, 1))
    old_train = list(world.generate(60))
    old_test = list(world.generate(20, start_id=9000))
    featurizer = WorldFeaturizer(world)

    config = ProtocolConfig(num_batches=4, batch_size=1000, seed=6)
    trainer = pipeline.IncrementalTrainer(world.header(), config)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        first = trainer.add_sequence(old_train)
    print(f"sequence 1: classes {first.model.detection.class_ids}, "
          f"mAP50 segm on old test {score(first.model, old_test, featurizer):.1f}%")
    seg_before = {n: classifier_bytes(c)
                  for n, c in first.model.segmentation.classifiers.items()}

    # the third class starts appearing; new images only
    world.active_classes = (0, 1, 2)
    new_train = list(world.generate(60, start_id=200))
    new_test = list(world.generate(20, start_id=9500))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        second = trainer.add_sequence(new_train)

    print(f"sequence 2: classes {second.model.detection.class_ids}, "
          f"mAP50 segm on old test {score(second.model, old_test, featurizer):.1f}%, "
          f"on 3-class test {score(second.model, new_test, featurizer):.1f}%")
    untouched = all(
        classifier_bytes(second.model.segmentation.classifiers[n]) == blob
        for n, blob in seg_before.items())
    print("old segmentation models byte-identical:", untouched)


if __name__ == "__main__":
    main()
