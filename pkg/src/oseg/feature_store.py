"""Per-image feature records and the versioned on-disk dataset format.

A dataset file carries a header (class vocabulary, anchor grid, feature
dimensions) followed by one block per image.  Records hold the three
feature families consumed by training: the location feature map for
proposal learning, per-proposal feature vectors for detection, and
per-pixel feature grids with labels for each ground-truth object.

Tensors are stored as little-endian float64; masks and pixel labels as
packed bits.  Reading is streaming: records are yielded one at a time in
stored order.  The synthetic generator that fills these records lives in
:mod:`oseg.synthetic`.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import binio
from .binio import FormatError
from .geometry import AnchorGrid, BinaryMask, Box, pixel_bounds

DATASET_MAGIC = b"OSEG"
DATASET_VERSION = 1

_F8 = np.dtype("<f8")


@dataclass(frozen=True)
class Proposal:
    """A candidate region with its per-region feature vector.

    ``is_gt`` marks proposals injected from ground-truth boxes;
    ``source`` records which extraction produced the feature ("stored"
    for the dataset's own pass, "adapted" for proposals regenerated by a
    trained proposal module).
    """

    box: Box
    feature: np.ndarray
    is_gt: bool = False
    source: str = "stored"


@dataclass(frozen=True)
class GtObject:
    """Ground truth: class, box, pixel mask, and per-pixel mask features."""

    class_id: int
    box: Box
    mask: BinaryMask
    mask_features: np.ndarray
    pixel_labels: np.ndarray


@dataclass(frozen=True)
class FeatureRecord:
    """Everything extracted from one image."""

    image_id: int
    image_size: tuple[int, int]
    rpn_map: np.ndarray
    proposals: tuple[Proposal, ...]
    gt_objects: tuple[GtObject, ...]

    def validate(self, header: "DatasetHeader") -> None:
        rows, cols = header.grid.map_size
        s = header.mask_grid
        if self.image_size != header.image_size:
            raise ValueError(f"record {self.image_id}: image size mismatch")
        if self.rpn_map.shape != (rows, cols, header.rpn_dim):
            raise ValueError(
                f"record {self.image_id}: rpn map shape {self.rpn_map.shape} "
                f"does not match grid {(rows, cols, header.rpn_dim)}"
            )
        if not np.isfinite(self.rpn_map).all():
            raise ValueError(f"record {self.image_id}: non-finite rpn map")
        for p in self.proposals:
            if p.feature.shape != (header.det_dim,):
                raise ValueError(f"record {self.image_id}: bad proposal feature")
            if not np.isfinite(p.feature).all():
                raise ValueError(f"record {self.image_id}: non-finite proposal")
        for g in self.gt_objects:
            if not 0 <= g.class_id < header.num_classes:
                raise ValueError(f"record {self.image_id}: class out of range")
            if g.mask_features.shape != (s, s, header.seg_dim):
                raise ValueError(f"record {self.image_id}: bad mask features")
            if g.pixel_labels.shape != (s, s) or g.pixel_labels.dtype != np.bool_:
                raise ValueError(f"record {self.image_id}: bad pixel labels")
            if not np.isfinite(g.mask_features).all():
                raise ValueError(f"record {self.image_id}: non-finite mask features")
            bx1, by1, bx2, by2 = pixel_bounds(g.box, self.image_size)
            x0, y0 = g.mask.origin
            mh, mw = g.mask.bits.shape
            if x0 < bx1 or y0 < by1 or x0 + mw > bx2 or y0 + mh > by2:
                raise ValueError(
                    f"record {self.image_id}: mask extends outside its box"
                )


@dataclass(frozen=True)
class DatasetHeader:
    """Dataset-wide contract: vocabulary, grid, and tensor dimensions.

    ``generator`` preserves the parameters of the synthetic oracle that
    produced the file (None for converted real-feature datasets).
    """

    class_names: tuple[str, ...]
    image_size: tuple[int, int] = (320, 320)
    stride: int = 16
    anchor_shapes: tuple[tuple[float, float], ...] = (
        (64.0, 64.0),
        (96.0, 48.0),
        (48.0, 96.0),
    )
    rpn_dim: int = 64
    det_dim: int = 64
    seg_dim: int = 64
    mask_grid: int = 14
    generator: dict | None = None
    grid: AnchorGrid = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if len(self.class_names) < 1:
            raise ValueError("need at least one class")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")
        if min(self.rpn_dim, self.det_dim, self.seg_dim, self.mask_grid) < 1:
            raise ValueError("dimensions must be positive")
        object.__setattr__(
            self,
            "grid",
            AnchorGrid(
                image_size=tuple(self.image_size),
                stride=self.stride,
                anchor_shapes=tuple(tuple(s) for s in self.anchor_shapes),
            ),
        )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def to_json(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "image_size": list(self.image_size),
            "stride": self.stride,
            "anchor_shapes": [list(s) for s in self.anchor_shapes],
            "rpn_dim": self.rpn_dim,
            "det_dim": self.det_dim,
            "seg_dim": self.seg_dim,
            "mask_grid": self.mask_grid,
            "generator": self.generator,
        }

    @staticmethod
    def from_json(obj: dict) -> "DatasetHeader":
        return DatasetHeader(
            class_names=tuple(obj["class_names"]),
            image_size=tuple(obj["image_size"]),
            stride=int(obj["stride"]),
            anchor_shapes=tuple(tuple(float(v) for v in s) for s in obj["anchor_shapes"]),
            rpn_dim=int(obj["rpn_dim"]),
            det_dim=int(obj["det_dim"]),
            seg_dim=int(obj["seg_dim"]),
            mask_grid=int(obj["mask_grid"]),
            generator=obj.get("generator"),
        )


def _pack_record(record: FeatureRecord) -> bytes:
    meta = {
        "image_id": record.image_id,
        "image_size": list(record.image_size),
        "map_shape": list(record.rpn_map.shape),
        "proposals": [
            {
                "box": [p.box.x1, p.box.y1, p.box.x2, p.box.y2],
                "is_gt": p.is_gt,
                "source": p.source,
            }
            for p in record.proposals
        ],
        "gts": [
            {
                "class_id": g.class_id,
                "box": [g.box.x1, g.box.y1, g.box.x2, g.box.y2],
                "mask_origin": list(g.mask.origin),
                "mask_shape": list(g.mask.bits.shape),
            }
            for g in record.gt_objects
        ],
    }
    parts = [record.rpn_map.astype(_F8, copy=False).tobytes()]
    for p in record.proposals:
        parts.append(p.feature.astype(_F8, copy=False).tobytes())
    for g in record.gt_objects:
        parts.append(np.packbits(g.mask.bits).tobytes())
        parts.append(g.mask_features.astype(_F8, copy=False).tobytes())
        parts.append(np.packbits(g.pixel_labels).tobytes())
    blob = b"".join(parts)
    meta_bytes = binio.canonical_json(meta)
    return len(meta_bytes).to_bytes(8, "little") + meta_bytes + blob


def _unpack_record(payload: bytes, header: DatasetHeader, offset: int) -> FeatureRecord:
    if len(payload) < 8:
        raise FormatError("record payload shorter than its meta prefix", offset)
    meta_len = int.from_bytes(payload[:8], "little")
    if 8 + meta_len > len(payload):
        raise FormatError("record meta overruns payload", offset)
    try:
        meta = json.loads(payload[8:8 + meta_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"record meta is not valid JSON: {exc}", offset) from exc
    blob = payload[8 + meta_len:]
    pos = 0

    def take(count: int, dtype, what: str) -> np.ndarray:
        nonlocal pos
        nbytes = count * np.dtype(dtype).itemsize
        if pos + nbytes > len(blob):
            raise FormatError(f"record blob truncated in {what}", offset)
        out = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
        pos += nbytes
        return out

    map_shape = tuple(int(v) for v in meta["map_shape"])
    rpn_map = take(int(np.prod(map_shape)), _F8, "rpn map").reshape(map_shape)
    proposals = []
    for p in meta["proposals"]:
        feature = take(header.det_dim, _F8, "proposal feature")
        proposals.append(
            Proposal(
                box=Box(*(float(v) for v in p["box"])),
                feature=feature.copy(),
                is_gt=bool(p["is_gt"]),
                source=str(p["source"]),
            )
        )
    s = header.mask_grid
    gts = []
    for g in meta["gts"]:
        mh, mw = (int(v) for v in g["mask_shape"])
        packed = take(-(-mh * mw // 8), np.uint8, "mask bits")
        bits = np.unpackbits(packed, count=mh * mw).astype(bool).reshape(mh, mw)
        feats = take(s * s * header.seg_dim, _F8, "mask features")
        packed_labels = take(-(-s * s // 8), np.uint8, "pixel labels")
        labels = np.unpackbits(packed_labels, count=s * s).astype(bool).reshape(s, s)
        gts.append(
            GtObject(
                class_id=int(g["class_id"]),
                box=Box(*(float(v) for v in g["box"])),
                mask=BinaryMask(tuple(int(v) for v in g["mask_origin"]), bits),
                mask_features=feats.copy().reshape(s, s, header.seg_dim),
                pixel_labels=labels,
            )
        )
    if pos != len(blob):
        raise FormatError(
            f"record blob has {len(blob) - pos} unexplained trailing bytes", offset
        )
    return FeatureRecord(
        image_id=int(meta["image_id"]),
        image_size=tuple(int(v) for v in meta["image_size"]),
        rpn_map=rpn_map.copy(),
        proposals=tuple(proposals),
        gt_objects=tuple(gts),
    )


def write_dataset(path, header: DatasetHeader, records: Iterable[FeatureRecord]) -> int:
    """Write header and records; returns the record count.

    Records are validated against the header before anything is written
    for them, so a failure leaves a prefix of valid records.
    """
    count = 0
    with open(path, "wb") as fh:
        binio.write_preamble(fh, DATASET_MAGIC, DATASET_VERSION, header.to_json())
        for record in records:
            record.validate(header)
            binio.write_block(fh, _pack_record(record))
            count += 1
    return count


def read_dataset(path) -> tuple[DatasetHeader, Iterator[FeatureRecord]]:
    """Open a dataset for streaming; records are yielded lazily in order.

    Corruption raises :class:`FormatError` carrying the byte offset;
    records yielded before the failure are valid.
    """
    fh = open(path, "rb")
    try:
        _, raw = binio.read_preamble(fh, DATASET_MAGIC, {DATASET_VERSION})
        header = DatasetHeader.from_json(raw)
    except Exception:
        fh.close()
        raise

    def records() -> Iterator[FeatureRecord]:
        with fh:
            while True:
                offset = fh.tell()
                payload = binio.read_block(fh)
                if payload is None:
                    return
                yield _unpack_record(payload, header, offset)

    return header, records()


def load_dataset(path) -> tuple[DatasetHeader, list[FeatureRecord]]:
    """Read a whole dataset into memory."""
    header, stream = read_dataset(path)
    return header, list(stream)


def dataset_sha256(path) -> str:
    """Content hash used in reproducibility manifests."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_replace(path, write_fn) -> None:
    """Write to a temp file in the same directory, then rename over path."""
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
