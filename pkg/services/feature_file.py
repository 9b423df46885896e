from __future__ import annotations
import logging
import struct
from pathlib import Path

import numpy as np

from logic.data import PairedDataset, PairedRecord
from logic.encoders import MODALITIES, FeatureSequence
from services.binary import ByteReader, f32_bytes, read_bytes, u32_bytes, write_bytes

log = logging.getLogger(__name__)

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1
_MODALITY_CODES = {name: i for i, name in enumerate(MODALITIES)}


class FeatureFileError(ValueError):
    pass


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


def encode_dataset(dataset: PairedDataset) -> bytes:
    parts = [FEAT_MAGIC, struct.pack("<II", FEAT_VERSION, len(dataset))]
    for r in dataset:
        image = np.asarray(r.image_features)
        if image.ndim != 3:
            raise FeatureFileError(f"pair {r.pair_id}: image features must be [H, W, f], got {image.shape}")
        seq = r.language
        parts.append(struct.pack("<QI", r.pair_id, r.class_label))
        parts.append(struct.pack("<III", *image.shape))
        parts.append(f32_bytes(image))
        # text-only sequences carry no frames: written as f_a = 0
        f_a = 0 if seq.frames is None else int(seq.frames.shape[-1])
        parts.append(struct.pack("<BII", _MODALITY_CODES[seq.modality], seq.length, f_a))
        if seq.frames is not None:
            parts.append(f32_bytes(np.asarray(seq.frames)))
        if seq.unit_ids is None:
            parts.append(struct.pack("<B", 0))
        else:
            parts.append(struct.pack("<B", 1))
            parts.append(u32_bytes(seq.unit_ids))
    return b"".join(parts)


def decode_dataset(buf: bytes) -> PairedDataset:
    rd = ByteReader(buf, TruncatedFileError)
    magic = rd.take(4, "magic")
    if magic != FEAT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r} at offset 0, expected {FEAT_MAGIC!r}")
    (version,) = rd.unpack("I", "version")
    if version != FEAT_VERSION:
        raise VersionMismatchError(f"feature file version {version} at offset 4, this build reads {FEAT_VERSION}")
    (n,) = rd.unpack("I", "record count")

    records = []
    for i in range(n):
        pair_id, label = rd.unpack("QI", f"record {i} header")
        h, w, f = rd.unpack("III", f"record {i} image dims")
        image = rd.array("f4", h * w * f, f"record {i} image data").reshape(h, w, f)
        at = rd.pos
        code, length, f_a = rd.unpack("BII", f"record {i} sequence header")
        if code >= len(MODALITIES):
            raise FeatureFileError(f"unknown modality code {code} at offset {at}")
        frames = None
        if f_a:
            frames = rd.array("f4", length * f_a, f"record {i} frames").reshape(length, f_a)
        (has_ids,) = rd.unpack("B", f"record {i} unit-id flag")
        ids = rd.array("u4", length, f"record {i} unit ids").astype(np.int64) if has_ids else None
        try:
            seq = FeatureSequence(MODALITIES[code], frames, ids)
        except ValueError as e:
            raise FeatureFileError(f"record {i} at offset {at}: {e}") from e
        records.append(PairedRecord(int(pair_id), int(label), image, seq))
    if rd.remaining:
        raise FeatureFileError(f"{rd.remaining} trailing bytes at offset {rd.pos}")
    return PairedDataset(records)


def write_feature_file(dataset: PairedDataset, path: str | Path):
    write_bytes(path, encode_dataset(dataset))
    log.info("✅ wrote %d records to %s", len(dataset), path)


def read_feature_file(path: str | Path) -> PairedDataset:
    dataset = decode_dataset(read_bytes(path))
    log.debug("read %d records from %s", len(dataset), path)
    return dataset
