"""Binary checkpoints with a JSON sidecar.

Layout (all little-endian): ``b"BPRL"``, u32 format version, u8 arch tag
(0 classifier, 1 perturbation generator), u32 layer count, one u32 per layer
width, then the float32 parameters in canonical order.

Datasets use the same conventions under ``b"BPRD"``: u32 version, u32 N, H,
W, C and class count, then float32 pixels, u32 labels, u32 original labels
and u8 provenance codes, with a JSON manifest beside the blob.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .errors import InvalidInputError
from .nn import ArchSpec, Model

MAGIC = b"BPRL"
DATA_MAGIC = b"BPRD"
VERSION = 1
TAG_CLASSIFIER = 0
TAG_GENERATOR = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(InvalidInputError):
    pass


@dataclass
class Checkpoint:
    model: Model
    arch_tag: int = TAG_CLASSIFIER
    meta: dict = field(default_factory=dict)


def encode(model: Model, arch_tag: int = TAG_CLASSIFIER) -> bytes:
    if arch_tag not in (TAG_CLASSIFIER, TAG_GENERATOR):
        raise InvalidInputError(f"unknown arch tag {arch_tag}")
    widths = model.arch.layer_widths
    head = MAGIC + struct.pack("<IBI", VERSION, arch_tag, len(widths))
    head += struct.pack(f"<{len(widths)}I", *widths)
    return head + np.asarray(model.params, dtype=_LE_F32).tobytes()


def decode(blob: bytes) -> tuple[Model, int]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    if len(blob) < 13:
        raise CheckpointError("truncated checkpoint header")
    version, tag, n = struct.unpack_from("<IBI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if tag not in (TAG_CLASSIFIER, TAG_GENERATOR):
        raise CheckpointError(f"unknown arch tag {tag}")
    off = 13
    if len(blob) < off + 4 * n:
        raise CheckpointError("truncated layer table")
    widths = struct.unpack_from(f"<{n}I", blob, off)
    off += 4 * n
    arch = ArchSpec(widths)
    body = blob[off:]
    if len(body) != 4 * arch.n_params:
        raise CheckpointError(f"expected {arch.n_params} parameters, found {len(body) / 4:g}")
    params = np.frombuffer(body, dtype=_LE_F32).astype(np.float32)
    return Model(arch, params), tag


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def save(path: str | Path, model: Model, *, role: str, seed: int, config_hash: str,
         arch_tag: int = TAG_CLASSIFIER, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(model, arch_tag))
    meta = {"role": role, "seed": int(seed), "config_hash": config_hash, "arch_tag": arch_tag,
            "layer_widths": list(model.arch.layer_widths),
            "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load(path: str | Path, expected_hash: str | None = None, expected_tag: int | None = None) -> Checkpoint:
    """Read a checkpoint; a missing sidecar is tolerated only when no hash is expected."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    model, tag = decode(blob)
    if expected_tag is not None and tag != expected_tag:
        raise CheckpointError(f"{path} has arch tag {tag}, expected {expected_tag}")
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    if expected_hash is not None:
        if not meta:
            raise CheckpointError(f"{path} has no sidecar to verify the config hash against")
        if meta.get("config_hash") != expected_hash:
            raise CheckpointError(f"{path} was written under config {meta.get('config_hash')}, "
                                  f"current config is {expected_hash}")
    if meta and list(meta.get("layer_widths", model.arch.layer_widths)) != list(model.arch.layer_widths):
        raise CheckpointError(f"sidecar of {path} disagrees with the binary layer table")
    return Checkpoint(model, tag, meta)


def encode_dataset(ds: LabeledDataset) -> bytes:
    n, h, w, c = ds.pixels.shape
    head = DATA_MAGIC + struct.pack("<6I", VERSION, n, h, w, c, ds.class_count)
    return b"".join([head, ds.pixels.astype(_LE_F32).tobytes(), ds.labels.astype("<u4").tobytes(),
                     ds.original_labels.astype("<u4").tobytes(), ds.provenance.astype("u1").tobytes()])


def decode_dataset(blob: bytes) -> LabeledDataset:
    if blob[:4] != DATA_MAGIC:
        raise CheckpointError("not a dataset blob: bad magic bytes")
    if len(blob) < 28:
        raise CheckpointError("truncated dataset header")
    version, n, h, w, c, k = struct.unpack_from("<6I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported dataset version {version}")
    d = n * h * w * c
    if len(blob) != 28 + 4 * d + 9 * n:
        raise CheckpointError("dataset blob length does not match its header")
    off = 28
    pixels = np.frombuffer(blob, _LE_F32, d, off).reshape(n, h, w, c)
    off += 4 * d
    labels = np.frombuffer(blob, "<u4", n, off)
    original = np.frombuffer(blob, "<u4", n, off + 4 * n)
    prov = np.frombuffer(blob, "u1", n, off + 8 * n)
    return LabeledDataset(pixels.astype(np.float32), labels.astype(np.int64), k, prov.astype(np.int8),
                          original.astype(np.int64))


def save_dataset(path: str | Path, ds: LabeledDataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_dataset(ds))
    manifest = {"dims": list(ds.dims), "class_count": ds.class_count, "n": len(ds),
                "provenance_counts": ds.provenance_counts()}
    sidecar_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path: str | Path) -> LabeledDataset:
    try:
        return decode_dataset(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read dataset {path}: {exc.strerror}") from exc
