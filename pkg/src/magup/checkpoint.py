"""Checkpoint file format: magic, checksummed JSON header, f32 blobs.

Layout:

    MAGUP1\\n
    <decimal byte length of the header>\\n
    <sha256 hex digest of the header bytes>\\n
    <header JSON: {"version", "config", "manifest"}>
    <little-endian float32 parameter blobs, concatenated in manifest order>

Manifest entries carry (name, shape, offset) with offsets relative to the
blob section, so any single flipped header byte is caught by the digest and
any truncated blob by the offset arithmetic. Saving a just-loaded model
reproduces the file byte for byte: parameters round-trip through f32 exactly
once.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .config import model_config_from_dict, model_config_to_dict
from .errors import CheckpointError
from .model import SegModel

MAGIC = b"MAGUP1\n"
VERSION = 1


def save_checkpoint(model: SegModel, path) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, p in model.named_params():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "config": model_config_to_dict(model.cfg),
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    digest = hashlib.sha256(header_bytes).hexdigest()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(header_bytes)}\n".encode())
        fh.write(f"{digest}\n".encode())
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def _read_header(data: bytes, path) -> tuple:
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    rest = data[len(MAGIC):]
    try:
        length_line, rest = rest.split(b"\n", 1)
        digest_line, rest = rest.split(b"\n", 1)
        header_len = int(length_line)
    except ValueError as exc:
        raise CheckpointError(f"{path}: malformed header framing") from exc
    if header_len < 0 or len(rest) < header_len:
        raise CheckpointError(f"{path}: truncated header")
    header_bytes, blob = rest[:header_len], rest[header_len:]
    if hashlib.sha256(header_bytes).hexdigest() != digest_line.decode():
        raise CheckpointError(f"{path}: header checksum mismatch")
    try:
        header = json.loads(header_bytes)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: header is not valid JSON") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: unsupported version {header.get('version')!r}"
        )
    return header, blob


def _blob_array(blob: bytes, entry: dict, path) -> np.ndarray:
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    start = entry["offset"]
    end = start + 4 * count
    if start < 0 or end > len(blob):
        raise CheckpointError(f"{path}: truncated blob for {entry['name']}")
    flat = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
    return flat.astype(np.float64).reshape(shape)


def load_checkpoint(path) -> tuple:
    """Rebuild the model a file describes; returns (model, header dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    header, blob = _read_header(data, path)
    cfg = model_config_from_dict(header["config"])
    model = SegModel(cfg)
    params = model.param_dict()
    seen = set()
    for entry in header["manifest"]:
        name = entry["name"]
        if name not in params:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        if tuple(entry["shape"]) != params[name].shape:
            raise CheckpointError(
                f"{path}: {name} shape {entry['shape']} vs model {params[name].shape}"
            )
        params[name].assign(_blob_array(blob, entry, path))
        seen.add(name)
    missing = sorted(set(params) - seen)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing[:4]}")
    return model, header


def strip_bdc(src, dst) -> None:
    """Rewrite a checkpoint without its distillation parameters.

    The stored config drops the distiller too, so the result loads cleanly;
    inference output is unaffected because the distiller is train-only.
    """
    with open(src, "rb") as fh:
        data = fh.read()
    header, blob = _read_header(data, src)
    config = dict(header["config"])
    config["bdc"] = None
    manifest = []
    blobs = []
    offset = 0
    for entry in header["manifest"]:
        if entry["name"].startswith("bdc."):
            continue
        arr = _blob_array(blob, entry, src)
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append(
            {"name": entry["name"], "shape": entry["shape"], "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    new_header = {"version": VERSION, "config": config, "manifest": manifest}
    header_bytes = json.dumps(new_header, sort_keys=True, separators=(",", ":")).encode()
    digest = hashlib.sha256(header_bytes).hexdigest()
    with open(dst, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(header_bytes)}\n".encode())
        fh.write(f"{digest}\n".encode())
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)
