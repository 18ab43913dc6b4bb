"""Versioned binary checkpoint for trained estimators.

Layout (all integers little-endian)::

    magic      8 bytes   b"MIXNPE\\x00\\x01"
    version    uint32
    header_len uint64
    blob_len   uint64
    header     JSON (utf-8): schema tag, hyperparameters, parameter space,
               normaliser statistics, masks as packed bits, parameter manifest
    blob       concatenated float64 ('<f8') parameter arrays
    checksum   sha256 over header + blob

The checksum is verified before anything is deserialised.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .exceptions import CheckpointError
from .nn import Normalizer, TrainingLog
from .simulators import MixedParamSpace

MAGIC = b"MIXNPE\x00\x01"
VERSION = 1
SCHEMA_TAG = "mixnpe.MNPE"
_PREFIX = struct.Struct("<IQQ")


def _pack_mask(mask):
    bits = np.packbits(np.asarray(mask, dtype=bool).ravel(), bitorder="little")
    return {"shape": list(mask.shape), "bits": base64.b64encode(bits.tobytes()).decode()}


def _unpack_mask(d):
    raw = np.frombuffer(base64.b64decode(d["bits"]), dtype=np.uint8)
    size = int(np.prod(d["shape"]))
    return np.unpackbits(raw, bitorder="little")[:size].reshape(d["shape"]).astype(bool)


def _normalizer_dict(norm):
    return {"mean": norm.mean.tolist(), "std": norm.std.tolist(), "epsilon": norm.epsilon}


def _normalizer_from(d):
    return Normalizer(
        np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64), d["epsilon"]
    )


def encode(estimator):
    """Serialise a fitted estimator to bytes."""
    params = estimator.get_params()
    space = params.pop("space")
    manifest, chunks, offset = [], [], 0
    for name, p in estimator.net_.named_parameters():
        arr = p.detach().numpy().astype("<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    masks = {
        name: _pack_mask(buf.numpy())
        for name, buf in estimator.net_.named_buffers()
        if name.endswith("_mask")
    }
    log = estimator.training_log_
    header = {
        "schema": SCHEMA_TAG,
        "version": VERSION,
        "hyperparameters": params,
        "space": space.to_dict(),
        "n_features_in": estimator.n_features_in_,
        "architecture": {
            "modules": list(estimator.net_.keys()),
            "masks": masks,
            "spline": {
                "num_transforms": params["num_transforms"],
                "num_bins": params["num_bins"],
                "tail_bound": params["tail_bound"],
            },
        },
        "normalizers": {
            "x": _normalizer_dict(estimator.x_normalizer_),
            "theta_c": _normalizer_dict(estimator.theta_normalizer_),
        },
        "parameters": manifest,
        "training_log": {
            "train_loss": log.train_loss,
            "validation_loss": log.validation_loss,
            "best_epoch": log.best_epoch,
            "epochs_run": log.epochs_run,
        },
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(chunks)
    digest = hashlib.sha256(head + blob).digest()
    return MAGIC + _PREFIX.pack(VERSION, len(head), len(blob)) + head + blob + digest


def decode(data):
    """Rebuild a fitted estimator from bytes produced by :func:`encode`."""
    from .estimator import MNPE

    if len(data) < len(MAGIC) + _PREFIX.size + 32 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a mixnpe checkpoint")
    version, head_len, blob_len = _PREFIX.unpack_from(data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = len(MAGIC) + _PREFIX.size
    end = start + head_len + blob_len
    if len(data) != end + 32:
        raise CheckpointError("checkpoint is truncated or has trailing bytes")
    body, digest = data[start:end], data[end:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    try:
        header = json.loads(body[:head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    if header.get("schema") != SCHEMA_TAG:
        raise CheckpointError(f"unexpected schema tag {header.get('schema')!r}")

    hp = dict(header["hyperparameters"])
    for key in ("observation_transforms", "embedding_hidden"):
        if hp.get(key) is not None:
            hp[key] = tuple(hp[key])
    est = MNPE(space=MixedParamSpace.from_dict(header["space"]), **hp)
    est._build(header["n_features_in"])
    est.x_normalizer_ = _normalizer_from(header["normalizers"]["x"])
    est.theta_normalizer_ = _normalizer_from(header["normalizers"]["theta_c"])

    for name, packed in header["architecture"]["masks"].items():
        buf = dict(est.net_.named_buffers())[name]
        if not np.array_equal(buf.numpy().astype(bool), _unpack_mask(packed)):
            raise CheckpointError(f"mask {name} does not match the rebuilt architecture")

    flat = np.frombuffer(body[head_len:], dtype="<f8")
    params = dict(est.net_.named_parameters())
    if set(params) != {m["name"] for m in header["parameters"]}:
        raise CheckpointError("parameter manifest does not match the architecture")
    with torch.no_grad():
        for m in header["parameters"]:
            size = int(np.prod(m["shape"]))
            arr = flat[m["offset"] : m["offset"] + size].reshape(m["shape"])
            params[m["name"]].copy_(torch.from_numpy(arr.astype(np.float64)))
    tl = header["training_log"]
    est.training_log_ = TrainingLog(
        list(tl["train_loss"]), list(tl["validation_loss"]), tl["best_epoch"], tl["epochs_run"]
    )
    return est


def save_estimator(estimator, path):
    data = encode(estimator)
    Path(path).write_bytes(data)


def load_estimator(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data)
