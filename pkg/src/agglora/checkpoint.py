"""Bit-exact checkpoint serialization: a directory holding manifest.json plus
one raw little-endian tensors.bin blob, with hashes for both config and data.

No wall-clock metadata goes into the manifest; identical model state always
serializes to identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .model import Model

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class VersionError(CheckpointError):
    pass


class HashMismatchError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class StageConsistencyError(CheckpointError):
    pass


def _config_blob(manifest: dict) -> bytes:
    cfg = {"config": manifest["config"], "adapter_config": manifest["adapter_config"],
           "adapters": manifest["adapters"], "stage": manifest["stage"],
           "attn_merged": manifest["attn_merged"]}
    return json.dumps(cfg, sort_keys=True).encode()


def _check_stage_names(stage: str, names: list[str]):
    has = {key: any(f".{key}." in n for n in names)
           for key in ("ka", "na", "align", "attn_lora", "lora1", "lora2")}
    ok = {
        "base": not any(has.values()),
        "mka": (has["ka"] and has["na"]) or (has["lora1"] and has["lora2"]),
        "stripped": has["ka"] and not has["na"] and not has["align"],
        "da": has["ka"] and has["align"] and not has["na"],
        "merged": not any(has.values()),
    }
    if stage not in ok:
        raise StageConsistencyError(f"unknown stage tag '{stage}'")
    if not ok[stage]:
        raise StageConsistencyError(f"tensor set inconsistent with stage tag '{stage}'")
    if stage == "mka" and has["align"]:
        raise StageConsistencyError("align adapters present in an aggregation-stage checkpoint")


def save_checkpoint(model: Model, path: str) -> str:
    state = model.state()
    os.makedirs(path, exist_ok=True)
    directory = []
    offset = 0
    chunks = []
    # canonical sorted order: the blob is independent of registry build history
    for name in sorted(state["tensors"]):
        arr = state["tensors"][name]
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        directory.append({"name": name, "shape": list(arr.shape),
                          "dtype": arr.dtype.newbyteorder("<").str, "byte_offset": offset,
                          "byte_length": len(raw),
                          "trainable": state["trainable"][name]})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": state["config"],
        "adapter_config": state["adapter_config"],
        "stage": state["stage"],
        "attn_merged": state["attn_merged"],
        "adapters": state["adapters"],
        "tensors": directory,
        "seed": state["config"].get("seed"),
        "created_by": "agglora-0.1.0",
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    manifest["config_hash"] = hashlib.sha256(_config_blob(manifest)).hexdigest()
    _check_stage_names(manifest["stage"], [d["name"] for d in directory])
    with open(os.path.join(path, "tensors.bin"), "wb") as f:
        f.write(blob)
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_checkpoint(path: str) -> Model:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise CheckpointError(f"no manifest.json under {path}")
    with open(mpath, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"format_version {manifest.get('format_version')} != {FORMAT_VERSION}")
    expect_hash = hashlib.sha256(_config_blob(manifest)).hexdigest()
    if manifest.get("config_hash") != expect_hash:
        raise HashMismatchError("config hash does not match serialized config")
    with open(os.path.join(path, "tensors.bin"), "rb") as f:
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise HashMismatchError("tensors.bin does not match its recorded sha256")
    directory = manifest["tensors"]
    names = [d["name"] for d in directory]
    _check_stage_names(manifest["stage"], names)
    prev_end = 0
    tensors = {}
    for d in directory:
        off, length = d["byte_offset"], d["byte_length"]
        if off != prev_end:
            raise CheckpointError(f"tensor offsets not ascending/contiguous at {d['name']}")
        if off + length > len(blob):
            raise TruncatedBlobError(f"blob truncated: {d['name']} ends at {off + length}, have {len(blob)}")
        arr = np.frombuffer(blob[off:off + length], dtype=np.dtype(d["dtype"]))
        tensors[d["name"]] = arr.reshape(d["shape"]).astype(np.dtype(d["dtype"]).newbyteorder("="))
        prev_end = off + length
    if prev_end != len(blob):
        raise CheckpointError("trailing bytes in tensors.bin")
    state = {
        "config": manifest["config"],
        "adapter_config": manifest["adapter_config"],
        "stage": manifest["stage"],
        "attn_merged": manifest["attn_merged"],
        "adapters": manifest["adapters"],
        "tensors": tensors,
        "trainable": {d["name"]: d["trainable"] for d in directory},
    }
    return Model.from_state(state)
