"""Checkpoint persistence: JSON with hex-encoded 64-bit floats.

Hex encoding makes round trips bit-exact across platforms, which matters
more at desk scale than file size.  Loading verifies the format version and
the vocabulary hash so a checkpoint can never silently run against the
wrong token map.
"""

import json
import struct

import numpy as np

__all__ = ["CheckpointError", "FORMAT_VERSION", "save_checkpoint",
           "load_checkpoint", "restore_params"]

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode_array(arr):
    flat = np.ascontiguousarray(arr, dtype=np.float64).reshape(-1)
    return struct.pack(f"<{flat.size}d", *flat).hex()


def _decode_array(text, shape):
    n = 1
    for d in shape:
        n *= d
    if len(text) != 16 * n:
        raise CheckpointError(f"parameter payload has wrong length for shape {shape}")
    return np.array(struct.unpack(f"<{n}d", bytes.fromhex(text))).reshape(shape)


def save_checkpoint(path, kind, family, feature_dim, named_params, config,
                    corpus_seed, vocab_hash):
    obj = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "family": family,
        "feature_dim": feature_dim,
        "corpus_seed": corpus_seed,
        "vocab_hash": vocab_hash,
        "config": config,
        "params": {
            name: {"shape": list(p.data.shape), "data": _encode_array(p.data)}
            for name, p in named_params.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path, expect_vocab_hash=None):
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as err:
            raise CheckpointError(f"{path}: not a checkpoint file ({err})") from err
    version = obj.get("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} does not match {FORMAT_VERSION}")
    if expect_vocab_hash is not None and obj["vocab_hash"] != expect_vocab_hash:
        raise CheckpointError(
            f"{path}: checkpoint vocabulary hash {obj['vocab_hash'][:12]}... does "
            f"not match the loaded vocabulary {expect_vocab_hash[:12]}...")
    params = {name: _decode_array(entry["data"], entry["shape"])
              for name, entry in obj["params"].items()}
    obj["params"] = params
    return obj


def restore_params(named_params, loaded_params):
    """Copy loaded arrays into model parameters, checking names and shapes."""
    missing = set(named_params) - set(loaded_params)
    extra = set(loaded_params) - set(named_params)
    if missing or extra:
        raise CheckpointError(
            f"parameter names do not match (missing {sorted(missing)}, "
            f"unexpected {sorted(extra)})")
    for name, p in named_params.items():
        arr = loaded_params[name]
        if tuple(arr.shape) != p.data.shape:
            raise CheckpointError(
                f"parameter {name}: shape {tuple(arr.shape)} does not match "
                f"{p.data.shape}")
        p.data[...] = arr
