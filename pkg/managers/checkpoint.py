#!/usr/bin/env python3
"""
Checkpoint Manager - manifest.json + tensors.bin serialization

tensors.bin is the raw little-endian f32 bytes of every tensor, concatenated
in manifest order: model parameters first, then the AdamW moments as
adam.m/<name> and adam.v/<name>.
"""

import json
from pathlib import Path

import numpy as np

from core.constants import CHECKPOINT_FORMAT_VERSION, PATHS
from core.errors import CheckpointError, ConfigError, DstgError
from core.model import Encoder, ModelConfig, param_specs
from core.numerics import parameter
from managers.training import AdamState, Checkpoint, TrainConfig

_DTYPE = np.dtype("<f4")


def _entries(checkpoint):
    for name, p in checkpoint.encoder.params.items():
        yield name, p.data
    for name in checkpoint.encoder.params:
        yield f"adam.m/{name}", checkpoint.moments.m[name]
    for name in checkpoint.encoder.params:
        yield f"adam.v/{name}", checkpoint.moments.v[name]


def save_checkpoint(path, checkpoint):
    """
    Write a checkpoint directory
    Parameters:
        path: directory (created if missing)
        checkpoint: Checkpoint
    Returns:
        Path of the directory
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    with open(path / PATHS['tensors'], "wb") as f:
        for name, data in _entries(checkpoint):
            raw = np.ascontiguousarray(data, dtype=_DTYPE).tobytes()
            f.write(raw)
            tensors.append({
                "name": name,
                "shape": list(data.shape),
                "dtype": "f32",
                "offset": offset,
                "nbytes": len(raw),
            })
            offset += len(raw)

    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "variant": checkpoint.variant,
        "step": checkpoint.step,
        "model_config": checkpoint.model_config.to_dict(),
        "train_config": checkpoint.train_config.to_dict(),
        "rng": {"generator": "philox", "seed": checkpoint.train_config.seed},
        "tokenizer": checkpoint.tokenizer,
        "tensors": tensors,
    }
    with open(path / PATHS['manifest'], "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(path):
    manifest_path = Path(path) / PATHS['manifest']
    if not manifest_path.is_file():
        raise CheckpointError(f"no {PATHS['manifest']} in {path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt manifest {manifest_path}: {e}") from e
    if not isinstance(manifest, dict):
        raise CheckpointError(f"corrupt manifest {manifest_path}: not an object")
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != supported {CHECKPOINT_FORMAT_VERSION}")
    missing = [k for k in ("step", "model_config", "train_config", "tokenizer", "tensors") if k not in manifest]
    if missing:
        raise CheckpointError(f"corrupt manifest {manifest_path}: missing {', '.join(missing)}")
    return manifest


def load_checkpoint(path):
    """
    Read a checkpoint directory written by save_checkpoint
    Raises CheckpointError on version mismatch, corrupt manifest or
    tensors that disagree with the recorded config.
    """
    path = Path(path)
    manifest = read_manifest(path)
    try:
        model_config = ModelConfig.from_dict(manifest["model_config"])
        train_config = TrainConfig.from_dict(manifest["train_config"])
    except (ConfigError, TypeError) as e:
        raise CheckpointError(f"corrupt manifest config in {path}: {e}") from e

    bin_path = path / PATHS['tensors']
    if not bin_path.is_file():
        raise CheckpointError(f"no {PATHS['tensors']} in {path}")
    blob = bin_path.read_bytes()

    arrays = {}
    for entry in manifest["tensors"]:
        try:
            name, shape = entry["name"], tuple(int(d) for d in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"corrupt tensor entry in {path}: {entry!r}") from e
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize or offset < 0 or offset + nbytes > len(blob):
            raise CheckpointError(f"{name}: shape {list(shape)} does not match {nbytes} bytes at offset {offset}")
        arrays[name] = np.frombuffer(blob, dtype=_DTYPE, count=nbytes // _DTYPE.itemsize, offset=offset).reshape(shape)

    params = {}
    moments = AdamState(t=int(manifest["step"]))
    for name, shape, _ in param_specs(model_config):
        for key in (name, f"adam.m/{name}", f"adam.v/{name}"):
            if key not in arrays:
                raise CheckpointError(f"missing tensor {key} in {path}")
            if arrays[key].shape != shape:
                raise CheckpointError(f"{key}: manifest shape {list(arrays[key].shape)} != expected {list(shape)}")
        params[name] = parameter(arrays[name].astype(np.float32), name=name)
        moments.m[name] = arrays[f"adam.m/{name}"].astype(np.float32)
        moments.v[name] = arrays[f"adam.v/{name}"].astype(np.float32)

    try:
        encoder = Encoder(model_config, params)
    except DstgError as e:
        raise CheckpointError(f"{path}: {e}") from e
    return Checkpoint(
        encoder=encoder,
        train_config=train_config,
        moments=moments,
        step=int(manifest["step"]),
        tokenizer=dict(manifest["tokenizer"]),
    )
