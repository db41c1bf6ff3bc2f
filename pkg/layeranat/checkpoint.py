# layeranat/checkpoint.py
import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from .corpus import Vocabulary
from .model import Model, build_model
from .schemas import ModelSpec

logger = logging.getLogger(__name__)

HEADER = b"LAYERANAT1"
VERSION = 1
MANIFEST_KEYS = {"spec": dict, "seed": int, "components": dict}


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed; the message names the location."""


def save_checkpoint(model: Model, path) -> None:
    """
    Writes the model to disk.

    Layout: the header line, one line of JSON manifest {version, spec, seed,
    vocab, components: name -> {offset, shape}}, then every parameter as
    little-endian float32 bytes in manifest order. The file is written to a
    temporary name and renamed into place.

    Args:
        model (Model): The model to save.
        path: Destination file.
    """
    path = Path(path)
    components = {}
    blobs = []
    offset = 0
    for name, param in model.params.items():
        blob = np.ascontiguousarray(param.data, dtype="<f4").tobytes()
        components[name] = {"offset": offset, "shape": list(param.shape)}
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "version": VERSION,
        "spec": model.spec.model_dump(mode="json"),
        "seed": model.seed,
        "vocab": model.vocab.id_to_token if model.vocab is not None else None,
        "components": components,
        "blob_bytes": offset,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with tmp_path.open("wb") as handle:
        handle.write(HEADER + b"\n")
        handle.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            handle.write(blob)
    os.replace(tmp_path, path)
    logger.info(f"Checkpoint saved to {path} ({offset} bytes of weights)")


def load_checkpoint(path) -> Model:
    """
    Reads a checkpoint written by save_checkpoint.

    Args:
        path: Checkpoint file.

    Returns:
        Model: The restored model, bit-identical to the saved one.

    Raises:
        CheckpointError: On a bad header, unknown version, malformed manifest,
            missing or unexpected parameters, or a blob shorter or longer than
            the manifest describes (the offending component is named).
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"cannot read checkpoint {path}: no such file")
    raw = path.read_bytes()
    header_end = raw.find(b"\n")
    if header_end < 0 or raw[:header_end] != HEADER:
        raise CheckpointError(f"{path}: missing {HEADER.decode()} header")
    manifest_end = raw.find(b"\n", header_end + 1)
    if manifest_end < 0:
        raise CheckpointError(f"{path}: manifest line is not terminated")
    try:
        manifest = json.loads(raw[header_end + 1 : manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed manifest: {e}") from None
    if not isinstance(manifest, dict):
        raise CheckpointError(f"{path}: manifest is not a JSON object")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {manifest.get('version')!r}")

    for key, kind in MANIFEST_KEYS.items():
        if not isinstance(manifest.get(key), kind):
            raise CheckpointError(f"{path}: manifest lacks {key!r} or it is not a {kind.__name__}")
    blob = raw[manifest_end + 1 :]
    try:
        spec = ModelSpec.model_validate(manifest["spec"])
        vocab = Vocabulary(manifest["vocab"]) if manifest.get("vocab") else None
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid manifest 'spec' or 'vocab': {e}") from None
    # A fresh build supplies the expected names and shapes
    template = build_model(spec, seed=manifest["seed"], vocab=vocab)
    components = manifest["components"]

    missing = [name for name in template.params if name not in components]
    if missing:
        raise CheckpointError(f"{path}: manifest lacks components {missing}")
    unexpected = [name for name in components if name not in template.params]
    if unexpected:
        raise CheckpointError(f"{path}: manifest has unknown components {unexpected}")

    end_of_data = 0
    for name, param in template.params.items():
        entry = components[name]
        if not isinstance(entry, dict) or not isinstance(entry.get("offset"), int):
            raise CheckpointError(f"{path}: component {name!r} lacks an integer 'offset'")
        if not isinstance(entry.get("shape"), list):
            raise CheckpointError(f"{path}: component {name!r} lacks a 'shape' list")
        shape = tuple(entry["shape"])
        if shape != param.shape:
            raise CheckpointError(f"{path}: component {name!r} has shape {shape}, spec expects {param.shape}")
        start = int(entry["offset"])
        end = start + 4 * int(np.prod(shape))
        if end > len(blob):
            raise CheckpointError(
                f"{path}: blob for component {name!r} is truncated "
                f"(needs bytes {start}..{end}, file holds {len(blob)})"
            )
        param.data = np.frombuffer(blob[start:end], dtype="<f4").astype(np.float32).reshape(shape)
        end_of_data = max(end_of_data, end)
    if end_of_data != len(blob) or manifest.get("blob_bytes", end_of_data) != len(blob):
        raise CheckpointError(
            f"{path}: manifest describes {end_of_data} bytes of weights but the file holds {len(blob)}"
        )
    template.touch()
    logger.info(f"Checkpoint loaded from {path}")
    return template


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
