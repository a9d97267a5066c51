"""Member checkpoints

Layout: 8 byte magic, u32 manifest length, JSON manifest, blob section.
The blob section holds every parameter as u32 ndim, u32 dims, then
little-endian values, float32 unless the manifest records float64. The
manifest records the SHA-256 of the blob section.
"""

import hashlib
import logging
import os
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from pydantic import ValidationError

from dkd_workbench.core.tensor import Tensor
from dkd_workbench.errors import CheckpointError
from dkd_workbench.models.models import (
    CHECKPOINT_FORMAT_VERSION,
    CheckpointManifest,
    TensorEntry,
    TrainingMode,
)
from dkd_workbench.networks.architectures import ARCHITECTURES, ModelGraph, build_model

logger = logging.getLogger(__name__)

MAGIC = b"DKDCKPT\x00"
BLOB_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _blob_dtype(model: ModelGraph) -> str:
    return "float64" if model.dtype == np.float64 else "float32"


def _encode_blobs(model: ModelGraph) -> Tuple[bytes, list]:
    layout = BLOB_DTYPES[_blob_dtype(model)]
    parts = []
    entries = []
    for index, p in enumerate(model.params):
        data = np.ascontiguousarray(p.data, dtype=layout)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
        entries.append(TensorEntry(name=f"param_{index}", shape=list(data.shape)))
    return b"".join(parts), entries


def save_checkpoint(
    model: ModelGraph,
    path: Union[str, os.PathLike],
    mode: TrainingMode | str,
    zeta: float,
    member_index: int = 0,
    seed: int = 0,
) -> CheckpointManifest:
    """Write a model with its training context

    Args:
        model (ModelGraph): The trained member
        path (Union[str, os.PathLike]): Output file
        mode (TrainingMode | str): How the member was trained
        zeta (float): Diversity weight used in training
        member_index (int): Position of the member in its ensemble
        seed (int): Seed the member was initialized with

    Returns:
        CheckpointManifest: The manifest written into the file
    """
    if model.arch not in ARCHITECTURES:
        raise CheckpointError(f"only named architectures can be saved, got {model.arch!r}")
    blob, entries = _encode_blobs(model)
    manifest = CheckpointManifest(
        format_version=CHECKPOINT_FORMAT_VERSION,
        arch=model.arch,
        tap_id=model.tap_id,
        mode=mode,
        zeta=zeta,
        member_index=member_index,
        seed=seed,
        dtype=_blob_dtype(model),
        tensors=entries,
        blob_sha256=hashlib.sha256(blob).hexdigest(),
        blob_bytes=len(blob),
    )
    header = manifest.model_dump_json().encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + struct.pack("<I", len(header)) + header + blob)
    logger.debug(f"Saved member {member_index} ({model.arch}) to {path}")
    return manifest


def read_manifest(path: Union[str, os.PathLike]) -> Tuple[CheckpointManifest, bytes]:
    """Parse the header of a checkpoint and return it with the blob section

    Raises:
        CheckpointError: On a bad magic, truncation, unknown version or a
            checksum mismatch
    """
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    offset = len(MAGIC)
    if len(raw) < offset + 4:
        raise CheckpointError(f"{path}: truncated header")
    (length,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if len(raw) < offset + length:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = CheckpointManifest.model_validate_json(raw[offset : offset + length])
    except ValidationError as e:
        raise CheckpointError(f"{path}: invalid manifest: {e}")
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {manifest.format_version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    blob = raw[offset + length :]
    if len(blob) != manifest.blob_bytes:
        raise CheckpointError(f"{path}: blob section has {len(blob)} bytes, manifest says {manifest.blob_bytes}")
    if hashlib.sha256(blob).hexdigest() != manifest.blob_sha256:
        raise CheckpointError(f"{path}: blob checksum mismatch")
    return manifest, blob


def load_checkpoint(path: Union[str, os.PathLike]) -> Tuple[ModelGraph, CheckpointManifest]:
    """Rebuild a model from a checkpoint, parameters in the recorded precision

    Returns:
        Tuple[ModelGraph, CheckpointManifest]: The frozen model and its manifest
    """
    manifest, blob = read_manifest(path)
    template = build_model(manifest.arch, seed=0, tap_id=manifest.tap_id, dtype=manifest.dtype)
    layout = BLOB_DTYPES[manifest.dtype]
    width = np.dtype(layout).itemsize
    params = []
    offset = 0
    for entry, expected in zip(manifest.tensors, template.params):
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        if tuple(shape) != expected.shape or list(shape) != entry.shape:
            raise CheckpointError(
                f"{path}: {entry.name} has shape {shape}, {manifest.arch} expects {expected.shape}"
            )
        count = int(np.prod(shape))
        values = np.frombuffer(blob, dtype=layout, count=count, offset=offset).astype(manifest.dtype)
        offset += width * count
        params.append(Tensor(values.reshape(shape), requires_grad=False))
    if len(params) != len(template.params):
        raise CheckpointError(f"{path}: {len(params)} tensors, {manifest.arch} needs {len(template.params)}")
    model = ModelGraph(template.layers, template.input_shape, manifest.tap_id, params, manifest.arch)
    return model, manifest


def file_sha256(path: Union[str, os.PathLike]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
