"""
On-disk containers for datasets, checkpoints and POD bases.

Every container is a directory with a manifest.json (sorted keys, indent 2)
and raw little-endian payload files, each carrying a SHA-256 checksum in
the manifest. Directories are staged next to their target and renamed into
place, single files go through a temp file and os.replace.
"""

import hashlib
import json
import logging
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Union

import numpy as np
import torch

from ditto.errors import CheckpointError, SchemaVersionError
from ditto.schema import SCHEMA_VERSION, DatasetBundle, ModelConfig

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PathLike = Union[str, Path]


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_bytes_atomic(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json_atomic(path: PathLike, obj: Any) -> None:
    write_bytes_atomic(path, dumps_json(obj).encode("utf-8"))


def write_text_atomic(path: PathLike, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


@contextmanager
def staged_directory(target: PathLike) -> Iterator[Path]:
    """Yield an empty sibling directory that replaces ``target`` on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(stage, target)


def write_payload(directory: Path, name: str, array: np.ndarray, dtype: str) -> Dict[str, Any]:
    data = np.ascontiguousarray(array, dtype=np.dtype(dtype)).tobytes(order="C")
    (directory / name).write_bytes(data)
    return {"file": name, "dtype": dtype, "shape": list(np.shape(array)), "sha256": sha256_hex(data)}


def read_payload(directory: Path, entry: Dict[str, Any]) -> np.ndarray:
    path = directory / entry["file"]
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"missing payload {path}: {exc}") from exc
    if sha256_hex(data) != entry["sha256"]:
        raise CheckpointError(f"checksum mismatch for {path}")
    return np.frombuffer(data, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()


def read_manifest(directory: PathLike, container: str) -> Dict[str, Any]:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(manifest.get("schema_version"), SCHEMA_VERSION)
    if manifest.get("container") != container:
        raise CheckpointError(f"{path} holds a {manifest.get('container')!r} container, expected {container!r}")
    return manifest


# ============================================================================
# DATASETS
# ============================================================================

def save_dataset(bundle: DatasetBundle, directory: PathLike) -> Path:
    """One <f4 row-major payload per trajectory, shape (T+1, *grid)."""
    bundle.validate()
    with staged_directory(directory) as stage:
        payloads = [write_payload(stage, f"traj_{m:05d}.bin", bundle.fields[m], "<f4") for m in range(bundle.M)]
        manifest = {
            "container": "dataset",
            "schema_version": SCHEMA_VERSION,
            "kind": bundle.kind,
            "grid_shape": list(bundle.spatial_shape),
            "grid": [np.asarray(axis, dtype=np.float64).tolist() for axis in bundle.grid],
            "times": np.asarray(bundle.times, dtype=np.float64).tolist(),
            "splits": list(bundle.splits),
            "seeds": [int(s) for s in bundle.seeds],
            "conditioning_scalar_name": bundle.conditioning_scalar_name,
            "pde": bundle.pde,
            "trajectories": payloads,
        }
        (stage / MANIFEST).write_text(dumps_json(manifest), encoding="utf-8")
    logger.info("wrote dataset %s (%d trajectories)", directory, bundle.M)
    return Path(directory)


def load_dataset(directory: PathLike) -> DatasetBundle:
    directory = Path(directory)
    manifest = read_manifest(directory, "dataset")
    fields = np.stack([read_payload(directory, entry) for entry in manifest["trajectories"]])
    bundle = DatasetBundle(
        kind=manifest["kind"],
        grid=[np.asarray(axis) for axis in manifest["grid"]],
        times=np.asarray(manifest["times"]),
        fields=fields,
        splits=list(manifest["splits"]),
        seeds=list(manifest["seeds"]),
        conditioning_scalar_name=manifest.get("conditioning_scalar_name", "time"),
        pde=manifest.get("pde", {}),
    )
    bundle.validate()
    return bundle


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_checkpoint(model: torch.nn.Module, directory: PathLike, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Config echo, name -> shape table and one parameter payload.

    Float32 models store <f4, float64 models <f8, so reloading is bit-exact.
    """
    config: ModelConfig = model.config
    dtype = "<f8" if config.dtype == "float64" else "<f4"
    state = model.state_dict()
    table, chunks, offset = [], [], 0
    for name, tensor in state.items():
        values = tensor.detach().cpu().numpy()
        table.append({"name": name, "shape": list(values.shape), "offset": offset, "count": int(values.size)})
        chunks.append(values.astype(np.dtype(dtype)).ravel())
        offset += int(values.size)
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    with staged_directory(directory) as stage:
        payload = write_payload(stage, "parameters.bin", flat, dtype)
        manifest = {
            "container": "checkpoint",
            "schema_version": SCHEMA_VERSION,
            "config": config.to_manifest_properties(),
            "parameters": table,
            "payload": payload,
            "extra": extra or {},
        }
        (stage / MANIFEST).write_text(dumps_json(manifest), encoding="utf-8")
    logger.info("saved checkpoint %s (%d values)", directory, offset)
    return Path(directory)


def load_checkpoint(directory: PathLike, device: Optional[str] = None):
    """Rebuild the model from the config echo and restore its parameters."""
    from ditto.network import build_model

    directory = Path(directory)
    manifest = read_manifest(directory, "checkpoint")
    config = ModelConfig.from_properties(manifest["config"])
    model = build_model(config)
    flat = read_payload(directory, manifest["payload"])
    torch_dtype = torch.float64 if config.dtype == "float64" else torch.float32
    state = {}
    expected = model.state_dict()
    for entry in manifest["parameters"]:
        name = entry["name"]
        if name not in expected:
            raise CheckpointError(f"checkpoint parameter {name!r} does not exist in the rebuilt model")
        values = flat[entry["offset"]:entry["offset"] + entry["count"]].reshape(entry["shape"])
        state[name] = torch.from_numpy(values.copy()).to(torch_dtype)
    missing = sorted(set(expected) - set(state))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing}")
    model.load_state_dict(state)
    if device:
        model = model.to(device)
    model.eval()
    return model, manifest.get("extra", {})
