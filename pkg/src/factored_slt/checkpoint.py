"""Checkpoint directory format.

A checkpoint is a directory holding manifest.json plus one binary blob per
parameter group. Each blob is self-describing: a magic string, a little-endian
uint64 header length, a JSON header listing tensor name/shape/dtype/byte
order, then the raw buffers in header order. Writing is canonical (sorted
JSON keys, fixed byte order, no timestamps), so save -> load -> save is
byte-identical and blob hashes recorded in the manifest detect tampering.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .utils import canonical_json, sha256_hex

FORMAT_NAME = "factored-slt-checkpoint-v1"
_MAGIC = b"FSLTBLOB1\n"

_DTYPES = {
    "<f8": torch.float64,
    "<f4": torch.float32,
    "<i8": torch.int64,
    "<i4": torch.int32,
    "|u1": torch.uint8,
    "|b1": torch.bool,
}


class CheckpointError(RuntimeError):
    """Raised for malformed, tampered, or mismatched checkpoints."""


def _numpy_dtype_tag(array: np.ndarray) -> str:
    dt = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
    tag = dt.str
    if tag == "=f8":
        tag = "<f8"
    if tag not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {array.dtype}")
    return tag


def _tensor_to_array(tensor: torch.Tensor) -> np.ndarray:
    arr = tensor.detach().cpu().contiguous().numpy()
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def write_blob(path: Path, tensors: dict[str, torch.Tensor]) -> list[dict]:
    """Write one parameter-group blob; returns the tensor descriptor list."""
    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = _tensor_to_array(tensors[name])
        tag = _numpy_dtype_tag(arr)
        raw = arr.tobytes(order="C")
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": tag,
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = canonical_json({"tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)
    return entries


def read_blob(path: Path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise CheckpointError(f"{path}: bad blob magic")
    offset = len(_MAGIC)
    (header_len,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    header = json.loads(data[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        nbytes = int(entry["nbytes"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = (
            np.frombuffer(data, dtype=np.dtype(entry["dtype"]), count=count, offset=offset)
            .reshape(entry["shape"])
            .copy()
        )
        tensors[entry["name"]] = torch.from_numpy(arr)
        offset += nbytes
    return tensors


def group_checksum(tensors: dict[str, torch.Tensor]) -> str:
    """Order-independent digest over tensor names, shapes, and bytes."""
    digest_input = bytearray()
    for name in sorted(tensors):
        arr = _tensor_to_array(tensors[name])
        digest_input.extend(name.encode("utf-8"))
        digest_input.extend(str(arr.shape).encode("utf-8"))
        digest_input.extend(arr.tobytes(order="C"))
    return sha256_hex(bytes(digest_input))


def module_tensors(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    """Parameters and buffers, i.e. everything that defines the module state."""
    return {k: v for k, v in module.state_dict().items()}


def save_checkpoint(
    path: str | Path,
    *,
    groups: dict[str, dict[str, torch.Tensor]],
    config_hash: str,
    model_config: dict,
    step: int,
    epoch: int,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    components = {}
    for group_name, tensors in groups.items():
        blob_file = f"{group_name}.bin"
        entries = write_blob(path / blob_file, tensors)
        components[group_name] = {
            "file": blob_file,
            "sha256": sha256_hex((path / blob_file).read_bytes()),
            "tensors": entries,
        }
    manifest = {
        "format": FORMAT_NAME,
        "config_hash": config_hash,
        "model": model_config,
        "step": step,
        "epoch": epoch,
        "components": components,
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    return path


class Checkpoint:
    def __init__(self, path: Path, manifest: dict):
        self.path = path
        self.manifest = manifest

    @property
    def config_hash(self) -> str:
        return self.manifest["config_hash"]

    @property
    def model_config(self) -> dict:
        return self.manifest["model"]

    @property
    def step(self) -> int:
        return int(self.manifest["step"])

    @property
    def epoch(self) -> int:
        return int(self.manifest["epoch"])

    @property
    def extra(self) -> dict:
        return self.manifest.get("extra", {})

    def group_names(self) -> list[str]:
        return sorted(self.manifest["components"])

    def load_group(self, group_name: str) -> dict[str, torch.Tensor]:
        if group_name not in self.manifest["components"]:
            raise CheckpointError(
                f"checkpoint {self.path} has no component {group_name!r} "
                f"(has {self.group_names()})"
            )
        entry = self.manifest["components"][group_name]
        blob_path = self.path / entry["file"]
        if not blob_path.is_file():
            raise CheckpointError(f"missing blob file {blob_path}")
        if sha256_hex(blob_path.read_bytes()) != entry["sha256"]:
            raise CheckpointError(
                f"blob {blob_path} does not match the manifest hash "
                "(tampered or corrupted checkpoint)"
            )
        return read_blob(blob_path)

    def load_group_into(self, group_name: str, module: torch.nn.Module) -> None:
        tensors = self.load_group(group_name)
        module.load_state_dict(tensors, strict=True)


def load_checkpoint(
    path: str | Path,
    expected_config_hash: str | None = None,
    force: bool = False,
) -> Checkpoint:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"no manifest.json under {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest {manifest_path}: {exc}") from exc
    for key in ("format", "config_hash", "model", "step", "epoch", "components"):
        if key not in manifest:
            raise CheckpointError(f"manifest {manifest_path} lacks field {key!r}")
    if manifest["format"] != FORMAT_NAME:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest['format']!r}"
        )
    if (
        expected_config_hash is not None
        and manifest["config_hash"] != expected_config_hash
        and not force
    ):
        raise CheckpointError(
            "config hash mismatch: checkpoint was produced under "
            f"{manifest['config_hash'][:12]}..., current config is "
            f"{expected_config_hash[:12]}... (pass force to override)"
        )
    return Checkpoint(path, manifest)
