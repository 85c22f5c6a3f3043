"""File formats: DDTF tensor files, JSONL manifests, checkpoint containers,
and a minimal PCM16 WAV writer.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TENSOR_MAGIC = b"DDTF"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"DDCK"


class TensorFileError(ValueError):
    pass


class BadMagicError(TensorFileError):
    pass


class BadVersionError(TensorFileError):
    pass


class TruncatedError(TensorFileError):
    pass


class DanglingPathError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    pass


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    head = TENSOR_MAGIC + struct.pack("<HH", TENSOR_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise TruncatedError("file shorter than header")
    if blob[:4] != TENSOR_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}")
    version, ndim = struct.unpack("<HH", blob[4:8])
    if version != TENSOR_VERSION:
        raise BadVersionError(f"unsupported version {version}")
    dim_end = 8 + 4 * ndim
    if len(blob) < dim_end:
        raise TruncatedError("file shorter than dims")
    dims = struct.unpack(f"<{ndim}I", blob[8:dim_end])
    count = int(np.prod(dims)) if ndim else 1
    payload = blob[dim_end:]
    if len(payload) != 4 * count:
        raise TruncatedError(
            f"payload is {len(payload)} bytes, expected {4 * count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# -- manifests --------------------------------------------------------------


def save_manifest(path: str | Path, entries: list[dict]) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")


def load_manifest(path: str | Path, check_paths: bool = True) -> list[dict]:
    path = Path(path)
    entries = [json.loads(line) for line in path.read_text().splitlines() if line]
    ids = [e["id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in manifest")
    if check_paths:
        for e in entries:
            for rel in e.get("paths", {}).values():
                target = path.parent / rel
                if not target.exists():
                    raise DanglingPathError(f"{e['id']}: missing file {rel}")
    return entries


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    header = dict(header, names=names)
    head_blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(head_blob)))
        f.write(head_blob)
        for name in names:
            blob = tensor_to_bytes(tensors[name])
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)


def load_checkpoint(
    path: str | Path,
    expected_config_hash: str | None = None,
    force: bool = False,
) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {blob[:4]!r}")
    (head_len,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + head_len])
    if expected_config_hash is not None and header.get("config_hash") != expected_config_hash:
        msg = (
            f"checkpoint config hash {header.get('config_hash')} does not match "
            f"current {expected_config_hash}"
        )
        if not force:
            raise ConfigMismatchError(msg + " (pass --force to load anyway)")
        log.warning("%s -- loading due to --force", msg)
    tensors = {}
    off = 8 + head_len
    for name in header["names"]:
        if off + 8 > len(blob):
            raise TruncatedError(f"checkpoint truncated before {name}")
        (size,) = struct.unpack("<Q", blob[off : off + 8])
        off += 8
        tensors[name] = tensor_from_bytes(blob[off : off + size])
        off += size
    return header, tensors


# -- WAV export -------------------------------------------------------------


def write_wav(path: str | Path, wave: np.ndarray, sample_rate: int) -> None:
    """Mono PCM16 little-endian WAV with the canonical 44-byte header."""
    pcm = np.clip(np.asarray(wave, dtype=np.float64), -1.0, 1.0)
    data = (pcm * 32767.0).astype("<i2").tobytes()
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 36 + len(data)))
        f.write(b"WAVEfmt ")
        f.write(struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16))
        f.write(b"data")
        f.write(struct.pack("<I", len(data)))
        f.write(data)
