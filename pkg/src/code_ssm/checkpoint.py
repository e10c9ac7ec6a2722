"""
Checkpoint serialization for code-ssm.

File layout, little-endian throughout::

    b"CSSM"                    magic
    u32 version
    u32 header_len, header     UTF-8 JSON: config, config_hash, step, seed,
                               rng_state, extra (keys sorted)
    u32 n_tensors
    per tensor:
        u32 name_len, name     UTF-8
        u32 ndim, u32 * ndim   shape
        float32 * prod(shape)  row-major data

Tensors named ``optimizer.m.<param>`` / ``optimizer.v.<param>`` carry Adam
moments and ``head.<param>`` carries a task head; everything else is an
encoder parameter.
"""

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import numpy as np

from .config import EncoderConfig, encoder_config_from_dict
from .exceptions import CheckpointError, ConfigError
from .model import EncoderParams, init_params
from .numerics import Rng, Tensor


logger = logging.getLogger(__name__)

MAGIC = b"CSSM"
FORMAT_VERSION = 1
OPTIMIZER_PREFIX = "optimizer."
HEAD_PREFIX = "head."

_U32 = struct.Struct("<I")
_FLOAT = np.dtype("<f4")


@dataclass
class Checkpoint:
    """Decoded checkpoint contents."""

    config: EncoderConfig
    tensors: Dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION
    config_hash: str = ""

    def params(self) -> Dict[str, np.ndarray]:
        return {name: value for name, value in self.tensors.items()
                if not name.startswith((OPTIMIZER_PREFIX, HEAD_PREFIX))}

    def with_prefix(self, prefix: str) -> Dict[str, np.ndarray]:
        return {name[len(prefix):]: value for name, value in self.tensors.items()
                if name.startswith(prefix)}

    def rng(self) -> Optional[Rng]:
        if self.rng_state is None:
            return None
        return Rng.from_state(self.seed, self.rng_state)


def _hash_config(config_dict: Dict[str, Any]) -> str:
    canonical = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_checkpoint(path: Union[str, Path], config: EncoderConfig,
                    tensors: Iterable[Tuple[str, Union[Tensor, np.ndarray]]],
                    step: int = 0, seed: int = 0, rng: Optional[Rng] = None,
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write named tensors and run state to ``path``.

    Tensors are stored as 32-bit floats in the order given; a float32 tensor
    round-trips bit-exactly.
    """
    path = Path(path)
    header = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "step": int(step),
        "seed": int(seed),
        "rng_state": rng.state() if rng is not None else None,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    items = [(name, np.asarray(value.data if isinstance(value, Tensor) else value))
             for name, value in tensors]
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names", field="tensors")

    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(MAGIC)
        f.write(_U32.pack(FORMAT_VERSION))
        f.write(_U32.pack(len(header_bytes)))
        f.write(header_bytes)
        f.write(_U32.pack(len(items)))
        for name, value in items:
            encoded = name.encode("utf-8")
            f.write(_U32.pack(len(encoded)))
            f.write(encoded)
            f.write(_U32.pack(value.ndim))
            for dim in value.shape:
                f.write(_U32.pack(dim))
            f.write(np.ascontiguousarray(value, dtype=_FLOAT).tobytes())
    tmp_path.replace(path)
    logger.info(f"Saved checkpoint with {len(items)} tensors at step {step} to {path}")
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, field_name: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"file truncated: needed {size} bytes at offset {self.offset}, "
                                  f"{len(self.data) - self.offset} left", field=field_name)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def u32(self, field_name: str) -> int:
        return _U32.unpack(self.take(4, field_name))[0]


def load_checkpoint(path: Union[str, Path], expected_config: Optional[EncoderConfig] = None) -> Checkpoint:
    """Read and verify a checkpoint.

    Args:
        path: File written by save_checkpoint
        expected_config: When given, the stored config hash must match it

    Returns:
        Decoded Checkpoint

    Raises:
        CheckpointError: naming the field that failed (magic, version,
            header, config_hash, tensor name, shape)
    """
    path = Path(path)
    try:
        reader = _Reader(path.read_bytes())
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}", field="file") from e

    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path} is not a code-ssm checkpoint", field="magic")
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version} (expected {FORMAT_VERSION})",
                              field="version")

    header_len = reader.u32("header_len")
    try:
        header = json.loads(reader.take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"header is not valid JSON: {e}", field="header") from e
    for key in ("config", "config_hash", "step", "seed", "rng_state", "extra"):
        if key not in header:
            raise CheckpointError("missing from header", field=key)

    if _hash_config(header["config"]) != header["config_hash"]:
        raise CheckpointError("stored hash does not match stored config", field="config_hash")
    try:
        config = encoder_config_from_dict(header["config"])
    except ConfigError as e:
        raise CheckpointError(str(e), field="config") from e
    if expected_config is not None and expected_config.config_hash() != header["config_hash"]:
        raise CheckpointError("checkpoint was written for a different encoder config", field="config_hash")

    tensors: Dict[str, np.ndarray] = {}
    n_tensors = reader.u32("n_tensors")
    for index in range(n_tensors):
        name_len = reader.u32(f"tensor[{index}].name_len")
        try:
            name = reader.take(name_len, f"tensor[{index}].name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("name is not UTF-8", field=f"tensor[{index}].name") from e
        ndim = reader.u32(f"{name}.ndim")
        shape = tuple(reader.u32(f"{name}.shape") for _ in range(ndim))
        count = math.prod(shape)
        if count * _FLOAT.itemsize > reader.remaining:
            raise CheckpointError(f"shape {shape} needs {count * _FLOAT.itemsize} bytes, "
                                  f"{reader.remaining} left", field=f"{name}.data")
        raw = reader.take(count * _FLOAT.itemsize, f"{name}.data")
        tensors[name] = np.frombuffer(raw, dtype=_FLOAT).astype(np.float32).reshape(shape)
    if reader.offset != len(reader.data):
        raise CheckpointError(f"{len(reader.data) - reader.offset} trailing bytes", field="tensors")

    logger.info(f"Loaded checkpoint {path} (step {header['step']}, {len(tensors)} tensors)")
    return Checkpoint(config=config, tensors=tensors, step=int(header["step"]), seed=int(header["seed"]),
                      rng_state=header["rng_state"], extra=header["extra"], version=version,
                      config_hash=header["config_hash"])


def restore_tensors(targets: Dict[str, Tensor], values: Dict[str, np.ndarray], strict: bool = True) -> None:
    """Copy stored values into live tensors, checking names and shapes."""
    missing = [name for name in targets if name not in values]
    if strict and missing:
        raise CheckpointError(f"missing tensors {missing[:5]}", field=missing[0])
    unexpected = [name for name in values if name not in targets]
    if strict and unexpected:
        raise CheckpointError(f"unexpected tensors {unexpected[:5]}", field=unexpected[0])
    for name, target in targets.items():
        if name not in values:
            continue
        value = values[name]
        if value.shape != target.shape:
            raise CheckpointError(f"shape {value.shape} does not match model shape {target.shape}", field=name)
        target.data = value.astype(target.dtype, copy=True)


def save_model(path: Union[str, Path], params: EncoderParams, step: int = 0, seed: int = 0,
               rng: Optional[Rng] = None, optimizer_moments: Optional[Dict[str, Dict[str, np.ndarray]]] = None,
               head: Optional[Dict[str, Tensor]] = None, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Save an encoder with optional Adam moments and task head."""
    tensors = list(params.named_parameters())
    if head:
        tensors += [(f"{HEAD_PREFIX}{name}", value) for name, value in head.items()]
    if optimizer_moments:
        for slot in ("m", "v"):
            tensors += [(f"{OPTIMIZER_PREFIX}{slot}.{name}", value)
                        for name, value in optimizer_moments[slot].items()]
    return save_checkpoint(path, params.config, tensors, step=step, seed=seed, rng=rng, extra=extra)


def load_model(path: Union[str, Path],
               expected_config: Optional[EncoderConfig] = None) -> Tuple[EncoderParams, Checkpoint]:
    """Rebuild an encoder from a checkpoint."""
    checkpoint = load_checkpoint(path, expected_config)
    params = init_params(checkpoint.config, Rng(checkpoint.seed))
    restore_tensors(params.parameter_dict(), checkpoint.params())
    return params, checkpoint
