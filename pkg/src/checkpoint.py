"""
Checkpoint container

Layout (little-endian):
    magic "CDIRA1" | u32 payload length | u32 CRC32(payload) | payload
    payload = u32 header length | header JSON (sorted keys) | u32 array count |
              per array: u16 name length | name | u8 ndim | u32 dims | float32 data
"""

import json
import logging
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from src.autodiff import CdiraError
from src.cdira_model import CdiraModel
from src.config import RunConfig, build_config, parse_config_text
from src.pseudo_domain import ClusterModel

logger = logging.getLogger(__name__)

MAGIC = b"CDIRA1"
CENTERS_KEY = "cluster.centers"


class CheckpointError(CdiraError):
    """Unreadable, corrupt, wrong-version or incompatible checkpoint"""


@dataclass
class Checkpoint:
    config_text: str
    model_hash: str
    n_classes: int
    params: "OrderedDict[str, np.ndarray]"
    cluster: Optional[ClusterModel] = None
    epoch: int = 0
    rng_state: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> RunConfig:
        return build_config(parse_config_text(self.config_text))

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()


def _header(ckpt: Checkpoint) -> Dict[str, Any]:
    header = {
        "config": ckpt.config_text,
        "config_hash": ckpt.config_hash,
        "model_hash": ckpt.model_hash,
        "n_classes": ckpt.n_classes,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "cluster": None,
    }
    if ckpt.cluster is not None:
        header["cluster"] = {
            "k_star": ckpt.cluster.k_star,
            "silhouette_by_k": {str(k): v for k, v in sorted(ckpt.cluster.silhouette_by_k.items())},
            "seed": ckpt.cluster.seed,
            "sizes": list(ckpt.cluster.sizes),
        }
    return header


def encode(ckpt: Checkpoint) -> bytes:
    arrays = OrderedDict(ckpt.params)
    if ckpt.cluster is not None:
        arrays[CENTERS_KEY] = ckpt.cluster.centers
    header = json.dumps(_header(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")

    parts = [struct.pack("<I", len(header)), header, struct.pack("<I", len(arrays))]
    for name, array in arrays.items():
        data = np.ascontiguousarray(array, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    payload = b"".join(parts)
    return MAGIC + struct.pack("<II", len(payload), zlib.crc32(payload)) + payload


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.payload):
            raise CheckpointError("checkpoint payload ends early")
        chunk = self.payload[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError("CRC mismatch: file too short to be a checkpoint")
    magic = blob[:len(MAGIC)]
    if magic[:5] != MAGIC[:5]:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if magic != MAGIC:
        raise CheckpointError(f"unsupported checkpoint version {magic[5:]!r}, expected {MAGIC[5:]!r}")
    length, crc = struct.unpack("<II", blob[len(MAGIC):len(MAGIC) + 8])
    payload = blob[len(MAGIC) + 8:]
    if len(payload) != length or zlib.crc32(payload) != crc:
        raise CheckpointError(f"CRC mismatch: payload is {len(payload)} bytes, header says {length}")

    reader = _Reader(payload)
    (header_len,) = reader.unpack("<I")
    header = json.loads(reader.take(header_len).decode("utf-8"))
    (count,) = reader.unpack("<I")
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)

    cluster = None
    if header.get("cluster") is not None:
        info = header["cluster"]
        if CENTERS_KEY not in arrays:
            raise CheckpointError("checkpoint has cluster info but no centers")
        cluster = ClusterModel(
            k_star=int(info["k_star"]),
            centers=arrays.pop(CENTERS_KEY),
            silhouette_by_k={int(k): float(v) for k, v in info["silhouette_by_k"].items()},
            seed=int(info["seed"]),
            sizes=[int(v) for v in info["sizes"]]
        )
    return Checkpoint(
        config_text=header["config"],
        model_hash=header["model_hash"],
        n_classes=int(header["n_classes"]),
        params=arrays,
        cluster=cluster,
        epoch=int(header["epoch"]),
        rng_state=header["rng_state"],
        meta=header["meta"]
    )


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(ckpt))
    logger.info("checkpoint written to %s (epoch %d, %d arrays)", path, ckpt.epoch, len(ckpt.params))
    return path


def load_checkpoint(
    path: Union[str, Path],
    expected_model_hash: Optional[str] = None,
    force: bool = False
) -> Checkpoint:
    """
    Read and verify a checkpoint

    Args:
        path: checkpoint file
        expected_model_hash: architecture hash of the current config; a mismatch is rejected
        force: load despite a hash mismatch
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    ckpt = decode(blob)
    if expected_model_hash is not None and ckpt.model_hash != expected_model_hash:
        if not force:
            raise CheckpointError(
                f"config hash mismatch: checkpoint {ckpt.model_hash}, current config {expected_model_hash} "
                "(use --force to load anyway)"
            )
        logger.warning("loading checkpoint with model hash %s into config %s", ckpt.model_hash, expected_model_hash)
    return ckpt


def generator_state(rng: np.random.Generator) -> Dict[str, Any]:
    """Bit-generator state as plain JSON types"""
    return json.loads(json.dumps(rng.bit_generator.state))


def restore_generator(state: Dict[str, Any]) -> np.random.Generator:
    """Generator that continues the stream recorded by `generator_state`"""
    name = state.get("bit_generator") if isinstance(state, dict) else None
    bit_generator = getattr(np.random, str(name), None)
    if not isinstance(bit_generator, type) or not issubclass(bit_generator, np.random.BitGenerator):
        raise CheckpointError(f"checkpoint holds no usable generator state (bit generator {name!r})")
    restored = bit_generator()
    try:
        restored.state = state
    except (TypeError, ValueError, KeyError) as e:
        raise CheckpointError(f"invalid {name} state in checkpoint: {e}") from e
    return np.random.Generator(restored)


def from_model(model, cluster: Optional[ClusterModel] = None, epoch: int = 0,
               rng_state: Optional[Dict] = None, meta: Optional[Dict] = None,
               rng: Optional[np.random.Generator] = None) -> Checkpoint:
    """`rng`, when given, is stored under rng_state["generator"]"""
    rng_state = dict(rng_state or {})
    if rng is not None:
        rng_state["generator"] = generator_state(rng)
    return Checkpoint(
        config_text=model.config.canonical_text(),
        model_hash=model.config.model_hash(),
        n_classes=model.n_classes,
        params=model.params.state_dict(),
        cluster=cluster,
        epoch=epoch,
        rng_state=rng_state,
        meta=meta or {}
    )


def restore_model(ckpt: Checkpoint, config: Optional[RunConfig] = None):
    """Rebuild a CdiraModel from a checkpoint; `config` may override non-architecture keys"""
    config = config or ckpt.config
    n_domains = ckpt.cluster.k_star if ckpt.cluster is not None and "domain.out.w" in ckpt.params else None
    model = CdiraModel(config, ckpt.n_classes, n_domains=n_domains)
    model.params.load_state_dict(ckpt.params)
    return model
