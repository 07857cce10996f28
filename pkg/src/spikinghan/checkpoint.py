"""
Parameter checkpoints.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header (sorted
keys), then every tensor as little-endian float64 in declaration order.
Identical parameters and metadata always give identical bytes.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from spikinghan.config import ModelConfig
from spikinghan.errors import DatasetValidationError, MissingFileError, ShapeError
from spikinghan.model import PARAM_ORDER, ModelParams

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")


class TensorSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class CheckpointHeader(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    format_version: int = Field(FORMAT_VERSION)
    tensors: List[TensorSpec]
    model: ModelConfig
    target_type: str = ""
    metapaths: List[str] = Field(default_factory=list)
    num_classes: int
    split_ratios: Optional[Tuple[float, float, float]] = None
    split_seed: Optional[int] = None


@dataclass(frozen=True)
class Checkpoint:
    header: CheckpointHeader
    params: ModelParams


def encode_checkpoint(params: ModelParams, header: CheckpointHeader) -> bytes:
    tensors = params.tensors()
    expected = [TensorSpec(name=n, shape=v.shape) for n, v in tensors.items()]
    if list(header.tensors) != expected:
        raise ShapeError("Checkpoint header does not describe the parameters")

    meta = json.dumps(header.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_LENGTH.pack(len(meta)), meta]
    chunks.extend(np.ascontiguousarray(v, dtype=_DTYPE).tobytes() for v in tensors.values())
    return b"".join(chunks)


def save_checkpoint(
    path: Path,
    params: ModelParams,
    model_cfg: ModelConfig,
    *,
    num_classes: int,
    target_type: str = "",
    metapaths: Optional[List[str]] = None,
    split_ratios: Optional[Tuple[float, float, float]] = None,
    split_seed: Optional[int] = None,
) -> CheckpointHeader:
    header = CheckpointHeader(
        tensors=[TensorSpec(name=n, shape=v.shape) for n, v in params.tensors().items()],
        model=model_cfg,
        target_type=target_type,
        metapaths=list(metapaths or []),
        num_classes=num_classes,
        split_ratios=split_ratios,
        split_seed=split_seed,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, header))
    logger.info("Saved checkpoint %s", path)
    return header


def decode_checkpoint(blob: bytes, source: Union[str, Path] = "<bytes>") -> Checkpoint:
    """
    Raises:
        DatasetValidationError: truncated data, unknown version or a malformed header.
    """
    source = Path(source)
    if len(blob) < _LENGTH.size:
        raise DatasetValidationError("Checkpoint is truncated", source)
    (length,) = _LENGTH.unpack_from(blob, 0)
    start = _LENGTH.size + length
    if start > len(blob):
        raise DatasetValidationError("Checkpoint header is truncated", source)

    try:
        header = CheckpointHeader(**json.loads(blob[_LENGTH.size : start].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ValidationError) as e:
        raise DatasetValidationError(f"Malformed checkpoint header: {e}", source) from e
    if header.format_version != FORMAT_VERSION:
        raise DatasetValidationError(f"Unsupported checkpoint format version {header.format_version}", source)

    names = [t.name for t in header.tensors]
    if names != [n for n in PARAM_ORDER if n in names]:
        raise DatasetValidationError(f"Unexpected tensor order {names}", source)

    expected_bytes = sum(t.size for t in header.tensors) * _DTYPE.itemsize
    if len(blob) - start != expected_bytes:
        raise DatasetValidationError(
            f"Checkpoint body holds {len(blob) - start} bytes, header describes {expected_bytes}", source
        )

    tensors = {}
    offset = start
    for spec in header.tensors:
        count = spec.size
        data = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=offset)
        tensors[spec.name] = data.astype(np.float64).reshape(spec.shape)
        offset += count * _DTYPE.itemsize

    return Checkpoint(header=header, params=ModelParams.from_tensors(tensors))


def load_checkpoint(path: Path) -> Checkpoint:
    if not path.is_file():
        raise MissingFileError(path)
    return decode_checkpoint(path.read_bytes(), path)


def check_compatible(checkpoint: Checkpoint, d_in: int, num_classes: int) -> None:
    """
    Raises:
        ShapeError: the stored W1/W3 do not fit the dataset's feature width or class count.
    """
    params = checkpoint.params
    if params.W1.shape[0] != d_in:
        raise ShapeError("Checkpoint W1 does not match the feature width", (d_in, params.W1.shape[1]), params.W1.shape)
    if params.W3.shape[1] != num_classes:
        raise ShapeError(
            "Checkpoint W3 does not match the class count", (params.W3.shape[0], num_classes), params.W3.shape
        )
