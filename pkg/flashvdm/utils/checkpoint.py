"""
FVDM-CKPT1 checkpoints of flow models

Layout (little endian): magic `FVDM-CKPT1`, uint32 header length, a
UTF-8 JSON header (`{"model": <architecture>, "meta": <stage, config
echo, ...>}`, sorted keys), uint32 tensor count, then per tensor:
uint16 name length, UTF-8 name, uint32 ndim, ndim uint32 dims and the
float64 values in C order
"""

import json
import struct
from typing import Any, BinaryIO, Dict, NamedTuple

import numpy as np

from . import LOG_MANAGER
from .dump import FormatError, PathOrFile, _read_exact, _with_file
from .flow import FlowModel

log = LOG_MANAGER.get_logger(__name__)

CHECKPOINT_MAGIC = b"FVDM-CKPT1"
U16 = struct.Struct("<H")
U32 = struct.Struct("<I")


class Checkpoint(NamedTuple):
    model: FlowModel
    meta: Dict[str, Any]


def save_checkpoint(sink: PathOrFile, model: FlowModel, meta: Dict[str, Any]) -> None:
    header = json.dumps({"model": model.config(), "meta": meta}, sort_keys=True).encode()

    def write(out: BinaryIO) -> None:
        out.write(CHECKPOINT_MAGIC)
        out.write(U32.pack(len(header)))
        out.write(header)
        out.write(U32.pack(len(model.params)))
        for name, tensor in model.params.items():
            encoded = name.encode()
            out.write(U16.pack(len(encoded)))
            out.write(encoded)
            out.write(U32.pack(tensor.data.ndim))
            out.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.shape))
            out.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())

    _with_file(sink, "wb", write)
    log.debug(f"saved checkpoint ({model.num_parameters()} parameters)")


def load_checkpoint(source: PathOrFile) -> Checkpoint:
    """
    Rebuild the model a checkpoint was written from

    Raises `FormatError` on a bad magic, a truncated file or a
    parameter set that does not fit the recorded architecture
    """

    def read(src: BinaryIO) -> Checkpoint:
        magic = _read_exact(src, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"not an FVDM-CKPT1 checkpoint (magic {magic!r})")
        (size,) = U32.unpack(_read_exact(src, U32.size, "header length"))
        try:
            header = json.loads(_read_exact(src, size, "header").decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise FormatError(f"corrupt checkpoint header: {err}") from err

        (count,) = U32.unpack(_read_exact(src, U32.size, "tensor count"))
        state = {}
        for _ in range(count):
            (length,) = U16.unpack(_read_exact(src, U16.size, "name length"))
            name = _read_exact(src, length, "name").decode()
            (ndim,) = U32.unpack(_read_exact(src, U32.size, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(src, 4 * ndim, "shape"))
            values = _read_exact(src, 8 * int(np.prod(shape)), f"tensor {name}")
            state[name] = np.frombuffer(values, dtype="<f8").astype(np.float64).reshape(shape)

        model = FlowModel.from_config(header["model"])
        try:
            model.load_state_dict(state)
        except ValueError as err:
            raise FormatError(f"checkpoint does not match its architecture: {err}") from err
        return Checkpoint(model, header["meta"])

    return _with_file(source, "rb", read)
