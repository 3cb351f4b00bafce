"""
Binary dumps of decoded volumes and meshes

FVDM1 (volume): magic `FVDM1`, three little-endian uint32 resolutions,
six little-endian float32 (bbox min, then max), then `nx * ny * nz`
little-endian float32 values, x-fastest (`x + nx * (y + ny * z)`)

FVDMM1 (mesh): magic `FVDMM1`, uint32 vertex count V, uint32 triangle
count F, `V * 3` float32 coordinates, `F * 3` uint32 indices, all
little-endian
"""

import struct
from typing import BinaryIO, Tuple, Union

import numpy as np

from . import LOG_MANAGER
from .hierdec import BBox, UNIT_BBOX
from .surface import Mesh

log = LOG_MANAGER.get_logger(__name__)

VOLUME_MAGIC = b"FVDM1"
MESH_MAGIC = b"FVDMM1"
VOLUME_HEADER = struct.Struct("<3I6f")
MESH_HEADER = struct.Struct("<2I")

PathOrFile = Union[str, BinaryIO]


class FormatError(ValueError):
    """
    Raised on a bad magic or a truncated binary file
    """


def _read_exact(src: BinaryIO, size: int, what: str) -> bytes:
    data = src.read(size)
    if len(data) != size:
        raise FormatError(f"truncated {what}: expected {size} bytes, got {len(data)}")
    return data


def _with_file(target: PathOrFile, mode: str, action):
    if hasattr(target, "read") or hasattr(target, "write"):
        return action(target)
    with open(target, mode) as file:
        return action(file)


def write_volume(volume: np.ndarray, sink: PathOrFile, bbox: BBox = UNIT_BBOX) -> None:
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError(f"expected a 3-d volume, got shape {volume.shape}")

    def write(out: BinaryIO) -> None:
        out.write(VOLUME_MAGIC)
        out.write(VOLUME_HEADER.pack(*volume.shape, *bbox.low, *bbox.high))
        out.write(volume.ravel(order="F").astype("<f4").tobytes())

    _with_file(sink, "wb", write)
    log.debug(f"wrote FVDM1 volume {volume.shape}")


def read_volume(source: PathOrFile) -> Tuple[np.ndarray, BBox]:
    """
    Read an FVDM1 dump; values come back as float64 `[x, y, z]`
    """

    def read(src: BinaryIO) -> Tuple[np.ndarray, BBox]:
        magic = _read_exact(src, len(VOLUME_MAGIC), "magic")
        if magic != VOLUME_MAGIC:
            raise FormatError(f"not an FVDM1 volume (magic {magic!r})")
        header = VOLUME_HEADER.unpack(_read_exact(src, VOLUME_HEADER.size, "header"))
        shape, low, high = header[:3], header[3:6], header[6:]
        count = shape[0] * shape[1] * shape[2]
        data = np.frombuffer(_read_exact(src, 4 * count, "volume data"), dtype="<f4")
        volume = data.astype(np.float64).reshape(shape, order="F")
        return volume, BBox(tuple(low), tuple(high))

    return _with_file(source, "rb", read)


def write_mesh(mesh: Mesh, sink: PathOrFile) -> None:
    def write(out: BinaryIO) -> None:
        out.write(MESH_MAGIC)
        out.write(MESH_HEADER.pack(len(mesh.vertices), len(mesh.triangles)))
        out.write(mesh.vertices.astype("<f4").tobytes())
        out.write(mesh.triangles.astype("<u4").tobytes())

    _with_file(sink, "wb", write)


def read_mesh(source: PathOrFile) -> Mesh:
    def read(src: BinaryIO) -> Mesh:
        magic = _read_exact(src, len(MESH_MAGIC), "magic")
        if magic != MESH_MAGIC:
            raise FormatError(f"not an FVDMM1 mesh (magic {magic!r})")
        n_vertices, n_triangles = MESH_HEADER.unpack(
            _read_exact(src, MESH_HEADER.size, "header")
        )
        vertices = np.frombuffer(_read_exact(src, 12 * n_vertices, "vertices"), dtype="<f4")
        triangles = np.frombuffer(_read_exact(src, 12 * n_triangles, "triangles"), dtype="<u4")
        return Mesh(vertices.astype(np.float64), triangles.astype(np.int64))

    return _with_file(source, "rb", read)
