"""
Isosurface extraction and OBJ mesh I/O

Meshes come out of scikit-image's Lewiner marching cubes, shifted to
world coordinates (voxel values sit at voxel centers) and oriented so
that the enclosed volume is positive, i.e. normals point out of the
region where values are below the isolevel
"""

from contextlib import contextmanager
from dataclasses import dataclass
from typing import IO, Iterator, Optional, Union

import numpy as np
from skimage import measure

from . import LOG_MANAGER
from .hierdec import BBox, UNIT_BBOX

log = LOG_MANAGER.get_logger(__name__)

# OBJ statements carrying nothing the mesh keeps
IGNORED_OBJ_TAGS = ("o", "g", "s", "vn", "vt", "usemtl", "mtllib", "l")

PathOrFile = Union[str, IO]


class ObjParseError(ValueError):
    def __init__(self, lineno: int, message: str) -> None:
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class Mesh:
    """
    Triangle mesh: `(V, 3)` world-space vertices and `(F, 3)`
    vertex-index triples
    """

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.isfinite(self.vertices).all():
            raise ValueError("mesh vertices must be finite")
        if len(self.triangles):
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise ValueError("triangle indices out of range")
            t = self.triangles
            if ((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 2] == t[:, 0])).any():
                raise ValueError("degenerate triangle with repeated vertex")

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0


def sign_volume(volume: np.ndarray, gamma: float = 0.0) -> np.ndarray:
    """
    Occupancy grid: `True` where the value is at most `gamma`
    """
    return np.asarray(volume) <= gamma


def cell_mask(known: np.ndarray) -> np.ndarray:
    """
    Cells (indexed by their lowest corner) whose 8 corners are all
    known, padded with `False` to the shape of `known`
    """
    known = np.asarray(known, dtype=bool)
    cells = np.ones(tuple(s - 1 for s in known.shape), dtype=bool)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                cells &= known[
                    dx : known.shape[0] - 1 + dx,
                    dy : known.shape[1] - 1 + dy,
                    dz : known.shape[2] - 1 + dz,
                ]
    mask = np.zeros(known.shape, dtype=bool)
    mask[:-1, :-1, :-1] = cells
    return mask


def _edges(triangles: np.ndarray) -> np.ndarray:
    pairs = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    return np.sort(pairs, axis=1)


def signed_volume(mesh: Mesh) -> float:
    if mesh.is_empty:
        return 0.0
    a, b, c = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def compact(mesh: Mesh) -> Mesh:
    """
    Drop vertices no triangle references, keeping their order
    """
    used = np.unique(mesh.triangles)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(mesh.vertices[used], remap[mesh.triangles])


def marching_cubes(
    volume: np.ndarray,
    bbox: BBox = UNIT_BBOX,
    gamma: float = 0.0,
    known: Optional[np.ndarray] = None,
) -> Mesh:
    """
    Extract the `gamma` isosurface of a voxel-centered volume

    Arguments:

    + `volume`: `[x, y, z]` array, at least 2 voxels per axis
    + `bbox`: world box the volume spans
    + `known`: optional boolean array of the same shape; only cells
    whose 8 corners are known are polygonized, so unknown regions
    show up as open boundaries

    A volume without a sign change gives an empty mesh
    """
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3 or min(volume.shape) < 2:
        raise ValueError(f"need at least 2 voxels per axis, got {volume.shape}")

    occupied = sign_volume(volume, gamma)
    if occupied.all() or not occupied.any():
        return Mesh.empty()

    mask = None
    if known is not None:
        if np.shape(known) != volume.shape:
            raise ValueError("known mask must match the volume shape")
        mask = cell_mask(known)
        if not mask.any():
            return Mesh.empty()

    h = bbox.extent / np.asarray(volume.shape)
    try:
        verts, faces, _, _ = measure.marching_cubes(
            volume,
            level=gamma,
            spacing=tuple(h),
            allow_degenerate=False,
            method="lewiner",
            mask=mask,
        )
    except (RuntimeError, ValueError) as err:
        # the isolevel sits on a plateau or the mask hides every crossing
        log.debug(f"marching cubes found no surface: {err}")
        return Mesh.empty()
    if len(faces) == 0:
        return Mesh.empty()

    verts = verts.astype(np.float64) + np.asarray(bbox.low) + h / 2
    mesh = compact(Mesh(verts, faces))
    if signed_volume(mesh) < 0:
        mesh = Mesh(mesh.vertices, mesh.triangles[:, ::-1])
    log.debug(f"extracted {len(mesh.vertices)} vertices, {len(mesh)} triangles")
    return mesh


def boundary_edge_count(mesh: Mesh) -> int:
    """
    Number of edges used by exactly one triangle
    """
    if mesh.is_empty:
        return 0
    _, counts = np.unique(_edges(mesh.triangles), axis=0, return_counts=True)
    return int((counts == 1).sum())


def euler_characteristic(mesh: Mesh) -> int:
    """
    `V - E + F` over the referenced vertices
    """
    if mesh.is_empty:
        return 0
    edges = np.unique(_edges(mesh.triangles), axis=0)
    return int(len(np.unique(mesh.triangles)) - len(edges) + len(mesh.triangles))


@contextmanager
def _opened(target: PathOrFile, mode: str) -> Iterator[IO]:
    if hasattr(target, "read") or hasattr(target, "write"):
        yield target
        return
    with open(target, mode, encoding="utf-8") as file:
        yield file


def write_obj(mesh: Mesh, sink: PathOrFile) -> None:
    """
    Write `v x y z` lines, then `f i j k` lines with 1-based indices
    """
    with _opened(sink, "w") as out:
        for x, y, z in mesh.vertices:
            out.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for i, j, k in mesh.triangles + 1:
            out.write(f"f {i} {j} {k}\n")


def _face_index(token: str, n_vertices: int, lineno: int) -> int:
    head = token.split("/", 1)[0]
    try:
        index = int(head)
    except ValueError:
        raise ObjParseError(lineno, f"bad vertex reference {token!r}") from None
    index = index - 1 if index > 0 else n_vertices + index
    if not 0 <= index < n_vertices:
        raise ObjParseError(lineno, f"vertex reference {token} out of range")
    return index


def read_obj(source: PathOrFile) -> Mesh:
    """
    Read vertices and faces of an OBJ file; polygons are fanned into
    triangles, other statements are skipped

    Raises `ObjParseError` (with `lineno`) on a malformed line
    """
    vertices, triangles = [], []
    with _opened(source, "r") as src:
        for lineno, line in enumerate(src, start=1):
            parts = line.split("#", 1)[0].split()
            if not parts or parts[0] in IGNORED_OBJ_TAGS:
                continue
            tag, args = parts[0], parts[1:]
            if tag == "v":
                if len(args) not in (3, 4, 6):
                    raise ObjParseError(lineno, f"expected 3 coordinates, got {len(args)}")
                try:
                    vertices.append([float(a) for a in args[:3]])
                except ValueError:
                    raise ObjParseError(lineno, f"bad coordinate in {line.strip()!r}") from None
            elif tag == "f":
                if len(args) < 3:
                    raise ObjParseError(lineno, "a face needs at least 3 vertices")
                ids = [_face_index(a, len(vertices), lineno) for a in args]
                for a, b in zip(ids[1:-1], ids[2:]):
                    if len({ids[0], a, b}) < 3:
                        raise ObjParseError(lineno, "degenerate face")
                    triangles.append([ids[0], a, b])
            else:
                raise ObjParseError(lineno, f"unknown statement {tag!r}")
    return Mesh(
        np.array(vertices).reshape(-1, 3),
        np.array(triangles, dtype=np.int64).reshape(-1, 3),
    )
