"""
Hierarchical volume decoding

Coarse-to-fine evaluation of the vecset field: the base level is
decoded densely, then at every level the voxels whose occupancy
changes across the 26-neighborhood (plus, optionally, every voxel
close to the surface by its tSDF value) are dilated, subdivided and
queried at the next resolution. Voxels never queried at a level
inherit the value of their nearest stored ancestor

Volumes are indexed `[x, y, z]`; flat voxel keys and point batches
use x-fastest order, `key = x + res * (y + res * z)`
"""

from dataclasses import dataclass, field
from time import perf_counter
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import LOG_MANAGER
from .config import DecodeConfig, HeadConfig
from .field import (
    DEFAULT_CHUNK,
    ToyVecsetLatents,
    attention_flops,
    eval_field,
    flops_per_query,
)

log = LOG_MANAGER.get_logger(__name__)

NEIGHBORHOOD = ndimage.generate_binary_structure(3, 3)


@dataclass(frozen=True)
class BBox:
    low: Tuple[float, float, float] = (-1.0, -1.0, -1.0)
    high: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if any(lo >= hi for lo, hi in zip(self.low, self.high)):
            raise ValueError(f"empty bounding box {self.low} .. {self.high}")

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.high) - np.asarray(self.low)

    def voxel_size(self, res: int) -> np.ndarray:
        return self.extent / res


UNIT_BBOX = BBox()


@dataclass(frozen=True)
class ResolutionSchedule:
    levels: Tuple[int, ...]

    def __post_init__(self) -> None:
        levels = tuple(int(r) for r in self.levels)
        if not levels:
            raise ValueError("a resolution schedule needs at least one level")
        if levels[0] < 8:
            raise ValueError(f"base resolution must be at least 8, got {levels[0]}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"resolutions must increase strictly, got {levels}")
        object.__setattr__(self, "levels", levels)

    @property
    def target(self) -> int:
        return self.levels[-1]

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self) -> Iterator[int]:
        return iter(self.levels)

    def __getitem__(self, i: int) -> int:
        return self.levels[i]


def get_resolutions(target: int, base: int) -> ResolutionSchedule:
    """
    Doubling schedule from `base` up to `target`, the last step
    clamped to `target`

    >>> get_resolutions(384, 96).levels
    (96, 192, 384)
    """
    if base > target:
        raise ValueError(f"base resolution {base} exceeds target {target}")
    levels = [base]
    while 2 * levels[-1] < target:
        levels.append(2 * levels[-1])
    if levels[-1] != target:
        levels.append(target)
    return ResolutionSchedule(tuple(levels))


def decode_schedule(cfg: DecodeConfig) -> ResolutionSchedule:
    """
    Schedule actually walked by `hierarchical_decode`

    With `final_double_expand` on and at least three levels, the
    penultimate level is dropped so that the last two doubling steps
    become a single jump of up to four times the resolution, e.g.
    64 -> 128 -> 256 becomes 64 -> 256
    """
    schedule = get_resolutions(cfg.target_res, cfg.base_res)
    if cfg.final_double_expand and len(schedule) >= 3:
        levels = schedule.levels[:-2] + schedule.levels[-1:]
        log.debug(f"final double expand: schedule {schedule.levels} -> {levels}")
        schedule = ResolutionSchedule(levels)
    return schedule


def flat_keys(indices: np.ndarray, res: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    return indices[:, 0] + res * (indices[:, 1] + res * indices[:, 2])


def key_indices(keys: np.ndarray, res: int) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    return np.stack([keys % res, (keys // res) % res, keys // (res * res)], axis=-1)


def voxel_centers(indices: np.ndarray, res: int, bbox: BBox = UNIT_BBOX) -> np.ndarray:
    h = bbox.voxel_size(res)
    return np.asarray(bbox.low) + (np.asarray(indices, dtype=np.float64) + 0.5) * h


def gen_grid_points(res: int, bbox: BBox = UNIT_BBOX) -> np.ndarray:
    """
    All `res^3` voxel centers in x-fastest order
    """
    if res < 1:
        raise ValueError(f"resolution must be positive, got {res}")
    return voxel_centers(key_indices(np.arange(res**3), res), res, bbox)


class SparseVoxelSet:
    """
    Set of voxel index triples of a `res^3` grid, backed by a
    boolean occupancy mask
    """

    def __init__(self, resolution: int, mask: Optional[np.ndarray] = None) -> None:
        shape = (resolution,) * 3
        if mask is None:
            mask = np.zeros(shape, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != shape:
            raise ValueError(f"mask shape {mask.shape} does not match resolution {resolution}")
        self.resolution = resolution
        self.mask = mask

    @classmethod
    def from_indices(cls, resolution: int, indices: Sequence[Sequence[int]]) -> "SparseVoxelSet":
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        if len(indices) and (indices.min() < 0 or indices.max() >= resolution):
            raise ValueError(f"voxel indices out of range [0, {resolution})")
        vs = cls(resolution)
        vs.mask[tuple(indices.T)] = True
        return vs

    @property
    def keys(self) -> np.ndarray:
        return np.flatnonzero(self.mask.ravel(order="F"))

    @property
    def indices(self) -> np.ndarray:
        return key_indices(self.keys, self.resolution)

    def __len__(self) -> int:
        return int(self.mask.sum())

    def __contains__(self, index) -> bool:
        return bool(self.mask[tuple(index)])

    def __or__(self, other: "SparseVoxelSet") -> "SparseVoxelSet":
        if other.resolution != self.resolution:
            raise ValueError("cannot merge voxel sets of different resolutions")
        return SparseVoxelSet(self.resolution, self.mask | other.mask)

    def __sub__(self, other: "SparseVoxelSet") -> "SparseVoxelSet":
        if other.resolution != self.resolution:
            raise ValueError("cannot subtract voxel sets of different resolutions")
        return SparseVoxelSet(self.resolution, self.mask & ~other.mask)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseVoxelSet):
            return NotImplemented
        return self.resolution == other.resolution and np.array_equal(self.mask, other.mask)

    def __repr__(self) -> str:
        return f"SparseVoxelSet(resolution={self.resolution}, size={len(self)})"


class LevelVolume:
    """
    tSDF values of one level of the hierarchy

    The base level stores a dense `res^3` array; finer levels store
    sorted flat keys with their values and resolve every other voxel
    through `parent`. `info` carries the per-level statistics gathered
    while decoding
    """

    def __init__(
        self,
        resolution: int,
        dense: Optional[np.ndarray] = None,
        keys: Optional[np.ndarray] = None,
        values: Optional[np.ndarray] = None,
        parent: Optional["LevelVolume"] = None,
        bbox: BBox = UNIT_BBOX,
    ) -> None:
        self.resolution = resolution
        self.bbox = bbox
        self.parent = parent
        self.info: Dict[str, Any] = {"resolution": resolution}
        self._dense: Optional[np.ndarray] = None

        if dense is not None:
            dense = np.asarray(dense, dtype=np.float64)
            if dense.shape != (resolution,) * 3:
                raise ValueError(f"dense level must be {resolution}^3, got {dense.shape}")
            self._dense = dense
            self.keys = np.arange(resolution**3)
            self.values = dense.ravel(order="F")
            return

        if parent is None:
            raise ValueError("a sparse level needs a parent level")
        keys = np.asarray(keys, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if keys.shape != values.shape:
            raise ValueError("keys and values disagree in length")
        order = np.argsort(keys, kind="stable")
        self.keys, self.values = keys[order], values[order]

    @property
    def is_dense(self) -> bool:
        return self.parent is None

    @property
    def stored(self) -> int:
        return len(self.keys)

    def lookup(self, indices: np.ndarray) -> np.ndarray:
        """
        Values at voxel index triples, resolved through the ancestor
        chain for voxels not stored at this level
        """
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        if self.is_dense:
            return self.dense[tuple(indices.T)]

        keys = flat_keys(indices, self.resolution)
        pos = np.minimum(np.searchsorted(self.keys, keys), max(len(self.keys) - 1, 0))
        found = (
            self.keys[pos] == keys if len(self.keys) else np.zeros(len(keys), dtype=bool)
        )
        out = np.empty(len(keys))
        out[found] = self.values[pos[found]]
        if not found.all():
            parent_map = parent_index(self.parent.resolution, self.resolution)
            out[~found] = self.parent.lookup(parent_map[indices[~found]])
        return out

    @property
    def dense(self) -> np.ndarray:
        """
        Materialized `res^3` volume (cached)
        """
        if self._dense is None:
            index = parent_index(self.parent.resolution, self.resolution)
            upsampled = self.parent.dense[np.ix_(index, index, index)]
            flat = upsampled.ravel(order="F").copy()
            flat[self.keys] = self.values
            self._dense = flat.reshape((self.resolution,) * 3, order="F")
        return self._dense

    def stored_mask(self) -> np.ndarray:
        mask = np.zeros(self.resolution**3, dtype=bool)
        mask[self.keys] = True
        return mask.reshape((self.resolution,) * 3, order="F")


def parent_index(from_res: int, to_res: int) -> np.ndarray:
    """
    Coarse index, per axis, of the coarse voxel holding the center of
    each fine voxel: `floor((j + 1/2) * from / to)`
    """
    fine = np.arange(to_res, dtype=np.int64)
    return ((2 * fine + 1) * from_res) // (2 * to_res)


def find_intersect(vol: LevelVolume, gamma: float) -> SparseVoxelSet:
    """
    Voxels with a 26-neighbor of opposite occupancy, where a voxel is
    occupied when its value is at most `gamma`
    """
    occupied = vol.dense <= gamma
    grown_in = ndimage.binary_dilation(occupied, structure=NEIGHBORHOOD)
    grown_out = ndimage.binary_dilation(~occupied, structure=NEIGHBORHOOD)
    return SparseVoxelSet(vol.resolution, (grown_in & ~occupied) | (grown_out & occupied))


def find_near(vol: LevelVolume, eta: float) -> SparseVoxelSet:
    return SparseVoxelSet(vol.resolution, np.abs(vol.dense) < eta)


def dilate(vs: SparseVoxelSet, radius: int) -> SparseVoxelSet:
    """
    Union of the `(2 * radius + 1)^3` neighborhoods of every voxel,
    clipped to the grid
    """
    if radius < 0:
        raise ValueError(f"dilation radius must be non-negative, got {radius}")
    # scipy reads iterations=0 as "until nothing changes"
    if radius == 0 or not vs.mask.any():
        return SparseVoxelSet(vs.resolution, vs.mask.copy())
    grown = ndimage.binary_dilation(vs.mask, structure=NEIGHBORHOOD, iterations=radius)
    return SparseVoxelSet(vs.resolution, grown)


def expand(vs: SparseVoxelSet, from_res: int, to_res: int) -> SparseVoxelSet:
    """
    Children at `to_res` of the voxels of `vs`

    A fine voxel belongs to the coarse voxel holding its center, which
    is exact doubling for `to_res == 2 * from_res` and a partition of
    the fine grid for clamped and four-fold steps
    """
    if vs.resolution != from_res:
        raise ValueError(f"voxel set has resolution {vs.resolution}, not {from_res}")
    if not from_res < to_res <= 4 * from_res:
        raise ValueError(f"cannot expand from {from_res} to {to_res}")
    index = parent_index(from_res, to_res)
    return SparseVoxelSet(to_res, vs.mask[np.ix_(index, index, index)])


def assemble(levels: Sequence[LevelVolume]) -> np.ndarray:
    """
    Dense tSDF volume at the finest resolution; unqueried voxels
    take the value of their nearest stored ancestor
    """
    if not levels:
        raise ValueError("nothing to assemble")
    if not levels[0].is_dense:
        raise ValueError("the base level must be dense")
    return levels[-1].dense


def coverage(levels: Sequence[LevelVolume]) -> np.ndarray:
    """
    Voxels of the finest level whose value was queried at that level
    """
    if not levels:
        raise ValueError("no levels")
    return levels[-1].stored_mask()


@dataclass
class DecodeReport:
    """
    Query accounting of one decode

    `reduction = 1 - total / dense_equivalent`. Attention FLOPs are
    counted with the actual token count: `attention_flops_full` as if
    every query attended to all tokens, `attention_flops_selected` for
    the tokens it really attended to; `probe_flops` is the selection
    overhead
    """

    schedule: List[int]
    level_queries: List[int] = field(default_factory=list)
    levels: List[Dict[str, Any]] = field(default_factory=list)
    stage_seconds: Dict[str, float] = field(default_factory=dict)
    attention_flops_full: float = 0.0
    attention_flops_selected: float = 0.0
    probe_flops: float = 0.0
    head_flops: float = 0.0

    @property
    def target(self) -> int:
        return self.schedule[-1]

    @property
    def total(self) -> int:
        return int(sum(self.level_queries))

    @property
    def dense_equivalent(self) -> int:
        return self.target**3

    @property
    def reduction(self) -> float:
        return 1.0 - self.total / self.dense_equivalent

    @property
    def attention_flops_reduction(self) -> float:
        if self.attention_flops_full == 0:
            return 0.0
        return 1.0 - self.attention_flops_selected / self.attention_flops_full

    def add_time(self, stage: str, seconds: float) -> None:
        self.stage_seconds[stage] = self.stage_seconds.get(stage, 0.0) + seconds

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schedule": list(self.schedule),
            "level_queries": list(self.level_queries),
            "total": self.total,
            "dense_equivalent": self.dense_equivalent,
            "reduction": self.reduction,
            "levels": self.levels,
            "stage_seconds": self.stage_seconds,
            "attention_flops_full": self.attention_flops_full,
            "attention_flops_selected": self.attention_flops_selected,
            "attention_flops_reduction": self.attention_flops_reduction,
            "probe_flops": self.probe_flops,
            "head_flops": self.head_flops,
        }


class QueryEvaluator:
    """
    Evaluates the queries of one level with full attention and keeps
    the attention-FLOPs books

    Subclasses (see `akvs.AkvsEvaluator`) restrict the attended tokens;
    `level_stats` is merged into the level's `info`
    """

    def __init__(
        self,
        latents: ToyVecsetLatents,
        head: Optional[HeadConfig] = None,
        chunk_size: int = DEFAULT_CHUNK,
        workers: int = 1,
    ) -> None:
        self.latents = latents
        self.head = HeadConfig() if head is None else head
        self.chunk_size = chunk_size
        self.workers = workers
        self.flops_full = 0.0
        self.flops_selected = 0.0
        self.flops_probe = 0.0

    def full_cost(self, queries: int) -> float:
        return queries * attention_flops(self.head, self.latents.M)

    def __call__(
        self, points: np.ndarray, indices: np.ndarray, resolution: int, level: int
    ) -> np.ndarray:
        cost = self.full_cost(len(points))
        self.flops_full += cost
        self.flops_selected += cost
        return eval_field(
            points, self.latents, chunk_size=self.chunk_size, workers=self.workers
        )

    def level_stats(self) -> Dict[str, Any]:
        return {}


def _default_evaluator(
    latents: ToyVecsetLatents, cfg: DecodeConfig, evaluate: Optional[QueryEvaluator]
) -> QueryEvaluator:
    if evaluate is not None:
        return evaluate
    return QueryEvaluator(latents, cfg.head, cfg.chunk_size, cfg.workers)


def iter_levels(
    latents: ToyVecsetLatents,
    cfg: DecodeConfig,
    evaluate: Optional[QueryEvaluator] = None,
    report: Optional[DecodeReport] = None,
    bbox: BBox = UNIT_BBOX,
) -> Iterator[LevelVolume]:
    """
    Walk the decode schedule, yielding every level once its queries
    are evaluated. Query counts and stage timings go to `report`
    """
    schedule = decode_schedule(cfg)
    evaluate = _default_evaluator(latents, cfg, evaluate)
    report = DecodeReport(list(schedule)) if report is None else report

    base = schedule[0]
    start = perf_counter()
    values = evaluate(gen_grid_points(base, bbox), key_indices(np.arange(base**3), base), base, 0)
    volume = LevelVolume(base, dense=values.reshape((base,) * 3, order="F"), bbox=bbox)
    report.add_time("query", perf_counter() - start)
    volume.info.update(queries=base**3, **evaluate.level_stats())
    report.level_queries.append(base**3)
    report.levels.append(volume.info)
    log.info(f"level 0 (res {base}): {base ** 3} dense queries")
    yield volume

    for level in range(1, len(schedule)):
        res = schedule[level]
        final = level == len(schedule) - 1

        start = perf_counter()
        selected = find_intersect(volume, cfg.gamma)
        # features thinner than a base voxel exist at the base level only
        # through the near band, so the base selection always keeps it
        skip_near = final and cfg.final_skip_findnear and level > 1
        if cfg.find_near and not skip_near:
            selected = selected | find_near(volume, cfg.eta)
        report.add_time("select", perf_counter() - start)

        start = perf_counter()
        selected = dilate(selected, cfg.dilation_radius)
        report.add_time("dilate", perf_counter() - start)

        start = perf_counter()
        fine = expand(selected, volume.resolution, res)
        keys = fine.keys
        indices = key_indices(keys, res)
        report.add_time("expand", perf_counter() - start)

        start = perf_counter()
        values = evaluate(voxel_centers(indices, res, bbox), indices, res, level)
        report.add_time("query", perf_counter() - start)

        volume = LevelVolume(res, keys=keys, values=values, parent=volume, bbox=bbox)
        volume.info.update(
            selected_coarse=len(selected),
            near_skipped=bool(skip_near or not cfg.find_near),
            queries=len(keys),
            **evaluate.level_stats(),
        )
        report.level_queries.append(len(keys))
        report.levels.append(volume.info)
        log.info(
            f"level {level} (res {res}): {len(selected)} coarse voxels selected, "
            f"{len(keys)} queries ({len(keys) / res ** 3:.2%} of the grid)"
        )
        yield volume


def _finish(report: DecodeReport, evaluate: QueryEvaluator, head: HeadConfig) -> None:
    report.attention_flops_full = evaluate.flops_full
    report.attention_flops_selected = evaluate.flops_selected
    report.probe_flops = evaluate.flops_probe
    report.head_flops = report.total * flops_per_query(head)


def hierarchical_decode(
    latents: ToyVecsetLatents,
    cfg: DecodeConfig,
    evaluate: Optional[QueryEvaluator] = None,
    bbox: BBox = UNIT_BBOX,
) -> Tuple[np.ndarray, DecodeReport]:
    """
    Decode the field at `cfg.target_res` coarse-to-fine

    Returns the assembled dense volume and the report; the levels
    themselves are available through `decode_levels`
    """
    levels, report = decode_levels(latents, cfg, evaluate, bbox)
    log.info(
        f"hierarchical decode {report.schedule}: {report.total} queries, "
        f"reduction {report.reduction:.4f}"
    )
    return assemble(levels), report


def decode_levels(
    latents: ToyVecsetLatents,
    cfg: DecodeConfig,
    evaluate: Optional[QueryEvaluator] = None,
    bbox: BBox = UNIT_BBOX,
) -> Tuple[List[LevelVolume], DecodeReport]:
    """
    Same as `hierarchical_decode`, keeping every level (for coverage
    masks and per-level inspection)
    """
    evaluate = _default_evaluator(latents, cfg, evaluate)
    report = DecodeReport(list(decode_schedule(cfg)))
    levels = list(iter_levels(latents, cfg, evaluate, report, bbox))
    _finish(report, evaluate, cfg.head)
    return levels, report


def dense_decode(
    latents: ToyVecsetLatents,
    res: int,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
    head: Optional[HeadConfig] = None,
    bbox: BBox = UNIT_BBOX,
) -> Tuple[np.ndarray, DecodeReport]:
    """
    Evaluate every voxel center of a `res^3` grid
    """
    head = HeadConfig() if head is None else head
    evaluate = QueryEvaluator(latents, head, chunk_size, workers)
    report = DecodeReport([res])

    start = perf_counter()
    values = evaluate(gen_grid_points(res, bbox), None, res, 0)
    report.add_time("query", perf_counter() - start)
    report.level_queries.append(res**3)
    report.levels.append({"resolution": res, "queries": res**3})
    _finish(report, evaluate, head)
    log.info(f"dense decode at res {res}: {res ** 3} queries")
    return values.reshape((res,) * 3, order="F"), report
