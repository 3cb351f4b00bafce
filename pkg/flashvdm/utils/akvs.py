"""
Adaptive key-value selection

The decoding grid is split into `r^3` subvolumes. In every subvolume
holding queries a few probe queries are scored against all tokens and
a shared token subset is picked for the subvolume: either the K tokens
with the largest mean probe score (`mean_topk`) or the union of every
probe's N best tokens (`topn_merge`). Queries are then packed
subvolume-contiguously and attend to their subvolume's subset only
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import LOG_MANAGER
from .config import AkvsConfig, DecodeConfig
from .field import (
    DEFAULT_CHUNK,
    ToyVecsetLatents,
    attention_flops,
    attention_scores,
    eval_field,
    kept_mass,
)
from .hierdec import BBox, DecodeReport, QueryEvaluator, UNIT_BBOX, hierarchical_decode

log = LOG_MANAGER.get_logger(__name__)

KEPT_MASS_QUANTILES = (0.0, 0.01, 0.05, 0.5, 1.0)


def subvolume_ids(indices: np.ndarray, res: int, r: int) -> np.ndarray:
    """
    Linearized subvolume id `sx + r * (sy + r * sz)` of voxel index
    triples, `s = floor(i * r / res)` per axis
    """
    if not 1 <= r <= res:
        raise ValueError(f"subvolumes per axis must lie in [1, {res}], got {r}")
    s = (np.asarray(indices, dtype=np.int64) * r) // res
    return s[:, 0] + r * (s[:, 1] + r * s[:, 2])


def partition_subvolumes(res: int, r: int) -> np.ndarray:
    """
    Subvolume id of every voxel of a `res^3` grid, indexed `[x, y, z]`
    """
    if not 1 <= r <= res:
        raise ValueError(f"subvolumes per axis must lie in [1, {res}], got {r}")
    axis = (np.arange(res, dtype=np.int64) * r) // res
    sx, sy, sz = np.meshgrid(axis, axis, axis, indexing="ij")
    return sx + r * (sy + r * sz)


@dataclass
class SubvolumeQueries:
    """
    Query batch grouped by subvolume: `groups` maps a subvolume id to
    the positions of its queries in `points`, ids ascending
    """

    points: np.ndarray
    groups: Dict[int, np.ndarray]

    def __iter__(self) -> Iterator[Tuple[int, np.ndarray]]:
        return iter(self.groups.items())

    def __len__(self) -> int:
        return len(self.groups)

    def points_of(self, sv: int) -> np.ndarray:
        return self.points[self.groups[sv]]


def group_by_subvolume(points: np.ndarray, ids: np.ndarray) -> SubvolumeQueries:
    ids = np.asarray(ids, dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    unique, starts = np.unique(ids[order], return_index=True)
    bounds = list(starts) + [len(ids)]
    groups = {
        int(sv): order[bounds[i] : bounds[i + 1]] for i, sv in enumerate(unique.tolist())
    }
    return SubvolumeQueries(np.asarray(points, dtype=np.float64), groups)


@dataclass
class KVSelection:
    """
    Sorted token indices per subvolume, plus how many probe queries
    each subvolume spent on choosing them
    """

    tokens: Dict[int, np.ndarray] = field(default_factory=dict)
    probes: Dict[int, int] = field(default_factory=dict)

    def __getitem__(self, sv: int) -> np.ndarray:
        return self.tokens[sv]

    def __contains__(self, sv: int) -> bool:
        return sv in self.tokens

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def probe_count(self) -> int:
        return sum(self.probes.values())

    def mean_selected(self) -> float:
        if not self.tokens:
            return 0.0
        return float(np.mean([len(t) for t in self.tokens.values()]))


def sample_probes(n: int, n_probe: int, rng: np.random.Generator) -> np.ndarray:
    """
    Positions of `n_probe` probes, one drawn uniformly from each of
    `n_probe` equal strata of `range(n)`; every position when
    `n <= n_probe`
    """
    if n <= n_probe:
        return np.arange(n)
    edges = np.linspace(0, n, n_probe + 1).astype(np.int64)
    return rng.integers(edges[:-1], edges[1:])


def mean_topk(scores: np.ndarray, K: int) -> np.ndarray:
    """
    K tokens with the largest mean score over the probes (rows);
    ties go to the lower token index
    """
    if not 1 <= K <= scores.shape[1]:
        raise ValueError(f"K must lie in [1, {scores.shape[1]}], got {K}")
    order = np.argsort(-scores.mean(axis=0), kind="stable")
    return np.sort(order[:K])


def topn_merge(scores: np.ndarray, N: int) -> np.ndarray:
    """
    Union of every probe's N best tokens
    """
    if not 1 <= N <= scores.shape[1]:
        raise ValueError(f"N must lie in [1, {scores.shape[1]}], got {N}")
    best = np.argsort(-scores, axis=1, kind="stable")[:, :N]
    return np.unique(best)


def probe_and_select(
    latents: ToyVecsetLatents,
    queries: SubvolumeQueries,
    cfg: AkvsConfig,
    seed: int,
    level: int = 0,
) -> KVSelection:
    """
    Choose the token subset of every subvolume from its probe queries

    Probes of subvolume `sv` are drawn with a generator seeded by
    `(seed, level, sv)`, so a subvolume's selection does not depend
    on the other subvolumes
    """
    selection = KVSelection()
    for sv, members in queries:
        if len(members) == 0:
            continue
        rng = np.random.default_rng([seed, level, sv])
        probes = queries.points[members[sample_probes(len(members), cfg.n_probe, rng)]]
        scores = attention_scores(probes, latents)
        if cfg.mode == "mean_topk":
            tokens = mean_topk(scores, cfg.K)
        else:
            tokens = topn_merge(scores, cfg.N)
        selection.tokens[sv] = tokens
        selection.probes[sv] = len(probes)
    log.debug(
        f"level {level}: {len(selection)} subvolumes, "
        f"{selection.mean_selected():.1f} tokens selected on average"
    )
    return selection


@dataclass
class PackedQueryBatch:
    """
    Subvolume-contiguous slice of a query batch

    `segments[i]` owns `points[offsets[i]:offsets[i + 1]]`;
    `source_index` maps every row back to its position in the
    unpacked batch
    """

    points: np.ndarray
    subvolume_ids: np.ndarray
    source_index: np.ndarray
    segments: np.ndarray
    offsets: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def _make_batch(points: np.ndarray, parts: Sequence[Tuple[int, np.ndarray]]) -> PackedQueryBatch:
    source = np.concatenate([members for _, members in parts])
    sizes = [len(members) for _, members in parts]
    return PackedQueryBatch(
        points=points[source],
        subvolume_ids=np.repeat([sv for sv, _ in parts], sizes).astype(np.int64),
        source_index=source,
        segments=np.array([sv for sv, _ in parts], dtype=np.int64),
        offsets=np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64),
    )


def pack_queries(queries: SubvolumeQueries, cfg: AkvsConfig) -> List[PackedQueryBatch]:
    """
    Fill batches of at most `cfg.pack_batch` queries greedily with
    whole subvolumes in id order; a subvolume larger than a batch is
    split across consecutive batches of its own
    """
    batches: List[PackedQueryBatch] = []
    current: List[Tuple[int, np.ndarray]] = []
    size = 0

    def flush() -> None:
        nonlocal current, size
        if current:
            batches.append(_make_batch(queries.points, current))
        current, size = [], 0

    for sv, members in queries:
        if len(members) == 0:
            continue
        if len(members) > cfg.pack_batch:
            flush()
            for start in range(0, len(members), cfg.pack_batch):
                current = [(sv, members[start : start + cfg.pack_batch])]
                size = len(current[0][1])
                if size == cfg.pack_batch:
                    flush()
            continue
        if size + len(members) > cfg.pack_batch:
            flush()
        current.append((sv, members))
        size += len(members)
    flush()
    return batches


def unpack_values(
    batches: Sequence[PackedQueryBatch], values: Sequence[np.ndarray], n: int
) -> np.ndarray:
    """
    Scatter per-batch results back to the unpacked query order
    """
    out = np.full(n, np.nan)
    for batch, batch_values in zip(batches, values):
        out[batch.source_index] = batch_values
    return out


def akvs_eval(
    latents: ToyVecsetLatents,
    packed: Union[PackedQueryBatch, Sequence[PackedQueryBatch]],
    selection: KVSelection,
    n: Optional[int] = None,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> np.ndarray:
    """
    Evaluate packed queries against their subvolume's tokens only

    Returns values in the unpacked query order; `n` (the size of the
    unpacked batch) defaults to the largest source index plus one

    Raises `ValueError` when a subvolume present in the batches has no
    token selection
    """
    batches = [packed] if isinstance(packed, PackedQueryBatch) else list(packed)
    if n is None:
        n = max((int(b.source_index.max()) + 1 for b in batches if len(b)), default=0)

    values = []
    for batch in batches:
        missing = [int(sv) for sv in batch.segments if sv not in selection]
        if missing:
            raise ValueError(f"no token selection for subvolumes {missing}")
        tokens = {int(sv): selection[int(sv)] for sv in batch.segments}
        values.append(
            eval_field(
                batch.points,
                latents,
                selection=tokens,
                groups=batch.subvolume_ids,
                chunk_size=chunk_size,
                workers=workers,
            )
        )
    return unpack_values(batches, values, n)


def _sample_positions(n: int, limit: int) -> np.ndarray:
    if limit <= 0 or n == 0:
        return np.empty(0, dtype=np.int64)
    step = max(1, -(-n // limit))
    return np.arange(0, n, step)[:limit]


class AkvsEvaluator(QueryEvaluator):
    """
    Level query pass through partition, probe-and-select, packing
    and restricted evaluation
    """

    def __init__(self, latents: ToyVecsetLatents, cfg: DecodeConfig) -> None:
        if cfg.akvs is None:
            raise ValueError("adaptive KV selection needs an AkvsConfig")
        super().__init__(latents, cfg.head, cfg.chunk_size, cfg.workers)
        self.akvs = cfg.akvs
        self.seed = cfg.seed
        self._stats: Dict[str, Any] = {}

    def __call__(
        self, points: np.ndarray, indices: np.ndarray, resolution: int, level: int
    ) -> np.ndarray:
        r = min(self.akvs.r, resolution)
        queries = group_by_subvolume(points, subvolume_ids(indices, resolution, r))
        selection = probe_and_select(self.latents, queries, self.akvs, self.seed, level)
        batches = pack_queries(queries, self.akvs)
        values = akvs_eval(
            self.latents, batches, selection, len(points), self.chunk_size, self.workers
        )

        kv_cost = attention_flops(self.head, 1)
        selected = sum(
            len(members) * len(selection[sv]) for sv, members in queries
        )
        self.flops_full += self.full_cost(len(points))
        self.flops_selected += selected * kv_cost
        # probes only score the keys: half of the per-token attention cost
        self.flops_probe += selection.probe_count * self.latents.M * kv_cost / 2

        self._stats = {
            "subvolumes": len(selection),
            "packed_batches": len(batches),
            "probes": selection.probe_count,
            "mean_selected": selection.mean_selected(),
            "effective_m_kv": selected / len(points) if len(points) else 0.0,
            "kept_mass_quantiles": self._kept_mass_quantiles(queries, selection),
        }
        return values

    def _kept_mass_quantiles(
        self, queries: SubvolumeQueries, selection: KVSelection
    ) -> Dict[str, float]:
        sample = _sample_positions(len(queries.points), self.akvs.kept_mass_samples)
        if len(sample) == 0:
            return {}
        in_sample = np.zeros(len(queries.points), dtype=bool)
        in_sample[sample] = True
        masses = []
        for sv, members in queries:
            chosen = members[in_sample[members]]
            if len(chosen):
                masses.append(kept_mass(queries.points[chosen], self.latents, selection[sv]))
        masses = np.concatenate(masses)
        return {f"q{q:g}": float(np.quantile(masses, q)) for q in KEPT_MASS_QUANTILES}

    def level_stats(self) -> Dict[str, Any]:
        return dict(self._stats)


def hierarchical_decode_akvs(
    latents: ToyVecsetLatents, cfg: DecodeConfig, bbox: BBox = UNIT_BBOX
) -> Tuple[np.ndarray, DecodeReport]:
    """
    `hierarchical_decode` with every level pass restricted to the
    tokens selected per subvolume
    """
    return hierarchical_decode(latents, cfg, AkvsEvaluator(latents, cfg), bbox)
