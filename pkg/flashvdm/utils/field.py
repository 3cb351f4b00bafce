"""
Analytic ground-truth shapes, the synthetic vecset field every
decoder queries, and the FLOPs model of the decoder head

The vecset field is a softmax cross-attention over surface-anchored
tokens: the score of token i for query q is `-|q - p_i|^2 / tau`,
the value is the attention-weighted tangent-plane distance
`n_i . q + d_i`, truncated to `[-trunc, trunc]` and normalized to
`[-1, 1]` (negative inside)

All per-point arithmetic is elementwise over broadcast arrays followed
by reductions along the last axis, so a point's value does not depend
on the chunk it was evaluated in, on the worker that ran it, or on
whether its tokens were gathered from a selection covering all of them
"""

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import LOG_MANAGER
from .config import HeadConfig

log = LOG_MANAGER.get_logger(__name__)

SHAPE_KINDS = ("sphere", "box", "torus", "thin_plate", "union2")
KIND_ALIASES = {"plate": "thin_plate"}
DEFAULT_PARAMS: Dict[str, Dict[str, float]] = {
    "sphere": {"r": 0.5},
    "box": {"hx": 0.4, "hy": 0.3, "hz": 0.35},
    "torus": {"R": 0.5, "r": 0.15},
    "thin_plate": {"h": 0.01, "w": 0.7, "tilt": 0.0},
    "union2": {"r": 0.35, "d": 0.25},
}
# parameters allowed to be zero or negative
UNSIGNED_PARAMS = ("tilt",)
CENTER_KEYS = ("cx", "cy", "cz")
MARGIN = 0.05

FD_STEP = 1e-6
SHELL = 0.1
NEWTON_ITERATIONS = 10
MAX_SAMPLING_BATCHES = 64
SURFACE_TOLERANCE = 1e-9
GRADIENT_TOLERANCE = 1e-3

DEFAULT_CHUNK = 2048
POSITIONAL_WIDTH = 48
INPUT_WIDTH = 3 + POSITIONAL_WIDTH

Selection = Union[None, np.ndarray, Sequence[int], Mapping[int, np.ndarray]]


class SamplingError(RuntimeError):
    """
    Raised when surface anchors could not be sampled within the
    retry budget
    """


@dataclass(frozen=True)
class ShapeSpec:
    """
    Analytic test shape: kind, world-unit parameters and center

    Missing parameters are filled from `DEFAULT_PARAMS`; a box may be
    given as a cube with a single `a`. The shape (with its center)
    must fit into `[-1, 1]^3` with a margin of `MARGIN`
    """

    kind: str
    params: Mapping[str, float] = field(default_factory=dict)
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        kind = KIND_ALIASES.get(self.kind, self.kind)
        if kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}, expected {SHAPE_KINDS}")

        params = dict(self.params)
        if kind == "box" and "a" in params:
            side = params.pop("a")
            params = {"hx": side, "hy": side, "hz": side, **params}
        unknown = sorted(set(params) - set(DEFAULT_PARAMS[kind]))
        if unknown:
            raise ValueError(f"unknown {kind} parameters: {', '.join(unknown)}")
        merged = {**DEFAULT_PARAMS[kind], **{k: float(v) for k, v in params.items()}}

        for key, value in merged.items():
            if not np.isfinite(value):
                raise ValueError(f"{kind} parameter {key} must be finite, got {value}")
            if key not in UNSIGNED_PARAMS and value <= 0:
                raise ValueError(f"{kind} parameter {key} must be positive, got {value}")

        center = tuple(float(c) for c in self.center)
        if len(center) != 3:
            raise ValueError(f"center must have 3 coordinates, got {self.center}")

        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", merged)
        object.__setattr__(self, "center", center)

        low = np.asarray(center) - self.half_extent()
        high = np.asarray(center) + self.half_extent()
        if low.min() < -1 + MARGIN or high.max() > 1 - MARGIN:
            raise ValueError(
                f"{self} does not fit into [-1, 1]^3 with margin {MARGIN}"
            )

    def half_extent(self) -> np.ndarray:
        """
        Half-size of the axis-aligned box around the shape
        """
        p = self.params
        if self.kind == "sphere":
            return np.full(3, p["r"])
        if self.kind == "box":
            return np.array([p["hx"], p["hy"], p["hz"]])
        if self.kind == "torus":
            return np.array([p["R"] + p["r"], p["R"] + p["r"], p["r"]])
        if self.kind == "thin_plate":
            c, s = abs(np.cos(p["tilt"])), abs(np.sin(p["tilt"]))
            return np.array([p["w"], p["w"] * c + p["h"] * s, p["w"] * s + p["h"] * c])
        return np.array([p["d"] + p["r"], p["r"], p["r"]])

    @classmethod
    def parse(cls, text: str) -> "ShapeSpec":
        """
        Parse `kind[:key=value,...]`, e.g. `sphere:r=0.5`,
        `plate:h=0.01` or `torus:R=0.5,r=0.15,cz=0.1`
        """
        kind, _, rest = text.strip().partition(":")
        params: Dict[str, float] = {}
        center = [0.0, 0.0, 0.0]
        for item in filter(None, (s.strip() for s in rest.split(","))):
            match = re.fullmatch(r"(\w+)\s*=\s*(\S+)", item)
            if match is None:
                raise ValueError(f"malformed shape parameter {item!r} in {text!r}")
            key, raw = match.groups()
            try:
                value = float(raw)
            except ValueError:
                raise ValueError(f"parameter {key} of {text!r} is not a number") from None
            if key in CENTER_KEYS:
                center[CENTER_KEYS.index(key)] = value
            else:
                params[key] = value
        return cls(kind=kind, params=params, center=tuple(center))

    def __str__(self) -> str:
        items = [f"{k}={v:g}" for k, v in self.params.items()]
        items += [f"{k}={c:g}" for k, c in zip(CENTER_KEYS, self.center) if c != 0.0]
        return f"{self.kind}:{','.join(items)}"


def _box_sdf(q: np.ndarray, half: Sequence[float]) -> np.ndarray:
    d = np.abs(q) - np.asarray(half)
    outside = np.sqrt(np.sum(np.maximum(d, 0.0) ** 2, axis=-1))
    inside = np.minimum(d.max(axis=-1), 0.0)
    return outside + inside


def _sphere_sdf(q: np.ndarray, radius: float) -> np.ndarray:
    return np.sqrt(np.sum(q**2, axis=-1)) - radius


def analytic_sdf(shape: ShapeSpec, p: np.ndarray) -> np.ndarray:
    """
    Signed distance (world units, negative inside) of `shape` at
    point(s) `p` of shape `(..., 3)`

    Exact for sphere, box, plate and torus; for union2 it is the
    minimum of the two member spheres, exact outside and a lower
    bound of the distance inside
    """
    p = np.asarray(p, dtype=np.float64)
    q = p - np.asarray(shape.center)
    prm = shape.params

    if shape.kind == "sphere":
        return _sphere_sdf(q, prm["r"])
    if shape.kind == "box":
        return _box_sdf(q, (prm["hx"], prm["hy"], prm["hz"]))
    if shape.kind == "torus":
        ring = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2) - prm["R"]
        return np.sqrt(ring**2 + q[..., 2] ** 2) - prm["r"]
    if shape.kind == "thin_plate":
        c, s = np.cos(prm["tilt"]), np.sin(prm["tilt"])
        local = np.stack(
            [q[..., 0], c * q[..., 1] + s * q[..., 2], -s * q[..., 1] + c * q[..., 2]],
            axis=-1,
        )
        return _box_sdf(local, (prm["w"], prm["w"], prm["h"]))

    shift = np.array([prm["d"], 0.0, 0.0])
    return np.minimum(_sphere_sdf(q - shift, prm["r"]), _sphere_sdf(q + shift, prm["r"]))


def sdf_gradient(shape: ShapeSpec, p: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """
    Central finite-difference gradient of `analytic_sdf`
    """
    p = np.asarray(p, dtype=np.float64)
    grad = np.empty(p.shape)
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = step
        grad[..., axis] = (
            analytic_sdf(shape, p + offset) - analytic_sdf(shape, p - offset)
        ) / (2 * step)
    return grad


def default_trunc(base_res: int) -> float:
    """
    Truncation distance spanning four coarse voxels of a `[-1, 1]`
    grid at `base_res`
    """
    return 4 * (2.0 / base_res)


def _readonly(values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=np.float64, order="C", copy=True)
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class ToyVecsetLatents:
    """
    Set of M surface tokens (anchor, unit normal, plane offset)
    defining a truncated signed distance field through softmax
    cross-attention. Arrays are stored as read-only copies
    """

    positions: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray
    tau: float
    trunc: float

    def __post_init__(self) -> None:
        positions, normals = _readonly(self.positions), _readonly(self.normals)
        offsets = _readonly(self.offsets)
        if positions.ndim != 2 or positions.shape[1] != 3 or len(positions) < 1:
            raise ValueError(f"positions must have shape (M, 3), got {positions.shape}")
        if normals.shape != positions.shape or offsets.shape != (len(positions),):
            raise ValueError("positions, normals and offsets disagree in token count")
        lengths = np.sqrt(np.sum(normals**2, axis=-1))
        if np.abs(lengths - 1.0).max() > 1e-9:
            raise ValueError("token normals must have unit length")
        if not self.tau > 0 or not self.trunc > 0:
            raise ValueError(f"tau and trunc must be positive, got {self.tau}, {self.trunc}")

        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "tau", float(self.tau))
        object.__setattr__(self, "trunc", float(self.trunc))

    @property
    def M(self) -> int:
        return len(self.positions)

    @classmethod
    def from_anchors(
        cls, positions: np.ndarray, normals: np.ndarray, tau: float, trunc: float
    ) -> "ToyVecsetLatents":
        positions = np.asarray(positions, dtype=np.float64)
        normals = np.asarray(normals, dtype=np.float64)
        normals = normals / np.sqrt(np.sum(normals**2, axis=-1, keepdims=True))
        offsets = -np.sum(normals * positions, axis=-1)
        return cls(positions, normals, offsets, tau, trunc)


def build_surface_latents(
    shape: ShapeSpec, M: int, seed: int, tau: float, trunc: float
) -> ToyVecsetLatents:
    """
    Sample `M` anchors on the zero level set of `shape`

    Uniform candidates are kept inside a shell around the surface,
    projected onto it with Newton steps along the finite-difference
    gradient, and rejected where the gradient is ill-defined (edges,
    creases) or the projection did not converge. Deterministic for a
    fixed `seed`

    Raises `SamplingError` when `MAX_SAMPLING_BATCHES` candidate
    batches did not yield enough anchors
    """
    if M < 4:
        raise ValueError(f"at least 4 tokens are required, got {M}")

    rng = np.random.default_rng(seed)
    batch = max(8 * M, 4096)
    accepted = []
    found = 0

    for attempt in range(MAX_SAMPLING_BATCHES):
        points = rng.uniform(-1 + MARGIN, 1 - MARGIN, size=(batch, 3))
        points = points[np.abs(analytic_sdf(shape, points)) < SHELL]

        for _ in range(NEWTON_ITERATIONS):
            value = analytic_sdf(shape, points)
            grad = sdf_gradient(shape, points)
            sq_norm = np.sum(grad**2, axis=-1)
            sq_norm[sq_norm == 0] = 1.0
            points = points - (value / sq_norm)[:, None] * grad

        grad = sdf_gradient(shape, points)
        grad_norm = np.sqrt(np.sum(grad**2, axis=-1))
        keep = (np.abs(analytic_sdf(shape, points)) <= SURFACE_TOLERANCE) & (
            np.abs(grad_norm - 1.0) <= GRADIENT_TOLERANCE
        )
        accepted.append(points[keep])
        found += int(keep.sum())
        log.debug(f"sampling batch {attempt}: {int(keep.sum())} anchors accepted")
        if found >= M:
            break
    else:
        raise SamplingError(
            f"surface sampling exhausted: {found}/{M} anchors on {shape} "
            f"after {MAX_SAMPLING_BATCHES} batches"
        )

    positions = np.concatenate(accepted)[:M]
    normals = sdf_gradient(shape, positions)
    latents = ToyVecsetLatents.from_anchors(positions, normals, tau, trunc)
    log.info(f"built {M} surface tokens on {shape} (seed={seed}, tau={tau:g})")
    return latents


def _as_points(points: np.ndarray) -> np.ndarray:
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {points.shape}")
    return points


def _token_axes(latents: ToyVecsetLatents, tokens: Optional[np.ndarray]):
    # per-axis token arrays: (1, M) for the full set, (n, K) for gathered tables
    if tokens is None:
        pos = [latents.positions[None, :, axis] for axis in range(3)]
        nrm = [latents.normals[None, :, axis] for axis in range(3)]
        return pos, nrm, latents.offsets[None, :]
    pos = [latents.positions[:, axis][tokens] for axis in range(3)]
    nrm = [latents.normals[:, axis][tokens] for axis in range(3)]
    return pos, nrm, latents.offsets[tokens]


def _scores(q: np.ndarray, pos, tau: float) -> np.ndarray:
    sq = (q[:, 0:1] - pos[0]) ** 2
    sq = sq + (q[:, 1:2] - pos[1]) ** 2
    sq = sq + (q[:, 2:3] - pos[2]) ** 2
    return -sq / tau


def _softmax(scores: np.ndarray, valid: Optional[np.ndarray] = None) -> np.ndarray:
    if valid is not None:
        scores = np.where(valid, scores, -np.inf)
    shifted = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _field_kernel(
    q: np.ndarray,
    latents: ToyVecsetLatents,
    tokens: Optional[np.ndarray] = None,
    valid: Optional[np.ndarray] = None,
) -> np.ndarray:
    pos, nrm, offsets = _token_axes(latents, tokens)
    weights = _softmax(_scores(q, pos, latents.tau), valid)
    plane = q[:, 0:1] * nrm[0] + q[:, 1:2] * nrm[1] + q[:, 2:3] * nrm[2] + offsets
    raw = (weights * plane).sum(axis=-1)
    return np.clip(raw, -latents.trunc, latents.trunc) / latents.trunc


def _normalize_selection(selection, M: int) -> np.ndarray:
    tokens = np.asarray(selection, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) == 0:
        raise ValueError("a token selection must be a non-empty 1-d index list")
    if tokens.min() < 0 or tokens.max() >= M:
        raise ValueError(f"token indices must lie in [0, {M})")
    if len(np.unique(tokens)) != len(tokens):
        raise ValueError("token indices of a selection must be unique")
    return tokens


def attention_scores(points: np.ndarray, latents: ToyVecsetLatents) -> np.ndarray:
    """
    Pre-softmax scores `(n, M)` of a query batch against all tokens
    """
    pos, _, _ = _token_axes(latents, None)
    return _scores(_as_points(points), pos, latents.tau)


def attention_weights(
    q: np.ndarray, latents: ToyVecsetLatents, selection: Selection = None
) -> np.ndarray:
    """
    Softmax attention weights of query point(s) over the selected
    tokens (all tokens when `selection` is None)

    A single point `(3,)` gives a `(k,)` vector, a batch `(n, 3)`
    gives `(n, k)`
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    points = _as_points(q.reshape(-1, 3))
    if selection is None:
        tokens = None
    else:
        tokens = np.broadcast_to(
            _normalize_selection(selection, latents.M), (len(points), len(selection))
        )
    pos, _, _ = _token_axes(latents, tokens)
    weights = _softmax(_scores(points, pos, latents.tau))
    return weights[0] if single else weights


def _padded_table(
    selection: Mapping[int, np.ndarray], M: int
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    keys = sorted(selection)
    rows = [_normalize_selection(selection[key], M) for key in keys]
    width = max(len(row) for row in rows)
    table = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, row in enumerate(rows):
        table[i, : len(row)] = row
        mask[i, : len(row)] = True
    ragged = not mask.all()
    return np.array(keys, dtype=np.int64), table, mask if ragged else None


def eval_field(
    points: np.ndarray,
    latents: ToyVecsetLatents,
    selection: Selection = None,
    groups: Optional[np.ndarray] = None,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> np.ndarray:
    """
    Normalized tSDF values in `[-1, 1]` of the vecset field

    Arguments:

    + `points`: `(n, 3)` query batch
    + `selection`: None (full attention), a single index list shared
    by all points, or a mapping group id -> index list used together
    with `groups`, the per-point group label
    + `chunk_size`: points evaluated per kernel call
    + `workers`: thread count; chunk order is preserved

    Every point's value depends only on that point and its tokens
    """
    points = _as_points(points)
    n = len(points)
    if n == 0:
        return np.empty(0)

    row_of = None
    table = mask = None
    if isinstance(selection, Mapping):
        if groups is None or len(groups) != n:
            raise ValueError("grouped selection needs one group label per point")
        keys, table, mask = _padded_table(selection, latents.M)
        labels = np.asarray(groups, dtype=np.int64)
        row_of = np.minimum(np.searchsorted(keys, labels), len(keys) - 1)
        unknown = keys[row_of] != labels
        if unknown.any():
            raise ValueError(f"no token selection for group {labels[unknown][0]}")
    elif selection is not None:
        table = _normalize_selection(selection, latents.M)[None, :]
        row_of = np.zeros(n, dtype=np.int64)

    def run(start: int) -> np.ndarray:
        stop = min(start + chunk_size, n)
        q = points[start:stop]
        if table is None:
            return _field_kernel(q, latents)
        rows = row_of[start:stop]
        valid = None if mask is None else mask[rows]
        return _field_kernel(q, latents, table[rows], valid)

    starts = range(0, n, chunk_size)
    if workers > 1 and n > chunk_size:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run, starts))
    else:
        chunks = [run(start) for start in starts]
    return np.concatenate(chunks)


def kept_mass(
    points: np.ndarray,
    latents: ToyVecsetLatents,
    tokens: Sequence[int],
    chunk_size: int = DEFAULT_CHUNK,
) -> np.ndarray:
    """
    Per-point fraction of the full softmax mass carried by `tokens`
    """
    points = _as_points(points)
    tokens = _normalize_selection(tokens, latents.M)
    out = np.empty(len(points))
    for start in range(0, len(points), chunk_size):
        weights = attention_weights(points[start : start + chunk_size], latents)
        out[start : start + chunk_size] = weights[:, tokens].sum(axis=-1)
    return out


@dataclass
class AttentionStats:
    """
    Activated-token statistics of a query batch

    `counts[i]` is the number of tokens with weight above epsilon for
    query i, `regions` maps a region label to the sorted union of its
    queries' activated tokens, `histogram`/`bin_edges` bucket `counts`
    """

    counts: np.ndarray
    regions: Dict[int, np.ndarray]
    histogram: np.ndarray
    bin_edges: np.ndarray
    epsilon: float

    @property
    def mean_count(self) -> float:
        return float(self.counts.mean()) if len(self.counts) else 0.0

    def region_counts(self) -> Dict[int, int]:
        return {label: len(tokens) for label, tokens in self.regions.items()}


def activated_token_stats(
    points: np.ndarray,
    latents: ToyVecsetLatents,
    epsilon: float,
    regions: Optional[np.ndarray] = None,
    bins: Optional[int] = None,
    chunk_size: int = DEFAULT_CHUNK,
) -> AttentionStats:
    """
    Count tokens with attention weight above `epsilon` per query and
    merge them per region when `regions` labels are given
    """
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    points = _as_points(points)
    if regions is not None and len(regions) != len(points):
        raise ValueError("one region label per point is required")

    counts = np.empty(len(points), dtype=np.int64)
    merged: Dict[int, np.ndarray] = {}
    for start in range(0, len(points), chunk_size):
        active = attention_weights(points[start : start + chunk_size], latents) > epsilon
        counts[start : start + chunk_size] = active.sum(axis=-1)
        if regions is None:
            continue
        labels = np.asarray(regions[start : start + chunk_size])
        for label in np.unique(labels).tolist():
            used = active[labels == label].any(axis=0)
            if label in merged:
                used |= merged[label]
            merged[label] = used

    bins = min(latents.M + 1, 64) if bins is None else bins
    histogram, edges = np.histogram(counts, bins=bins, range=(0, latents.M + 1))
    return AttentionStats(
        counts=counts,
        regions={label: np.flatnonzero(used) for label, used in sorted(merged.items())},
        histogram=histogram,
        bin_edges=edges,
        epsilon=epsilon,
    )


def flops_breakdown(cfg: HeadConfig) -> Dict[str, float]:
    """
    Per-query FLOPs of the decoder head, term by term

    Multiply-adds count as 2 FLOPs, a layernorm as 5 FLOPs per
    channel; the query projection consumes the coordinates plus a
    `POSITIONAL_WIDTH`-wide positional encoding
    """
    width = cfg.width
    return {
        "query_proj": 2.0 * INPUT_WIDTH * width,
        "attention": attention_flops(cfg),
        "out_proj": 2.0 * width * width,
        "mlp": 4.0 * cfg.mlp_ratio * width * width,
        "layernorm": 5.0 * width * cfg.num_layernorms,
    }


def attention_flops(cfg: HeadConfig, m_kv: Optional[int] = None) -> float:
    m_kv = cfg.m_kv if m_kv is None else m_kv
    return 4.0 * m_kv * cfg.kv_width


def flops_per_query(cfg: HeadConfig) -> float:
    return sum(flops_breakdown(cfg).values())


def flops_reduction(baseline: HeadConfig, efficient: HeadConfig) -> float:
    return 1.0 - flops_per_query(efficient) / flops_per_query(baseline)
