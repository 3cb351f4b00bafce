"""
Occupancy IoU metrics, decode timing, run reports and the benchmark
harness behind `main.py bench`

Report records are JSON objects, one per line, tagged with
`REPORT_SCHEMA`; the S-IoU band definition is versioned separately
by `SIOU_DEFINITION` (band of `band_voxels` target voxels around the
surface of either volume, measured on min(|a|, |b|))
"""

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from functools import wraps
from statistics import median
from time import perf_counter
from typing import IO, Any, Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from . import LOG_MANAGER
from .akvs import AkvsEvaluator
from .config import AkvsConfig, DecodeConfig, to_dict
from .field import ShapeSpec, ToyVecsetLatents, build_surface_latents, default_trunc
from .hierdec import DecodeReport, assemble, coverage, decode_levels, dense_decode
from .surface import sign_volume

log = LOG_MANAGER.get_logger(__name__)

REPORT_SCHEMA = "flashvdm-run/1"
SIOU_DEFINITION = "band2-minabs/1"
MODES = ("dense", "hier", "hier+akvs")


class BenchError(RuntimeError):
    """
    Raised when the benchmark could not write its report; records
    written so far are flushed
    """


def volume_iou(a: np.ndarray, b: np.ndarray) -> float:
    """
    `|a & b| / |a | b|` of two occupancy grids, 1 when both are empty
    """
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"occupancy grids differ in shape: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def surface_iou(
    sdf_a: np.ndarray,
    sdf_b: np.ndarray,
    band_voxels: float = 2,
    gamma: float = 0.0,
    h_normalized: Optional[float] = None,
) -> float:
    """
    Occupancy IoU restricted to voxels with
    `min(|sdf_a|, |sdf_b|) <= band_voxels * h_normalized`

    `h_normalized` is the voxel size in the units of the volumes
    (voxel size over the truncation distance for normalized tSDF);
    by default the volumes are taken as world-unit distances over
    `[-1, 1]^3`. An empty band gives 1
    """
    sdf_a, sdf_b = np.asarray(sdf_a), np.asarray(sdf_b)
    if sdf_a.shape != sdf_b.shape:
        raise ValueError(f"volumes differ in shape: {sdf_a.shape} vs {sdf_b.shape}")
    if band_voxels < 1:
        raise ValueError(f"band must span at least one voxel, got {band_voxels}")
    if h_normalized is None:
        h_normalized = 2.0 / max(sdf_a.shape)

    band = np.minimum(np.abs(sdf_a), np.abs(sdf_b)) <= band_voxels * h_normalized
    if not band.any():
        return 1.0
    return volume_iou(sign_volume(sdf_a[band], gamma), sign_volume(sdf_b[band], gamma))


def sign_agreement(a: np.ndarray, b: np.ndarray, gamma: float = 0.0) -> float:
    """
    Fraction of voxels with equal occupancy
    """
    occ_a, occ_b = sign_volume(a, gamma), sign_volume(b, gamma)
    if occ_a.shape != occ_b.shape:
        raise ValueError("volumes differ in shape")
    return float(np.mean(occ_a == occ_b))


class Timing(NamedTuple):
    result: Any
    runs: List[float]

    @property
    def median(self) -> float:
        return median(self.runs)


def timed(repeat: int = 1):
    """
    Run the decorated function `repeat` times and return the last
    result with every run's wall time

    :param repeat, int
    """
    if repeat < 1:
        raise ValueError(f"repeat must be positive, got {repeat}")

    def _timer(func: Callable):
        @wraps(func)
        def timer(*args: Any, **kwds: Any) -> Timing:
            runs: List[float] = []
            for _ in range(repeat):
                t_start = perf_counter()
                result = func(*args, **kwds)
                runs.append(perf_counter() - t_start)
            log.debug(f"{func.__name__}: median of {repeat} runs {median(runs):.3f}s")
            return Timing(result, runs)

        return timer

    return _timer


@dataclass
class RunReport:
    """
    One decode run: what was decoded, how, at what cost and how close
    it came to the dense reference
    """

    shape: str
    mode: str
    seed: int
    config: Dict[str, Any]
    decode: Dict[str, Any]
    timings: Dict[str, Any] = field(default_factory=dict)
    v_iou: Optional[float] = None
    s_iou: Optional[float] = None
    sign_agreement: Optional[float] = None
    flops: Dict[str, float] = field(default_factory=dict)
    mesh: Dict[str, Any] = field(default_factory=dict)
    schema: str = REPORT_SCHEMA
    siou_definition: str = SIOU_DEFINITION

    def __post_init__(self) -> None:
        for name in ("v_iou", "s_iou", "sign_agreement"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if any(t < 0 for t in self.timings.get("runs", [])):
            raise ValueError("timings must be non-negative")

    @classmethod
    def from_decode(
        cls,
        shape: str,
        mode: str,
        seed: int,
        config: Dict[str, Any],
        report: DecodeReport,
        runs: Sequence[float] = (),
    ) -> "RunReport":
        return cls(
            shape=shape,
            mode=mode,
            seed=seed,
            config=config,
            decode=report.to_dict(),
            timings={"runs": list(runs), "median": median(runs) if runs else None},
            flops={
                "attention_full": report.attention_flops_full,
                "attention_selected": report.attention_flops_selected,
                "attention_reduction": report.attention_flops_reduction,
                "probe": report.probe_flops,
                "head": report.head_flops,
            },
        )

    def compare(self, volume: np.ndarray, reference: np.ndarray, trunc: float) -> None:
        """
        Fill the fidelity fields against a dense reference volume
        """
        h_normalized = (2.0 / volume.shape[0]) / trunc
        self.v_iou = volume_iou(sign_volume(volume), sign_volume(reference))
        self.s_iou = surface_iou(volume, reference, 2, 0.0, h_normalized)
        self.sign_agreement = sign_agreement(volume, reference)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def decode(
    latents: ToyVecsetLatents, mode: str, cfg: DecodeConfig
) -> Tuple[np.ndarray, DecodeReport, Optional[np.ndarray]]:
    """
    Run one decode pipeline; returns the volume, its report and the
    target-level coverage mask (None for the dense decode)
    """
    if mode == "dense":
        volume, report = dense_decode(
            latents, cfg.target_res, cfg.chunk_size, cfg.workers, cfg.head
        )
        return volume, report, None
    if mode == "hier":
        levels, report = decode_levels(latents, cfg)
    elif mode == "hier+akvs":
        levels, report = decode_levels(latents, cfg, AkvsEvaluator(latents, cfg))
    else:
        raise ValueError(f"unknown decode mode {mode!r}, expected one of {MODES}")
    return assemble(levels), report, coverage(levels)


@dataclass
class Suite:
    shapes: Tuple[str, ...]
    target_res: int
    base_res: int
    tokens: int
    tau: float = 1e-3
    akvs: AkvsConfig = field(default_factory=AkvsConfig)


SUITES: Dict[str, Suite] = {
    "default": Suite(
        shapes=("sphere:r=0.5", "torus:R=0.5,r=0.15", "box", "plate:h=0.01,tilt=0.35"),
        target_res=256,
        base_res=64,
        tokens=1024,
    ),
    "quick": Suite(
        shapes=("sphere:r=0.5", "torus:R=0.5,r=0.15", "box", "plate:h=0.01,tilt=0.35"),
        target_res=64,
        base_res=16,
        tokens=256,
        akvs=AkvsConfig(r=4, K=64, N=16),
    ),
    "acceptance": Suite(
        shapes=(
            "sphere:r=0.5",
            "torus:R=0.5,r=0.15",
            "box",
            "plate:h=0.01",
            "union2",
        ),
        target_res=256,
        base_res=64,
        tokens=3072,
        akvs=AkvsConfig(r=16, K=512),
    ),
}


def get_suite(name: str) -> Suite:
    try:
        return SUITES[name]
    except KeyError:
        raise ValueError(f"unknown suite {name!r}, expected one of {sorted(SUITES)}") from None


def _write_line(sink: IO, record: Dict[str, Any]) -> None:
    try:
        sink.write(json.dumps(record, sort_keys=True) + "\n")
        sink.flush()
    except OSError as err:
        try:
            sink.flush()
        except OSError:
            pass
        raise BenchError(f"could not write benchmark record: {err}") from err


def bench_run(
    suite: Suite,
    seeds: Iterable[int],
    sink: Optional[IO] = None,
    repeat: int = 3,
    modes: Sequence[str] = MODES,
    cfg: Optional[DecodeConfig] = None,
    progress: bool = False,
) -> List[Dict[str, Any]]:
    """
    Decode every (shape, seed) of `suite` in every mode

    Wall time is measured around the decode only, as the median of
    `repeat` runs. Every record is written to `sink` (JSON lines) and
    flushed as soon as it is complete

    Raises `BenchError` when writing fails
    """
    seeds = list(seeds)
    cfg = cfg or DecodeConfig(
        target_res=suite.target_res, base_res=suite.base_res, akvs=suite.akvs
    )
    if cfg.akvs is None:
        cfg = replace(cfg, akvs=suite.akvs)
    runs = [(shape, seed) for shape in suite.shapes for seed in seeds]
    records: List[Dict[str, Any]] = []

    for shape_text, seed in tqdm(runs, desc="bench", disable=not progress):
        shape = ShapeSpec.parse(shape_text)
        trunc = default_trunc(cfg.base_res)
        latents = build_surface_latents(shape, suite.tokens, seed, suite.tau, trunc)
        reference = None
        for mode in modes:
            timing = timed(repeat)(decode)(latents, mode, cfg)
            volume, report, _ = timing.result
            run = RunReport.from_decode(
                str(shape),
                mode,
                seed,
                {"decode": to_dict(cfg), "tokens": suite.tokens, "tau": suite.tau},
                report,
                timing.runs,
            )
            if mode == "dense":
                reference = volume
            if reference is None:
                reference, _ = dense_decode(latents, cfg.target_res, cfg.chunk_size, cfg.workers)
            run.compare(volume, reference, trunc)

            record = run.to_dict()
            records.append(record)
            if sink is not None:
                _write_line(sink, record)
            log.info(
                f"{shape} seed={seed} {mode}: {report.total} queries, "
                f"reduction {report.reduction:.4f}, V-IoU {run.v_iou:.5f}, "
                f"median {timing.median:.3f}s"
            )
    return records


SUMMARY_FIELDS = ("shape", "mode", "seed", "queries", "reduction", "v_iou", "s_iou", "median_s")


def summary_rows(records: Iterable[Dict[str, Any]]) -> List[Dict[str, Any]]:
    return [
        {
            "shape": r["shape"],
            "mode": r["mode"],
            "seed": r["seed"],
            "queries": r["decode"]["total"],
            "reduction": r["decode"]["reduction"],
            "v_iou": r["v_iou"],
            "s_iou": r["s_iou"],
            "median_s": r["timings"]["median"],
        }
        for r in records
    ]


def write_csv_summary(records: Iterable[Dict[str, Any]], sink: IO) -> None:
    writer = csv.DictWriter(sink, fieldnames=SUMMARY_FIELDS)
    writer.writeheader()
    writer.writerows(summary_rows(records))


def format_summary(records: Iterable[Dict[str, Any]]) -> str:
    """
    Plain-text table: mode, queries, reduction, V-IoU, median time
    """
    lines = [f"{'shape':<28} {'mode':<10} {'queries':>10} {'reduction':>9} {'V-IoU':>8} {'time':>8}"]
    for row in summary_rows(records):
        lines.append(
            f"{row['shape']:<28} {row['mode']:<10} {row['queries']:>10d} "
            f"{row['reduction']:>9.4f} {row['v_iou']:>8.5f} {row['median_s']:>7.3f}s"
        )
    return "\n".join(lines)
