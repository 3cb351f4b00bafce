"""
Execution-time and memory profiling of a single decode
"""

import cProfile
import io
import pstats
from typing import NamedTuple, Optional

import numpy as np
from memory_profiler import memory_usage

from . import LOG_MANAGER
from .config import DecodeConfig
from .field import ToyVecsetLatents
from .hierdec import DecodeReport
from .metrics import decode

log = LOG_MANAGER.get_logger(__name__)


class ProfileResult(NamedTuple):
    report: DecodeReport
    stats: str
    peak_mib: Optional[float]


def profile_decode(
    latents: ToyVecsetLatents,
    mode: str,
    cfg: DecodeConfig,
    top: int = 20,
    sort: str = "cumulative",
    memory: bool = True,
) -> ProfileResult:
    """
    Run one decode under cProfile (and, with `memory`, a second one
    under memory_profiler for the peak resident size)

    Returns the decode report, the `top` entries of the profile sorted
    by `sort` as text and the peak memory in MiB
    """
    pr = cProfile.Profile()
    pr.enable()
    _, report, _ = decode(latents, mode, cfg)
    pr.disable()

    out = io.StringIO()
    pstats.Stats(pr, stream=out).sort_stats(sort).print_stats(top)

    peak = None
    if memory:
        usage = memory_usage((decode, (latents, mode, cfg), {}), max_usage=True)
        peak = float(np.max(usage))
        log.info(f"{mode} decode peak memory {peak:.1f} MiB")
    return ProfileResult(report, out.getvalue(), peak)
