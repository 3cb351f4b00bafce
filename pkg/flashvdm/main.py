"""
Command-line entry point: decode toy shapes, benchmark the decoders,
profile a decode and run the flow-distillation stages

Exit codes: 0 on success, 1 when the run fails, 2 on a usage error
"""

import json
import os
from dataclasses import replace
from functools import wraps
from typing import Any, Callable, Dict, Optional

import click
from click import secho

from utils import LOG_MANAGER
from utils.config import CliConfig, load_config
from utils.distill import STAGES, Workdir, evaluate, run_stage, sample_stage
from utils.dump import write_mesh, write_volume
from utils.field import ShapeSpec, build_surface_latents, default_trunc
from utils.hierdec import dense_decode
from utils.metrics import (
    MODES,
    SUITES,
    RunReport,
    bench_run,
    decode,
    format_summary,
    get_suite,
    timed,
    write_csv_summary,
)
from utils.profiler import profile_decode
from utils.surface import boundary_edge_count, euler_characteristic, marching_cubes, write_obj

log = LOG_MANAGER.get_logger(__name__)


def output_dir() -> str:
    return os.getenv("FLASHVDM_OUT", ".")


def reports_failures(func: Callable) -> Callable:
    """
    Turn a failed run into a red message on stderr and exit code 1
    """

    @wraps(func)
    def wrapper(*args: Any, **kwds: Any) -> Any:
        try:
            return func(*args, **kwds)
        except (ValueError, RuntimeError, OSError) as err:
            log.error(f"{func.__name__} failed: {err}")
            secho(f"error: {err}", fg="red", err=True)
            raise click.exceptions.Exit(1) from err

    return wrapper


def _resolve_config(path: Optional[str], overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> CliConfig:
    """
    `load_config` with invalid files and flag combinations reported as usage errors
    """
    try:
        return load_config(path, overrides)
    except ValueError as err:
        raise click.UsageError(str(err)) from err


def _parse_shape(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Optional[ShapeSpec]:
    if value is None:
        return None
    try:
        return ShapeSpec.parse(value)
    except ValueError as err:
        raise click.BadParameter(str(err), ctx=ctx, param=param) from err


def _parse_seeds(ctx: click.Context, param: click.Parameter, value: str):
    try:
        seeds = [int(s) for s in value.split(",") if s.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}", ctx=ctx, param=param) from None
    if not seeds or min(seeds) < 0:
        raise click.BadParameter(f"expected non-negative seeds, got {value!r}", ctx=ctx, param=param)
    return seeds


SEED = click.IntRange(min=0)
POSITIVE = click.IntRange(min=1)


@click.group()
@click.option("-s", "--stream", is_flag=True, default=False, help="stream logs to stdout")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING ...")
def cli(stream: bool, log_level: Optional[str]) -> None:
    if stream:
        LOG_MANAGER.stream_logs()
    if log_level:
        LOG_MANAGER.set_level(log_level)


def _selection_mode(topk: Optional[int], topn: Optional[int], mode: Optional[str]) -> Optional[str]:
    if mode is not None:
        return mode
    if topk is not None and topn is not None:
        raise click.UsageError("--topk and --topn select different modes, pass --select-mode")
    if topn is not None:
        return "topn_merge"
    if topk is not None:
        return "mean_topk"
    return None


def _decode_config(cfg: CliConfig, mode: str):
    akvs = cfg.akvs if mode == "hier+akvs" else None
    return replace(cfg.decode, akvs=akvs, head=cfg.head)


def _latents(cfg: CliConfig, shape: ShapeSpec):
    trunc = cfg.latents.trunc or default_trunc(cfg.decode.base_res)
    latents = build_surface_latents(shape, cfg.latents.tokens, cfg.decode.seed, cfg.latents.tau, trunc)
    return latents, trunc


@cli.command("decode")
@click.option("--shape", required=True, callback=_parse_shape, help="e.g. sphere:r=0.5, plate:h=0.01")
@click.option("--mode", type=click.Choice(MODES), default="hier", show_default=True)
@click.option("--res", type=POSITIVE, default=None, help="target resolution")
@click.option("--base", type=click.IntRange(min=8), default=None, help="base resolution")
@click.option("--tokens", type=POSITIVE, default=None)
@click.option("--tau", type=click.FloatRange(min=0.0, min_open=True), default=None)
@click.option("--seed", type=SEED, required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="OBJ path")
@click.option("--volume", type=click.Path(dir_okay=False), default=None, help="FVDM1 dump")
@click.option("--mesh-bin", type=click.Path(dir_okay=False), default=None, help="FVDMM1 dump")
@click.option("--subvol", type=POSITIVE, default=None, help="subvolume edge r")
@click.option("--topk", type=POSITIVE, default=None)
@click.option("--topn", type=POSITIVE, default=None)
@click.option("--select-mode", type=click.Choice(("mean_topk", "topn_merge")), default=None)
@click.option("--probes", type=POSITIVE, default=None)
@click.option("--eta", type=click.FloatRange(min=0.0, max=1.0, min_open=True), default=None)
@click.option("--dilation", type=click.IntRange(min=0), default=None)
@click.option("--no-near", is_flag=True, default=False)
@click.option("--no-skip-final-near", is_flag=True, default=False)
@click.option("--no-double-expand", is_flag=True, default=False)
@click.option("--threads", type=POSITIVE, default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--compare", is_flag=True, default=False, help="score against a dense decode")
@reports_failures
def cmd_decode(
    shape, mode, res, base, tokens, tau, seed, out, volume, mesh_bin, subvol, topk, topn,
    select_mode, probes, eta, dilation, no_near, no_skip_final_near, no_double_expand, threads,
    config_path, compare,
):
    """
    Decode one toy shape and extract its mesh
    """
    overrides: Dict[str, Dict[str, Any]] = {
        "latents": {"tokens": tokens, "tau": tau},
        "decode": {
            "target_res": res,
            "base_res": base,
            "seed": seed,
            "eta": eta,
            "dilation_radius": dilation,
            "find_near": False if no_near else None,
            "final_skip_findnear": False if no_skip_final_near else None,
            "final_double_expand": False if no_double_expand else None,
            "workers": threads,
        },
        "akvs": {
            "r": subvol,
            "K": topk,
            "N": topn,
            "n_probe": probes,
            "mode": _selection_mode(topk, topn, select_mode),
        },
    }
    cfg = _resolve_config(config_path, overrides)
    decode_cfg = _decode_config(cfg, mode)
    log.debug(f"resolved config: {cfg.to_dict()}")

    latents, trunc = _latents(cfg, shape)
    timing = timed(1)(decode)(latents, mode, decode_cfg)
    values, report, known = timing.result
    mesh = marching_cubes(values, gamma=decode_cfg.gamma, known=known)

    out = out or os.path.join(output_dir(), f"{shape.kind}_{mode.replace('+', '_')}.obj")
    write_obj(mesh, out)
    if volume:
        write_volume(values, volume)
    if mesh_bin:
        write_mesh(mesh, mesh_bin)

    run = RunReport.from_decode(str(shape), mode, seed, cfg.to_dict(), report, timing.runs)
    run.mesh = {
        "vertices": len(mesh.vertices),
        "triangles": len(mesh),
        "boundary_edges": boundary_edge_count(mesh),
        "euler_characteristic": euler_characteristic(mesh),
    }
    if compare:
        reference, _ = dense_decode(latents, decode_cfg.target_res, decode_cfg.chunk_size, decode_cfg.workers)
        run.compare(values, reference, trunc)
    report_path = os.path.splitext(out)[0] + ".json"
    with open(report_path, "w", encoding="utf-8") as file:
        file.write(run.to_json() + "\n")

    secho(f"{shape} [{mode}] -> {out}", fg="green")
    secho(
        f"> queries {report.total} of {report.dense_equivalent} "
        f"(reduction {report.reduction:.4f}), {len(mesh)} triangles, "
        f"{run.mesh['boundary_edges']} boundary edges, {timing.median:.3f}s",
        fg="magenta",
    )
    if compare:
        secho(f"> V-IoU {run.v_iou:.5f}  S-IoU {run.s_iou:.5f}", fg="magenta")


@cli.command("bench")
@click.option("--suite", "suite_name", type=click.Choice(sorted(SUITES)), default="default", show_default=True)
@click.option("--seeds", required=True, callback=_parse_seeds, help="comma-separated, e.g. 0,1,2")
@click.option("--repeat", type=POSITIVE, default=3, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="JSON-lines report")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--progress/--no-progress", default=True)
@reports_failures
def cmd_bench(suite_name, seeds, repeat, out, csv_path, config_path, progress):
    """
    Run dense, hierarchical and hierarchical+AKVS decodes over a suite
    """
    suite = get_suite(suite_name)
    cfg = None
    if config_path:
        cfg = replace(_resolve_config(config_path).decode, target_res=suite.target_res, base_res=suite.base_res)
    out = out or os.path.join(output_dir(), f"bench_{suite_name}.jsonl")
    with open(out, "w", encoding="utf-8") as sink:
        records = bench_run(suite, seeds, sink, repeat, cfg=cfg, progress=progress)
    if csv_path:
        with open(csv_path, "w", encoding="utf-8", newline="") as file:
            write_csv_summary(records, file)
    click.echo(format_summary(records))
    secho(f"{len(records)} records -> {out}", fg="green")


@cli.command("profile")
@click.option("--shape", default="sphere:r=0.5", show_default=True, callback=_parse_shape)
@click.option("--mode", type=click.Choice(MODES), default="hier", show_default=True)
@click.option("--res", type=POSITIVE, default=None)
@click.option("--base", type=click.IntRange(min=8), default=None)
@click.option("--tokens", type=POSITIVE, default=None)
@click.option("--seed", type=SEED, required=True)
@click.option("--top", type=POSITIVE, default=20, show_default=True)
@click.option("--memory/--no-memory", default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@reports_failures
def cmd_profile(shape, mode, res, base, tokens, seed, top, memory, config_path):
    """
    Profile one decode with cProfile and memory_profiler
    """
    overrides = {
        "latents": {"tokens": tokens},
        "decode": {"target_res": res, "base_res": base, "seed": seed},
    }
    cfg = _resolve_config(config_path, overrides)
    latents, _ = _latents(cfg, shape)
    result = profile_decode(latents, mode, _decode_config(cfg, mode), top=top, memory=memory)
    click.echo(result.stats)
    if result.peak_mib is not None:
        secho(f"> peak memory {result.peak_mib:.1f} MiB", fg="magenta")
    secho(f"> {result.report.total} queries, reduction {result.report.reduction:.4f}", fg="magenta")


@cli.group("distill")
def distill_group() -> None:
    """
    Progressive flow distillation on toy 2-d data
    """


def _distill_config(config_path, seed=None, no_gd_warmup=False, no_ema=False, loss=None, no_phase1=False):
    overrides = {
        "distill": {
            "seed": seed,
            "gd_warmup": False if no_gd_warmup else None,
            "use_ema": False if no_ema else None,
            "loss": loss,
            "phase1_finetune": False if no_phase1 else None,
        }
    }
    return _resolve_config(config_path, overrides).distill


def _workdir(path: Optional[str]) -> Workdir:
    return Workdir(path or output_dir())


def _stage_command(stage: str) -> None:
    @distill_group.command(stage)
    @click.option("--workdir", type=click.Path(file_okay=False), default=None)
    @click.option("--seed", type=SEED, required=True)
    @click.option("--steps", type=click.IntRange(min=0), default=None)
    @click.option("--no-gd-warmup", is_flag=True, default=False)
    @click.option("--no-ema", is_flag=True, default=False)
    @click.option("--loss", type=click.Choice(("huber", "l2")), default=None)
    @click.option("--no-phase1", is_flag=True, default=False)
    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
    @reports_failures
    def command(workdir, seed, steps, no_gd_warmup, no_ema, loss, no_phase1, config_path):
        cfg = _distill_config(config_path, seed, no_gd_warmup, no_ema, loss, no_phase1)
        target = _workdir(workdir)
        run_stage(stage, target, cfg, steps)
        secho(f"{stage} -> {target.checkpoint(stage)}", fg="green")

    command.__doc__ = f"Run the {stage} stage"


for _stage in STAGES:
    _stage_command(_stage)


@distill_group.command("sample")
@click.option("--workdir", type=click.Path(file_okay=False), default=None)
@click.option("--stage", type=click.Choice(STAGES), default="cfd", show_default=True)
@click.option("--nfe", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--seed", type=SEED, required=True)
@click.option("-n", "--count", type=click.IntRange(min=1), default=4096, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@reports_failures
def cmd_sample(workdir, stage, nfe, seed, count, config_path):
    """
    Write samples of a trained stage to an .npy file
    """
    cfg = _distill_config(config_path)
    path = sample_stage(stage, _workdir(workdir), cfg, nfe, seed, count)
    secho(f"{count} samples ({stage}, {nfe} NFE) -> {path}", fg="green")


@distill_group.command("eval")
@click.option("--workdir", type=click.Path(file_okay=False), default=None)
@click.option("--nfe", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--seed", type=SEED, required=True)
@click.option("-n", "--count", type=click.IntRange(min=2), default=4096, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@reports_failures
def cmd_eval(workdir, nfe, seed, count, config_path):
    """
    Energy distances of the teacher and every trained student
    """
    cfg = _distill_config(config_path)
    results = evaluate(_workdir(workdir), cfg, nfe, seed, count)
    click.echo(json.dumps(results, indent=2, sort_keys=True))


if __name__ == "__main__":
    cli()
