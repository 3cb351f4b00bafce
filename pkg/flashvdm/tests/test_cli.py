"""
Command-line surface: outputs, exit codes and option plumbing,
driven through click's test runner at desk-scale settings
"""

import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from main import cli
from utils.dump import read_mesh, read_volume
from utils.surface import read_obj

SMALL_DECODE = ["--res", "32", "--base", "16", "--tokens", "128", "--seed", "0"]


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(
        json.dumps(
            {
                "distill": {
                    "hidden": 8,
                    "layers": 2,
                    "freqs": 2,
                    "batch_size": 16,
                    "num_timesteps": 10,
                    "phases": 2,
                    "k_skip": 2,
                    "finetune_steps": 1,
                    "disc_hidden": 4,
                    "log_every": 1,
                }
            }
        )
    )
    return str(path)


@pytest.mark.parametrize(
    "mode, extra",
    [
        ("dense", []),
        ("hier", []),
        ("hier+akvs", ["--subvol", "4", "--topk", "32", "--probes", "4"]),
    ],
)
def test_decode(runner, tmp_path, mode, extra):
    out = str(tmp_path / "sphere.obj")
    result = runner.invoke(
        cli, ["decode", "--shape", "sphere:r=0.5", "--mode", mode, "--out", out] + SMALL_DECODE + extra
    )
    assert result.exit_code == 0, result.output
    assert "reduction" in result.output

    mesh = read_obj(out)
    assert not mesh.is_empty
    with open(str(tmp_path / "sphere.json"), encoding="utf-8") as file:
        report = json.load(file)
    assert report["mode"] == mode
    assert report["seed"] == 0
    assert report["decode"]["dense_equivalent"] == 32**3
    assert report["mesh"]["triangles"] == len(mesh)
    assert report["config"]["decode"]["target_res"] == 32


def test_decode_dumps_and_compare(runner, tmp_path):
    volume, mesh_bin = str(tmp_path / "v.fvdm"), str(tmp_path / "m.fvdmm")
    result = runner.invoke(
        cli,
        ["decode", "--shape", "torus", "--out", str(tmp_path / "t.obj"), "--volume", volume,
         "--mesh-bin", mesh_bin, "--compare"] + SMALL_DECODE,
    )
    assert result.exit_code == 0, result.output
    assert "V-IoU" in result.output

    values, _ = read_volume(volume)
    assert values.shape == (32, 32, 32)
    assert len(read_mesh(mesh_bin)) == len(read_obj(str(tmp_path / "t.obj")))
    with open(str(tmp_path / "t.json"), encoding="utf-8") as file:
        assert json.load(file)["v_iou"] >= 0.99


def test_decode_default_output(runner, tmp_path, monkeypatch):
    monkeypatch.setenv("FLASHVDM_OUT", str(tmp_path))
    result = runner.invoke(cli, ["decode", "--shape", "box", "--mode", "dense"] + SMALL_DECODE)
    assert result.exit_code == 0, result.output
    assert os.path.isfile(tmp_path / "box_dense.obj")
    assert os.path.isfile(tmp_path / "box_dense.json")


def test_decode_config_file(runner, tmp_path):
    config = tmp_path / "decode.json"
    config.write_text(json.dumps({"decode": {"target_res": 24, "base_res": 12}, "latents": {"tokens": 96}}))
    out = str(tmp_path / "s.obj")
    result = runner.invoke(
        cli, ["decode", "--shape", "sphere", "--seed", "1", "--config", str(config), "--out", out]
    )
    assert result.exit_code == 0, result.output
    with open(str(tmp_path / "s.json"), encoding="utf-8") as file:
        report = json.load(file)
    assert report["decode"]["schedule"] == [12, 24]
    assert report["config"]["latents"]["tokens"] == 96


@pytest.mark.parametrize(
    "args",
    [
        ["decode", "--shape", "sphere", "--res", "32", "--base", "16"],
        ["decode", "--shape", "sphere", "--seed", "0", "--topk", "8", "--topn", "4"],
        ["decode", "--shape", "sphere", "--seed", "0", "--mode", "sparse"],
        ["decode", "--shape", "sphere", "--seed", "0", "--res", "0"],
        ["decode", "--shape", "sphere", "--seed", "0", "--eta", "2"],
        ["decode", "--shape", "sphere", "--seed", "0", "--eta", "0"],
        ["decode", "--shape", "sphere", "--seed", "0", "--base", "4"],
        ["decode", "--shape", "sphere", "--seed", "-1"],
        ["decode", "--shape", "sphere", "--seed", "0", "--topk", "0"],
        ["decode", "--shape", "sphere", "--seed", "0", "--tau", "0"],
        ["decode", "--shape", "cube:r=1", "--seed", "0"],
        ["decode", "--shape", "sphere:r", "--seed", "0"],
        ["decode", "--shape", "sphere", "--seed", "0", "--res", "16", "--base", "32"],
        ["bench", "--seeds", "1,two"],
        ["bench", "--seeds", ","],
        ["bench", "--seeds", "0", "--suite", "huge"],
        ["profile", "--res", "0", "--seed", "0"],
    ],
)
def test_usage_errors(runner, args):
    result = runner.invoke(cli, args)
    assert result.exit_code == 2


@pytest.mark.parametrize(
    "args",
    [
        ["decode", "--shape", "sphere"],
        ["bench", "--suite", "quick"],
        ["profile", "--res", "16", "--base", "8"],
        ["distill", "teacher"],
        ["distill", "gd"],
        ["distill", "cfd"],
        ["distill", "adv"],
        ["distill", "sample"],
        ["distill", "eval"],
    ],
)
def test_seed_is_required(runner, workdir, args):
    result = runner.invoke(cli, args + (["--workdir", workdir] if args[0] == "distill" else []))
    assert result.exit_code == 2
    assert "--seed" in result.output
    assert not os.path.exists(workdir)


def test_invalid_config_file_is_usage_error(runner, tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"decode": {"eta": 1.5}}))
    result = runner.invoke(cli, ["decode", "--shape", "sphere", "--seed", "0", "--config", str(config)])
    assert result.exit_code == 2
    assert "eta" in result.output

    config.write_text(json.dumps({"decoder": {}}))
    result = runner.invoke(cli, ["decode", "--shape", "sphere", "--seed", "0", "--config", str(config)])
    assert result.exit_code == 2
    assert "decoder" in result.output


def test_decode_failure(runner, tmp_path):
    # default subvolume selection asks for more tokens than the latents hold
    out = str(tmp_path / "x.obj")
    result = runner.invoke(
        cli, ["decode", "--out", out, "--shape", "sphere", "--mode", "hier+akvs"] + SMALL_DECODE
    )
    assert result.exit_code == 1
    assert "error" in result.output
    assert not os.path.exists(out)


def test_bench(mocker, runner, tmp_path):
    record = {
        "shape": "sphere:r=0.5",
        "mode": "hier",
        "seed": 0,
        "decode": {"total": 1000, "reduction": 0.5},
        "v_iou": 1.0,
        "s_iou": 1.0,
        "timings": {"median": 0.01},
    }
    bench = mocker.patch("main.bench_run", return_value=[record])
    out, csv_path = str(tmp_path / "bench.jsonl"), str(tmp_path / "bench.csv")
    result = runner.invoke(
        cli,
        ["bench", "--suite", "quick", "--seeds", "0,1", "--repeat", "1", "--out", out,
         "--csv", csv_path, "--no-progress"],
    )
    assert result.exit_code == 0, result.output
    suite, seeds, _, repeat = bench.call_args.args
    assert suite.target_res == 64
    assert seeds == [0, 1] and repeat == 1
    assert "1 records" in result.output
    with open(csv_path, encoding="utf-8") as file:
        assert file.readline().startswith("shape,mode,seed")


def test_bench_unknown_suite(runner, tmp_path):
    out = str(tmp_path / "b.jsonl")
    result = runner.invoke(cli, ["bench", "--suite", "huge", "--seeds", "0", "--out", out])
    assert result.exit_code == 2
    assert "huge" in result.output
    assert not os.path.exists(out)


def test_profile(runner):
    result = runner.invoke(
        cli,
        ["profile", "--res", "16", "--base", "8", "--tokens", "64", "--seed", "3", "--top", "5", "--no-memory"],
    )
    assert result.exit_code == 0, result.output
    assert "function calls" in result.output
    assert "peak memory" not in result.output


def test_distill_needs_teacher(runner, workdir):
    result = runner.invoke(cli, ["distill", "cfd", "--workdir", workdir, "--seed", "0"])
    assert result.exit_code == 1
    assert "teacher" in result.output


def test_distill_pipeline(runner, workdir, tiny_config):
    for stage in ("teacher", "gd", "cfd", "adv"):
        result = runner.invoke(
            cli, ["distill", stage, "--workdir", workdir, "--seed", "0", "--steps", "2", "--config", tiny_config]
        )
        assert result.exit_code == 0, result.output
        assert os.path.isfile(os.path.join(workdir, f"{stage}.ckpt"))

    result = runner.invoke(
        cli,
        ["distill", "sample", "--workdir", workdir, "--stage", "adv", "--nfe", "2", "-n", "16",
         "--seed", "4", "--config", tiny_config],
    )
    assert result.exit_code == 0, result.output
    samples = np.load(os.path.join(workdir, "samples_adv_nfe2_seed4.npy"))
    assert samples.shape == (16, 2)
    with open(os.path.join(workdir, "samples_adv_nfe2_seed4.json"), encoding="utf-8") as file:
        meta = json.load(file)
    assert meta["seed"] == 4 and meta["nfe"] == 2 and meta["count"] == 16
    assert meta["config"]["hidden"] == 8

    result = runner.invoke(
        cli,
        ["distill", "eval", "--workdir", workdir, "--nfe", "1", "-n", "16", "--seed", "0",
         "--config", tiny_config],
    )
    assert result.exit_code == 0, result.output
    scores = json.loads(result.output[result.output.index("{"):])
    assert set(scores) == {"teacher@50", "gd@1", "cfd@1", "adv@1"}


def test_distill_ablation_flags(runner, workdir, tiny_config):
    runner.invoke(
        cli, ["distill", "teacher", "--workdir", workdir, "--seed", "0", "--steps", "1", "--config", tiny_config]
    )
    result = runner.invoke(
        cli,
        ["distill", "cfd", "--workdir", workdir, "--seed", "0", "--steps", "1", "--no-gd-warmup",
         "--no-ema", "--no-phase1", "--loss", "l2", "--config", tiny_config],
    )
    assert result.exit_code == 0, result.output
    assert not os.path.exists(os.path.join(workdir, "gd.ckpt"))


def test_distill_seed_reaches_config(mocker, runner, workdir):
    run = mocker.patch("main.run_stage")
    result = runner.invoke(cli, ["distill", "teacher", "--workdir", workdir, "--seed", "7"])
    assert result.exit_code == 0, result.output
    stage, _, cfg, steps = run.call_args.args
    assert stage == "teacher"
    assert cfg.seed == 7
    assert steps is None
