"""
IoU metrics, the timing decorator, run reports and the benchmark
harness on a small custom suite
"""

import io
import json

import numpy as np
import pytest

from utils.config import AkvsConfig, DecodeConfig
from utils.hierdec import gen_grid_points
from utils.metrics import (
    MODES,
    REPORT_SCHEMA,
    SUMMARY_FIELDS,
    BenchError,
    RunReport,
    Suite,
    bench_run,
    decode,
    format_summary,
    get_suite,
    sign_agreement,
    surface_iou,
    timed,
    volume_iou,
    write_csv_summary,
)


@pytest.fixture
def tiny_suite():
    return Suite(
        shapes=("sphere:r=0.5",),
        target_res=32,
        base_res=16,
        tokens=128,
        akvs=AkvsConfig(r=4, K=32, N=8, pack_batch=512),
    )


@pytest.fixture
def make_sphere_sdf():
    def _make_sphere_sdf(radius, res=32):
        points = gen_grid_points(res)
        return (np.linalg.norm(points, axis=1) - radius).reshape((res,) * 3, order="F")

    return _make_sphere_sdf


def test_volume_iou_examples():
    a = np.ones((4, 4, 4), dtype=bool)
    b = a.copy()
    b[2:] = False
    assert volume_iou(a, a) == 1.0
    assert volume_iou(a, b) == 0.5
    assert volume_iou(~a, ~a) == 1.0
    assert volume_iou(b, ~b) == 0.0
    with pytest.raises(ValueError) as exc_info:
        volume_iou(a, a[1:])
    assert isinstance(exc_info.value, ValueError)


def test_surface_iou(make_sphere_sdf):
    sphere = make_sphere_sdf(0.5)
    assert surface_iou(sphere, sphere) == 1.0
    shrunk = surface_iou(sphere, make_sphere_sdf(0.45))
    assert 0.0 < shrunk < 1.0
    # agreeing interior voxels fall outside the band
    assert shrunk < volume_iou(sphere <= 0, make_sphere_sdf(0.45) <= 0)


def test_surface_iou_edge_cases():
    far = np.full((8, 8, 8), 5.0)
    assert surface_iou(far, far) == 1.0
    with pytest.raises(ValueError):
        surface_iou(far, far, band_voxels=0.5)
    with pytest.raises(ValueError):
        surface_iou(far, far[:4])


def test_sign_agreement(make_sphere_sdf):
    sphere = make_sphere_sdf(0.5)
    assert sign_agreement(sphere, sphere) == 1.0
    assert sign_agreement(sphere, -sphere) < 0.01


def test_timed(mocker):
    stub = mocker.Mock(side_effect=[1, 2, 3])
    stub.__name__ = "stub"
    timing = timed(repeat=3)(stub)("volume")
    assert timing.result == 3
    assert len(timing.runs) == 3
    assert all(t >= 0 for t in timing.runs)
    assert timing.median == sorted(timing.runs)[1]
    stub.assert_called_with("volume")

    with pytest.raises(ValueError) as exc_info:
        timed(0)
    assert isinstance(exc_info.value, ValueError)


@pytest.mark.parametrize(
    "kwds",
    [{"v_iou": 1.5}, {"s_iou": -0.1}, {"timings": {"runs": [0.1, -1.0]}}],
)
def test_run_report_rejects(kwds):
    with pytest.raises(ValueError) as exc_info:
        RunReport("sphere", "hier", 0, {}, {}, **kwds)
    assert isinstance(exc_info.value, ValueError)


def test_decode_modes(sphere_latents):
    cfg = DecodeConfig(target_res=32, base_res=16, akvs=AkvsConfig(r=4, K=64))
    dense, dense_report, known = decode(sphere_latents, "dense", cfg)
    assert known is None
    assert dense_report.reduction == 0.0

    for mode in ("hier", "hier+akvs"):
        volume, report, known = decode(sphere_latents, mode, cfg)
        assert volume.shape == dense.shape
        assert known.shape == dense.shape
        assert known.sum() == report.level_queries[-1]

    with pytest.raises(ValueError) as exc_info:
        decode(sphere_latents, "sparse", cfg)
    assert "sparse" in str(exc_info.value)


def test_get_suite():
    assert get_suite("quick").target_res == 64
    assert get_suite("default").shapes[0] == "sphere:r=0.5"
    with pytest.raises(ValueError):
        get_suite("everything")


def test_bench_run(tiny_suite):
    sink = io.StringIO()
    records = bench_run(tiny_suite, [0], sink, repeat=1)

    assert [r["mode"] for r in records] == list(MODES)
    lines = sink.getvalue().splitlines()
    assert len(lines) == 3
    assert [json.loads(line)["mode"] for line in lines] == list(MODES)

    dense, hier, akvs = records
    assert dense["schema"] == REPORT_SCHEMA
    assert dense["decode"]["reduction"] == 0.0
    assert dense["v_iou"] == 1.0 and dense["s_iou"] == 1.0
    assert hier["decode"]["total"] < 32**3
    assert hier["v_iou"] >= 0.99
    assert akvs["flops"]["attention_reduction"] == pytest.approx(1 - 32 / 128)
    assert akvs["config"]["decode"]["akvs"]["K"] == 32
    assert all(len(r["timings"]["runs"]) == 1 for r in records)


def test_bench_run_without_dense(tiny_suite):
    records = bench_run(tiny_suite, [1], repeat=1, modes=("hier",))
    assert len(records) == 1
    assert records[0]["sign_agreement"] >= 0.99


def test_bench_write_failure(mocker, tiny_suite):
    sink = mocker.MagicMock()
    sink.write.side_effect = OSError("no space left on device")
    with pytest.raises(BenchError) as exc_info:
        bench_run(tiny_suite, [0], sink, repeat=1, modes=("dense",))
    assert "no space left" in str(exc_info.value)
    assert sink.flush.called


def test_summaries(tiny_suite):
    records = bench_run(tiny_suite, [0], repeat=1, modes=("dense", "hier"))

    table = format_summary(records)
    assert len(table.splitlines()) == 3
    assert "V-IoU" in table.splitlines()[0]

    buffer = io.StringIO()
    write_csv_summary(records, buffer)
    rows = buffer.getvalue().splitlines()
    assert rows[0] == ",".join(SUMMARY_FIELDS)
    assert rows[1].startswith("sphere")
