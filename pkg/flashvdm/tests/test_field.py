"""
Analytic shapes, the vecset field and the decoder FLOPs model
"""

import numpy as np
import pytest

from utils.config import BASELINE_HEAD, EFFICIENT_HEAD, HeadConfig
from utils.field import (
    SamplingError,
    ShapeSpec,
    ToyVecsetLatents,
    activated_token_stats,
    analytic_sdf,
    attention_flops,
    attention_weights,
    build_surface_latents,
    default_trunc,
    eval_field,
    flops_breakdown,
    flops_per_query,
    flops_reduction,
    kept_mass,
    sdf_gradient,
)


@pytest.fixture
def make_two_tokens():
    def make(tau=0.01, trunc=0.5):
        # anchors on the x axis, planes facing +x
        return ToyVecsetLatents.from_anchors(
            positions=[[0.1, 0.0, 0.0], [0.2, 0.0, 0.0]],
            normals=[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            tau=tau,
            trunc=trunc,
        )

    return make


def test_analytic_sdf_examples():
    sphere = ShapeSpec.parse("sphere:r=0.5")
    assert analytic_sdf(sphere, [0.0, 0.0, 0.0]) == pytest.approx(-0.5)
    assert analytic_sdf(sphere, [1.0, 0.0, 0.0]) == pytest.approx(0.5)

    plate = ShapeSpec.parse("plate:h=0.01")
    assert plate.kind == "thin_plate"
    assert analytic_sdf(plate, [0.0, 0.0, 0.5]) == pytest.approx(0.49)


def test_analytic_sdf_is_vectorized():
    torus = ShapeSpec.parse("torus:R=0.5,r=0.15")
    points = np.array([[0.5, 0.0, 0.0], [0.0, 0.0, 0.0], [0.5, 0.0, 0.15]])
    values = analytic_sdf(torus, points)
    np.testing.assert_allclose(values, [-0.15, 0.35, 0.0], atol=1e-12)


def test_union2_is_min_of_members():
    union = ShapeSpec.parse("union2:r=0.35,d=0.25")
    # centers of the member spheres are inside
    assert analytic_sdf(union, [0.25, 0.0, 0.0]) == pytest.approx(-0.35)
    assert analytic_sdf(union, [-0.25, 0.0, 0.0]) == pytest.approx(-0.35)
    assert analytic_sdf(union, [0.0, 0.9, 0.0]) > 0


def test_shape_parse():
    box = ShapeSpec.parse("box:a=0.3,cz=0.1")
    assert box.params == {"hx": 0.3, "hy": 0.3, "hz": 0.3}
    assert box.center == (0.0, 0.0, 0.1)
    assert str(ShapeSpec.parse("sphere:r=0.5")) == "sphere:r=0.5"
    # defaults fill missing parameters
    assert ShapeSpec.parse("torus").params == {"R": 0.5, "r": 0.15}


@pytest.mark.parametrize(
    "text",
    [
        "cone:r=0.5",
        "sphere:radius=0.5",
        "sphere:r=-0.5",
        "sphere:r=0.99",
        "sphere:r=0.5,cx=0.5",
        "sphere:r=half",
        "sphere:r",
    ],
)
def test_shape_parse_rejects(text):
    with pytest.raises(ValueError) as exc_info:
        ShapeSpec.parse(text)
    assert isinstance(exc_info.value, ValueError)


def test_shape_factory(shape_spec):
    assert shape_spec.kind == "sphere"
    assert shape_spec.params == {"r": 0.5}


def test_surface_latents_on_sphere():
    shape = ShapeSpec.parse("sphere:r=0.5")
    latents = build_surface_latents(shape, 16, 7, 1e-3, 0.5)
    assert latents.M == 16
    radii = np.sqrt(np.sum(latents.positions**2, axis=-1))
    assert np.abs(radii - 0.5).max() <= 1e-9
    np.testing.assert_allclose(np.sum(latents.normals**2, axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(
        latents.offsets, -np.sum(latents.normals * latents.positions, axis=-1)
    )


def test_surface_latents_are_deterministic():
    shape = ShapeSpec.parse("sphere:r=0.5")
    first = build_surface_latents(shape, 16, 7, 1e-3, 0.5)
    second = build_surface_latents(shape, 16, 7, 1e-3, 0.5)
    assert np.array_equal(first.positions, second.positions)
    assert np.array_equal(first.normals, second.normals)
    assert np.array_equal(first.offsets, second.offsets)


def test_box_normals_are_axis_aligned():
    shape = ShapeSpec.parse("box")
    latents = build_surface_latents(shape, 4, 0, 1e-3, 0.5)
    for p, n in zip(latents.positions, latents.normals):
        np.testing.assert_allclose(np.sort(np.abs(n)), [0.0, 0.0, 1.0], atol=1e-6)
        np.testing.assert_allclose(n, sdf_gradient(shape, p), atol=1e-6)


def test_surface_latents_need_tokens():
    with pytest.raises(ValueError) as exc_info:
        build_surface_latents(ShapeSpec.parse("sphere"), 3, 0, 1e-3, 0.5)
    assert isinstance(exc_info.value, ValueError)


def test_sampling_exhausted(mocker):
    # a shell no candidate can fall into
    mocker.patch("utils.field.SHELL", 0.0)
    mocker.patch("utils.field.MAX_SAMPLING_BATCHES", 2)
    with pytest.raises(SamplingError) as exc_info:
        build_surface_latents(ShapeSpec.parse("sphere"), 8, 0, 1e-3, 0.5)
    assert "surface sampling exhausted" in str(exc_info.value)


def test_latents_are_read_only(sphere_latents):
    with pytest.raises(ValueError):
        sphere_latents.positions[0, 0] = 1.0


@pytest.mark.parametrize(
    "kwds",
    [
        {"normals": [[2.0, 0.0, 0.0]]},
        {"tau": 0.0},
        {"trunc": -1.0},
        {"offsets": [0.0, 1.0]},
    ],
)
def test_latents_invariants(kwds):
    values = {
        "positions": [[0.5, 0.0, 0.0]],
        "normals": [[1.0, 0.0, 0.0]],
        "offsets": [-0.5],
        "tau": 1e-3,
        "trunc": 0.5,
    }
    values.update(kwds)
    with pytest.raises(ValueError) as exc_info:
        ToyVecsetLatents(**values)
    assert isinstance(exc_info.value, ValueError)


def test_attention_weights_examples(make_two_tokens):
    latents = make_two_tokens(tau=0.01)
    weights = attention_weights(np.zeros(3), latents)
    np.testing.assert_allclose(weights, [0.9526, 0.0474], atol=1e-4)

    # equidistant tokens share the mass
    weights = attention_weights([0.15, 0.0, 0.0], latents)
    np.testing.assert_allclose(weights, [0.5, 0.5])

    # singleton selection
    np.testing.assert_allclose(attention_weights(np.zeros(3), latents, [1]), [1.0])


def test_attention_weights_properties(sphere_latents):
    rng = np.random.default_rng(0)
    points = rng.uniform(-1, 1, (64, 3))
    weights = attention_weights(points, sphere_latents)
    assert weights.shape == (64, sphere_latents.M)
    assert (weights >= 0).all()
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    # permuting the tokens permutes the weights
    order = rng.permutation(sphere_latents.M)
    permuted = ToyVecsetLatents(
        sphere_latents.positions[order],
        sphere_latents.normals[order],
        sphere_latents.offsets[order],
        sphere_latents.tau,
        sphere_latents.trunc,
    )
    np.testing.assert_allclose(attention_weights(points, permuted), weights[:, order])


def test_attention_weights_bad_selection(sphere_latents):
    with pytest.raises(ValueError) as exc_info:
        attention_weights(np.zeros(3), sphere_latents, [sphere_latents.M])
    assert isinstance(exc_info.value, ValueError)
    with pytest.raises(ValueError):
        attention_weights(np.zeros(3), sphere_latents, [])


@pytest.mark.parametrize("selection", [[3, 3], [0, 5, 1, 5]])
def test_duplicate_selection_rejected(sphere_latents, selection):
    # a repeated token would count its softmax mass twice
    with pytest.raises(ValueError) as exc_info:
        attention_weights(np.zeros(3), sphere_latents, selection)
    assert "unique" in str(exc_info.value)
    with pytest.raises(ValueError):
        eval_field(np.zeros((2, 3)), sphere_latents, selection)
    with pytest.raises(ValueError):
        eval_field(np.zeros((2, 3)), sphere_latents, {0: selection}, groups=np.zeros(2, dtype=np.int64))


def test_eval_field_at_anchors(sphere_latents):
    values = eval_field(sphere_latents.positions, sphere_latents)
    assert np.abs(values).max() <= 0.02


def test_eval_field_saturates(sphere_latents):
    # farther outside than the truncation distance
    far = np.array([[0.5 + sphere_latents.trunc + 0.05, 0.0, 0.0], [-1.05, 0.0, 0.0]])
    assert np.array_equal(eval_field(far, sphere_latents), [1.0, 1.0])


def test_eval_field_full_selection_is_bitwise(sphere_latents):
    rng = np.random.default_rng(1)
    points = rng.uniform(-1, 1, (500, 3))
    full = eval_field(points, sphere_latents)
    everything = np.arange(sphere_latents.M)
    assert np.array_equal(eval_field(points, sphere_latents, everything), full)

    groups = (points[:, 0] > 0).astype(np.int64)
    grouped = eval_field(
        points, sphere_latents, {0: everything, 1: everything}, groups=groups
    )
    assert np.array_equal(grouped, full)


def test_eval_field_chunking_and_workers(sphere_latents):
    rng = np.random.default_rng(2)
    points = rng.uniform(-1, 1, (1000, 3))
    reference = eval_field(points, sphere_latents)
    assert np.array_equal(eval_field(points, sphere_latents, chunk_size=37), reference)
    assert np.array_equal(
        eval_field(points, sphere_latents, chunk_size=100, workers=4), reference
    )


def test_eval_field_ragged_groups(make_two_tokens):
    latents = make_two_tokens(trunc=1.0)
    points = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    values = eval_field(points, latents, {0: [0], 1: [0, 1]}, groups=np.array([0, 1]))
    # single token: its own plane distance
    assert values[0] == pytest.approx(-0.1)
    # padding carries no weight
    assert values[1] == pytest.approx(-(0.9526 * 0.1 + 0.0474 * 0.2), abs=1e-4)


def test_eval_field_missing_group(sphere_latents):
    with pytest.raises(ValueError) as exc_info:
        eval_field(np.zeros((2, 3)), sphere_latents, {0: [0]}, groups=np.array([0, 3]))
    assert "group" in str(exc_info.value)


def test_eval_field_sign_matches_analytic(sphere_latents):
    shape = ShapeSpec.parse("sphere:r=0.5")
    rng = np.random.default_rng(3)
    points = rng.uniform(-0.95, 0.95, (4000, 3))
    distance = analytic_sdf(shape, points)
    far = np.abs(distance) >= 2 * np.sqrt(sphere_latents.tau)
    agree = np.sign(eval_field(points[far], sphere_latents)) == np.sign(distance[far])
    assert agree.mean() >= 0.999


def test_kept_mass(sphere_latents):
    points = np.array([[0.5, 0.0, 0.0]])
    everything = np.arange(sphere_latents.M)
    assert kept_mass(points, sphere_latents, everything)[0] == pytest.approx(1.0)
    nearest = [int(np.argmin(np.sum((sphere_latents.positions - points) ** 2, axis=-1)))]
    assert 0.0 < kept_mass(points, sphere_latents, nearest)[0] < 1.0


def test_activated_token_stats():
    # one shared anchor: every token weighs 1/M
    latents = ToyVecsetLatents.from_anchors(
        np.tile([0.5, 0.0, 0.0], (8, 1)), np.tile([1.0, 0.0, 0.0], (8, 1)), 1e-3, 0.5
    )
    stats = activated_token_stats(np.zeros((5, 3)), latents, 1 / 8 - 1e-6)
    assert (stats.counts == 8).all()
    assert stats.histogram.sum() == 5
    assert stats.mean_count == 8.0


def test_activated_token_stats_concentrates(sphere_latents):
    shape = ShapeSpec.parse("sphere:r=0.5")
    sharp = ToyVecsetLatents(
        sphere_latents.positions,
        sphere_latents.normals,
        sphere_latents.offsets,
        1e-8,
        sphere_latents.trunc,
    )
    rng = np.random.default_rng(4)
    points = rng.uniform(-0.9, 0.9, (100, 3))
    points = points[np.abs(analytic_sdf(shape, points)) < 0.2]
    regions = (points[:, 2] > 0).astype(np.int64)
    stats = activated_token_stats(points, sharp, 0.5, regions=regions)
    assert (stats.counts == 1).all()
    assert set(stats.regions) <= {0, 1}
    assert all(count >= 1 for count in stats.region_counts().values())
    for label, tokens in stats.regions.items():
        assert 1 <= len(tokens) <= (regions == label).sum()


def test_activated_token_stats_epsilon(sphere_latents):
    with pytest.raises(ValueError) as exc_info:
        activated_token_stats(np.zeros((1, 3)), sphere_latents, 1.0)
    assert isinstance(exc_info.value, ValueError)


def test_flops_presets():
    assert flops_per_query(BASELINE_HEAD) == 31_582_208
    assert flops_per_query(EFFICIENT_HEAD) == 7_919_104
    assert flops_reduction(BASELINE_HEAD, EFFICIENT_HEAD) == pytest.approx(0.7493, abs=1e-4)
    assert flops_reduction(BASELINE_HEAD, EFFICIENT_HEAD) >= 0.70


def test_flops_terms():
    cfg = HeadConfig(m_kv=3072)
    half = HeadConfig(m_kv=1536)
    assert flops_breakdown(half)["attention"] * 2 == flops_breakdown(cfg)["attention"]
    assert attention_flops(cfg, 1536) == attention_flops(half)
    assert flops_breakdown(HeadConfig(num_layernorms=0))["layernorm"] == 0


@pytest.mark.parametrize(
    "knob, low, high",
    [
        ("width", 256, 512),
        ("mlp_ratio", 1.0, 2.0),
        ("m_kv", 512, 1024),
        ("num_layernorms", 1, 2),
    ],
)
def test_flops_monotone(knob, low, high):
    assert flops_per_query(HeadConfig(**{knob: low})) < flops_per_query(
        HeadConfig(**{knob: high})
    )


def test_default_trunc():
    assert default_trunc(64) == pytest.approx(0.125)
