"""
Shared fixtures: factories for shapes and decode configs, small
surface latents and a throwaway output directory
"""

import factory
import pytest
from pytest_factoryboy import register

from utils.config import AkvsConfig, DecodeConfig, DistillConfig
from utils.field import ShapeSpec, build_surface_latents, default_trunc


class ShapeSpecFactory(factory.Factory):
    class Meta:
        model = ShapeSpec

    kind = "sphere"
    params = factory.LazyFunction(lambda: {"r": 0.5})
    center = (0.0, 0.0, 0.0)


class DecodeConfigFactory(factory.Factory):
    class Meta:
        model = DecodeConfig

    target_res = 64
    base_res = 16
    chunk_size = 1024
    seed = 0


register(ShapeSpecFactory)
register(DecodeConfigFactory)


@pytest.fixture
def make_latents():
    # desk-scale vecsets, cached per argument set within a test
    cache = {}

    def make(text="sphere:r=0.5", tokens=256, seed=0, tau=1e-3, base_res=16):
        key = (text, tokens, seed, tau, base_res)
        if key not in cache:
            cache[key] = build_surface_latents(
                ShapeSpec.parse(text), tokens, seed, tau, default_trunc(base_res)
            )
        return cache[key]

    return make


@pytest.fixture
def sphere_latents(make_latents):
    return make_latents()


@pytest.fixture
def small_akvs():
    return AkvsConfig(r=4, n_probe=8, K=64, N=16, pack_batch=1024)


@pytest.fixture
def tiny_distill():
    # a few steps of a narrow model: enough to exercise every stage
    return DistillConfig(
        hidden=16,
        layers=3,
        freqs=4,
        batch_size=32,
        num_timesteps=20,
        phases=2,
        k_skip=3,
        teacher_steps=3,
        gd_steps=2,
        cfd_steps=2,
        finetune_steps=2,
        adv_steps=2,
        disc_hidden=8,
        log_every=1,
    )


@pytest.fixture
def workdir(tmp_path):
    return str(tmp_path / "run")
