"""Shared fixtures: tiny models, batches and configs."""

import dataclasses

import pytest
import torch

from config.config import AugmentConfig, DimsConfig, LatentSpec, TrainConfig
from core.data import PairBatch
from core.model import init_model
from core.numerics import DTYPE, Rng


@pytest.fixture
def tiny_dims():
    return DimsConfig.from_preset("tiny")


@pytest.fixture
def tiny_state(tiny_dims):
    return init_model(tiny_dims, Rng(0))


@pytest.fixture
def unshared_state(tiny_dims):
    return init_model(tiny_dims, Rng(0), share_pre_projectors=False)


def random_batch(dims, batch_size=4, seed=0):
    rng = Rng(seed).child("test-batch")
    shape = (batch_size, dims.channels, dims.image_side, dims.image_side)
    tokens = (batch_size, dims.max_text_len)
    return PairBatch(
        images_v1=torch.from_numpy(rng.child("i1").random(shape)).to(DTYPE),
        images_v2=torch.from_numpy(rng.child("i2").random(shape)).to(DTYPE),
        tokens_v1=torch.from_numpy(rng.child("t1").integers(2, dims.vocab_size, size=tokens)),
        tokens_v2=torch.from_numpy(rng.child("t2").integers(2, dims.vocab_size, size=tokens)),
        labels=torch.zeros(batch_size, 1, dtype=torch.bool),
        ids=[f"b{i}" for i in range(batch_size)],
    )


@pytest.fixture
def tiny_batch(tiny_dims):
    return random_batch(tiny_dims)


@pytest.fixture
def tiny_train_cfg():
    """Small, fast training config on the tiny preset."""
    return TrainConfig(
        dims="tiny",
        batch_size=8,
        n_samples=64,
        total_steps=20,
        lr=1e-3,
        warmup_iters=5,
        checkpoint_every=10,
        latent=LatentSpec(k=8, classes=4),
        augment=AugmentConfig(),
    ).validate()


@pytest.fixture
def with_steps():
    def _with(cfg, **changes):
        return dataclasses.replace(cfg, **changes).validate()
    return _with
