"""Tests for image and text augmentation."""

import numpy as np
import pytest
import torch

from config.config import MASK_TOKEN_ID, PAD_TOKEN_ID, AugmentConfig
from core.augment import augment_image, augment_image_view, augment_text
from core.errors import OutOfRangePixels, TokenOutOfRange
from core.numerics import DTYPE, Rng


@pytest.fixture
def image():
    return torch.from_numpy(Rng(1).random((3, 4, 4))).to(DTYPE)


@pytest.fixture
def tokens():
    return torch.tensor([5, 9, 12, 7, 0, 0, 0, 0], dtype=torch.long)


class TestImageAugment:
    def test_identity_config_is_exact(self, image):
        v1, v2 = augment_image(image, AugmentConfig.identity(), Rng(0))
        assert torch.equal(v1, image) and torch.equal(v2, image)

    def test_flip_only_mirrors(self, image):
        cfg = AugmentConfig(flip_prob=1.0, jitter_strength=0.0)
        v1, v2 = augment_image(image, cfg, Rng(0))
        assert torch.equal(v1, image.flip(-1))
        assert torch.equal(v1.flip(-1), image)
        assert torch.equal(v2, v1)

    def test_jitter_replays_from_stream(self, image):
        cfg = AugmentConfig(flip_prob=0.0, jitter_strength=0.1)
        rng = Rng(4)
        v1, _ = augment_image(image, cfg, rng)
        replay = rng.child("view1")
        replay.random()
        gains = torch.from_numpy(replay.uniform(0.9, 1.1, size=3)).view(3, 1, 1)
        assert torch.equal(v1, (image * gains).clamp(0.0, 1.0))
        assert float(gains.min()) >= 0.9 and float(gains.max()) <= 1.1

    def test_views_swap_with_streams(self, image):
        cfg = AugmentConfig()
        rng = Rng(8)
        v1, v2 = augment_image(image, cfg, rng)
        assert torch.equal(augment_image_view(image, cfg, rng.child("view1")), v1)
        assert torch.equal(augment_image_view(image, cfg, rng.child("view2")), v2)

    def test_shape_and_range_preserved(self, image):
        v1, v2 = augment_image(image, AugmentConfig(jitter_strength=0.5), Rng(3))
        for v in (v1, v2):
            assert v.shape == image.shape
            assert float(v.min()) >= 0.0 and float(v.max()) <= 1.0

    def test_out_of_range_pixels(self, image):
        with pytest.raises(OutOfRangePixels):
            augment_image(image + 1.0, AugmentConfig(), Rng(0))


class TestTextAugment:
    def test_zero_drop_is_identity(self, tokens):
        v1, v2 = augment_text(tokens, AugmentConfig(token_drop_prob=0.0), Rng(0))
        assert torch.equal(v1, tokens) and torch.equal(v2, tokens)

    def test_full_drop_masks_everything_but_pads(self, tokens):
        v1, v2 = augment_text(tokens, AugmentConfig(token_drop_prob=1.0), Rng(0))
        expected = torch.tensor([MASK_TOKEN_ID] * 4 + [PAD_TOKEN_ID] * 4, dtype=torch.long)
        assert torch.equal(v1, expected) and torch.equal(v2, expected)

    def test_mask_rate(self):
        seq = torch.arange(2, 102, dtype=torch.long)
        cfg = AugmentConfig(token_drop_prob=0.1)
        masked = [int((augment_text(seq, cfg, Rng(seed))[0] == MASK_TOKEN_ID).sum()) for seed in range(1000)]
        assert abs(np.mean(masked) / 100 - 0.1) <= 0.02

    def test_pad_structure_preserved(self, tokens):
        v1, _ = augment_text(tokens, AugmentConfig(token_drop_prob=0.5), Rng(2))
        assert torch.equal(v1 == PAD_TOKEN_ID, tokens == PAD_TOKEN_ID)

    def test_token_out_of_range(self, tokens):
        with pytest.raises(TokenOutOfRange):
            augment_text(tokens, AugmentConfig(), Rng(0), vocab_size=10)
