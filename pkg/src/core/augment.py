"""
Augmentation Module for CLIPin Desk
Produces two independently augmented, semantically consistent views per
modality: flip + per-channel gain jitter for images, token masking for text.
"""

import logging
from typing import Optional, Tuple

import torch

from config.config import PAD_TOKEN_ID, AugmentConfig
from core.errors import OutOfRangePixels, TokenOutOfRange
from core.numerics import DTYPE, Rng, Tensor

logger = logging.getLogger(__name__)

VIEW_STREAMS = ("view1", "view2")


def augment_image_view(img: Tensor, cfg: AugmentConfig, rng: Rng) -> Tensor:
    """
    One augmented image view: horizontal flip, then per-channel gain clamped to [0, 1].

    The stream is consumed identically whatever the config: one uniform for the
    flip decision, then one gain per channel.
    """
    flip_draw = rng.random()
    s = cfg.jitter_strength
    gains = rng.uniform(1.0 - s, 1.0 + s, size=img.shape[0])
    out = img.flip(-1) if flip_draw < cfg.flip_prob else img.clone()
    if s > 0:
        out = (out * torch.as_tensor(gains, dtype=DTYPE).view(-1, 1, 1)).clamp(0.0, 1.0)
    return out


def augment_image(img: Tensor, cfg: AugmentConfig, rng: Rng) -> Tuple[Tensor, Tensor]:
    """
    Two independent augmented views of one image.

    Args:
        img (Tensor): [3, H, W] with pixels in [0, 1]
        cfg (AugmentConfig): Flip probability and jitter strength
        rng (Rng): Per-sample stream; views use its "view1"/"view2" sub-streams

    Returns:
        tuple: (view 1, view 2), same shape as the input

    Raises:
        OutOfRangePixels: If any pixel lies outside [0, 1]
    """
    if img.numel() and (float(img.min()) < 0.0 or float(img.max()) > 1.0):
        raise OutOfRangePixels(f"pixels must lie in [0, 1], got range [{float(img.min())}, {float(img.max())}]")
    return tuple(augment_image_view(img, cfg, rng.child(name)) for name in VIEW_STREAMS)


def augment_text_view(tokens: torch.Tensor, cfg: AugmentConfig, rng: Rng) -> torch.Tensor:
    """One text view: every non-pad token becomes ``mask_token_id`` with probability ``token_drop_prob``."""
    drop = torch.from_numpy(rng.random(tokens.shape[0]) < cfg.token_drop_prob)
    replace = drop & (tokens != PAD_TOKEN_ID)
    return torch.where(replace, torch.full_like(tokens, cfg.mask_token_id), tokens)


def augment_text(tokens: torch.Tensor, cfg: AugmentConfig, rng: Rng,
                 vocab_size: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Two independent masked views of one token sequence; length and pads preserved.

    Raises:
        TokenOutOfRange: If an id is negative or >= vocab_size
    """
    if tokens.numel():
        if int(tokens.min()) < 0 or (vocab_size is not None and int(tokens.max()) >= vocab_size):
            raise TokenOutOfRange(f"token ids must lie in [0, {vocab_size})")
    return tuple(augment_text_view(tokens, cfg, rng.child(name)) for name in VIEW_STREAMS)
