"""
Image Preprocessing Module for CLIPin Desk
Reads and writes 8-bit RGB PPM rasters with Pillow, and center-crops/resizes
file-based images to the model's input side.
"""

import logging
import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from core.errors import OutOfRangePixels
from core.numerics import DTYPE, Tensor

logger = logging.getLogger(__name__)


def center_crop_resize(image: Image.Image, side: int) -> Image.Image:
    """
    Center-crop to a square and resize to ``side`` x ``side``.

    Images already at the target size are returned unchanged.
    """
    width, height = image.size
    if width == side and height == side:
        return image
    crop = min(width, height)
    left = (width - crop) // 2
    top = (height - crop) // 2
    image = image.crop((left, top, left + crop, top + crop))
    if crop != side:
        image = image.resize((side, side), resample=Image.BILINEAR)
    return image


def load_image(image_path, side: int) -> Tensor:
    """
    Load an image file as a float tensor.

    Args:
        image_path (str): Path to the image (PPM expected)
        side (int): Model input side

    Returns:
        Tensor: [3, side, side] float64 in [0, 1]

    Raises:
        FileNotFoundError: If the image file doesn't exist
        ValueError: If the image cannot be decoded
    """
    try:
        if not os.path.exists(image_path):
            raise FileNotFoundError(f"Image file not found: {image_path}")
        with Image.open(image_path) as raw:
            image = center_crop_resize(raw.convert("RGB"), side)
            pixels = np.asarray(image, dtype=np.uint8)
        return torch.from_numpy(pixels.astype(np.float64) / 255.0).permute(2, 0, 1).contiguous().to(DTYPE)
    except FileNotFoundError as e:
        logger.error(f"File error: {e}")
        raise
    except OSError as e:
        logger.error(f"Unable to load image {image_path}: {e}")
        raise ValueError(f"Unable to load image: {image_path}") from e


def save_ppm(image: Tensor, output_path) -> Path:
    """
    Write a [3, H, W] tensor in [0, 1] as an 8-bit binary PPM.

    Returns:
        Path: The written path
    """
    if float(image.min()) < 0.0 or float(image.max()) > 1.0:
        raise OutOfRangePixels("pixels must lie in [0, 1] to be written")
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.rint(image.detach().permute(1, 2, 0).numpy() * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(output_path, format="PPM")
    return output_path
