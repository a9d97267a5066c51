import json
import logging
import os
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from dkd_workbench.models.models import AttackMetadata

logger = logging.getLogger(__name__)


def check_file_is_png(file: Union[str, os.PathLike]) -> bool:
    """Validate that a file is a png file

    Args:
        file (Union[str, os.PathLike]): The path for the file to check

    Returns:
        bool: The file is a valid png
    """
    try:
        with Image.open(str(file)) as im:
            return im.format == "PNG"
    except (UnidentifiedImageError, OSError):
        return False


def to_uint8(images: np.ndarray) -> np.ndarray:
    """Scale [0, 1] images to bytes, values outside the box are clipped"""
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def preview_grid(
    clean: np.ndarray,
    adversarial: np.ndarray,
    columns: int = 8,
    padding: int = 2,
) -> Image.Image:
    """Pair every clean image with its adversarial version in one picture

    Rows alternate between clean and adversarial images, ``columns`` samples
    per row pair.

    Args:
        clean (np.ndarray): Images (N, C, H, W) in [0, 1]
        adversarial (np.ndarray): Images of the same shape
        columns (int): Samples per row
        padding (int): Gap in pixels between tiles

    Returns:
        Image.Image: A grayscale or RGB image
    """
    if clean.shape != adversarial.shape:
        raise ValueError(f"clean {clean.shape} and adversarial {adversarial.shape} differ")
    if clean.ndim != 4 or clean.shape[1] not in (1, 3):
        raise ValueError(f"expected (N, 1|3, H, W) images, got {clean.shape}")
    n, channels, height, width = clean.shape
    columns = max(1, min(columns, n))
    row_pairs = -(-n // columns)
    grid = np.zeros(
        (2 * row_pairs * (height + padding) + padding, columns * (width + padding) + padding, channels),
        dtype=np.uint8,
    )
    for index in range(n):
        r, c = divmod(index, columns)
        x0 = padding + c * (width + padding)
        for offset, source in enumerate((clean, adversarial)):
            y0 = padding + (2 * r + offset) * (height + padding)
            grid[y0 : y0 + height, x0 : x0 + width] = to_uint8(source[index]).transpose(1, 2, 0)
    if channels == 1:
        return Image.fromarray(grid[:, :, 0], mode="L")
    return Image.fromarray(grid, mode="RGB")


def save_adversarial_batch(
    stem: Union[str, os.PathLike],
    adversarial: np.ndarray,
    metadata: AttackMetadata,
    clean: Optional[np.ndarray] = None,
    preview_samples: int = 32,
) -> Tuple[Path, Path, Optional[Path]]:
    """Persist an adversarial batch as .npy with a JSON sidecar

    Args:
        stem (Union[str, os.PathLike]): Output path without suffix
        adversarial (np.ndarray): The adversarial images
        metadata (AttackMetadata): Attack settings, source model and norms
        clean (Optional[np.ndarray]): Clean images, a PNG preview is written if given
        preview_samples (int): Samples shown in the preview

    Returns:
        Tuple[Path, Path, Optional[Path]]: The tensor, metadata and preview files
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    tensor_path = stem.with_suffix(".npy")
    meta_path = stem.with_suffix(".json")
    np.save(tensor_path, np.asarray(adversarial, dtype=np.float32))
    meta_path.write_text(metadata.model_dump_json(indent=2) + "\n")
    preview_path = None
    if clean is not None:
        preview_path = stem.with_suffix(".png")
        k = min(preview_samples, len(clean))
        preview_grid(clean[:k], adversarial[:k]).save(preview_path)
    logger.debug(f"Saved {len(adversarial)} adversarial samples to {tensor_path}")
    return tensor_path, meta_path, preview_path


def load_adversarial_batch(stem: Union[str, os.PathLike]) -> Tuple[np.ndarray, AttackMetadata]:
    """Read back a batch written by save_adversarial_batch"""
    stem = Path(stem)
    images = np.load(stem.with_suffix(".npy"))
    metadata = AttackMetadata.model_validate(json.loads(stem.with_suffix(".json").read_text()))
    if metadata.samples != len(images):
        raise ValueError(f"{stem}: metadata lists {metadata.samples} samples, tensor has {len(images)}")
    return images, metadata
