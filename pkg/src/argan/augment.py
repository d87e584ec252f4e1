"""Classical augmentation pipeline: random rotation, affine/perspective
distortion and flips, followed by grid-based elastic deformation, with the
multiplicative output-count law

    n_outputs = (n_rot + n_dist + n_flip_realized + n_originals) * elastic_variants

where flips are stochastic (each attempt applies with ``flip_prob``) and are
counted as realized.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from PIL import Image

from .data import ImageRecord


@dataclass
class AugConfig:
    rot_per_image: int = 2
    angle_range: tuple[float, float] = (0.0, 180.0)
    dist_per_image: int = 1
    flip_attempts_per_image: int = 2
    flip_prob: float = 0.5
    elastic_variants: int = 1
    elastic_grid: int = 16
    shear_max_deg: float = 15.0
    perspective_frac: float = 0.05
    elastic_jitter_frac: float = 0.25
    out_side: int = 256
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.elastic_variants < 1:
            raise ValueError("elastic_variants must be positive")
        if self.elastic_grid < 2:
            raise ValueError("elastic_grid must be >= 2")
        lo, hi = self.angle_range
        if not (0.0 <= lo <= hi <= 180.0):
            raise ValueError("angle_range must lie within [0, 180]")
        if min(self.rot_per_image, self.dist_per_image, self.flip_attempts_per_image) < 0:
            raise ValueError("per-image counts must be non-negative")


def rotate(image: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the center, bicubic resampling, reflect-padded."""
    if not (0.0 <= angle <= 180.0):
        raise ValueError("angle must lie in [0, 180]")
    h, w = image.shape[:2]
    m = cv2.getRotationMatrix2D((w / 2.0 - 0.5, h / 2.0 - 0.5), angle, 1.0)
    return cv2.warpAffine(
        image, m, (w, h), flags=cv2.INTER_CUBIC, borderMode=cv2.BORDER_REFLECT
    )


def distort(
    image: np.ndarray,
    rng: np.random.Generator,
    shear_max_deg: float = 15.0,
    perspective_frac: float = 0.05,
) -> np.ndarray:
    """One random shear + perspective-jitter warp; identity at zero magnitude."""
    h, w = image.shape[:2]
    shear = np.deg2rad(rng.uniform(-shear_max_deg, shear_max_deg))
    src = np.float32([[0, 0], [w, 0], [w, h], [0, h]])
    jitter = rng.uniform(-perspective_frac, perspective_frac, size=(4, 2)).astype(np.float32)
    dst = src + jitter * np.float32([w, h])
    dst[:, 0] += np.tan(shear) * (dst[:, 1] - h / 2.0)
    if shear_max_deg == 0.0 and perspective_frac == 0.0:
        return image.copy()
    m = cv2.getPerspectiveTransform(src, dst)
    return cv2.warpPerspective(
        image, m, (w, h), flags=cv2.INTER_CUBIC, borderMode=cv2.BORDER_REFLECT
    )


def flip(
    image: np.ndarray, axis: str, rng: np.random.Generator, prob: float = 0.5
) -> tuple[np.ndarray, bool]:
    """Flip up-down or left-right with the given probability."""
    if axis not in ("ud", "lr"):
        raise ValueError(f"unknown flip axis {axis!r}")
    if not (0.0 <= prob <= 1.0):
        raise ValueError("prob must lie in [0, 1]")
    applied = rng.random() < prob
    if not applied:
        return image.copy(), False
    flipped = np.flipud(image) if axis == "ud" else np.fliplr(image)
    return np.ascontiguousarray(flipped), True


def elastic(
    image: np.ndarray,
    grid: int,
    rng: np.random.Generator,
    jitter_frac: float = 0.25,
) -> np.ndarray:
    """Grid-cell elastic deformation: corner offsets up to ``jitter_frac`` of
    the cell size, smoothly upsampled into a dense remap field."""
    if grid < 2:
        raise ValueError("grid must be >= 2")
    h, w = image.shape[:2]
    cell_h, cell_w = h / grid, w / grid
    max_dy, max_dx = jitter_frac * cell_h, jitter_frac * cell_w
    coarse_dx = rng.uniform(-max_dx, max_dx, size=(grid + 1, grid + 1)).astype(np.float32)
    coarse_dy = rng.uniform(-max_dy, max_dy, size=(grid + 1, grid + 1)).astype(np.float32)
    dx = cv2.resize(coarse_dx, (w, h), interpolation=cv2.INTER_CUBIC)
    dy = cv2.resize(coarse_dy, (w, h), interpolation=cv2.INTER_CUBIC)
    if jitter_frac == 0.0:
        return image.copy()
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    return cv2.remap(
        image,
        xs + dx,
        ys + dy,
        interpolation=cv2.INTER_CUBIC,
        borderMode=cv2.BORDER_REFLECT,
    )


def displacement_field(
    grid: int, side: int, rng: np.random.Generator, jitter_frac: float = 0.25
) -> np.ndarray:
    """Dense (h, w, 2) displacement field matching what ``elastic`` applies;
    used as an independent oracle on deformation magnitude."""
    cell = side / grid
    mx = jitter_frac * cell
    coarse = rng.uniform(-mx, mx, size=(2, grid + 1, grid + 1)).astype(np.float32)
    dx = cv2.resize(coarse[0], (side, side), interpolation=cv2.INTER_CUBIC)
    dy = cv2.resize(coarse[1], (side, side), interpolation=cv2.INTER_CUBIC)
    return np.stack([dx, dy], axis=-1)


def _load_uint8(path: str) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.uint8)


def _record_rng(config: AugConfig, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, index]))


def classic_augment(
    records: Sequence[ImageRecord], config: AugConfig, out_dir
) -> list[ImageRecord]:
    """Run the full pipeline over all records; outputs are 256x256 PNGs (or
    ``config.out_side``) named ``<stem>__<chain>__<k>.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_records: list[ImageRecord] = []
    for idx, rec in enumerate(records):
        rng = _record_rng(config, idx)
        image = _load_uint8(rec.path)
        stage: list[tuple[str, np.ndarray]] = [("orig", image)]
        lo, hi = config.angle_range
        for k in range(config.rot_per_image):
            angle = float(rng.uniform(lo, hi))
            stage.append((f"rot{k}", rotate(image, angle)))
        for k in range(config.dist_per_image):
            stage.append(
                (f"dist{k}", distort(image, rng, config.shear_max_deg, config.perspective_frac))
            )
        for k in range(config.flip_attempts_per_image):
            axis = "ud" if k % 2 == 0 else "lr"
            flipped, applied = flip(image, axis, rng, config.flip_prob)
            if applied:
                stage.append((f"flip{axis}{k}", flipped))
        stem = Path(rec.path).stem
        for chain, img in stage:
            for e in range(config.elastic_variants):
                warped = elastic(img, config.elastic_grid, rng, config.elastic_jitter_frac)
                if warped.shape[:2] != (config.out_side, config.out_side):
                    warped = cv2.resize(
                        warped, (config.out_side, config.out_side), interpolation=cv2.INTER_CUBIC
                    )
                path = out_dir / f"{stem}__{chain}__e{e}.png"
                Image.fromarray(warped).save(path)
                out_records.append(
                    ImageRecord(
                        str(path),
                        rec.class_label,
                        domain=rec.domain,
                        split=rec.split,
                        origin="classic_aug",
                    )
                )
    return out_records


def expected_output_count(
    n_inputs: int, realized_flips: int, config: AugConfig
) -> int:
    """The count law with flips taken as realized."""
    base = n_inputs * (1 + config.rot_per_image + config.dist_per_image) + realized_flips
    return base * config.elastic_variants
