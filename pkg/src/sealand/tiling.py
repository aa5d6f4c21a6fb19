"""Sliding-window prediction over large images.

Plans a regular tile grid with mirror-padded borders, runs the model
per tile, and composites overlapping softmax outputs with center-peaked
Gaussian weights. Accumulation happens in 64-bit so a degenerate
single-tile plan reproduces direct inference bitwise after the final
32-bit cast.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import forward as model_forward
from .tensor import Tensor

__all__ = [
    "TilePlan",
    "plan_tiles",
    "mirror_pad",
    "gaussian_weights",
    "predict_image",
    "binarize",
]

THREADS_ENV = "SEALAND_THREADS"


@dataclass
class TilePlan:
    tile: int
    stride: int
    height: int
    width: int
    pad_top: int
    pad_bottom: int
    pad_left: int
    pad_right: int
    origins: list  # (row, col) into the padded image, bottom-left first

    @property
    def padded_extent(self):
        return (
            self.height + self.pad_top + self.pad_bottom,
            self.width + self.pad_left + self.pad_right,
        )


def _axis_plan(extent, tile, stride):
    """Padded length and origin count so tiles step by stride and cover all."""
    if extent <= tile:
        return tile, 1
    steps = math.ceil((extent - tile) / stride)
    return tile + steps * stride, steps + 1


def plan_tiles(height, width, tile, stride) -> TilePlan:
    if not (tile >= stride >= 1):
        raise ValueError(f"need tile >= stride >= 1, got tile={tile} stride={stride}")
    ph, nrows = _axis_plan(height, tile, stride)
    pw, ncols = _axis_plan(width, tile, stride)
    pad_h, pad_w = ph - height, pw - width
    top, left = pad_h // 2, pad_w // 2
    origins = [
        (r * stride, c * stride)
        for r in reversed(range(nrows))
        for c in range(ncols)
    ]
    return TilePlan(
        tile, stride, height, width,
        top, pad_h - top, left, pad_w - left, origins,
    )


def mirror_pad(image: np.ndarray, plan: TilePlan) -> np.ndarray:
    """Reflect the image borders (edge pixel not repeated) per the plan.

    Accepts plane layout (..., H, W) or channels-last (H, W, C); the
    spatial axes are whichever pair matches the plan's extents.
    """
    extent = (plan.height, plan.width)
    if image.shape[-2:] == extent:
        axes = (image.ndim - 2, image.ndim - 1)
    elif image.ndim == 3 and image.shape[:2] == extent:
        axes = (0, 1)
    else:
        raise ValueError(
            f"image extent {image.shape} does not match plan {extent}"
        )
    for pad, extent in (
        (plan.pad_top, plan.height),
        (plan.pad_bottom, plan.height),
        (plan.pad_left, plan.width),
        (plan.pad_right, plan.width),
    ):
        if pad >= extent:
            raise ValueError(
                f"reflection needs padding < extent, got pad {pad} for extent {extent}"
            )
    widths = [(0, 0)] * image.ndim
    widths[axes[0]] = (plan.pad_top, plan.pad_bottom)
    widths[axes[1]] = (plan.pad_left, plan.pad_right)
    return np.pad(image, widths, mode="reflect")


def gaussian_weights(tile: int, sigma=None) -> np.ndarray:
    """Center-peaked weight map w(p) = exp(-|p - c|^2 / (2 sigma^2))."""
    if sigma is None:
        sigma = tile / 6.0
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    center = (tile - 1) / 2.0
    coords = np.arange(tile, dtype=np.float64) - center
    sq = coords[:, None] ** 2 + coords[None, :] ** 2
    return np.exp(-sq / (2.0 * sigma * sigma))


def _as_planes(image) -> np.ndarray:
    """Accept (H, W, 3) rasters or (3, H, W) planes; emit float32 planes in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected a 3-axis image, got shape {image.shape}")
    if image.shape[2] == 3 and image.shape[0] != 3:
        image = np.transpose(image, (2, 0, 1))
    if image.shape[0] != 3:
        raise ValueError(f"expected 3 channels, got shape {image.shape}")
    if image.dtype == np.uint8:
        return image.astype(np.float32) / np.float32(255.0)
    return image.astype(np.float32, copy=False)


def _thread_count(threads) -> int:
    if threads is None:
        threads = os.environ.get(THREADS_ENV, "1")
    n = int(threads)
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    return n


def predict_image(model, image, tile=640, stride=None, sigma=None, threads=None):
    """Blend per-tile softmax outputs into one (2, H, W) probability map.

    Each pixel's distribution is the Gaussian-weighted mean of every
    tile that covers it. With several workers each accumulates its own
    buffer over a fixed slice of the tile sequence and the buffers merge
    in slice order, so reruns with the same thread count match bitwise.
    """
    depth = model.config.depth
    if tile % (2 ** depth) != 0:
        raise ValueError(f"tile {tile} not divisible by 2^{depth}")
    if stride is None:
        stride = max(tile // 2, 1)
    planes = _as_planes(image)
    h, w = planes.shape[1], planes.shape[2]
    plan = plan_tiles(h, w, tile, stride)
    padded = mirror_pad(planes, plan)
    weights = gaussian_weights(tile, sigma)
    nthreads = _thread_count(threads)

    def run_slice(origins):
        acc = np.zeros((2,) + plan.padded_extent, dtype=np.float64)
        wsum = np.zeros(plan.padded_extent, dtype=np.float64)
        for r, c in origins:
            patch = padded[:, r : r + tile, c : c + tile]
            probs = model_forward(model, Tensor(patch[None])).data[0]
            acc[:, r : r + tile, c : c + tile] += weights * probs
            wsum[r : r + tile, c : c + tile] += weights
        return acc, wsum

    if nthreads == 1:
        acc, wsum = run_slice(plan.origins)
    else:
        chunks = [plan.origins[i::nthreads] for i in range(nthreads)]
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            parts = list(pool.map(run_slice, chunks))
        acc = parts[0][0]
        wsum = parts[0][1]
        for a, s in parts[1:]:
            acc += a
            wsum += s

    out = acc / wsum
    top, left = plan.pad_top, plan.pad_left
    return out[:, top : top + h, left : left + w].astype(np.float32)


def binarize(probs: np.ndarray) -> np.ndarray:
    """Argmax a (2, H, W) distribution to a mask raster; ties go to land."""
    if probs.ndim != 3 or probs.shape[0] != 2:
        raise ValueError(f"expected a (2, H, W) distribution, got {probs.shape}")
    return np.where(probs[1] > probs[0], 255, 0).astype(np.uint8)
