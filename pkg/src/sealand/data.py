"""Data plumbing: image/mask IO, augmentation, tile cropping, and a
procedural coastline generator.

Masks are 8-bit with 255 = sea, 0 = land; tile targets use class id 1 for
sea. Training tiles are square crops that must contain a minimum fraction
of both classes, cut from flipped/rotated/rescaled copies of the source
images. The synthetic generator thresholds multi-octave value noise into a
coastline mask and renders sea and land with different base colors, speckle
statistics, and a shared illumination gradient, so the two classes overlap
in brightness but differ in texture.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SEA = 255
LAND = 0

# synthetic render constants (documented in generated manifests)
SYNTH_OCTAVES = 4
SYNTH_PERSISTENCE = 0.5
SYNTH_SEA_FRACTION = (0.35, 0.65)
SYNTH_SEA_RGB = (20, 60, 110)
SYNTH_LAND_RGB = (115, 125, 85)
SYNTH_SEA_SPECKLE = 8.0
SYNTH_LAND_SPECKLE = 18.0
SYNTH_GRADIENT = 10.0


@dataclass
class LabeledImage:
    """8-bit RGB raster plus a binary sea/land mask of equal extent."""

    rgb: np.ndarray
    mask: np.ndarray

    def validate(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (H, W, 3), got {self.rgb.shape}")
        if self.mask.shape != self.rgb.shape[:2]:
            raise ValueError(
                f"mask extent {self.mask.shape} does not match rgb {self.rgb.shape[:2]}"
            )
        bad = ~np.isin(self.mask, (LAND, SEA))
        if bad.any():
            raise ValueError("mask must contain only 0 (land) and 255 (sea)")
        return self

    @property
    def extent(self):
        return self.mask.shape


@dataclass
class TileSample:
    """One training tile: (3, T, T) floats in [0, 1] and a 0/1 class raster."""

    tile: np.ndarray
    target: np.ndarray
    source_id: str
    origin: tuple


@dataclass
class DatasetManifest:
    """Ordered (image, mask) path pairs plus a split tag."""

    entries: list
    split: str = "train"

    def __len__(self):
        return len(self.entries)


def load_labeled(image_path, mask_path) -> LabeledImage:
    """Decode an RGB image and its mask; gray masks binarize at 128."""
    image_path, mask_path = Path(image_path), Path(mask_path)
    try:
        rgb = np.asarray(Image.open(image_path).convert("RGB"))
    except Exception as e:
        raise ValueError(f"cannot decode image {image_path}: {e}") from e
    try:
        gray = np.asarray(Image.open(mask_path).convert("L"))
    except Exception as e:
        raise ValueError(f"cannot decode mask {mask_path}: {e}") from e
    if gray.shape != rgb.shape[:2]:
        raise ValueError(
            f"extent mismatch: {image_path} is {rgb.shape[:2]}, "
            f"{mask_path} is {gray.shape}"
        )
    mask = np.where(gray >= 128, SEA, LAND).astype(np.uint8)
    return LabeledImage(rgb, mask).validate()


def save_labeled(img: LabeledImage, image_path, mask_path):
    Image.fromarray(img.rgb, mode="RGB").save(image_path)
    Image.fromarray(img.mask, mode="L").save(mask_path)


def read_manifest(path, split="train") -> DatasetManifest:
    """Parse `image<TAB>mask` lines; files must exist, pairs must be unique."""
    path = Path(path)
    entries = []
    seen = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'image<TAB>mask', got {raw!r}")
        img, mask = (path.parent / p for p in parts)
        for p in (img, mask):
            if not p.exists():
                raise ValueError(f"{path}:{lineno}: referenced file missing: {p}")
        key = (str(img), str(mask))
        if key in seen:
            raise ValueError(f"{path}:{lineno}: duplicate pair {key}")
        seen.add(key)
        entries.append((img, mask))
    return DatasetManifest(entries, split)


def write_manifest(path, entries, header_lines=()):
    """Write pairs as paths relative to the manifest's directory."""
    path = Path(path)
    lines = [f"# {h}" for h in header_lines]
    for img, mask in entries:
        img = os.path.relpath(os.path.abspath(img), path.parent.absolute())
        mask = os.path.relpath(os.path.abspath(mask), path.parent.absolute())
        lines.append(f"{img}\t{mask}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# geometric augmentation


def flip_h(img: LabeledImage) -> LabeledImage:
    return LabeledImage(img.rgb[:, ::-1].copy(), img.mask[:, ::-1].copy())


def flip_v(img: LabeledImage) -> LabeledImage:
    return LabeledImage(img.rgb[::-1].copy(), img.mask[::-1].copy())


def rot90k(img: LabeledImage, k: int) -> LabeledImage:
    return LabeledImage(
        np.rot90(img.rgb, k, axes=(0, 1)).copy(),
        np.rot90(img.mask, k, axes=(0, 1)).copy(),
    )


def rescale(img: LabeledImage, factor: float) -> LabeledImage:
    """Resample by a scale factor: bilinear RGB, nearest-neighbor mask."""
    h, w = img.extent
    nh, nw = max(1, round(h * factor)), max(1, round(w * factor))
    rgb = Image.fromarray(img.rgb, mode="RGB").resize((nw, nh), Image.BILINEAR)
    mask = Image.fromarray(img.mask, mode="L").resize((nw, nh), Image.NEAREST)
    return LabeledImage(np.asarray(rgb), np.asarray(mask))


@dataclass(frozen=True)
class AugmentSpec:
    """Which random transforms augment() may draw."""

    flips: bool = True
    rotations: bool = True
    scale_range: tuple = (0.5, 2.0)


def augment(img: LabeledImage, spec: AugmentSpec, rng) -> LabeledImage:
    """Random flip/rotation/scale composition; rgb and mask move together."""
    out = img
    if spec.flips:
        if rng.random() < 0.5:
            out = flip_h(out)
        if rng.random() < 0.5:
            out = flip_v(out)
    if spec.rotations:
        out = rot90k(out, int(rng.integers(0, 4)))
    if spec.scale_range is not None:
        lo, hi = spec.scale_range
        out = rescale(out, float(rng.uniform(lo, hi)))
    return out


def crop_both_classes(img: LabeledImage, tile: int, min_fraction=0.05, rng=None, max_tries=100):
    """Uniformly random T x T crop containing >= min_fraction of each class.

    Returns None when max_tries random origins all fail (for instance a
    single-class image can never succeed); callers skip the image then.
    """
    h, w = img.extent
    if h < tile or w < tile:
        raise ValueError(f"image {h}x{w} smaller than tile {tile}")
    if rng is None:
        rng = np.random.default_rng()
    need = min_fraction * tile * tile
    for _ in range(max_tries):
        r = int(rng.integers(0, h - tile + 1))
        c = int(rng.integers(0, w - tile + 1))
        patch = img.mask[r : r + tile, c : c + tile]
        sea = np.count_nonzero(patch)
        if sea >= need and (tile * tile - sea) >= need:
            crop = img.rgb[r : r + tile, c : c + tile]
            return TileSample(
                tile=(crop.astype(np.float32) / 255.0).transpose(2, 0, 1),
                target=(patch == SEA).astype(np.int64),
                source_id="",
                origin=(r, c),
            )
    return None


# ---------------------------------------------------------------------------
# synthetic coastline generator


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _value_noise(rng, h, w, cell):
    """Bilinear-smoothstep interpolation of a random lattice."""
    gh = int(np.ceil(h / cell)) + 2
    gw = int(np.ceil(w / cell)) + 2
    grid = rng.random((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    ty = _smoothstep(ys - y0)[:, None]
    tx = _smoothstep(xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty


def synth_generate(seed: int, H: int, W: int) -> LabeledImage:
    """Deterministic coastline scene: noise-threshold mask, textured render.

    The sea fraction is drawn uniformly inside SYNTH_SEA_FRACTION and hit
    exactly by thresholding the field at the matching quantile.
    """
    if H < 64 or W < 64:
        raise ValueError(f"synthetic extents must be >= 64, got {H}x{W}")
    rng = np.random.default_rng(seed)

    cell = max(min(H, W) // 4, 8)
    amps, total = 1.0, 0.0
    fld = np.zeros((H, W))
    for _ in range(SYNTH_OCTAVES):
        fld += amps * _value_noise(rng, H, W, cell)
        total += amps
        amps *= SYNTH_PERSISTENCE
        cell = max(cell // 2, 2)
    fld /= total

    frac = rng.uniform(*SYNTH_SEA_FRACTION)
    sea = fld > np.quantile(fld, 1.0 - frac)
    mask = np.where(sea, SEA, LAND).astype(np.uint8)

    rgb = np.empty((H, W, 3))
    rgb[sea] = SYNTH_SEA_RGB
    rgb[~sea] = SYNTH_LAND_RGB
    speckle = rng.standard_normal((H, W, 3))
    rgb += speckle * np.where(sea, SYNTH_SEA_SPECKLE, SYNTH_LAND_SPECKLE)[..., None]

    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * (np.arange(W) / W - 0.5) + np.sin(theta) * (
        np.arange(H)[:, None] / H - 0.5
    )
    rgb += (ramp / max(np.abs(ramp).max(), 1e-9) * SYNTH_GRADIENT)[..., None]

    return LabeledImage(np.clip(rgb, 0, 255).astype(np.uint8), mask).validate()


def synth_header():
    """Constants block written into generated manifests."""
    return [
        "synthetic coastline set",
        f"octaves={SYNTH_OCTAVES} persistence={SYNTH_PERSISTENCE}",
        f"sea_fraction={SYNTH_SEA_FRACTION[0]}..{SYNTH_SEA_FRACTION[1]}",
        f"sea_rgb={SYNTH_SEA_RGB} land_rgb={SYNTH_LAND_RGB}",
        f"speckle sea={SYNTH_SEA_SPECKLE} land={SYNTH_LAND_SPECKLE} gradient=+-{SYNTH_GRADIENT}",
    ]


# ---------------------------------------------------------------------------
# tile stream


@dataclass
class TileStats:
    emitted: int = 0
    skipped: int = 0


def build_training_set(manifest, tile, samples_per_image, spec, rng, stats=None):
    """Yield shuffled TileSamples: per draw, augment the source image and
    cut one both-classes crop. Skipped draws (no valid crop) are counted.
    """
    if not manifest.entries:
        raise ValueError("manifest has no entries")
    if stats is None:
        stats = TileStats()
    order = [(i, k) for i in range(len(manifest.entries)) for k in range(samples_per_image)]
    rng.shuffle(order)
    cache = {}
    for i, _k in order:
        if i not in cache:
            cache[i] = load_labeled(*manifest.entries[i])
        aug = augment(cache[i], spec, rng)
        if aug.extent[0] < tile or aug.extent[1] < tile:
            # a scale draw shrank the image below the tile size
            stats.skipped += 1
            continue
        sample = crop_both_classes(aug, tile, rng=rng)
        if sample is None:
            stats.skipped += 1
            log.warning("no both-classes crop found in %s", manifest.entries[i][0])
            continue
        sample.source_id = str(manifest.entries[i][0])
        stats.emitted += 1
        yield sample
