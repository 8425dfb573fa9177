"""Tile planning, rotation-safe patch extraction and center-crop stitching."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .ingestion import read_mask, write_mask


@dataclass(frozen=True)
class TileSpec:
    slide_id: str
    origin: tuple[int, int]  # (row, col)
    size: int

    @property
    def row(self) -> int:
        return self.origin[0]

    @property
    def col(self) -> int:
        return self.origin[1]

    def window(self, image: np.ndarray) -> np.ndarray:
        r, c = self.origin
        return image[r : r + self.size, c : c + self.size]


@dataclass
class TrainingPatch:
    image: np.ndarray  # float32 [3, size, size] in [0, 1]
    mask: np.ndarray  # uint8 [size, size] in {0, 1}
    source: TileSpec
    rotation_deg: float = 0.0
    # (top, bottom, left, right) region the loss is computed on; None = central crop
    loss_box: tuple[int, int, int, int] | None = None


@dataclass
class CropMask:
    weights: np.ndarray
    margin: int


@dataclass
class StitchedPrediction:
    slide_id: str
    mask: np.ndarray  # uint8 {0, 1}, slide-sized
    n_tiles: int = 0


def default_oversize(patch_size: int) -> int:
    """Smallest square window that contains the patch under any rotation."""
    return math.ceil(patch_size * math.sqrt(2))


def _axis_origins(dim: int, patch: int, stride: int) -> list[int]:
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] + patch < dim:
        origins.append(dim - patch)
    return origins


def plan_tiles(slide_height: int, slide_width: int, patch_size: int = 1024, overlap: float = 0.5,
               slide_id: str = "") -> list[TileSpec]:
    """Row-major overlapping tiles; the last tile on each axis is clamped to the edge.

    Slides smaller than ``patch_size`` must be padded first (see
    :func:`pad_to_min_size`).
    """
    if slide_height <= 0 or slide_width <= 0:
        raise ValidationError(f"slide dimensions must be positive, got {slide_height}x{slide_width}")
    if patch_size <= 0:
        raise ValidationError(f"patch_size must be positive, got {patch_size}")
    if not 0 <= overlap < 1:
        raise ValidationError(f"overlap must be in [0, 1), got {overlap}")
    if patch_size > min(slide_height, slide_width):
        raise ValidationError(
            f"slide {slide_height}x{slide_width} is smaller than patch {patch_size}; pad it first"
        )
    stride = max(1, round(patch_size * (1 - overlap)))
    rows = _axis_origins(slide_height, patch_size, stride)
    cols = _axis_origins(slide_width, patch_size, stride)
    return [TileSpec(slide_id, (r, c), patch_size) for r in rows for c in cols]


def pad_to_min_size(array: np.ndarray, min_size: int) -> np.ndarray:
    """Reflection-pad the two leading (spatial) axes up to ``min_size`` at the bottom/right."""
    h, w = array.shape[:2]
    ph, pw = max(0, min_size - h), max(0, min_size - w)
    if not ph and not pw:
        return array
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (array.ndim - 2)
    # np.pad "reflect" handles pads longer than the axis by repeated reflection
    return np.pad(array, pad, mode="reflect" if min(h, w) > 1 else "edge")


def _read_window(array: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    """``size``-square window at (top, left), reflecting at the slide borders.

    Each side may overhang the slide by at most ``dim - 1`` pixels (one
    reflection).
    """
    h, w = array.shape[:2]
    pads = [(max(0, -top), max(0, top + size - h)), (max(0, -left), max(0, left + size - w))]
    for (before, after), dim in zip(pads, (h, w)):
        if before > dim - 1 or after > dim - 1:
            raise ValidationError(
                f"window {size}px at ({top},{left}) exceeds the {h}x{w} slide beyond the reflection budget"
            )
    r0, c0 = max(0, top), max(0, left)
    core = array[r0 : min(h, top + size), c0 : min(w, left + size)]
    if any(p for pair in pads for p in pair):
        core = np.pad(core, pads + [(0, 0)] * (array.ndim - 2), mode="reflect")
    return core


def _rotation_coords(patch_size: int, pivot: float, rotation_deg: float) -> np.ndarray:
    """Source (row, col) coordinates in the window for every output pixel."""
    theta = math.radians(rotation_deg % 360.0)
    c, s = math.cos(theta), math.sin(theta)
    half = (patch_size - 1) / 2.0
    u, v = np.meshgrid(np.arange(patch_size) - half, np.arange(patch_size) - half, indexing="ij")
    rows = pivot + c * u + s * v
    cols = pivot - s * u + c * v
    coords = np.stack([rows, cols])
    # remove trig round-off so multiples of 90 degrees land on exact pixels
    snapped = np.round(coords)
    near = np.abs(coords - snapped) < 1e-6
    coords[near] = snapped[near]
    return coords


def extract_rotated_patch(slide_image: np.ndarray, slide_mask: np.ndarray, center: tuple[int, int],
                          patch_size: int = 1024, rotation_deg: float = 0.0, oversize: int | None = None,
                          slide_id: str = "") -> TrainingPatch:
    """Cut a ``patch_size`` square rotated by ``rotation_deg`` (counter-clockwise)
    from the middle of an ``oversize`` window centered at ``center``.

    The image is resampled bilinearly, the mask by nearest neighbour. If the
    window is too small for the rotation, the shortfall is covered by
    reflecting the window, never by a constant fill.
    """
    if oversize is None:
        oversize = default_oversize(patch_size)
    if oversize < patch_size:
        raise ValidationError(f"oversize {oversize} < patch_size {patch_size}")
    if slide_image.shape[:2] != slide_mask.shape[:2]:
        raise ValidationError("slide image and mask differ in size")
    cr, cc = (int(v) for v in center)
    top, left = cr - oversize // 2, cc - oversize // 2
    img = slide_image.astype(np.float32) / 255.0 if slide_image.dtype == np.uint8 else slide_image.astype(np.float32)
    win_img = _read_window(img, top, left, oversize)
    win_mask = _read_window(np.asarray(slide_mask), top, left, oversize)

    offset = (oversize - patch_size) // 2
    pivot = offset + (patch_size - 1) / 2.0
    coords = _rotation_coords(patch_size, pivot, rotation_deg)
    lo = math.floor(coords.min())
    hi = math.ceil(coords.max())
    extra = max(0, -lo, hi - (oversize - 1))
    if extra:
        pads = [(extra, extra), (extra, extra)]
        win_img = np.pad(win_img, pads + [(0, 0)], mode="reflect")
        win_mask = np.pad(win_mask, pads, mode="reflect")
        coords = coords + extra

    out = np.empty((win_img.shape[2], patch_size, patch_size), dtype=np.float32)
    for ch in range(win_img.shape[2]):
        out[ch] = ndimage.map_coordinates(win_img[..., ch].astype(np.float64), coords, order=1, mode="nearest")
    mask = ndimage.map_coordinates(win_mask.astype(np.uint8), coords, order=0, mode="nearest")
    source = TileSpec(slide_id, (cr - patch_size // 2, cc - patch_size // 2), patch_size)
    return TrainingPatch(np.clip(out, 0.0, 1.0), (mask > 0).astype(np.uint8), source, float(rotation_deg % 360.0))


def default_crop_margin(patch_size: int) -> int:
    return patch_size // 4


def make_crop_mask(patch_size: int, margin: int) -> CropMask:
    if not 0 <= margin < patch_size / 2:
        raise ValidationError(f"crop margin must be in [0, {patch_size / 2:g}), got {margin}")
    w = np.zeros((patch_size, patch_size), dtype=np.float32)
    w[margin : patch_size - margin, margin : patch_size - margin] = 1.0
    return CropMask(w, margin)


def flush_loss_box(patch_size: int, margin: int, flush: tuple[bool, bool, bool, bool]) -> tuple[int, int, int, int]:
    """Loss region of an axis-aligned patch whose (top, bottom, left, right)
    sides lie on the slide border: the central crop, widened to the patch
    edge on flush sides. Mirrors what :func:`stitch` keeps from edge tiles.
    """
    top, bottom, left, right = flush
    return (0 if top else margin, patch_size if bottom else patch_size - margin,
            0 if left else margin, patch_size if right else patch_size - margin)


def rotate_box(box: tuple[int, int, int, int], size: int, k: int) -> tuple[int, int, int, int]:
    """``box`` after ``np.rot90(..., k)`` of a ``size``-square patch."""
    t, b, le, r = box
    for _ in range(k % 4):
        t, b, le, r = size - r, size - le, t, b
    return (t, b, le, r)


def _write_region(spec: TileSpec, h: int, w: int, margin: int):
    """(tile-local slices, slide slices) that a tile contributes when stitching."""
    r, c = spec.origin
    s = spec.size
    t = 0 if r == 0 else margin
    b = s if r + s == h else s - margin
    le = 0 if c == 0 else margin
    ri = s if c + s == w else s - margin
    return (slice(t, b), slice(le, ri)), (slice(r + t, r + b), slice(c + le, c + ri))


def stitch(tile_predictions, slide_dims: tuple[int, int], crop_margin: int, mode: str = "or",
           slide_id: str = "") -> StitchedPrediction:
    """Reassemble a slide mask from per-tile binary predictions.

    Each tile contributes its central region; on sides where the tile touches
    the slide edge the margin is kept as well. Pixels written by several
    tiles are combined with logical OR (``mode="or"``) or by the last tile in
    the input order (``mode="last"``).
    """
    if mode not in ("or", "last"):
        raise ValidationError(f"unknown stitch mode {mode!r}")
    h, w = slide_dims
    out = np.zeros((h, w), dtype=np.uint8)
    writes = np.zeros((h, w), dtype=np.int32)
    n = 0
    for spec, pred in tile_predictions:
        pred = np.asarray(pred)
        s = spec.size
        if pred.shape != (s, s):
            raise ValidationError(f"tile {spec.origin}: prediction shape {pred.shape} != ({s}, {s})")
        r, c = spec.origin
        if r < 0 or c < 0 or r + s > h or c + s > w:
            raise ValidationError(f"tile {spec.origin} of size {s} outside slide {h}x{w}")
        src, dst = _write_region(spec, h, w, crop_margin)
        region = (pred[src] > 0).astype(np.uint8)
        if mode == "or":
            out[dst] |= region
        else:
            out[dst] = region
        writes[dst] += 1
        n += 1
    uncovered = int((writes == 0).sum())
    if uncovered:
        raise ValidationError(f"stitch left {uncovered} pixels uncovered; tiles and crop margin are inconsistent")
    return StitchedPrediction(slide_id, out, n)


def write_counts(tile_specs, slide_dims, crop_margin: int) -> np.ndarray:
    """How many tiles write each pixel under :func:`stitch`'s rules."""
    h, w = slide_dims
    counts = np.zeros((h, w), dtype=np.int32)
    for spec in tile_specs:
        counts[_write_region(spec, h, w, crop_margin)[1]] += 1
    return counts


def tile_filename(spec: TileSpec) -> str:
    return f"{spec.slide_id}_{spec.row}_{spec.col}.png"


def save_tile_prediction(out_dir, spec: TileSpec, pred: np.ndarray) -> Path:
    path = Path(out_dir) / tile_filename(spec)
    write_mask(path, pred)
    return path


def load_tile_prediction(out_dir, spec: TileSpec) -> np.ndarray:
    return read_mask(Path(out_dir) / tile_filename(spec))


def prediction_filename(slide_id: str) -> str:
    return f"{slide_id}_pred.png"
