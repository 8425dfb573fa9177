"""Slide/mask manifests, synthetic slide generation and label corruption."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ValidationError

MANIFEST_HEADER = ["slide_id", "image_path", "mask_path", "noise_flag", "split"]

# 8-connectivity everywhere a "component" is counted
_CONNECTIVITY = np.ones((3, 3), dtype=bool)


class NoiseFlag(str, Enum):
    CLEAN = "clean"
    NOISY = "noisy"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    image_path: Path
    mask_path: Path
    noise_flag: NoiseFlag = NoiseFlag.CLEAN
    split: Split = Split.TRAIN
    height: int = 0
    width: int = 0

    def load_image(self) -> np.ndarray:
        """HxWx3 uint8."""
        return read_image(self.image_path)

    def load_mask(self) -> np.ndarray:
        """HxW uint8 with values in {0, 1}."""
        return read_mask(self.mask_path)


@dataclass
class Manifest:
    records: list[SlideRecord]
    resolution_tag: str = ""
    root: Path | None = field(default=None, repr=False)

    def split(self, name: str | Split, required: bool = True) -> list[SlideRecord]:
        name = Split(name)
        out = [r for r in self.records if r.split == name]
        if required and not out:
            raise ValidationError(f"manifest has no records in split {name.value!r}")
        return out

    def get(self, slide_id: str) -> SlideRecord:
        for r in self.records:
            if r.slide_id == slide_id:
                return r
        raise KeyError(slide_id)

    def validate(self) -> "Manifest":
        """Re-check every record against its files; returns self unchanged."""
        seen = set()
        for r in self.records:
            if r.slide_id in seen:
                raise ValidationError(f"duplicate slide_id {r.slide_id!r}")
            seen.add(r.slide_id)
            h, w = _check_pair(r.slide_id, r.image_path, r.mask_path)
            if (r.height, r.width) != (h, w):
                raise ValidationError(f"{r.slide_id}: recorded size {(r.height, r.width)} != files {(h, w)}")
        return self


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L") if im.mode not in ("L", "1", "I", "I;16") else im)
    return (arr > 0).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(path)


def write_mask(path, mask: np.ndarray) -> None:
    """Binary mask to 8-bit PNG with foreground stored as 255."""
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def _raster_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def _check_pair(slide_id: str, image_path: Path, mask_path: Path) -> tuple[int, int]:
    for p in (image_path, mask_path):
        if not p.is_file():
            raise ValidationError(f"{slide_id}: missing file {p}")
    ih, iw = _raster_size(image_path)
    mh, mw = _raster_size(mask_path)
    if (ih, iw) != (mh, mw):
        raise ValidationError(
            f"{slide_id}: image/mask dimension mismatch: image {ih}x{iw}, mask {mh}x{mw}"
        )
    return ih, iw


def load_manifest(path, resolution_tag: str = "") -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    root = path.parent
    records = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ValidationError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ValidationError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            slide_id, image_rel, mask_rel, noise, split = (c.strip() for c in row)
            if not slide_id:
                raise ValidationError(f"{path}:{lineno}: empty slide_id")
            if slide_id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate slide_id {slide_id!r}")
            seen.add(slide_id)
            try:
                noise_flag = NoiseFlag(noise)
                split_v = Split(split)
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            image_path = (root / image_rel).resolve()
            mask_path = (root / mask_rel).resolve()
            h, w = _check_pair(slide_id, image_path, mask_path)
            records.append(SlideRecord(slide_id, image_path, mask_path, noise_flag, split_v, h, w))
    return Manifest(records, resolution_tag, root)


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    root = path.parent.resolve()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            w.writerow([
                r.slide_id,
                _relpath(r.image_path, root),
                _relpath(r.mask_path, root),
                NoiseFlag(r.noise_flag).value,
                Split(r.split).value,
            ])


def _relpath(p: Path, root: Path) -> str:
    try:
        return Path(p).resolve().relative_to(root).as_posix()
    except ValueError:
        return Path(p).resolve().as_posix()


# --------------------------------------------------------------------------
# synthetic data

_BG_RGB = np.array([0.93, 0.76, 0.86])
_FG_RGB = np.array([0.60, 0.40, 0.70])


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def _ellipse(shape, cy, cx, a, b, theta) -> np.ndarray:
    yy, xx = np.ogrid[: shape[0], : shape[1]]
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def synth_slide(rng: np.random.Generator, size: int, radii, fg_target: float = 0.10):
    """One textured slide and its mask.

    Every listed radius is used at least once (with +-10 % jitter); further
    blobs draw log-uniform radii between min and max until the foreground
    fraction reaches ``fg_target``. Blobs never touch, so each one is a
    separate connected component.
    """
    radii = sorted(float(r) for r in radii)
    mask = np.zeros((size, size), dtype=bool)
    # keep-out region: blobs plus a 3 px gap
    taken = np.zeros_like(mask)
    area_goal = fg_target * size * size
    forced = list(radii)
    lo, hi = math.log(radii[0]), math.log(radii[-1])
    failures = 0
    while failures < 200:
        if forced:
            r = forced.pop() * rng.uniform(0.9, 1.1)
        else:
            if mask.sum() >= area_goal * 0.97:
                break
            r = math.exp(rng.uniform(lo, hi))
            # don't overshoot the class-balance target by more than ~30 %
            if mask.sum() + math.pi * r * r > area_goal * 1.3:
                r = math.sqrt(max(area_goal * 1.3 - mask.sum(), math.pi * radii[0] ** 2) / math.pi)
        q = rng.uniform(0.6, 1.0)
        a, b = r / math.sqrt(q), r * math.sqrt(q)
        a = min(a, size / 2 - 2)
        theta = rng.uniform(0, math.pi)
        placed = False
        for _ in range(60):
            cy = rng.uniform(a + 1, size - a - 2)
            cx = rng.uniform(a + 1, size - a - 2)
            blob = _ellipse(mask.shape, cy, cx, a, b, theta)
            if blob.any() and not (blob & taken).any():
                mask |= blob
                taken |= ndimage.binary_dilation(blob, iterations=3)
                placed = True
                break
        if not placed:
            failures += 1
            if forced:
                continue

    # texture: low-frequency stain variation + cell-like speckle
    stain = _smooth_noise(rng, mask.shape, 24.0)[..., None] * 0.04
    speckle = _smooth_noise(rng, mask.shape, 1.2)[..., None]
    tint = rng.normal(0, 0.02, size=3)
    bg = _BG_RGB + tint + stain + 0.05 * speckle
    fg_speckle = np.clip(speckle, 0, None)
    fg = _FG_RGB + tint + stain - 0.10 * fg_speckle + 0.03 * speckle
    img = np.where(mask[..., None], fg, bg)
    img = img + rng.normal(0, 0.03, size=img.shape)
    img = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    return img, mask.astype(np.uint8)


def generate_synthetic_dataset(seed: int, n_slides: int, slide_size: int, scale_radii, out_dir,
                               splits=None, noise_flag: NoiseFlag = NoiseFlag.CLEAN) -> Manifest:
    """Write ``n_slides`` image/mask PNG pairs plus ``manifest.csv`` into ``out_dir``.

    ``splits`` optionally lists one split name per slide; by default every
    slide goes to train. The result depends only on the arguments.
    """
    if n_slides < 1:
        raise ValidationError("n_slides must be >= 1")
    radii = [float(r) for r in scale_radii]
    if not radii:
        raise ValidationError("scale_radii must be non-empty")
    for r in radii:
        if r <= 0 or r >= slide_size / 2:
            raise ValidationError(
                f"infeasible geometry: radius {r:g} must be in (0, {slide_size / 2:g}) for slide size {slide_size}"
            )
    if splits is None:
        splits = [Split.TRAIN] * n_slides
    if len(splits) != n_slides:
        raise ValidationError("splits must have one entry per slide")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create {out_dir}: {exc}") from exc

    children = np.random.SeedSequence(seed).spawn(n_slides)
    records = []
    for i, (ss, split) in enumerate(zip(children, splits)):
        rng = np.random.default_rng(ss)
        img, mask = synth_slide(rng, slide_size, radii)
        sid = f"slide{i:03d}"
        ip, mp = out_dir / f"{sid}.png", out_dir / f"{sid}_mask.png"
        write_image(ip, img)
        write_mask(mp, mask)
        records.append(SlideRecord(sid, ip.resolve(), mp.resolve(), NoiseFlag(noise_flag), Split(split),
                                   slide_size, slide_size))
    manifest = Manifest(records, "synthetic", out_dir.resolve())
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def split_counts(n: int, fractions=(0.70, 0.15, 0.15)) -> tuple[int, int, int]:
    """Floor the train/val shares; the remainder goes to test."""
    n_train = math.floor(n * fractions[0])
    n_val = math.floor(n * fractions[1])
    return n_train, n_val, n - n_train - n_val


def assign_splits(n: int, seed: int) -> list[Split]:
    n_train, n_val, n_test = split_counts(n)
    labels = [Split.TRAIN] * n_train + [Split.VAL] * n_val + [Split.TEST] * n_test
    order = np.random.default_rng(seed).permutation(n)
    out = [Split.TRAIN] * n
    for lab, idx in zip(labels, order):
        out[idx] = lab
    return out


# --------------------------------------------------------------------------
# label noise

def components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(mask) > 0, structure=_CONNECTIVITY)


def equivalent_radii(mask: np.ndarray) -> np.ndarray:
    """sqrt(area / pi) for each connected component."""
    lab, n = components(mask)
    if n == 0:
        return np.zeros(0)
    areas = np.bincount(lab.ravel())[1:]
    return np.sqrt(areas / math.pi)


def _check_binary(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValidationError("mask must be binary (values in {0, 1})")
    return mask.astype(bool)


def corrupt_labels(mask, mode: str, magnitude, seed: int) -> np.ndarray:
    """Synthesize annotation noise on a binary mask.

    ``boundary_jitter``: each component is dilated or eroded by its own random
    integer offset in [-magnitude, magnitude] pixels.
    ``region_deletion``: ``floor(magnitude * n_components)`` whole components
    are removed, chosen uniformly at random.
    """
    m = _check_binary(mask)
    rng = np.random.default_rng(seed)
    lab, n = components(m)
    out = np.zeros_like(m)
    if mode == "boundary_jitter":
        mag = int(magnitude)
        if mag < 0:
            raise ValidationError("boundary_jitter magnitude must be >= 0")
        if mag == 0:
            return m.astype(np.uint8)
        offsets = rng.integers(-mag, mag + 1, size=n)
        for k, off in zip(range(1, n + 1), offsets):
            comp = lab == k
            if off > 0:
                out |= ndimage.distance_transform_edt(~comp) <= off
            elif off < 0:
                out |= ndimage.distance_transform_edt(comp) > -off
            else:
                out |= comp
    elif mode == "region_deletion":
        frac = float(magnitude)
        if not 0.0 <= frac <= 1.0:
            raise ValidationError(f"region_deletion fraction must be in [0, 1], got {frac}")
        n_del = math.floor(frac * n)
        drop = rng.choice(np.arange(1, n + 1), size=n_del, replace=False) if n_del else []
        out = m & ~np.isin(lab, drop)
    else:
        raise ValidationError(f"unknown corruption mode {mode!r}")
    return out.astype(np.uint8)


def corrupt_manifest(manifest: Manifest, out_dir, jitter: int, deletion: float, seed: int,
                     splits=(Split.TRAIN,)) -> Manifest:
    """Copy of ``manifest`` whose masks in ``splits`` are corrupted and flagged noisy."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = {Split(s) for s in splits}
    records = []
    for i, r in enumerate(manifest.records):
        if r.split in splits:
            m = r.load_mask()
            m = corrupt_labels(m, "boundary_jitter", jitter, seed * 100003 + 2 * i)
            m = corrupt_labels(m, "region_deletion", deletion, seed * 100003 + 2 * i + 1)
            mp = out_dir / f"{r.slide_id}_noisy_mask.png"
            write_mask(mp, m)
            r = replace(r, mask_path=mp.resolve(), noise_flag=NoiseFlag.NOISY)
        records.append(r)
    out = Manifest(records, manifest.resolution_tag, out_dir.resolve())
    write_manifest(out, out_dir / "manifest.csv")
    return out
