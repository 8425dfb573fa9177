"""Training-time flips and colour jitter.

Rotation is not done here: it has to happen at extraction time so the
oversized window can supply real pixels for the corners (see
``patching.extract_rotated_patch``). ``AugmentConfig.rotation`` only says
whether the sampler draws random angles.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import ValidationError
from .patching import TrainingPatch

# ITU-R 601 luma
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    jitter_strength: float = 0.15
    rotation: bool = True

    def validate(self) -> None:
        for name in ("hflip_prob", "vflip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"augment.{name} must be in [0, 1], got {v}")
        if self.jitter_strength < 0:
            raise ValidationError(f"augment.jitter_strength must be >= 0, got {self.jitter_strength}")


def flip(patch: TrainingPatch, horizontal: bool, vertical: bool) -> TrainingPatch:
    image, mask, box = patch.image, patch.mask, patch.loss_box
    h, w = mask.shape
    if horizontal:
        image, mask = image[..., ::-1], mask[..., ::-1]
        if box is not None:
            box = (box[0], box[1], w - box[3], w - box[2])
    if vertical:
        image, mask = image[..., ::-1, :], mask[..., ::-1, :]
        if box is not None:
            box = (h - box[1], h - box[0], box[2], box[3])
    return replace(patch, image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask), loss_box=box)


def _luma(image: np.ndarray) -> np.ndarray:
    return np.tensordot(_LUMA, image, axes=(0, 0))


def adjust_brightness(image, factor):
    return np.clip(image * factor, 0.0, 1.0)


def adjust_contrast(image, factor):
    mean = _luma(image).mean()
    return np.clip((image - mean) * factor + mean, 0.0, 1.0)


def adjust_saturation(image, factor):
    gray = _luma(image)[None]
    return np.clip(gray + (image - gray) * factor, 0.0, 1.0)


def adjust_hue(image, offset):
    """Rotate hue by ``offset`` turns of the hue circle. Gray pixels are unchanged."""
    hsv = rgb_to_hsv(np.moveaxis(image, 0, -1))
    hsv[..., 0] = np.mod(hsv[..., 0] + offset, 1.0)
    return np.clip(np.moveaxis(hsv_to_rgb(hsv), -1, 0), 0.0, 1.0).astype(image.dtype)


def color_jitter(image: np.ndarray, strength: float, rng: np.random.Generator, ops=None) -> np.ndarray:
    """Random brightness, contrast, saturation and hue, applied in random order.

    ``image`` is channels-first RGB in [0, 1]. ``ops`` restricts which of
    ``("brightness", "contrast", "saturation", "hue")`` are used.
    """
    if strength < 0:
        raise ValidationError(f"jitter strength must be >= 0, got {strength}")
    all_ops = ("brightness", "contrast", "saturation", "hue")
    ops = all_ops if ops is None else tuple(ops)
    # draw every factor regardless of ``ops`` so the rng stream has a fixed shape
    factors = {
        "brightness": rng.uniform(1 - strength, 1 + strength),
        "contrast": rng.uniform(1 - strength, 1 + strength),
        "saturation": rng.uniform(1 - strength, 1 + strength),
        "hue": rng.uniform(-strength, strength),
    }
    order = rng.permutation(len(all_ops))
    if strength == 0:
        return image
    out = image.astype(np.float32, copy=True)
    fns = {
        "brightness": adjust_brightness,
        "contrast": adjust_contrast,
        "saturation": adjust_saturation,
        "hue": adjust_hue,
    }
    for i in order:
        name = all_ops[i]
        if name in ops:
            out = fns[name](out, factors[name])
    return out.astype(np.float32)


def augment(patch: TrainingPatch, config: AugmentConfig, rng: np.random.Generator) -> TrainingPatch:
    """Random flips (image and mask together), then colour jitter on the image only."""
    h = rng.random() < config.hflip_prob
    v = rng.random() < config.vflip_prob
    patch = flip(patch, h, v)
    return replace(patch, image=color_jitter(patch.image, config.jitter_strength, rng))
