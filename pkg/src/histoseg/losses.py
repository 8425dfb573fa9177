"""Noise-robust segmentation losses.

Total loss per patch::

    total = CE_w(logits, target; pixel weight = w_fb * crop)
            + [epoch > n] * CE(logits, pseudo; pixel weight = w_bs * crop)

where ``w_fb = 1 - |t - blur_k(t)|`` down-weights pixels near annotation
edges (``k`` is larger for slides with noisy annotations),
``w_bs = 2 * |0.5 - p|`` emphasises confident predictions, ``pseudo`` is the
model's own hard prediction and ``crop`` zeroes a margin around the patch.
Both weighted sums are normalised by their total weight. ``w_bs`` and the
pseudo-label are computed from detached probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError
from .ingestion import NoiseFlag


@dataclass
class LossConfig:
    w_fg: float = 10.0
    w_bg: float = 1.0
    kernel_clean: int = 21
    kernel_noisy: int = 61
    bootstrap_start_epoch: int = 8
    crop_margin: int | None = None  # None -> patch_size // 4
    fuzzy_boundary: bool = True
    bootstrap: bool = True
    recompute_class_weights: bool = False

    def validate(self) -> None:
        for name in ("kernel_clean", "kernel_noisy"):
            k = getattr(self, name)
            if k < 3 or k % 2 == 0:
                raise ValidationError(f"loss.{name} must be odd and >= 3, got {k}")
        if self.w_fg <= 0 or self.w_bg <= 0:
            raise ValidationError("loss.w_fg and loss.w_bg must be > 0")
        if self.bootstrap_start_epoch < 0:
            raise ValidationError("loss.bootstrap_start_epoch must be >= 0")
        if self.crop_margin is not None and self.crop_margin < 0:
            raise ValidationError("loss.crop_margin must be >= 0")

    def margin_for(self, patch_size: int) -> int:
        m = patch_size // 4 if self.crop_margin is None else self.crop_margin
        if not 0 <= m < patch_size / 2:
            raise ValidationError(f"crop margin {m} invalid for patch size {patch_size}")
        return m


def sigma_for_kernel(kernel_size: int) -> float:
    """Kernel-size-to-sigma rule (the one OpenCV uses when sigma is 0)."""
    return 0.3 * ((kernel_size - 1) / 2 - 1) + 0.8


def gaussian_kernel1d(kernel_size: int, dtype=torch.float64) -> torch.Tensor:
    sigma = sigma_for_kernel(kernel_size)
    x = torch.arange(kernel_size, dtype=dtype) - (kernel_size - 1) / 2
    k = torch.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _reflect_index(n: int, pad: int, device=None) -> torch.Tensor:
    """Indices of a reflect-101 padded axis (``dcb|abcd|cba``), any pad length."""
    idx = torch.arange(-pad, n + pad, device=device)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = torch.remainder(idx, period)
    return torch.where(idx >= n, period - idx, idx)


def gaussian_blur(x: torch.Tensor, kernel_size: int) -> torch.Tensor:
    """Separable Gaussian blur over the last two axes with reflect-101 borders."""
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValidationError(f"blur kernel size must be odd, got {kernel_size}")
    shape = x.shape
    h, w = shape[-2:]
    pad = kernel_size // 2
    k = gaussian_kernel1d(kernel_size, dtype=x.dtype).to(x.device)
    y = x.reshape(-1, 1, h, w)
    y = y.index_select(2, _reflect_index(h, pad, x.device))
    y = F.conv2d(y, k.view(1, 1, -1, 1))
    y = y.index_select(3, _reflect_index(w, pad, x.device))
    y = F.conv2d(y, k.view(1, 1, 1, -1))
    return y.reshape(shape)


def _as_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x)), True


def fuzzy_boundary_weights(target, kernel_size: int):
    """``1 - |t - blur(t)|``: 1 away from edges, smaller near them.

    Accepts a numpy array or tensor of shape ``[..., H, W]`` and returns the
    same kind.
    """
    t, was_numpy = _as_tensor(target)
    if not torch.isin(t, torch.tensor([0, 1], dtype=t.dtype)).all():
        raise ValidationError("fuzzy_boundary_weights needs a binary target")
    if kernel_size % 2 == 0:
        raise ValidationError(f"kernel size must be odd, got {kernel_size}")
    if was_numpy:
        tf = t.to(torch.float64)
    else:
        tf = t if t.is_floating_point() else t.to(torch.get_default_dtype())
    w = (1.0 - (tf - gaussian_blur(tf, kernel_size)).abs()).clamp_(0.0, 1.0)
    return w.numpy() if was_numpy else w


def bootstrap_weights(p):
    """``2 * |0.5 - p|``; detached when given a tensor."""
    if isinstance(p, torch.Tensor):
        p = p.detach()
        if p.numel() and (p.min() < 0 or p.max() > 1):
            raise ValidationError("probabilities must lie in [0, 1]")
        return 2.0 * (0.5 - p).abs()
    p = np.asarray(p, dtype=np.float64)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValidationError("probabilities must lie in [0, 1]")
    return 2.0 * np.abs(0.5 - p)


def _check_shapes(logits: torch.Tensor, target: torch.Tensor) -> None:
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise ValidationError(f"logits must be [B, 2, H, W], got {tuple(logits.shape)}")
    if tuple(target.shape) != (logits.shape[0], *logits.shape[2:]):
        raise ValidationError(f"target shape {tuple(target.shape)} does not match logits {tuple(logits.shape)}")


def weighted_nll_terms(logits, target, class_weights=(1.0, 1.0), pixel_weights=None):
    """Return ``(sum of weighted NLL, weight mass)`` so callers can reduce exactly."""
    target = target.long()
    _check_shapes(logits, target)
    nll = F.cross_entropy(logits, target, reduction="none")
    cw = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)
    if (cw <= 0).any():
        raise ValidationError("class weights must be > 0")
    w = cw[target]
    if pixel_weights is not None:
        pixel_weights = torch.as_tensor(pixel_weights, dtype=logits.dtype, device=logits.device)
        if (pixel_weights < 0).any():
            raise ValidationError("pixel weights must be >= 0")
        w = w * pixel_weights.expand_as(w)
    return (w * nll).sum(), w.sum()


def weighted_ce(logits, target, class_weights=(1.0, 1.0), pixel_weights=None) -> torch.Tensor:
    """Class- and pixel-weighted cross-entropy, normalised by the total weight."""
    num, den = weighted_nll_terms(logits, target, class_weights, pixel_weights)
    if den <= 0:
        raise ValidationError("weighted_ce: all effective pixel weights are zero")
    return num / den


def bootstrap_terms(logits, crop=None, frozen_probs=None):
    """Per-pixel bootstrap loss pieces ``(nll, weight, w_bs)``.

    ``frozen_probs`` (foreground probability) replaces the live prediction
    when computing the pseudo-label and ``w_bs``; used to hold them fixed.
    """
    if frozen_probs is None:
        p = torch.softmax(logits.detach(), dim=1)[:, 1]
    else:
        p = torch.as_tensor(frozen_probs, dtype=logits.dtype, device=logits.device).detach()
    pseudo = (p > 0.5).long()
    w_bs = bootstrap_weights(p)
    nll = F.cross_entropy(logits, pseudo, reduction="none")
    weight = w_bs if crop is None else w_bs * torch.as_tensor(crop, dtype=logits.dtype, device=logits.device)
    return nll, weight, w_bs


def bootstrap_loss(logits, epoch: int, n: int, crop=None, frozen_probs=None) -> torch.Tensor:
    """Pseudo-label loss, switched on only once ``epoch > n``."""
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    if epoch <= n:
        return logits.new_zeros(())
    nll, weight, _ = bootstrap_terms(logits, crop, frozen_probs)
    den = weight.sum()
    if den <= 0:
        return logits.new_zeros(())
    return (nll * weight).sum() / den


def _kernels_for(noise_flag, batch: int, config: LossConfig) -> list[int]:
    if isinstance(noise_flag, (str, NoiseFlag)) or noise_flag is None:
        flags = [noise_flag] * batch
    else:
        flags = list(noise_flag)
        if len(flags) != batch:
            raise ValidationError(f"{len(flags)} noise flags for batch of {batch}")
    out = []
    for f in flags:
        f = NoiseFlag(f) if f is not None else NoiseFlag.CLEAN
        out.append(config.kernel_noisy if f == NoiseFlag.NOISY else config.kernel_clean)
    return out


def central_box(h: int, w: int, margin: int) -> tuple[int, int, int, int]:
    return (margin, h - margin, margin, w - margin)


def fuzzy_weights_in_crop(target: torch.Tensor, kernels: Sequence[int], boxes, dtype) -> torch.Tensor:
    """Per-sample fuzzy-boundary weights computed inside each sample's loss box.

    Pixels outside the box are discarded from the loss, so the confidence map
    is computed from the labels the loss actually sees (reflecting at the box
    border); outside pixels get weight 1 and are zeroed by the crop anyway.
    """
    b, h, w = target.shape
    out = torch.ones((b, h, w), dtype=dtype, device=target.device)
    for i, (k, (t, bo, le, ri)) in enumerate(zip(kernels, boxes)):
        out[i, t:bo, le:ri] = fuzzy_boundary_weights(target[i, t:bo, le:ri].to(dtype), k)
    return out


def _box_weights(b: int, h: int, w: int, boxes, dtype, device) -> torch.Tensor:
    c = torch.zeros((b, h, w), dtype=dtype, device=device)
    for i, (t, bo, le, ri) in enumerate(boxes):
        c[i, t:bo, le:ri] = 1
    return c


def total_loss(logits: torch.Tensor, target: torch.Tensor, epoch: int, noise_flag, config: LossConfig,
               class_weights=None, frozen_probs=None, crop_boxes=None) -> tuple[torch.Tensor, dict]:
    """Combined loss plus diagnostics.

    ``noise_flag`` is one flag for the whole batch or one per sample; it picks
    the blur kernel. ``class_weights`` overrides ``(config.w_bg, config.w_fg)``.
    ``crop_boxes`` gives one ``(top, bottom, left, right)`` loss region per
    sample; by default every sample uses the central crop.
    """
    target = torch.as_tensor(target, device=logits.device).long()
    _check_shapes(logits, target)
    b, _, h, w = logits.shape
    if h != w:
        raise ValidationError("total_loss expects square patches")
    if crop_boxes is None:
        crop_boxes = [central_box(h, w, config.margin_for(h))] * b
    elif len(crop_boxes) != b:
        raise ValidationError(f"{len(crop_boxes)} crop boxes for batch of {b}")
    crop = _box_weights(b, h, w, crop_boxes, logits.dtype, logits.device)
    if config.fuzzy_boundary:
        w_fb = fuzzy_weights_in_crop(target, _kernels_for(noise_flag, b, config), crop_boxes, logits.dtype)
    else:
        w_fb = torch.ones((b, h, w), dtype=logits.dtype, device=logits.device)
    cw = class_weights if class_weights is not None else (config.w_bg, config.w_fg)
    l_wce = weighted_ce(logits, target, cw, w_fb * crop)

    active = config.bootstrap and epoch > config.bootstrap_start_epoch
    inside = crop.bool()
    diag = {
        "l_wce": float(l_wce.detach()),
        "l_bs": None,
        "mean_w_fb": float(w_fb[inside].mean()),
        "mean_w_bs": None,
    }
    total = l_wce
    if active:
        nll, weight, w_bs = bootstrap_terms(logits, crop, frozen_probs)
        den = weight.sum()
        l_bs = (nll * weight).sum() / den if den > 0 else logits.new_zeros(())
        total = total + l_bs
        diag["l_bs"] = float(l_bs.detach())
        diag["mean_w_bs"] = float(w_bs[inside].mean())
    diag["total"] = float(total.detach())
    return total, diag


def class_weights_from_masks(masks) -> tuple[float, float]:
    """``(1, n_bg / n_fg)`` from a collection of binary masks."""
    fg = bg = 0
    for m in masks:
        m = np.asarray(m) > 0
        fg += int(m.sum())
        bg += int(m.size - m.sum())
    if fg == 0:
        raise ValidationError("no foreground pixels to derive class weights from")
    return 1.0, bg / fg
