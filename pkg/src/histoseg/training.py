"""Patch-wise training loop, slide-level inference and validation."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augmentation import AugmentConfig, augment
from .evaluation import IoUReport, iou, report_from_scores
from .errors import ValidationError
from .ingestion import Manifest, SlideRecord, Split
from .losses import LossConfig, central_box, class_weights_from_masks, total_loss
from .model import ModelConfig, SegNet, load_checkpoint, read_checkpoint, save_checkpoint
from .patching import (
    StitchedPrediction,
    default_oversize,
    extract_rotated_patch,
    flush_loss_box,
    pad_to_min_size,
    plan_tiles,
    rotate_box,
    save_tile_prediction,
    stitch,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    patch_size: int = 256
    patches_per_slide_per_epoch: int = 4
    seed: int = 0
    val_interval: int = 5
    oversize: int | None = None  # None -> ceil(patch_size * sqrt(2))
    foreground_sample_fraction: float = 0.5
    overlap: float = 0.5

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValidationError("train.epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("train.learning_rate must be > 0")
        if self.batch_size < 1 or self.patches_per_slide_per_epoch < 1:
            raise ValidationError("train.batch_size and train.patches_per_slide_per_epoch must be >= 1")
        if self.val_interval < 1:
            raise ValidationError("train.val_interval must be >= 1")
        if not 0 <= self.foreground_sample_fraction <= 1:
            raise ValidationError("train.foreground_sample_fraction must be in [0, 1]")
        if self.oversize is not None and self.oversize < self.patch_size:
            raise ValidationError("train.oversize must be >= train.patch_size")


def num_workers() -> int:
    """Extraction threads, capped by ``HISTOSEG_NUM_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("HISTOSEG_NUM_WORKERS", "1")))
    except ValueError:
        return 1


class TrainLog:
    """Append-only JSON-lines log of step and validation records."""

    def __init__(self, path=None, append: bool = False):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self._last = (0, -1)
        if self.path is not None:
            if append and self.path.exists():
                self.records = read_train_log(self.path)
                steps = [r for r in self.records if r["kind"] == "step"]
                if steps:
                    self._last = (steps[-1]["epoch"], steps[-1]["step"])
            elif not append:
                self.path.write_text("")

    def _write(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def step(self, epoch: int, step: int, diag: dict) -> None:
        if (epoch, step) <= self._last:
            raise RuntimeError(f"log order violated: {(epoch, step)} after {self._last}")
        self._last = (epoch, step)
        self._write({
            "kind": "step", "epoch": epoch, "step": step, "loss": diag["total"],
            "l_wce": diag["l_wce"], "l_bs": diag["l_bs"],
            "mean_w_fb": diag["mean_w_fb"], "mean_w_bs": diag["mean_w_bs"],
        })

    def validation(self, epoch: int, report: IoUReport) -> None:
        self._write({"kind": "val", "epoch": epoch, "mean_iou": report.average,
                     "per_slide": dict(report.per_slide)})

    @property
    def steps(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "step"]

    @property
    def validations(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "val"]


def read_train_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log: TrainLog
    best_val_iou: float
    best_epoch: int


@dataclass(frozen=True)
class PatchDraw:
    slide_index: int
    center: tuple[int, int]
    rotation_deg: float
    aug_seed: int
    # patch sides lying on the slide border: (top, bottom, left, right)
    flush: tuple[bool, bool, bool, bool] = (False, False, False, False)


@dataclass
class _Slide:
    record: SlideRecord
    image: np.ndarray  # HxWx3 float32 in [0, 1], padded to >= patch size
    mask: np.ndarray
    fg_index: np.ndarray = field(repr=False)


def _load_slides(records, patch_size: int) -> list[_Slide]:
    out = []
    for r in records:
        img = pad_to_min_size(r.load_image().astype(np.float32) / 255.0, patch_size)
        mask = pad_to_min_size(r.load_mask(), patch_size)
        out.append(_Slide(r, img, mask, np.flatnonzero(mask)))
    return out


def plan_epoch(slides: list[_Slide], cfg: TrainConfig, aug: AugmentConfig, epoch: int,
               margin: int | None = None) -> list[PatchDraw]:
    """Every (slide, center, rotation, augmentation seed) drawn for one epoch.

    Drawn centrally from a generator keyed on (seed, epoch), so the stream
    does not depend on worker count and a resumed run sees the same draws.

    Centers are clipped so patches stay on the slide. Uniform draws range
    ``margin`` past the clip limits, so a share of patches sits flush with
    the slide border; those keep their border-side margin in the loss (the
    same pixels stitching keeps from edge tiles) and rotate by quarter turns
    only, so the border stays a patch edge.
    """
    if margin is None:
        margin = cfg.patch_size // 4
    rng = np.random.default_rng([cfg.seed, epoch])
    half = cfg.patch_size // 2
    draws = []
    for si, s in enumerate(slides):
        h, w = s.mask.shape
        lo_r, hi_r = half, h - (cfg.patch_size - half)
        lo_c, hi_c = half, w - (cfg.patch_size - half)
        for _ in range(cfg.patches_per_slide_per_epoch):
            if s.fg_index.size and rng.random() < cfg.foreground_sample_fraction:
                r, c = np.unravel_index(s.fg_index[rng.integers(s.fg_index.size)], (h, w))
                jitter = rng.integers(-(cfg.patch_size // 4), cfg.patch_size // 4 + 1, size=2)
                r, c = r + jitter[0], c + jitter[1]
            else:
                r = rng.integers(lo_r - margin, hi_r + margin + 1)
                c = rng.integers(lo_c - margin, hi_c + margin + 1)
            r, c = int(np.clip(r, lo_r, hi_r)), int(np.clip(c, lo_c, hi_c))
            flush = (r == lo_r, r == hi_r, c == lo_c, c == hi_c)
            rot = float(rng.uniform(0.0, 360.0)) if aug.rotation else 0.0
            if any(flush):
                rot = 90.0 * (rot // 90.0)
            draws.append(PatchDraw(si, (r, c), rot, int(rng.integers(2**31)), flush))
    order = rng.permutation(len(draws))
    return [draws[i] for i in order]


def _materialize(slides, draw: PatchDraw, cfg: TrainConfig, aug: AugmentConfig, margin: int):
    s = slides[draw.slide_index]
    oversize = cfg.oversize or default_oversize(cfg.patch_size)
    patch = extract_rotated_patch(s.image, s.mask, draw.center, cfg.patch_size, draw.rotation_deg,
                                  oversize, s.record.slide_id)
    if any(draw.flush):
        box = flush_loss_box(cfg.patch_size, margin, draw.flush)
        patch.loss_box = rotate_box(box, cfg.patch_size, int(draw.rotation_deg // 90.0))
    patch = augment(patch, aug, np.random.default_rng(draw.aug_seed))
    return patch, s.record.noise_flag


def _set_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def predict_slide(model, slide_image: np.ndarray, patch_size: int, overlap: float = 0.5,
                  crop_margin: int | None = None, slide_id: str = "", threshold: float = 0.5,
                  batch_size: int = 1, tile_dir=None) -> StitchedPrediction:
    """Tile, predict, threshold (``p > threshold``) and stitch one slide.

    With ``tile_dir`` each tile's hard prediction is also written there as
    ``{slide_id}_{row}_{col}.png``.
    """
    if crop_margin is None:
        crop_margin = patch_size // 4
    img = slide_image.astype(np.float32) / 255.0 if slide_image.dtype == np.uint8 else slide_image.astype(np.float32)
    h, w = img.shape[:2]
    padded = pad_to_min_size(img, patch_size)
    tiles = plan_tiles(padded.shape[0], padded.shape[1], patch_size, overlap, slide_id)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    preds = []
    try:
        with torch.no_grad():
            for i in range(0, len(tiles), batch_size):
                chunk = tiles[i : i + batch_size]
                x = torch.from_numpy(np.stack([np.moveaxis(t.window(padded), -1, 0) for t in chunk]))
                p = torch.softmax(model(x), dim=1)[:, 1]
                preds.extend((p > threshold).to(torch.uint8).numpy())
    finally:
        if was_training:
            model.train()
    if tile_dir is not None:
        for t, p in zip(tiles, preds):
            save_tile_prediction(tile_dir, t, p)
    stitched = stitch(list(zip(tiles, preds)), padded.shape[:2], crop_margin, slide_id=slide_id)
    stitched.mask = stitched.mask[:h, :w]
    return stitched


def evaluate_records(model, records, patch_size: int, crop_margin: int | None = None,
                     overlap: float = 0.5) -> IoUReport:
    scores = []
    for r in records:
        pred = predict_slide(model, r.load_image(), patch_size, overlap, crop_margin, r.slide_id)
        scores.append((r.slide_id, iou(pred.mask, r.load_mask())))
    return report_from_scores(scores)


def train(manifest: Manifest, model_config: ModelConfig, loss_config: LossConfig, train_config: TrainConfig,
          out_dir, augment_config: AugmentConfig | None = None, resume_from=None,
          stop_after_epoch: int | None = None) -> TrainResult:
    """Train, validate every ``val_interval`` epochs and keep the best checkpoint.

    Writes ``train.log``, ``last.ckpt`` (every epoch) and ``best.ckpt`` into
    ``out_dir``. ``resume_from`` continues from a ``last.ckpt``;
    ``stop_after_epoch`` ends the run early (used to test resuming).
    """
    aug = augment_config or AugmentConfig()
    for c in (model_config, loss_config, train_config, aug):
        c.validate()
    cfg = train_config
    margin = loss_config.margin_for(cfg.patch_size)
    if cfg.patch_size % model_config.divisor:
        raise ValidationError(f"patch_size {cfg.patch_size} must be divisible by {model_config.divisor}")
    train_records = manifest.split(Split.TRAIN)
    val_records = manifest.split(Split.VAL)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    _set_seed(cfg.seed)
    model = SegNet(model_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    start_epoch, best_iou, best_epoch = 1, -math.inf, 0
    if resume_from is not None:
        payload = read_checkpoint(resume_from)
        model, opt_state, last_epoch = load_checkpoint(resume_from, model_config)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        optimizer.load_state_dict(opt_state)
        start_epoch = last_epoch + 1
        best_iou = payload["extra"].get("best_iou", -math.inf)
        best_epoch = payload["extra"].get("best_epoch", 0)
    tlog = TrainLog(out_dir / "train.log", append=resume_from is not None)

    slides = _load_slides(train_records, cfg.patch_size)
    if loss_config.recompute_class_weights:
        class_weights = class_weights_from_masks(s.mask for s in slides)
    else:
        class_weights = (loss_config.w_bg, loss_config.w_fg)
    workers = num_workers()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    best_path, last_path = out_dir / "best.ckpt", out_dir / "last.ckpt"
    geometry = {"patch_size": cfg.patch_size, "crop_margin": margin}
    central = central_box(cfg.patch_size, cfg.patch_size, margin)
    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            model.train()
            draws = plan_epoch(slides, cfg, aug, epoch, margin)
            t0 = time.time()
            for step, i in enumerate(range(0, len(draws), cfg.batch_size)):
                chunk = draws[i : i + cfg.batch_size]
                fn = lambda d: _materialize(slides, d, cfg, aug, margin)  # noqa: E731
                items = list(pool.map(fn, chunk)) if pool else [fn(d) for d in chunk]
                x = torch.from_numpy(np.stack([p.image for p, _ in items]))
                y = torch.from_numpy(np.stack([p.mask for p, _ in items]).astype(np.int64))
                flags = [f for _, f in items]
                boxes = [p.loss_box or central for p, _ in items]
                logits = model(x)
                loss, diag = total_loss(logits, y, epoch, flags, loss_config, class_weights=class_weights,
                                        crop_boxes=boxes)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                tlog.step(epoch, step, diag)
            log.info("epoch %d: %d steps, last loss %.4f (%.1fs)", epoch, step + 1, diag["total"], time.time() - t0)

            if epoch % cfg.val_interval == 0 or epoch == cfg.epochs:
                report = evaluate_records(model, val_records, cfg.patch_size, margin, cfg.overlap)
                tlog.validation(epoch, report)
                log.info("epoch %d: val mean IoU %.4f", epoch, report.average)
                if report.average > best_iou:
                    best_iou, best_epoch = report.average, epoch
                    save_checkpoint(model, None, epoch, best_path, {**geometry, "val_iou": best_iou})
            save_checkpoint(model, optimizer.state_dict(), epoch, last_path,
                            {**geometry, "best_iou": best_iou, "best_epoch": best_epoch})
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                break
    finally:
        if pool:
            pool.shutdown()
    return TrainResult(best_path, last_path, tlog, best_iou, best_epoch)

