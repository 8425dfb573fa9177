"""Slide-level IoU, report tables and TP/FP/FN overlays."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .ingestion import write_image

TP_COLOR = (0, 255, 0)
FP_COLOR = (255, 0, 0)
FN_COLOR = (0, 0, 255)


@dataclass
class IoUReport:
    per_slide: list[tuple[str, float]]
    average: float

    def as_dict(self) -> dict:
        return {"per_slide": dict(self.per_slide), "average": self.average}


def _binary(name: str, a) -> np.ndarray:
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise ValidationError(f"{name} must be binary (values in {{0, 1}})")
    return a.astype(bool)


def iou(pred, gt) -> float:
    """|pred & gt| / |pred | gt|; two empty masks score 1.0."""
    p, g = _binary("pred", pred), _binary("gt", gt)
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def report_from_scores(scores) -> IoUReport:
    scores = [(str(sid), float(v)) for sid, v in scores]
    if not scores:
        raise ValidationError("cannot build a report from an empty list")
    return IoUReport(scores, sum(v for _, v in scores) / len(scores))


def build_report(pairs) -> IoUReport:
    """``pairs`` is an iterable of ``(slide_id, pred, gt)``."""
    return report_from_scores((sid, iou(pred, gt)) for sid, pred, gt in pairs)


def write_report(report: IoUReport, out_dir, stem: str = "iou_report") -> tuple[Path, Path]:
    """CSV (``slide_id,iou`` plus an ``average`` row) and an aligned text table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "iou"])
        for sid, v in report.per_slide:
            w.writerow([sid, f"{v:.4f}"])
        w.writerow(["average", f"{report.average:.4f}"])
    txt_path = out_dir / f"{stem}.txt"
    txt_path.write_text(format_table(report))
    return csv_path, txt_path


def format_table(report: IoUReport, title: str = "IoU") -> str:
    width = max([len("WSI Identifier"), len("Average")] + [len(s) for s, _ in report.per_slide])
    rule = "-" * (width + 12)
    lines = [f"{'WSI Identifier':<{width}}  {title:>8}", rule]
    lines += [f"{sid:<{width}}  {v:>8.4f}" for sid, v in report.per_slide]
    lines += [rule, f"{'Average':<{width}}  {report.average:>8.4f}", ""]
    return "\n".join(lines)


def read_report_csv(path) -> IoUReport:
    rows = list(csv.DictReader(open(path, newline="")))
    per = [(r["slide_id"], float(r["iou"])) for r in rows if r["slide_id"] != "average"]
    return report_from_scores(per)


def confusion_categories(pred, gt) -> dict[str, np.ndarray]:
    p, g = _binary("pred", pred), _binary("gt", gt)
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    return {"tp": p & g, "fp": p & ~g, "fn": ~p & g, "tn": ~p & ~g}


def render_overlay(image: np.ndarray, pred, gt, alpha: float = 0.5) -> np.ndarray:
    """Blend green (TP), red (FP) and blue (FN) over ``image``; TN pixels untouched."""
    if not 0 < alpha <= 1:
        raise ValidationError(f"alpha must be in (0, 1], got {alpha}")
    image = np.asarray(image)
    cats = confusion_categories(pred, gt)
    if image.shape[:2] != cats["tp"].shape or image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"image {image.shape} does not match masks {cats['tp'].shape}")
    out = image.astype(np.float64)
    for key, color in (("tp", TP_COLOR), ("fp", FP_COLOR), ("fn", FN_COLOR)):
        sel = cats[key]
        out[sel] = (1 - alpha) * out[sel] + alpha * np.asarray(color, dtype=np.float64)
    out = np.clip(np.round(out), 0, 255).astype(np.uint8)
    # untouched pixels are copied bit-exactly
    out[cats["tn"]] = image[cats["tn"]]
    return out


def save_overlay(out_dir, slide_id: str, overlay: np.ndarray) -> Path:
    path = Path(out_dir) / f"{slide_id}_overlay.png"
    write_image(path, overlay)
    return path
