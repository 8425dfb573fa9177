"""``histoseg`` command line: synth, train, predict, evaluate, overlay.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .errors import ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("histoseg")


def _parse_radii(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"--radii must be comma-separated numbers, got {text!r}") from None


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")


@main.command()
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--n", "n_slides", type=int, default=10, show_default=True)
@click.option("--size", type=int, default=512, show_default=True)
@click.option("--radii", default="8,48", show_default=True, help="Comma-separated blob radii in pixels.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def synth(seed, n_slides, size, radii, out_dir):
    """Generate a synthetic slide dataset with a 70/15/15 split manifest."""
    from .ingestion import assign_splits, generate_synthetic_dataset, split_counts

    radii = _parse_radii(radii)
    manifest = generate_synthetic_dataset(seed, n_slides, size, radii, out_dir,
                                          splits=assign_splits(n_slides, seed) if n_slides >= 1 else None)
    tr, va, te = split_counts(n_slides)
    click.echo(f"wrote {len(manifest.records)} slides to {out_dir} (train/val/test = {tr}/{va}/{te})")


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--override", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
              help="Override one config value; repeatable.")
@click.option("--resume", type=click.Path(dir_okay=False), default=None, help="Resume from a last.ckpt.")
def train(config, overrides, resume):
    """Train a model from a run configuration file."""
    from .config import dump_run_config, load_run_config
    from .ingestion import load_manifest
    from .training import train as run_training

    cfg = load_run_config(config, overrides)
    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_run_config(cfg, out_dir / "resolved_config.yaml")
    manifest = load_manifest(cfg.paths.manifest, cfg.ingestion.resolution_tag)
    result = run_training(manifest, cfg.model, cfg.loss, cfg.train, out_dir, cfg.augment, resume_from=resume)
    click.echo(f"best val IoU {result.best_val_iou:.4f} at epoch {result.best_epoch}; checkpoints in {out_dir}")


def _records(manifest_path, split):
    from .ingestion import load_manifest

    return load_manifest(manifest_path).split(split)


@main.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--manifest", type=click.Path(dir_okay=False), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--patch-size", type=int, default=None, help="Defaults to the training patch size.")
@click.option("--crop-margin", type=int, default=None, help="Defaults to the training crop margin.")
@click.option("--save-tiles", is_flag=True, help="Also write per-tile predictions.")
def predict(checkpoint, manifest, split, out_dir, patch_size, crop_margin, save_tiles):
    """Write a stitched prediction mask for every slide in a split."""
    from .ingestion import write_mask
    from .model import load_checkpoint, read_checkpoint
    from .patching import prediction_filename
    from .training import predict_slide

    extra = read_checkpoint(checkpoint).get("extra", {})
    model, _, _ = load_checkpoint(checkpoint)
    patch_size = patch_size or extra.get("patch_size", 256)
    if crop_margin is None:
        crop_margin = extra.get("crop_margin", patch_size // 4)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in _records(manifest, split):
        pred = predict_slide(model, r.load_image(), patch_size, 0.5, crop_margin, r.slide_id,
                             tile_dir=out if save_tiles else None)
        write_mask(out / prediction_filename(r.slide_id), pred.mask)
        click.echo(f"{r.slide_id}: {pred.n_tiles} tiles")


def _load_predictions(pred_dir, records):
    from .ingestion import read_mask
    from .patching import prediction_filename

    preds = {}
    for r in records:
        p = Path(pred_dir) / prediction_filename(r.slide_id)
        if not p.is_file():
            raise ValidationError(f"missing prediction for slide {r.slide_id!r}: {p}")
        preds[r.slide_id] = read_mask(p)
    return preds


@main.command()
@click.option("--pred-dir", type=click.Path(file_okay=False), required=True)
@click.option("--manifest", type=click.Path(dir_okay=False), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Where to write the report (default: --pred-dir).")
def evaluate(pred_dir, manifest, split, out_dir):
    """Score stitched predictions against ground truth (slide-level IoU)."""
    from .evaluation import build_report, format_table, write_report

    records = _records(manifest, split)
    preds = _load_predictions(pred_dir, records)
    report = build_report((r.slide_id, preds[r.slide_id], r.load_mask()) for r in records)
    write_report(report, out_dir or pred_dir)
    click.echo(format_table(report), nl=False)


@main.command()
@click.option("--pred-dir", type=click.Path(file_okay=False), required=True)
@click.option("--manifest", type=click.Path(dir_okay=False), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--alpha", type=float, default=0.5, show_default=True)
def overlay(pred_dir, manifest, split, out_dir, alpha):
    """Render TP (green) / FP (red) / FN (blue) overlays."""
    from .evaluation import render_overlay, save_overlay

    records = _records(manifest, split)
    preds = _load_predictions(pred_dir, records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in records:
        path = save_overlay(out, r.slide_id, render_overlay(r.load_image(), preds[r.slide_id], r.load_mask(), alpha))
        click.echo(str(path))


def run(argv=None) -> int:
    """Invoke the CLI and map failures onto the documented exit codes."""
    try:
        main.main(args=argv, prog_name="histoseg", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        return EXIT_RUNTIME
    except click.ClickException as exc:
        exc.show()
        return EXIT_VALIDATION
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        click.echo(f"runtime error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


def entrypoint() -> None:
    sys.exit(run())
