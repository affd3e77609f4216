#!/usr/bin/env python3
"""Command line front end for floodseg"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import click
import structlog
import structlog.contextvars

from . import FloodsegError, ConfigError, THREADS_ENV
from .config import RunConfig, build_default_map
from .logs import stderr_logger

log = structlog.get_logger()

PATH = click.Path(path_type=Path)
EXISTING = click.Path(exists=True, dir_okay=False, path_type=Path)
EXISTING_ANY = click.Path(exists=True, path_type=Path)
ARCHS = click.Choice(["linear", "scnn"])


def setup_logging(verbose: bool = False):
    """Global state. Eat it"""
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.StackInfoRenderer(),
            structlog.dev.set_exc_info,
            structlog.processors.format_exc_info,
            structlog.processors.TimeStamper(fmt="%Y-%m-%d %H:%M.%S", utc=False),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            logging.DEBUG if verbose else logging.INFO
        ),
        logger_factory=stderr_logger,
        cache_logger_on_first_use=False,
    )
    structlog.contextvars.clear_contextvars()
    log.debug("Logging, debug, initialized")


@dataclass(frozen=True)
class RunContext:
    seed: int
    threads: int


class FloodsegGroup(click.Group):
    """Turns library errors into one-line failures with exit status 1"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except FloodsegError as err:
            raise click.ClickException(f"{type(err).__name__}: {err}") from err


def _load_config(ctx, param, value):
    if value is None:
        return None
    try:
        config = RunConfig.load(value)
        ctx.default_map = build_default_map(config, ctx.command)
    except ConfigError as err:
        raise click.BadParameter(str(err), ctx=ctx, param=param) from err
    return value


_RUN_KEYS = ("seed", "threads")


def _run_override(ctx, param, value):
    if value is not None:
        ctx.meta[f"floodseg.{param.name}"] = value
    return value


def run_options(func):
    """`--seed` and `--threads` after the subcommand name, winning over the
    group's values."""
    func = click.option(
        "--threads",
        type=click.IntRange(min=1),
        expose_value=False,
        callback=_run_override,
        help="Worker thread cap for this command.",
    )(func)
    return click.option(
        "--seed",
        type=click.IntRange(min=0),
        expose_value=False,
        callback=_run_override,
        help="Seed for this command.",
    )(func)


def _resolved(ctx):
    """Log the complete parameter set of the running subcommand."""
    overrides = {
        key: ctx.meta[f"floodseg.{key}"]
        for key in _RUN_KEYS
        if f"floodseg.{key}" in ctx.meta
    }
    obj: RunContext = replace(ctx.obj, **overrides)
    ctx.obj = obj
    params = {
        key: str(val) if isinstance(val, Path) else val
        for key, val in ctx.params.items()
    }
    log.info(
        "Resolved config",
        command=ctx.info_name,
        seed=obj.seed,
        threads=obj.threads,
        **params,
    )
    return obj


def _band(ctx, param, value):
    from .raster import BandId

    try:
        return BandId.parse(value)
    except FloodsegError as err:
        raise click.BadParameter(str(err), ctx=ctx, param=param) from err


@click.group(cls=FloodsegGroup)
@click.option(
    "--config",
    type=EXISTING,
    is_eager=True,
    expose_value=False,
    callback=_load_config,
    help="Plain-text `key = value` file; command-line flags win.",
)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    default=1,
    envvar=THREADS_ENV,
    show_default=True,
    help=f"Worker thread cap (env {THREADS_ENV}).",
)
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.version_option(package_name="floodseg")
@click.pass_context
def cli(ctx, seed, threads, verbose):
    """Onboard flood segmentation toolkit"""
    setup_logging(verbose)
    ctx.obj = RunContext(seed=seed, threads=threads)


# --- data -------------------------------------------------------------------


@cli.command()
@run_options
@click.option("--out", type=PATH, required=True, help="Output directory.")
@click.option(
    "--n", "n_scenes", type=click.IntRange(min=1), default=10, show_default=True
)
@click.option("--width", type=int, default=128, show_default=True)
@click.option("--height", type=int, default=128, show_default=True)
@click.option("--bands", type=click.IntRange(min=1), default=13, show_default=True)
@click.option("--water-fraction", type=float, default=0.2, show_default=True)
@click.option("--cloud-fraction", type=float, default=0.1, show_default=True)
@click.option("--invalid-fraction", type=float, default=0.0, show_default=True)
@click.option("--noise-sigma", type=float, default=0.045, show_default=True)
@click.option("--muddy-fraction", type=float, default=0.0, show_default=True)
@click.option(
    "--split",
    type=click.Choice(["train", "val", "test"]),
    help="Use the class fractions of a published split.",
)
@click.pass_context
def synth(
    ctx,
    out,
    n_scenes,
    width,
    height,
    bands,
    water_fraction,
    cloud_fraction,
    invalid_fraction,
    noise_sigma,
    muddy_fraction,
    split,
):
    """Generate a labelled synthetic dataset."""
    from .synthgen import SceneSpec, make_dataset

    obj = _resolved(ctx)
    shape = dict(
        width=width,
        height=height,
        seed=obj.seed,
        band_count=bands,
        noise_sigma=noise_sigma,
    )
    if split:
        template = SceneSpec.from_split(split, **shape)
    else:
        template = SceneSpec(
            water_fraction=water_fraction,
            cloud_fraction=cloud_fraction,
            invalid_fraction=invalid_fraction,
            **shape,
        )
    manifest = make_dataset(
        template,
        n_scenes,
        out,
        muddy_water_fraction=muddy_fraction,
        threads=obj.threads,
    )
    click.echo(f"Wrote {len(manifest)} scenes to {out}")


@cli.command()
@run_options
@click.option("--manifest", type=EXISTING_ANY, required=True)
@click.option("--out", type=PATH, required=True, help="Output directory.")
@click.option("--factor", type=click.IntRange(min=1), default=8, show_default=True)
@click.pass_context
def degrade(ctx, manifest, out, factor):
    """Block-average every scene of a manifest (10 m to 80 m at factor 8)."""
    from .synthgen import degrade_dataset

    _resolved(ctx)
    result = degrade_dataset(manifest, out, factor)
    click.echo(f"Degraded {len(result)} scenes by {factor} into {out}")


@cli.command()
@run_options
@click.option("--manifest", type=EXISTING_ANY, required=True)
@click.pass_context
def stats(ctx, manifest):
    """Class percentages of a dataset."""
    from .raster import ClassCode
    from .synthgen import read_manifest

    _resolved(ctx)
    data = read_manifest(manifest)
    counts = data.class_counts()
    total = sum(counts)
    click.echo(f"scenes: {len(data)}")
    click.echo(f"pixels: {total}")
    for code in (ClassCode.WATER, ClassCode.LAND, ClassCode.CLOUD, ClassCode.INVALID):
        click.echo(f"{code.name.lower()}: {100 * counts[code] / total:.2f}%")


# --- models -----------------------------------------------------------------


def _manifest_bands(manifest) -> int:
    first = manifest.entries[0]
    image, _ = manifest.load(first)
    return image.band_count


@cli.command()
@run_options
@click.option("--manifest", type=EXISTING_ANY, required=True)
@click.option("--val-manifest", type=EXISTING_ANY)
@click.option("--arch", type=ARCHS, default="scnn", show_default=True)
@click.option("--out", type=PATH, required=True, help="Model file (WFM).")
@click.option("--log", "log_path", type=PATH, help="Per-epoch CSV log.")
@click.option("--epochs", type=click.IntRange(min=1))
@click.option("--batch-size", type=click.IntRange(min=1))
@click.option("--learning-rate", type=float)
@click.option("--momentum", type=float)
@click.option("--patch-size", type=click.IntRange(min=1))
@click.option("--standardize/--no-standardize", default=None)
@click.option("--augment/--no-augment", default=None)
@click.option("--class-weights", type=click.Choice(["observed", "published", "equal"]))
@click.option("--dice-weight", type=float)
@click.pass_context
def train(
    ctx,
    manifest,
    val_manifest,
    arch,
    out,
    log_path,
    epochs,
    batch_size,
    learning_rate,
    momentum,
    patch_size,
    standardize,
    augment,
    class_weights,
    dice_weight,
):
    """Train a linear model or the SCNN from scratch."""
    from .nnet import ModelKind, build_linear, build_scnn, count_params, save_model
    from .synthgen import read_manifest
    from .training import LossConfig, TrainConfig, train as fit, training_log_csv

    obj = _resolved(ctx)
    data = read_manifest(manifest)
    val = read_manifest(val_manifest) if val_manifest else None
    bands = _manifest_bands(data)
    builder = build_linear if arch == "linear" else build_scnn
    model = builder(bands=bands, seed=obj.seed)

    overrides = dict(
        epochs=epochs,
        batch_size=batch_size,
        learning_rate=learning_rate,
        momentum=momentum,
        patch_size=patch_size,
        standardize=standardize,
        augment=augment,
        class_weights=class_weights,
    )
    train_cfg = TrainConfig.for_model(
        ModelKind[arch.upper()],
        seed=obj.seed,
        **{k: v for k, v in overrides.items() if v is not None},
    )
    loss_kws = {} if dice_weight is None else {"dice_weight": dice_weight}
    loss_cfg = LossConfig(class_weights=None, **loss_kws)

    result = fit(model, data, train_cfg, loss_cfg, val)
    save_model(result.model, out)
    if log_path:
        training_log_csv(result.history, log_path)
    last = result.history[-1]
    click.echo(
        f"Trained {arch} ({count_params(result.model)} parameters) "
        f"for {len(result.history)} epochs, final loss {last.loss:.4f}"
    )
    click.echo(f"Wrote {out}")


@cli.command()
@run_options
@click.option("--model", type=EXISTING, required=True)
@click.option("--image", type=EXISTING, required=True)
@click.option("--out", type=PATH, required=True, help="Mask file (WFL).")
@click.option("--ppm", type=PATH, help="Also render the map as a PPM image.")
@click.option("--patch-size", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--overlap", type=click.IntRange(min=0), default=8, show_default=True)
@click.pass_context
def infer(ctx, model, image, out, ppm, patch_size, overlap):
    """Segment a whole scene."""
    from .nnet import load_model
    from .onboard import segment_scene
    from .raster import ClassCode, read_image, render_mask, write_mask

    obj = _resolved(ctx)
    mask = segment_scene(
        load_model(model), read_image(image), patch_size, overlap, obj.threads
    )
    write_mask(mask, out)
    if ppm:
        render_mask(mask, ppm)
    counts = mask.counts()
    total = mask.width * mask.height
    for code in (ClassCode.WATER, ClassCode.LAND, ClassCode.CLOUD):
        click.echo(f"{code.name.lower()}: {100 * counts[code] / total:.2f}%")


@cli.command()
@run_options
@click.option("--image", type=EXISTING, required=True)
@click.option("--out", type=PATH, required=True, help="Mask file (WFL).")
@click.option("--band-a", default="B02", show_default=True, callback=_band)
@click.option("--band-b", default="B08", show_default=True, callback=_band)
@click.option(
    "--threshold", type=click.FloatRange(-1, 1), default=0.0, show_default=True
)
@click.option("--truth", type=EXISTING, help="Tune the threshold against this mask.")
@click.pass_context
def ndwi(ctx, image, out, band_a, band_b, threshold, truth):
    """Threshold the NDWI index of a scene."""
    from .baselines import NdwiConfig, classify_fixed, tune_threshold
    from .raster import ClassCode, read_image, read_mask, write_mask

    _resolved(ctx)
    scene = read_image(image)
    config = NdwiConfig(band_a, band_b, threshold)
    validity = None
    if truth:
        validity = read_mask(truth)
        best, iou = tune_threshold(scene, validity, config=config)
        config = replace(config, threshold=best)
        click.echo(f"tuned-threshold: {best:.2f}")
        click.echo(f"water-iou: {iou:.4f}")
    mask = classify_fixed(scene, config, validity)
    write_mask(mask, out)
    total = mask.width * mask.height
    click.echo(f"water: {100 * mask.counts()[ClassCode.WATER] / total:.2f}%")


# --- evaluation -------------------------------------------------------------


def _segmenter(method, model, patch_size, overlap):
    from .baselines import NdwiSegmenter, TunedNdwiSegmenter
    from .evaluation import ModelSegmenter
    from .nnet import load_model

    if method == "ndwi":
        return NdwiSegmenter()
    if method == "ndwi-tuned":
        return TunedNdwiSegmenter()
    if model is None:
        raise click.UsageError("--model is required with --method model")
    return ModelSegmenter(load_model(model), patch_size, overlap, name=model.stem)


@cli.command("eval")
@run_options
@click.option("--manifest", type=EXISTING_ANY, required=True)
@click.option(
    "--method",
    type=click.Choice(["model", "ndwi", "ndwi-tuned"]),
    default="model",
    show_default=True,
)
@click.option("--model", type=EXISTING)
@click.option("--out", type=PATH, required=True, help="Report CSV.")
@click.option("--confusion", "confusion_path", type=PATH, help="Confusion CSV.")
@click.option("--patch-size", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--overlap", type=click.IntRange(min=0), default=8, show_default=True)
@click.pass_context
def evaluate(ctx, manifest, method, model, out, confusion_path, patch_size, overlap):
    """Water precision, recall and IoU over a dataset."""
    from .evaluation import evaluate_dataset, write_confusion_csv, write_report_csv

    obj = _resolved(ctx)
    segmenter = _segmenter(method, model, patch_size, overlap)
    report = evaluate_dataset(segmenter, manifest, obj.threads)
    write_report_csv(report, out)
    if confusion_path:
        write_confusion_csv(report, confusion_path)
    water = report.water()
    click.echo(
        f"{report.name}: precision {water.precision:.4f} "
        f"recall {water.recall:.4f} iou {water.iou:.4f}"
    )


@cli.command("pr-curve")
@run_options
@click.option("--manifest", type=EXISTING_ANY, required=True)
@click.argument("models", nargs=-1, required=True, type=EXISTING)
@click.option("--out-dir", type=PATH, required=True)
@click.option(
    "--min-recall", type=click.FloatRange(0, 1), default=0.95, show_default=True
)
@click.option("--patch-size", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--overlap", type=click.IntRange(min=0), default=8, show_default=True)
@click.pass_context
def pr_curve(ctx, manifest, models, out_dir, min_recall, patch_size, overlap):
    """Water PR curves of one or more models, CSV per model plus an SVG."""
    from .evaluation import (
        ModelSegmenter,
        dataset_pr_curve,
        operating_point,
        render_pr_svg,
        write_pr_csv,
    )
    from .nnet import load_model

    obj = _resolved(ctx)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = {}
    for path in models:
        segmenter = ModelSegmenter(load_model(path), patch_size, overlap)
        curve = dataset_pr_curve(segmenter, manifest, threads=obj.threads)
        write_pr_csv(curve, out_dir / f"{path.stem}_pr.csv")
        curves[path.stem] = curve
        point = operating_point(curve, min_recall)
        flag = "" if point.qualified else " (recall target not reached)"
        click.echo(
            f"{path.stem}: threshold {point.threshold:.2f} precision "
            f"{point.precision:.4f} recall {point.recall:.4f}{flag}"
        )
    render_pr_svg(curves, out_dir / "pr_curve.svg", min_recall)


@cli.command()
@run_options
@click.option("--manifest", type=EXISTING_ANY, required=True)
@click.argument("models", nargs=-1, type=EXISTING)
@click.option("--out", type=PATH, help="Markdown results table.")
@click.option("--band-a", default="B02", show_default=True, callback=_band)
@click.option("--band-b", default="B08", show_default=True, callback=_band)
@click.option("--patch-size", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--overlap", type=click.IntRange(min=0), default=8, show_default=True)
@click.pass_context
def compare(ctx, manifest, models, out, band_a, band_b, patch_size, overlap):
    """Results table of NDWI baselines and trained models."""
    from .baselines import NdwiConfig
    from .evaluation import compare_methods, render_results_table
    from .nnet import load_model

    obj = _resolved(ctx)
    loaded = {path.stem: load_model(path) for path in models}
    results = compare_methods(
        manifest,
        loaded,
        patch_size,
        overlap,
        ndwi_config=NdwiConfig(band_a, band_b),
        threads=obj.threads,
    )
    title = f"Water segmentation: {manifest}"
    click.echo(render_results_table(results, out, title=title))


# --- onboard ----------------------------------------------------------------


@cli.command()
@run_options
@click.option("--mask", type=EXISTING, required=True, help="Mask file (WFL).")
@click.option("--out", type=PATH, required=True, help="Downlink map file (WFL).")
@click.pass_context
def pack(ctx, mask, out):
    """Pack a class map into the 2-bit WFL downlink file."""
    from .onboard import packed_size
    from .raster import read_mask, write_mask

    _resolved(ctx)
    labels = read_mask(mask)
    write_mask(labels, out)
    click.echo(f"pixels: {labels.width * labels.height}")
    click.echo(f"packed-bytes: {packed_size(labels.width, labels.height)}")
    click.echo(f"file-bytes: {out.stat().st_size}")


@cli.command()
@run_options
@click.option("--bands", type=click.IntRange(min=1), default=49, show_default=True)
@click.option("--bits", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--map-bits", type=click.Choice(["1", "2", "4", "8"]), default="2")
@click.option("--width", type=click.IntRange(min=1))
@click.option("--height", type=click.IntRange(min=1))
@click.option("--link-bps", type=float, default=1e6, show_default=True)
@click.pass_context
def bandwidth(ctx, bands, bits, map_bits, width, height, link_bps):
    """Downlink reduction of a class map over the raw cube."""
    from .onboard import (
        QUOTED_REDUCTION_FACTOR,
        DownlinkSpec,
        downlink_seconds,
        reduction_factor,
    )

    _resolved(ctx)
    spec = DownlinkSpec(bands, bits, int(map_bits))
    click.echo(f"raw-ratio: {reduction_factor(spec)}")
    click.echo(f"paper-claimed: {QUOTED_REDUCTION_FACTOR}")
    if width and height:
        seconds = downlink_seconds(spec, width, height, link_bps)
        click.echo(f"raw-seconds: {seconds.raw_seconds:.3f}")
        click.echo(f"map-seconds: {seconds.map_seconds:.3f}")


def _model_for(arch, model_path, bands, seed):
    from .nnet import build_linear, build_scnn, load_model

    if model_path:
        return load_model(model_path)
    builder = build_linear if arch == "linear" else build_scnn
    return builder(bands=bands, seed=seed)


@cli.command()
@run_options
@click.option("--arch", type=ARCHS, default="scnn", show_default=True)
@click.option("--model", type=EXISTING, help="Count a saved model instead.")
@click.option("--bands", type=click.IntRange(min=1), default=13, show_default=True)
@click.option("--width", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--height", type=click.IntRange(min=1), default=64, show_default=True)
@click.pass_context
def flops(ctx, arch, model, bands, width, height):
    """Parameter and operation counts of a model."""
    from .nnet import count_flops, count_params, flops_breakdown

    obj = _resolved(ctx)
    net = _model_for(arch, model, bands, obj.seed)
    click.echo(f"params: {count_params(net)}")
    for kind, ops in flops_breakdown(net, height, width).items():
        click.echo(f"{kind}: {ops}")
    click.echo(f"flops: {count_flops(net, height, width)}")


@cli.command()
@run_options
@click.option("--arch", type=ARCHS, default="scnn", show_default=True)
@click.option("--model", type=EXISTING, help="Benchmark a saved model instead.")
@click.option("--width", type=click.IntRange(min=1), default=4000, show_default=True)
@click.option("--height", type=click.IntRange(min=1), default=3000, show_default=True)
@click.option("--bands", type=click.IntRange(min=1), default=13, show_default=True)
@click.option("--repetitions", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--patch-size", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--overlap", type=click.IntRange(min=0), default=8, show_default=True)
@click.option("--csv", "csv_path", type=PATH, help="Also write the result as CSV.")
@click.pass_context
def bench(
    ctx, arch, model, width, height, bands, repetitions, patch_size, overlap, csv_path
):
    """Time full-scene segmentation of a random scene."""
    from .onboard import benchmark, write_bench_csv

    obj = _resolved(ctx)
    net = _model_for(arch, model, bands, obj.seed)
    result = benchmark(
        net,
        width=width,
        height=height,
        bands=bands,
        repetitions=repetitions,
        patch_size=patch_size,
        overlap=overlap,
        threads=obj.threads,
        seed=obj.seed,
    )
    if csv_path:
        write_bench_csv([result], csv_path)
    click.echo(f"pixels: {result.pixels}")
    click.echo(f"wall-ms: {result.wall_ms:.1f}")
    click.echo(f"px-per-s: {result.px_per_s:.1f}")
    click.echo(f"flops: {result.flops}")
    click.echo(f"peak-memory-bytes: {result.peak_memory_bytes}")
