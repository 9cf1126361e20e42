"""Single command-line entry point for the whole pipeline.

gen-phantom -> segment -> stitch -> ingest -> serve reproduces the full
flow on synthetic data; bench, classify, export, and import-annotations
cover the remaining operations. Parallel work lives in the batch module;
the CLI itself is a thin driver.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import sys
import urllib.request
from pathlib import Path

import click

from . import batch as batch_mod
from . import classify as classify_mod
from . import phantom as phantom_mod
from . import segmentation as seg_mod
from . import stitching as stitch_mod
from .errors import (BatchJobError, ConflictError, InvalidArgumentError,
                     NotFoundError, PreconditionFailedError)
from .grid import make_grid_layout
from .store import Annotation, PrecomputedStore, parse_annotation_document
from .volume import Resolution, load_block, save_block, scan_block_dir

DEFAULT_SEED = 0

_PIPELINE_ERRORS = (InvalidArgumentError, NotFoundError, ConflictError,
                    PreconditionFailedError, BatchJobError, OSError)


def _fail_cleanly(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _PIPELINE_ERRORS as exc:
            raise click.ClickException(str(exc)) from exc
    return wrapper


def _parse_triple(text: str, cast=int) -> tuple:
    parts = [p for p in str(text).replace(" ", "").split(",") if p]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise click.BadParameter(f"expected 1 or 3 comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def _dump_config(ctx: click.Context, path: str | None):
    """Write the effective parameters of this invocation so that
    `neurovol --config FILE <cmd>` reproduces it."""
    if not path:
        return
    params = {k: v for k, v in ctx.params.items() if k != "dump_config"}
    doc: dict = {}
    node = doc
    chain = []
    cur = ctx
    while cur is not None and cur.info_name is not None:
        chain.append(cur.info_name)
        cur = cur.parent
    for name in reversed(chain[:-1]):  # drop the root program name
        node = node.setdefault(name, {})
    node.update(params)
    Path(path).write_text(json.dumps(doc, indent=2, default=str) + "\n")


def _emit(ctx: click.Context, human: str, payload: dict):
    if ctx.obj and ctx.obj.get("json"):
        click.echo(json.dumps(payload))
    else:
        click.echo(human)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="JSON config file (as written by --dump-config).")
@click.option("--json", "json_output", is_flag=True, default=False,
              help="Machine-readable output.")
@click.version_option()
@click.pass_context
def main(ctx, config_path, json_output):
    if config_path:
        ctx.default_map = json.loads(Path(config_path).read_text())
    ctx.obj = {"json": json_output}


@main.command("gen-phantom")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--rows", default=2, show_default=True)
@click.option("--cols", default=2, show_default=True)
@click.option("--extent", default="64", show_default=True,
              help="Block extents, one value or x,y,z.")
@click.option("--overlap-x", default=6, show_default=True)
@click.option("--overlap-y", default=6, show_default=True)
@click.option("--nuclei", default=10, show_default=True, help="Nuclei per block.")
@click.option("--radius", default="3,5", show_default=True, help="Radius range lo,hi.")
@click.option("--background", default=1000, show_default=True)
@click.option("--foreground", default=12000, show_default=True)
@click.option("--noise", default=0.0, show_default=True, help="Gaussian noise sigma.")
@click.option("--neuron-fraction", default=0.5, show_default=True)
@click.option("--resolution", default="1,1,1", show_default=True,
              help="Voxel pitch in um, dx,dy,dz.")
@click.option("--seed", default=DEFAULT_SEED, show_default=True)
@click.option("--dump-config", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@_fail_cleanly
def gen_phantom(ctx, out, rows, cols, extent, overlap_x, overlap_y, nuclei, radius,
                background, foreground, noise, neuron_fraction, resolution, seed,
                dump_config):
    """Generate a synthetic two-channel block grid with ground truth."""
    _dump_config(ctx, dump_config)
    radius_parts = [float(v) for v in radius.split(",") if v]
    if len(radius_parts) == 1:
        radius_parts *= 2
    if len(radius_parts) != 2:
        raise click.BadParameter(f"--radius expects lo,hi, got {radius!r}")
    lo, hi = radius_parts
    spec = phantom_mod.PhantomSpec(
        grid=make_grid_layout(rows, cols),
        block_extents=_parse_triple(extent),
        true_overlap_x=overlap_x,
        true_overlap_y=overlap_y,
        nuclei_per_block=nuclei,
        radius_range=(lo, hi),
        background=background,
        foreground=foreground,
        noise_sigma=noise,
        neuron_fraction=neuron_fraction,
        resolution=Resolution(*_parse_triple(resolution, float)),
    )
    blocks, truth = phantom_mod.generate_phantom(spec, seed)
    truth_path = phantom_mod.save_phantom(blocks, truth, out)
    _emit(ctx, f"wrote {rows * cols} blocks x 2 channels to {out} "
               f"({len(truth.nuclei)} nuclei)",
          {"out": str(out), "blocks": rows * cols, "nuclei": len(truth.nuclei),
           "truth": str(truth_path)})


@main.command()
@click.option("--block-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--channel", default=phantom_mod.NUCLEUS_CHANNEL, show_default=True)
@click.option("--sigma1", default=2.0, show_default=True, help="DoG inner scale (um).")
@click.option("--sigma2", default=3.2, show_default=True, help="DoG outer scale (um).")
@click.option("--threshold", default=100.0, show_default=True)
@click.option("--min-voxels", default=30, show_default=True)
@click.option("--workers", default=1, show_default=True)
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Classify regions with this model.")
@click.option("--second-channel", default=None,
              help="Run coincidence analysis against this channel.")
@click.option("--coincidence-threshold", default=2000.0, show_default=True)
@click.option("--seed", default=DEFAULT_SEED, show_default=True)
@click.option("--dump-config", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@_fail_cleanly
def segment(ctx, block_dir, out, channel, sigma1, sigma2, threshold, min_voxels,
            workers, model_path, second_channel, coincidence_threshold, seed,
            dump_config):
    """Segment every block in a directory over a worker pool."""
    _dump_config(ctx, dump_config)
    params = seg_mod.SegParams(sigma1_um=sigma1, sigma2_um=sigma2,
                               seed_threshold=threshold, min_region_voxels=min_voxels)
    found = scan_block_dir(block_dir, channel)
    if not found:
        raise click.ClickException(f"no {channel!r} blocks in {block_dir}")
    second = scan_block_dir(block_dir, second_channel) if second_channel else {}
    refs = tuple(
        batch_mod.BlockRef(grid_pos=pos, path=path,
                           second_channel_path=second.get(pos))
        for pos, path in sorted(found.items())
    )
    stages = ["segment"]
    model = classify_mod.load_model(model_path) if model_path else None
    if model is not None:
        stages.append("classify")
    if second_channel:
        stages.append("coincidence")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    job = batch_mod.BatchJob(dataset_id=Path(block_dir).name, blocks=refs,
                             stages=tuple(stages), workers=workers, seed=seed,
                             seg_params=params, model=model,
                             coincidence_threshold=coincidence_threshold,
                             labels_out=out_dir)
    result = batch_mod.run_batch(job)
    total = 0
    for (r, c), block_result in sorted(result.results.items()):
        objs = [rec.to_json_obj() for rec in block_result.regions]
        (out_dir / f"regions_r{r}_c{c}.json").write_text(json.dumps(objs, indent=2) + "\n")
        total += len(block_result.regions)
    for (r, c), err in sorted(result.failures.items()):
        click.echo(f"block r{r}_c{c} FAILED:\n{err}", err=True)
    _emit(ctx, f"segmented {len(result.results)} blocks, {total} regions, "
               f"{len(result.failures)} failures, {result.wall_seconds:.2f}s",
          {"blocks": len(result.results), "regions": total,
           "failures": len(result.failures), "wall_s": result.wall_seconds})
    if result.failures:
        sys.exit(1)


def _load_feature_csv(path: Path):
    features, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            features.append(classify_mod.FeatureVector(
                **{name: float(row[name]) for name in classify_mod.FEATURE_NAMES}
            ))
            labels.append(row["label"])
    return features, labels


@main.group()
def classify():
    """Train, cross-validate, or retrain the neuron/glia classifier."""


@classify.command("train")
@click.option("--features-csv", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--c", "c_value", default=1.0, show_default=True)
@click.option("--seed", default=DEFAULT_SEED, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--dump-config", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@_fail_cleanly
def classify_train(ctx, features_csv, c_value, seed, out, dump_config):
    """Train a model from a labeled feature CSV."""
    _dump_config(ctx, dump_config)
    features, labels = _load_feature_csv(Path(features_csv))
    model = classify_mod.train_svm(features, labels, c=c_value, seed=seed)
    classify_mod.save_model(model, out)
    _emit(ctx, f"trained on {len(labels)} examples -> {out}",
          {"examples": len(labels), "model": str(out)})


@classify.command("cv")
@click.option("--features-csv", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--folds", default=5, show_default=True)
@click.option("--c", "c_value", default=1.0, show_default=True)
@click.option("--seed", default=DEFAULT_SEED, show_default=True)
@click.option("--dump-config", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@_fail_cleanly
def classify_cv(ctx, features_csv, folds, c_value, seed, dump_config):
    """Stratified k-fold cross-validated AUC on a labeled feature CSV."""
    _dump_config(ctx, dump_config)
    features, labels = _load_feature_csv(Path(features_csv))
    report = classify_mod.cross_validate(features, labels, k=folds, c=c_value, seed=seed)
    folds_text = " ".join(f"{a:.4f}" for a in report.fold_aucs)
    _emit(ctx, f"mean AUC {report.mean_auc:.4f} (folds: {folds_text})",
          report.to_json_obj())


@classify.command("retrain")
@click.option("--store", "store_root", type=click.Path(exists=True, file_okay=False),
              default=None)
@click.option("--dataset", required=True)
@click.option("--layer", default="centroids", show_default=True)
@click.option("--c", "c_value", default=1.0, show_default=True)
@click.option("--seed", default=DEFAULT_SEED, show_default=True)
@click.option("--server", default=None, help="Retrain via a running server instead.")
@click.option("--dump-config", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@_fail_cleanly
def classify_retrain(ctx, store_root, dataset, layer, c_value, seed, server,
                     dump_config):
    """Retrain from the latest reviewed annotations (locally or via a server)."""
    _dump_config(ctx, dump_config)
    if server:
        body = json.dumps({"layer": layer, "c": c_value, "seed": seed}).encode()
        req = urllib.request.Request(
            f"{server.rstrip('/')}/d/{dataset}/retrain", data=body,
            headers={"Content-Type": "application/json"}, method="POST",
        )
        with urllib.request.urlopen(req) as resp:
            payload = json.loads(resp.read())
        _emit(ctx, f"model v{payload['model_version']} "
                   f"mean AUC {payload['mean_auc']:.4f}", payload)
        return
    if not store_root:
        raise click.ClickException("either --store or --server is required")
    store = PrecomputedStore(store_root)
    model, report = classify_mod.retrain_from_annotations(
        store, dataset, c=c_value, seed=seed, layer=layer)
    _emit(ctx, f"model v{model.version} mean AUC {report.mean_auc:.4f}",
          {"model_version": model.version, **report.to_json_obj()})


@main.command()
@click.option("--block-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--channels", default="dapi,cfos", show_default=True,
              help="First channel drives the overlap search.")
@click.option("--max-frac", default=0.10, show_default=True)
@click.option("--dump-config", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@_fail_cleanly
def stitch(ctx, block_dir, out, channels, max_frac, dump_config):
    """Recover inter-block overlaps and merge the grid per channel."""
    _dump_config(ctx, dump_config)
    channel_list = [c for c in channels.split(",") if c]
    primary = channel_list[0]
    found = scan_block_dir(block_dir, primary)
    if not found:
        raise click.ClickException(f"no {primary!r} blocks in {block_dir}")
    rows = max(r for r, _ in found) + 1
    cols = max(c for _, c in found) + 1
    layout = make_grid_layout(rows, cols)
    blocks = {pos: load_block(path) for pos, path in found.items()}
    stitched, plan = stitch_mod.stitch_grid(blocks, layout, max_frac=max_frac)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_block(stitched, out_dir / f"stitched_{primary}.nvb")
    for channel in channel_list[1:]:
        chan_found = scan_block_dir(block_dir, channel)
        if not chan_found:
            continue
        chan_blocks = {pos: load_block(path) for pos, path in chan_found.items()}
        merged = stitch_mod.place_blocks(chan_blocks, layout, plan)
        save_block(merged, out_dir / f"stitched_{channel}.nvb")
    plan_path = plan.save(out_dir / "plan.json")
    _emit(ctx, f"stitched {rows}x{cols} grid -> {out_dir} "
               f"(extents {plan.extents})",
          {"out": str(out_dir), "extents": list(plan.extents),
           "plan": str(plan_path)})


@main.command()
@click.option("--store", "store_root", required=True, type=click.Path(file_okay=False))
@click.option("--dataset", required=True)
@click.option("--volume", "volumes", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Stitched .nvb volume; repeat per channel.")
@click.option("--chunk", default="64", show_default=True)
@click.option("--scales", default=1, show_default=True)
@click.option("--regions-dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Per-block regions from `segment`, to ingest as annotations.")
@click.option("--plan", "plan_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Stitch plan for translating region coordinates.")
@click.option("--layer", default="centroids", show_default=True)
@click.option("--author", default="pipeline", show_default=True)
@click.option("--dump-config", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@_fail_cleanly
def ingest(ctx, store_root, dataset, volumes, chunk, scales, regions_dir, plan_path,
           layer, author, dump_config):
    """Write stitched volumes (and optional algorithm outputs) into the store."""
    _dump_config(ctx, dump_config)
    store = PrecomputedStore(store_root)
    chunk_size = _parse_triple(chunk)
    manifest = None
    for vol_path in volumes:
        manifest = store.ingest_volume(load_block(vol_path), dataset,
                                       chunk_size=chunk_size, num_scales=scales)
    n_annotations = 0
    if regions_dir:
        if not plan_path:
            raise click.ClickException("--regions-dir requires --plan")
        plan = stitch_mod.StitchPlan.load(plan_path)
        annotations = []
        for regions_file in sorted(Path(regions_dir).glob("regions_r*_c*.json")):
            stem = regions_file.stem.removeprefix("regions_")
            r, c = (int(v) for v in stem.removeprefix("r").split("_c"))
            records = [seg_mod.RegionRecord.from_json_obj(o)
                       for o in json.loads(regions_file.read_text())]
            translated = stitch_mod.translate_annotations(records, (r, c), plan)
            store.write_region_features(dataset, f"r{r}_c{c}", translated)
            for rec in translated:
                cls = rec.class_label if rec.class_label in ("neuron", "glia") \
                    else "centroid"
                annotations.append(Annotation(
                    id=f"r{r}_c{c}/{rec.label}", kind="point",
                    coords=(rec.centroid,), class_label=cls,
                    provenance="algorithm",
                ))
        head = store.head_revision(dataset, layer)
        store.write_annotations(dataset, layer, annotations, base_revision=head,
                                author=author)
        n_annotations = len(annotations)
    _emit(ctx, f"ingested {len(volumes)} channel(s) into {dataset!r}"
               + (f", {n_annotations} annotations" if regions_dir else ""),
          {"dataset": dataset, "channels": list(manifest.channels),
           "scales": [s.key for s in manifest.scales],
           "annotations": n_annotations})


@main.command()
@click.option("--root", envvar="NV_STORE_ROOT", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True)
@click.option("--datasets", default=None,
              help="Comma-separated allowlist; default serves everything.")
@click.option("--cors", default="*", show_default=True,
              help="Comma-separated allowed origins.")
@_fail_cleanly
def serve(root, host, port, datasets, cors):
    """Serve every dataset under the store root over HTTP."""
    from .server import ServerConfig, run_blocking

    config = ServerConfig(
        root=Path(root), host=host, port=port,
        datasets=tuple(datasets.split(",")) if datasets else None,
        cors_origins=tuple(cors.split(",")),
    )
    click.echo(f"serving {root} on http://{host}:{port}")
    run_blocking(config)


@main.command()
@click.option("--counts", default="1,25,100", show_default=True)
@click.option("--extent", default="64", show_default=True)
@click.option("--workers", default=batch_mod.machine_parallelism(), show_default=True)
@click.option("--out", default=None, type=click.Path(dir_okay=False),
              help="Write the report CSV here.")
@click.option("--seed", default=DEFAULT_SEED, show_default=True)
@click.option("--repeats", default=3, show_default=True)
@click.option("--nuclei", default=8, show_default=True)
@click.option("--dump-config", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@_fail_cleanly
def bench(ctx, counts, extent, workers, out, seed, repeats, nuclei, dump_config):
    """Weak-scaling benchmark of the segment stage."""
    _dump_config(ctx, dump_config)
    count_list = [int(v) for v in counts.split(",") if v]
    report = batch_mod.benchmark_scaling(
        count_list, block_extents=_parse_triple(extent), workers=workers,
        seed=seed, repeats=repeats, nuclei_per_block=nuclei,
    )
    if out:
        report.to_csv(out)
    if ctx.obj and ctx.obj.get("json"):
        click.echo(json.dumps([dataclasses.asdict(r) for r in report.rows]))
    else:
        click.echo(report.throughput_table())


@main.command()
@click.option("--store", "store_root", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--dataset", required=True)
@click.option("--layer", required=True)
@click.option("--format", "fmt", default="json", show_default=True,
              type=click.Choice(["json", "csv"]))
@click.option("--rev", default=None, type=int, help="Revision (default HEAD).")
@click.option("--out", default="-", show_default=True)
@_fail_cleanly
def export(store_root, dataset, layer, fmt, rev, out):
    """Export one annotation layer revision as JSON or CSV."""
    store = PrecomputedStore(store_root)
    text = store.export_annotations(dataset, layer, revision=rev, fmt=fmt)
    if out == "-":
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text)


@main.command("import-annotations")
@click.option("--store", "store_root", required=True, type=click.Path(file_okay=False))
@click.option("--dataset", required=True)
@click.option("--layer", required=True)
@click.option("--file", "file_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", default="json", show_default=True,
              type=click.Choice(["json", "csv"]))
@click.option("--author", default="import", show_default=True)
@click.pass_context
@_fail_cleanly
def import_annotations(ctx, store_root, dataset, layer, file_path, fmt, author):
    """Import a previously exported document as a new revision."""
    store = PrecomputedStore(store_root)
    annotations = parse_annotation_document(Path(file_path).read_text(), fmt=fmt)
    head = store.head_revision(dataset, layer)
    revision = store.write_annotations(dataset, layer, annotations,
                                       base_revision=head, author=author)
    _emit(ctx, f"imported {len(annotations)} annotations as revision {revision.number}",
          {"revision": revision.number, "annotations": len(annotations)})


if __name__ == "__main__":
    main()
