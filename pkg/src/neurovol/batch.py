"""Parallel batch processing of block files over a worker pool.

One task is one block: a fixed-size process pool pulls block files from a
shared queue, runs the requested pipeline stages, and streams results back
to a single collector keyed by grid position. Per-block failures are
recorded without aborting the rest of the job. A weak-scaling benchmark
harness sits on top.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import multiprocessing
import os
import statistics
import tempfile
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import phantom as phantom_mod
from .classify import SvmModel, coincidence_analysis, predict
from .errors import BatchJobError, InvalidArgumentError
from .segmentation import LabelVolume, RegionRecord, SegParams, segment_block
from .segmentation import warm_kernels as seg_warm_kernels
from .volume import load_block, save_block

STAGES = ("segment", "classify", "coincidence")


def machine_parallelism() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # non-Linux fallback
        return os.cpu_count() or 1


def physical_cores() -> int:
    """Physical core count from cpuinfo topology, capped by the CPU
    affinity mask; falls back to the logical count."""
    logical = machine_parallelism()
    try:
        cores = set()
        package = "0"
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.startswith("physical id"):
                package = line.split(":")[1].strip()
            elif line.startswith("core id"):
                cores.add((package, line.split(":")[1].strip()))
        if cores:
            return min(len(cores), logical)
    except OSError:
        pass
    return logical


@dataclass(frozen=True)
class BlockRef:
    grid_pos: tuple[int, int]
    path: Path
    second_channel_path: Path | None = None


@dataclass(frozen=True)
class BatchJob:
    dataset_id: str
    blocks: tuple[BlockRef, ...]
    stages: tuple[str, ...] = ("segment",)
    workers: int = 1
    seed: int = 0
    seg_params: SegParams = field(default_factory=SegParams)
    model: SvmModel | None = None
    coincidence_threshold: float = 0.0
    # When set, workers persist label volumes here (labels_r{r}_c{c}.nvl)
    # instead of shipping them back over the result channel.
    labels_out: Path | None = None

    def __post_init__(self):
        if self.workers < 1:
            raise InvalidArgumentError("worker count must be >= 1")
        if not self.blocks:
            raise InvalidArgumentError("job needs at least one block")
        positions = [b.grid_pos for b in self.blocks]
        if len(set(positions)) != len(positions):
            raise InvalidArgumentError("duplicate grid positions in block list")
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise InvalidArgumentError(f"unknown stages: {sorted(unknown)}")
        if "segment" not in self.stages:
            raise InvalidArgumentError("every job must include the segment stage")
        if "classify" in self.stages and self.model is None:
            raise InvalidArgumentError("classify stage needs a model")


@dataclass
class BlockResult:
    grid_pos: tuple[int, int]
    labels: LabelVolume | None
    regions: list[RegionRecord] | None
    labels_path: Path | None = None
    error: str | None = None

    def load_labels(self) -> LabelVolume:
        if self.labels is not None:
            return self.labels
        from .segmentation import load_labels

        return load_labels(self.labels_path)


@dataclass
class BatchResult:
    results: dict[tuple[int, int], BlockResult]
    failures: dict[tuple[int, int], str]
    wall_seconds: float


def _process_block(ref: BlockRef, stages, seg_params: SegParams,
                   model: SvmModel | None, coincidence_threshold: float,
                   labels_out: Path | None) -> BlockResult:
    try:
        block = load_block(ref.path)
        labels, regions = segment_block(block, seg_params)
        if "classify" in stages:
            for region in regions:
                region.class_label, _ = predict(model, region.features)
        if "coincidence" in stages and ref.second_channel_path is not None:
            second = load_block(ref.second_channel_path)
            neurons = [r for r in regions if r.class_label == "neuron"]
            flags = coincidence_analysis(neurons, labels, second, coincidence_threshold)
            for region, flag in zip(neurons, flags):
                region.active = flag
        if labels_out is not None:
            from .segmentation import save_labels

            r, c = ref.grid_pos
            path = Path(labels_out) / f"labels_r{r}_c{c}.nvl"
            save_labels(labels, path)
            return BlockResult(grid_pos=ref.grid_pos, labels=None, regions=regions,
                               labels_path=path)
        return BlockResult(grid_pos=ref.grid_pos, labels=labels, regions=regions)
    except Exception:
        return BlockResult(grid_pos=ref.grid_pos, labels=None, regions=None,
                           error=traceback.format_exc(limit=3))


def run_batch(job: BatchJob) -> BatchResult:
    """Distribute the job's blocks over exactly ``job.workers`` workers.

    Results are collected keyed by grid position, so output is identical
    for any worker count. Raises BatchJobError only when every block fails.
    """
    seg_warm_kernels()  # fork children inherit the compiled flood
    start = time.monotonic()
    if job.labels_out is not None:
        Path(job.labels_out).mkdir(parents=True, exist_ok=True)
    args = [(ref, job.stages, job.seg_params, job.model, job.coincidence_threshold,
             job.labels_out)
            for ref in job.blocks]
    try:
        ctx = multiprocessing.get_context("fork")
    except ValueError:
        ctx = multiprocessing.get_context("spawn")
    outcomes: list[BlockResult] = []
    with ProcessPoolExecutor(max_workers=job.workers, mp_context=ctx) as pool:
        outcomes = list(pool.map(_process_block, *zip(*args)))
    results: dict[tuple[int, int], BlockResult] = {}
    failures: dict[tuple[int, int], str] = {}
    for outcome in outcomes:
        if outcome.error is None:
            results[outcome.grid_pos] = outcome
        else:
            failures[outcome.grid_pos] = outcome.error
    wall = time.monotonic() - start
    if not results:
        raise BatchJobError(
            f"all {len(failures)} blocks failed; first error:\n"
            + next(iter(failures.values()))
        )
    return BatchResult(results=results, failures=failures, wall_seconds=wall)


@dataclass(frozen=True)
class ScalingRow:
    volumes: int
    voxels: int
    workers: int
    wall_s: float
    voxels_per_s: float
    overhead_pct: float


@dataclass
class ScalingReport:
    rows: list[ScalingRow]
    machine_parallelism: int
    requested_workers: int

    CSV_COLUMNS = ("volumes", "voxels", "workers", "wall_s", "voxels_per_s",
                   "overhead_pct")

    @property
    def oversubscribed(self) -> bool:
        return self.requested_workers > self.machine_parallelism

    def to_csv(self, path: Path | str) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.CSV_COLUMNS)
            for row in self.rows:
                writer.writerow([row.volumes, row.voxels, row.workers,
                                 f"{row.wall_s:.6f}", f"{row.voxels_per_s:.3f}",
                                 f"{row.overhead_pct:.3f}"])
        return path

    def throughput_table(self) -> str:
        """Human-readable throughput-increase table relative to the first row."""
        base = self.rows[0]
        lines = ["volumes  voxels        throughput(vox/s)  increase  time_delta"]
        for row in self.rows:
            ratio = row.voxels_per_s / base.voxels_per_s if base.voxels_per_s else math.nan
            lines.append(
                f"{row.volumes:<8d} {row.voxels:<13d} {row.voxels_per_s:<18.1f} "
                f"{ratio * 100:>7.1f}%  {row.overhead_pct:+.1f}%"
            )
        if self.oversubscribed:
            lines.append(
                f"warning: {self.requested_workers} workers exceed machine "
                f"parallelism {self.machine_parallelism}"
            )
        return "\n".join(lines)


def benchmark_scaling(counts: list[int], block_extents=(64, 64, 64), workers: int = 1,
                      seed: int = 0, repeats: int = 3, work_dir: Path | str | None = None,
                      seg_params: SegParams | None = None,
                      nuclei_per_block: int = 8) -> ScalingReport:
    """Weak-scaling benchmark: for each volume count N, segment N phantom
    blocks on min(N, workers) workers and take the median wall time of
    ``repeats`` runs. Overhead is relative to the first row."""
    if not counts:
        raise InvalidArgumentError("need at least one volume count")
    seg_params = seg_params or SegParams(sigma1_um=3.0, sigma2_um=4.8,
                                         seed_threshold=400.0)
    own_dir = None
    if work_dir is None:
        own_dir = tempfile.TemporaryDirectory(prefix="nv-bench-")
        work_dir = own_dir.name
    work_dir = Path(work_dir)
    voxels_per_block = block_extents[0] * block_extents[1] * block_extents[2]
    rows: list[ScalingRow] = []
    try:
        for n in counts:
            block_dir = work_dir / f"n{n}"
            block_dir.mkdir(parents=True, exist_ok=True)
            refs = []
            radius_hi = min(3.5, min(block_extents) / 8)
            spec = phantom_mod.single_block_spec(
                extent=tuple(block_extents),
                nuclei_per_block=nuclei_per_block,
                radius_range=(min(2.0, radius_hi), radius_hi),
                noise_sigma=100.0,
                foreground=12000,
                background=1000,
            )
            for i in range(n):
                blocks, _ = phantom_mod.generate_phantom(spec, seed=seed * 100003 + i)
                vol = blocks[phantom_mod.NUCLEUS_CHANNEL][(0, 0)]
                vol = dataclasses.replace(vol, grid_pos=(0, i))
                path = block_dir / f"block_r0_c{i}_dapi.nvb"
                save_block(vol, path)
                refs.append(BlockRef(grid_pos=(0, i), path=path))
            labels_dir = work_dir / f"labels-n{n}"
            job = BatchJob(dataset_id=f"bench-{n}", blocks=tuple(refs),
                           stages=("segment",), workers=min(n, workers), seed=seed,
                           seg_params=seg_params, labels_out=labels_dir)
            walls = [run_batch(job).wall_seconds for _ in range(repeats)]
            wall = statistics.median(walls)
            rows.append(ScalingRow(
                volumes=n,
                voxels=n * voxels_per_block,
                workers=min(n, workers),
                wall_s=wall,
                voxels_per_s=n * voxels_per_block / wall,
                overhead_pct=0.0,
            ))
        base = rows[0].wall_s
        rows = [ScalingRow(volumes=r.volumes, voxels=r.voxels, workers=r.workers,
                           wall_s=r.wall_s, voxels_per_s=r.voxels_per_s,
                           overhead_pct=(r.wall_s - base) / base * 100.0)
                for r in rows]
    finally:
        if own_dir is not None:
            own_dir.cleanup()
    return ScalingReport(rows=rows, machine_parallelism=machine_parallelism(),
                         requested_workers=workers)
