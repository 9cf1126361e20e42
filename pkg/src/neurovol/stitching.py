"""Dynamic pairwise overlap search and grid-wide merge.

Neighboring blocks are slid against each other one voxel at a time, up to
10% of the shared axis extent; the mean absolute difference over the
candidate strip is the loss, and its argmin is the recovered overlap.
Per-boundary medians make the grid placement globally consistent.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .grid import GridLayout
from .volume import VolumeBlock

AXES = ("x", "y")


def _axis_index(axis: str) -> int:
    try:
        return AXES.index(axis)
    except ValueError:
        raise InvalidArgumentError(f"axis must be one of {AXES}, got {axis!r}") from None


@dataclass(frozen=True)
class OverlapResult:
    axis: str
    best_overlap: int
    loss_curve: tuple[tuple[int, float], ...]
    loss: float


@dataclass(frozen=True)
class StitchPlan:
    """Global block placement: per-block voxel origins (z always 0),
    the stitched extents, and the per-pair search results."""

    offsets: dict[tuple[int, int], tuple[int, int, int]]
    extents: tuple[int, int, int]
    pair_results: tuple[dict, ...]
    column_overlaps: tuple[int, ...]  # median x-overlap per column boundary
    row_overlaps: tuple[int, ...]  # median y-overlap per row boundary

    def offset_of(self, grid_pos) -> tuple[int, int, int]:
        key = tuple(grid_pos)
        if key not in self.offsets:
            raise InvalidArgumentError(f"block {key} not in stitch plan")
        return self.offsets[key]

    def to_json_obj(self) -> dict:
        return {
            "extents": list(self.extents),
            "offsets": {f"r{r}_c{c}": list(o) for (r, c), o in sorted(self.offsets.items())},
            "column_overlaps": list(self.column_overlaps),
            "row_overlaps": list(self.row_overlaps),
            "pairs": [dict(p) for p in self.pair_results],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "StitchPlan":
        offsets = {}
        for key, o in obj["offsets"].items():
            r, c = key[1:].split("_c")
            offsets[(int(r), int(c))] = tuple(o)
        return cls(
            offsets=offsets,
            extents=tuple(obj["extents"]),
            pair_results=tuple(obj["pairs"]),
            column_overlaps=tuple(obj["column_overlaps"]),
            row_overlaps=tuple(obj["row_overlaps"]),
        )

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json_obj(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: Path | str) -> "StitchPlan":
        return cls.from_json_obj(json.loads(Path(path).read_text()))


def _check_pair(a: VolumeBlock, b: VolumeBlock, ax: int):
    for i in range(3):
        if a.extents[i] != b.extents[i]:
            raise InvalidArgumentError(
                f"blocks must share extents, got {a.extents} vs {b.extents}"
            )
    del ax


def overlap_loss(a: VolumeBlock, b: VolumeBlock, axis: str, overlap: int) -> float:
    """Mean absolute difference between a's trailing and b's leading strip.

    Differences are taken in a widened integer domain, so uint16 values
    never wrap.
    """
    ax = _axis_index(axis)
    _check_pair(a, b, ax)
    extent = a.extents[ax]
    if not (1 <= overlap <= extent):
        raise InvalidArgumentError(f"overlap {overlap} out of range [1, {extent}]")
    take_a = [slice(None)] * 3
    take_b = [slice(None)] * 3
    take_a[ax] = slice(extent - overlap, extent)
    take_b[ax] = slice(0, overlap)
    a_strip = a.voxels[tuple(take_a)].astype(np.int64)
    b_strip = b.voxels[tuple(take_b)].astype(np.int64)
    return float(np.abs(a_strip - b_strip).sum() / a_strip.size)


def find_optimal_overlap(a: VolumeBlock, b: VolumeBlock, axis: str,
                         max_frac: float = 0.10) -> OverlapResult:
    """Evaluate every overlap from 1 voxel up to max_frac of the axis
    extent; ties at the minimum loss resolve to the smallest overlap."""
    ax = _axis_index(axis)
    _check_pair(a, b, ax)
    hi = int(np.floor(max_frac * a.extents[ax]))
    if hi < 1:
        raise InvalidArgumentError(
            f"axis extent {a.extents[ax]} too small for max_frac={max_frac}"
        )
    curve = []
    best_overlap = 0
    best_loss = np.inf
    for overlap in range(1, hi + 1):
        loss = overlap_loss(a, b, axis, overlap)
        curve.append((overlap, loss))
        if loss < best_loss:
            best_loss = loss
            best_overlap = overlap
    return OverlapResult(axis=axis, best_overlap=best_overlap,
                         loss_curve=tuple(curve), loss=best_loss)


def blend_overlap(a_strip: np.ndarray, b_strip: np.ndarray, axis: str = "x") -> np.ndarray:
    """Linear ramp fuse of two co-located strips, midpoint sampled:
    weight t_i = (i + 0.5) / depth moves from a to b across the depth."""
    ax = _axis_index(axis)
    a_strip = np.asarray(a_strip)
    b_strip = np.asarray(b_strip)
    if a_strip.shape != b_strip.shape:
        raise InvalidArgumentError(
            f"strip shapes differ: {a_strip.shape} vs {b_strip.shape}"
        )
    depth = a_strip.shape[ax]
    shape = [1, 1, 1]
    shape[ax] = depth
    t = ((np.arange(depth, dtype=np.float64) + 0.5) / depth).reshape(shape)
    a64 = a_strip.astype(np.float64)
    fused = a64 + t * (b_strip.astype(np.float64) - a64)
    return np.clip(np.floor(fused + 0.5), 0, 65535).astype(np.uint16)


def _lower_median(values: list[int]) -> int:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def estimate_grid_overlaps(blocks: dict[tuple[int, int], VolumeBlock], layout: GridLayout,
                           max_frac: float = 0.10
                           ) -> tuple[list[int], list[int], list[dict]]:
    """Run every horizontal and vertical pair search; reduce each column/row
    boundary to its (lower) median overlap."""
    pairs: list[dict] = []
    col_overlaps: list[int] = []
    row_overlaps: list[int] = []
    for c in range(layout.cols - 1):
        estimates = []
        for r in range(layout.rows):
            res = find_optimal_overlap(blocks[(r, c)], blocks[(r, c + 1)], "x", max_frac)
            estimates.append(res.best_overlap)
            pairs.append({"axis": "x", "a": f"r{r}_c{c}", "b": f"r{r}_c{c + 1}",
                          "best_overlap": res.best_overlap, "loss": res.loss})
        col_overlaps.append(_lower_median(estimates))
    for r in range(layout.rows - 1):
        estimates = []
        for c in range(layout.cols):
            res = find_optimal_overlap(blocks[(r, c)], blocks[(r + 1, c)], "y", max_frac)
            estimates.append(res.best_overlap)
            pairs.append({"axis": "y", "a": f"r{r}_c{c}", "b": f"r{r + 1}_c{c}",
                          "best_overlap": res.best_overlap, "loss": res.loss})
        row_overlaps.append(_lower_median(estimates))
    return col_overlaps, row_overlaps, pairs


def _plan_from_overlaps(layout: GridLayout, extents, col_overlaps, row_overlaps,
                        pairs) -> StitchPlan:
    nx, ny, nz = extents
    x_off = [0]
    for ov in col_overlaps:
        x_off.append(x_off[-1] + nx - ov)
    y_off = [0]
    for ov in row_overlaps:
        y_off.append(y_off[-1] + ny - ov)
    offsets = {
        (r, c): (x_off[c], y_off[r], 0)
        for r in range(layout.rows)
        for c in range(layout.cols)
    }
    stitched = (x_off[-1] + nx, y_off[-1] + ny, nz)
    return StitchPlan(offsets=offsets, extents=stitched, pair_results=tuple(pairs),
                      column_overlaps=tuple(col_overlaps), row_overlaps=tuple(row_overlaps))


def place_blocks(blocks: dict[tuple[int, int], VolumeBlock], layout: GridLayout,
                 plan: StitchPlan) -> VolumeBlock:
    """Composite blocks onto the stitched canvas in row-major order,
    ramp-blending each block's left strip (along x) and top strip (along y)
    against already-placed content."""
    sample = blocks[(0, 0)]
    nx, ny, nz = sample.extents
    canvas = np.zeros(plan.extents, dtype=np.uint16)
    for r in range(layout.rows):
        for c in range(layout.cols):
            block = blocks[(r, c)]
            ox, oy, _ = plan.offsets[(r, c)]
            view = canvas[ox:ox + nx, oy:oy + ny, :]
            buf = block.voxels.copy()
            if c > 0:
                wx = plan.column_overlaps[c - 1]
                buf[:wx] = blend_overlap(view[:wx], buf[:wx], axis="x")
            if r > 0:
                wy = plan.row_overlaps[r - 1]
                buf[:, :wy] = blend_overlap(view[:, :wy], buf[:, :wy], axis="y")
            view[...] = buf
    return VolumeBlock(voxels=canvas, channel=sample.channel, grid_pos=(0, 0),
                       resolution=sample.resolution)


def stitch_grid(blocks: dict[tuple[int, int], VolumeBlock], layout: GridLayout,
                max_frac: float = 0.10) -> tuple[VolumeBlock, StitchPlan]:
    """Estimate all pairwise overlaps, derive consistent global offsets,
    and merge the grid into one volume."""
    expected = {(r, c) for r in range(layout.rows) for c in range(layout.cols)}
    missing = expected - set(blocks)
    if missing:
        raise InvalidArgumentError(f"missing blocks: {sorted(missing)}")
    sample = blocks[(0, 0)]
    for pos in expected:
        if blocks[pos].extents != sample.extents:
            raise InvalidArgumentError("all blocks must share extents")
        if blocks[pos].resolution != sample.resolution:
            raise InvalidArgumentError("all blocks must share resolution")
    if layout.cols > 1 or layout.rows > 1:
        col_ov, row_ov, pairs = estimate_grid_overlaps(blocks, layout, max_frac)
    else:
        col_ov, row_ov, pairs = [], [], []
    plan = _plan_from_overlaps(layout, sample.extents, col_ov, row_ov, pairs)
    return place_blocks(blocks, layout, plan), plan


def translate_annotations(records, grid_pos, plan: StitchPlan):
    """Shift record coordinates by the block's global origin. Accepts
    region records (``centroid``) or annotations (``coords``)."""
    ox, oy, oz = plan.offset_of(grid_pos)
    out = []
    for rec in records:
        if hasattr(rec, "centroid"):
            cx, cy, cz = rec.centroid
            out.append(dataclasses.replace(rec, centroid=(cx + ox, cy + oy, cz + oz)))
        elif hasattr(rec, "coords"):
            moved = tuple((x + ox, y + oy, z + oz) for x, y, z in rec.coords)
            out.append(dataclasses.replace(rec, coords=moved))
        else:
            raise InvalidArgumentError(f"cannot translate record of type {type(rec)!r}")
    return out
