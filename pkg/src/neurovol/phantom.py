"""Synthetic two-channel phantom grids with known nucleus ground truth.

Stands in for light-sheet acquisition: a grid of overlapping blocks whose
overlap strips are voxelwise identical before noise, filled with spherical
Gaussian nuclei at analytically known centers. The nuclear stain channel
("dapi") shows every nucleus; the activity channel ("cfos") shows only the
neuron-classed fraction. Neuron nuclei sample radii from the upper half of
the radius range (glia from the lower half) so size features are learnable
from the nuclear channel alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .grid import GridLayout, make_grid_layout
from .volume import Resolution, VolumeBlock, block_filename, save_block

NUCLEUS_CHANNEL = "dapi"
ACTIVITY_CHANNEL = "cfos"

CLASS_NEURON = "neuron"
CLASS_GLIA = "glia"

# Gaussian bumps are rendered out to this many radii, zero beyond.
CLIP_RADII = 3.0

_PLACEMENT_ATTEMPTS = 20000


@dataclass(frozen=True)
class PhantomSpec:
    grid: GridLayout
    block_extents: tuple[int, int, int] = (64, 64, 64)
    true_overlap_x: int = 6
    true_overlap_y: int = 6
    nuclei_per_block: int = 10
    radius_range: tuple[float, float] = (3.0, 5.0)
    background: int = 1000
    foreground: int = 12000
    noise_sigma: float = 0.0
    neuron_fraction: float = 0.5
    resolution: Resolution = field(default_factory=lambda: Resolution(1.0, 1.0, 1.0))
    # Minimum center distance between nuclei i, j is spacing * (r_i + r_j).
    spacing: float = 1.5

    def __post_init__(self):
        nx, ny, nz = self.block_extents
        if min(nx, ny, nz) < 1:
            raise InvalidArgumentError("block extents must be positive")
        for name, ov, ext in (("x", self.true_overlap_x, nx), ("y", self.true_overlap_y, ny)):
            if not (1 <= ov <= math.floor(0.10 * ext)):
                raise InvalidArgumentError(
                    f"true_overlap_{name}={ov} outside [1, {math.floor(0.10 * ext)}] "
                    f"(10% of extent {ext})"
                )
        if not (0.0 <= self.neuron_fraction <= 1.0):
            raise InvalidArgumentError("neuron_fraction must be in [0, 1]")
        if self.nuclei_per_block < 0:
            raise InvalidArgumentError("nuclei_per_block must be non-negative")
        lo, hi = self.radius_range
        if not (0 < lo <= hi):
            raise InvalidArgumentError("radius_range must satisfy 0 < lo <= hi")
        if 2 * CLIP_RADII * hi >= min(nx, ny, nz):
            raise InvalidArgumentError("nuclei too large to fit within a block")
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be non-negative")
        if not (0 <= self.background <= 65535 and 0 <= self.foreground <= 65535):
            raise InvalidArgumentError("intensity levels must fit uint16")


@dataclass(frozen=True)
class NucleusTruth:
    center: tuple[float, float, float]  # global (stitched-frame) voxel coords
    radius: float
    class_label: str
    grid_pos: tuple[int, int]  # block whose exclusive region holds the center


@dataclass(frozen=True)
class PhantomTruth:
    nuclei: tuple[NucleusTruth, ...]
    block_origins: dict[tuple[int, int], tuple[int, int, int]]
    overlaps: tuple[int, int]
    global_extents: tuple[int, int, int]

    def nuclei_of_block(self, grid_pos) -> list[NucleusTruth]:
        return [n for n in self.nuclei if n.grid_pos == tuple(grid_pos)]

    def to_json_obj(self) -> dict:
        return {
            "overlaps": list(self.overlaps),
            "global_extents": list(self.global_extents),
            "block_origins": {
                f"r{r}_c{c}": list(o) for (r, c), o in sorted(self.block_origins.items())
            },
            "nuclei": [
                {
                    "center": list(n.center),
                    "radius": n.radius,
                    "class": n.class_label,
                    "grid_pos": list(n.grid_pos),
                }
                for n in self.nuclei
            ],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PhantomTruth":
        origins = {}
        for key, o in obj["block_origins"].items():
            r, c = key[1:].split("_c")
            origins[(int(r), int(c))] = tuple(o)
        nuclei = tuple(
            NucleusTruth(
                center=tuple(n["center"]),
                radius=n["radius"],
                class_label=n["class"],
                grid_pos=tuple(n["grid_pos"]),
            )
            for n in obj["nuclei"]
        )
        return cls(
            nuclei=nuclei,
            block_origins=origins,
            overlaps=tuple(obj["overlaps"]),
            global_extents=tuple(obj["global_extents"]),
        )


def block_origins(spec: PhantomSpec) -> dict[tuple[int, int], tuple[int, int, int]]:
    nx, ny, _ = spec.block_extents
    return {
        (r, c): (c * (nx - spec.true_overlap_x), r * (ny - spec.true_overlap_y), 0)
        for r in range(spec.grid.rows)
        for c in range(spec.grid.cols)
    }


def _exclusive_range(origin: int, extent: int, overlap: int, index: int, count: int,
                     edge_margin: float) -> tuple[float, float]:
    """Center placement interval along one axis for one block.

    Interior sides stop at the overlap strip boundary (bumps may still
    reach into the strip); grid-edge sides keep a full clip margin so
    every nucleus fits inside the global volume.
    """
    lo = origin + (overlap if index > 0 else edge_margin)
    hi = origin + extent - (overlap if index < count - 1 else edge_margin)
    return (lo, hi)


def _place_nuclei(spec: PhantomSpec, rng: np.random.Generator) -> list[NucleusTruth]:
    nx, ny, nz = spec.block_extents
    lo_r, hi_r = spec.radius_range
    mid_r = 0.5 * (lo_r + hi_r)
    placed: list[tuple[np.ndarray, float]] = []
    nuclei: list[NucleusTruth] = []
    origins = block_origins(spec)
    for r in range(spec.grid.rows):
        for c in range(spec.grid.cols):
            ox, oy, _ = origins[(r, c)]
            n_neuron = int(round(spec.neuron_fraction * spec.nuclei_per_block))
            neuron_idx = set(
                rng.choice(spec.nuclei_per_block, size=n_neuron,
                           replace=False).tolist()
            ) if spec.nuclei_per_block else set()
            for i in range(spec.nuclei_per_block):
                # neuron nuclei draw from the upper half of the radius range
                # so nuclear-channel size features carry class signal
                is_neuron = i in neuron_idx
                r_lo, r_hi = (mid_r, hi_r) if is_neuron else (lo_r, mid_r)
                ok = False
                for _attempt in range(_PLACEMENT_ATTEMPTS):
                    radius = rng.uniform(r_lo, r_hi)
                    margin = CLIP_RADII * radius
                    x_lo, x_hi = _exclusive_range(ox, nx, spec.true_overlap_x, c,
                                                  spec.grid.cols, margin)
                    y_lo, y_hi = _exclusive_range(oy, ny, spec.true_overlap_y, r,
                                                  spec.grid.rows, margin)
                    if x_hi <= x_lo or y_hi <= y_lo or nz - margin <= margin:
                        continue
                    center = np.array([
                        rng.uniform(x_lo, x_hi),
                        rng.uniform(y_lo, y_hi),
                        rng.uniform(margin, nz - margin),
                    ])
                    if all(
                        np.linalg.norm(center - other) >= spec.spacing * (radius + orad)
                        for other, orad in placed
                    ):
                        ok = True
                        break
                if not ok:
                    raise InvalidArgumentError(
                        "could not place nuclei without overlap; reduce count or radius"
                    )
                placed.append((center, radius))
                nuclei.append(NucleusTruth(
                    center=tuple(center.tolist()),
                    radius=radius,
                    class_label=CLASS_NEURON if is_neuron else CLASS_GLIA,
                    grid_pos=(r, c),
                ))
    return nuclei


def _render_bump(canvas: np.ndarray, origin: tuple[int, int, int],
                 center: tuple[float, float, float], radius: float, amplitude: float):
    """Add one clipped Gaussian bump. Distances are computed in global
    coordinates so overlapping blocks produce bit-identical values."""
    ox, oy, oz = origin
    nx, ny, nz = canvas.shape
    reach = CLIP_RADII * radius
    x0 = max(int(math.floor(center[0] - reach)), ox)
    x1 = min(int(math.ceil(center[0] + reach)) + 1, ox + nx)
    y0 = max(int(math.floor(center[1] - reach)), oy)
    y1 = min(int(math.ceil(center[1] + reach)) + 1, oy + ny)
    z0 = max(int(math.floor(center[2] - reach)), oz)
    z1 = min(int(math.ceil(center[2] + reach)) + 1, oz + nz)
    if x0 >= x1 or y0 >= y1 or z0 >= z1:
        return
    gx = np.arange(x0, x1, dtype=np.float64)[:, None, None] - center[0]
    gy = np.arange(y0, y1, dtype=np.float64)[None, :, None] - center[1]
    gz = np.arange(z0, z1, dtype=np.float64)[None, None, :] - center[2]
    d2 = gx * gx + gy * gy + gz * gz
    bump = amplitude * np.exp(-0.5 * d2 / (radius * radius))
    bump[d2 > reach * reach] = 0.0
    canvas[x0 - ox:x1 - ox, y0 - oy:y1 - oy, z0 - oz:z1 - oz] += bump


def render_block(spec: PhantomSpec, truth: PhantomTruth, grid_pos: tuple[int, int],
                 channel: str, seed: int) -> VolumeBlock:
    """Render one block of one channel; deterministic given (spec, truth, seed)."""
    origin = truth.block_origins[tuple(grid_pos)]
    canvas = np.full(spec.block_extents, float(spec.background), dtype=np.float64)
    amplitude = float(spec.foreground - spec.background)
    for n in truth.nuclei:
        if channel == ACTIVITY_CHANNEL and n.class_label != CLASS_NEURON:
            continue
        _render_bump(canvas, origin, n.center, n.radius, amplitude)
    if spec.noise_sigma > 0:
        chan_idx = 0 if channel == NUCLEUS_CHANNEL else 1
        block_rng = np.random.default_rng(
            np.random.SeedSequence([seed, grid_pos[0], grid_pos[1], chan_idx])
        )
        canvas += block_rng.normal(0.0, spec.noise_sigma, size=canvas.shape)
    quantized = np.clip(np.floor(canvas + 0.5), 0, 65535).astype(np.uint16)
    return VolumeBlock(
        voxels=quantized,
        channel=channel,
        grid_pos=tuple(grid_pos),
        resolution=spec.resolution,
    )


def generate_phantom(spec: PhantomSpec, seed: int
                     ) -> tuple[dict[str, dict[tuple[int, int], VolumeBlock]], PhantomTruth]:
    """Build the full two-channel block grid plus ground truth.

    Returns ``(blocks, truth)`` where ``blocks[channel][(row, col)]`` is a
    VolumeBlock. Overlap strips of adjacent blocks are voxelwise equal
    before noise; output is deterministic given (spec, seed).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    nuclei = _place_nuclei(spec, rng)
    nx, ny, nz = spec.block_extents
    truth = PhantomTruth(
        nuclei=tuple(nuclei),
        block_origins=block_origins(spec),
        overlaps=(spec.true_overlap_x, spec.true_overlap_y),
        global_extents=(
            spec.grid.cols * nx - (spec.grid.cols - 1) * spec.true_overlap_x,
            spec.grid.rows * ny - (spec.grid.rows - 1) * spec.true_overlap_y,
            nz,
        ),
    )
    blocks: dict[str, dict[tuple[int, int], VolumeBlock]] = {}
    for channel in (NUCLEUS_CHANNEL, ACTIVITY_CHANNEL):
        blocks[channel] = {
            pos: render_block(spec, truth, pos, channel, seed)
            for pos in truth.block_origins
        }
    return blocks, truth


def save_phantom(blocks, truth: PhantomTruth, out_dir: Path | str) -> Path:
    """Write all blocks as .nvb files plus the ground truth JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for channel, grid_blocks in blocks.items():
        for (r, c), block in grid_blocks.items():
            save_block(block, out_dir / block_filename(r, c, channel))
    truth_path = out_dir / "ground_truth.json"
    truth_path.write_text(json.dumps(truth.to_json_obj(), indent=2) + "\n")
    return truth_path


def load_truth(path: Path | str) -> PhantomTruth:
    return PhantomTruth.from_json_obj(json.loads(Path(path).read_text()))


def single_block_spec(extent: tuple[int, int, int] = (128, 128, 128), **kwargs) -> PhantomSpec:
    """Convenience 1x1 spec for per-block tests and benchmarks."""
    kwargs.setdefault("true_overlap_x", max(1, extent[0] // 20))
    kwargs.setdefault("true_overlap_y", max(1, extent[1] // 20))
    return PhantomSpec(grid=make_grid_layout(1, 1), block_extents=extent, **kwargs)
