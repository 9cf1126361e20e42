"""Voxel data model and raw block file I/O.

All volumes are dense 3D arrays indexed ``[x, y, z]``. The canonical byte
layout everywhere (block files, label files, chunk files) is x-fastest,
then y, then z, little-endian; numpy serialization therefore always uses
Fortran order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

BLOCK_MAGIC = "NVB1"

_CHANNEL_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")
_BLOCK_FILE_RE = re.compile(r"^block_r(\d+)_c(\d+)_(.+)\.nvb$")


@dataclass(frozen=True)
class Resolution:
    """Physical voxel pitch in micrometers per axis."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0 and self.dz > 0):
            raise InvalidArgumentError("voxel pitch must be strictly positive on all axes")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    @property
    def voxel_volume_um3(self) -> float:
        return self.dx * self.dy * self.dz


def voxel_to_physical(coord, res: Resolution) -> tuple[float, float, float]:
    """Map a voxel coordinate to physical micrometers (componentwise product)."""
    x, y, z = coord
    return (x * res.dx, y * res.dy, z * res.dz)


@dataclass
class VolumeBlock:
    """One 3D 16-bit grayscale volume with its grid position and pitch.

    ``voxels`` is indexed ``[x, y, z]`` and must be uint16. Blocks are
    treated as immutable after construction and may be shared across
    workers.
    """

    voxels: np.ndarray
    channel: str
    grid_pos: tuple[int, int]
    resolution: Resolution

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise InvalidArgumentError(f"voxels must be a 3D array, got ndim={v.ndim}")
        if v.dtype != np.uint16:
            raise InvalidArgumentError(f"voxels must be uint16, got {v.dtype}")
        if not _CHANNEL_RE.match(self.channel):
            raise InvalidArgumentError(f"bad channel identifier: {self.channel!r}")
        row, col = self.grid_pos
        if row < 0 or col < 0:
            raise InvalidArgumentError(f"grid position must be non-negative, got {self.grid_pos}")
        self.voxels = v

    @property
    def extents(self) -> tuple[int, int, int]:
        nx, ny, nz = self.voxels.shape
        return (nx, ny, nz)


def block_filename(row: int, col: int, channel: str) -> str:
    return f"block_r{row}_c{col}_{channel}.nvb"


def save_block(block: VolumeBlock, path: Path | str) -> Path:
    """Write a block as a one-line text header followed by raw LE uint16 voxels."""
    path = Path(path)
    nx, ny, nz = block.extents
    res = block.resolution
    header = (
        f"{BLOCK_MAGIC} {nx} {ny} {nz} {block.channel} "
        f"{block.grid_pos[0]} {block.grid_pos[1]} {res.dx!r} {res.dy!r} {res.dz!r}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(block.voxels.astype("<u2", copy=False).tobytes(order="F"))
    return path


def load_block(path: Path | str) -> VolumeBlock:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        fields = header.split()
        if len(fields) != 10 or fields[0] != BLOCK_MAGIC:
            raise InvalidArgumentError(f"{path}: not a {BLOCK_MAGIC} block file")
        nx, ny, nz = (int(v) for v in fields[1:4])
        channel = fields[4]
        row, col = int(fields[5]), int(fields[6])
        dx, dy, dz = (float(v) for v in fields[7:10])
        raw = fh.read(nx * ny * nz * 2)
    if len(raw) != nx * ny * nz * 2:
        raise InvalidArgumentError(f"{path}: truncated voxel payload")
    voxels = np.frombuffer(raw, dtype="<u2").reshape((nx, ny, nz), order="F")
    return VolumeBlock(
        voxels=np.ascontiguousarray(voxels),
        channel=channel,
        grid_pos=(row, col),
        resolution=Resolution(dx, dy, dz),
    )


def scan_block_dir(block_dir: Path | str, channel: str) -> dict[tuple[int, int], Path]:
    """Map grid positions to block files of one channel in a directory."""
    block_dir = Path(block_dir)
    found: dict[tuple[int, int], Path] = {}
    for p in sorted(block_dir.iterdir()):
        m = _BLOCK_FILE_RE.match(p.name)
        if m and m.group(3) == channel:
            found[(int(m.group(1)), int(m.group(2)))] = p
    return found
