"""Per-block 3D nuclei segmentation.

Pipeline: difference of Gaussians band-pass, strict local-maximum seed
detection, then a seeded priority-flood watershed on the negated response.
Everything is deterministic: plateau maxima collapse to the smallest
coordinate and flood ties break by insertion sequence number.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .classify import FeatureVector, compute_features
from .errors import InvalidArgumentError
from .volume import VolumeBlock

LABEL_MAGIC = "NVL1"

CLASS_UNLABELED = "unlabeled"

# 26-connected neighborhood offsets (everything but the center).
_NEIGHBOR_OFFSETS = tuple(
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
)

_RING26 = np.ones((3, 3, 3), dtype=bool)
_RING26[1, 1, 1] = False

_BOX27 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class SegParams:
    """Segmentation knobs. Gaussian scales are physical micrometers and get
    divided by the per-axis voxel pitch, so anisotropic voxels see
    isotropic smoothing."""

    sigma1_um: float = 2.0
    sigma2_um: float = 3.2
    seed_threshold: float = 100.0
    min_region_voxels: int = 30

    def __post_init__(self):
        if not (0 < self.sigma1_um < self.sigma2_um):
            raise InvalidArgumentError("need 0 < sigma1 < sigma2")
        if self.min_region_voxels < 1:
            raise InvalidArgumentError("min_region_voxels must be >= 1")


@dataclass
class LabelVolume:
    """Dense uint32 label ids over a block's extents; 0 is background."""

    labels: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.labels)
        if v.ndim != 3 or v.dtype != np.uint32:
            raise InvalidArgumentError("labels must be a 3D uint32 array")
        self.labels = v

    @property
    def extents(self) -> tuple[int, int, int]:
        nx, ny, nz = self.labels.shape
        return (nx, ny, nz)

    def label_count(self) -> int:
        m = int(self.labels.max())
        return m


@dataclass
class RegionRecord:
    """One segmented nucleus."""

    label: int
    centroid: tuple[float, float, float]
    voxel_count: int
    features: FeatureVector
    class_label: str = CLASS_UNLABELED
    active: bool | None = None  # set by coincidence analysis, neurons only

    def to_json_obj(self) -> dict:
        obj = {
            "label": self.label,
            "centroid": list(self.centroid),
            "voxel_count": self.voxel_count,
            "features": self.features.to_json_obj(),
            "class": self.class_label,
        }
        if self.active is not None:
            obj["active"] = self.active
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "RegionRecord":
        return cls(
            label=obj["label"],
            centroid=tuple(obj["centroid"]),
            voxel_count=obj["voxel_count"],
            features=FeatureVector.from_json_obj(obj["features"]),
            class_label=obj.get("class", CLASS_UNLABELED),
            active=obj.get("active"),
        )


def save_labels(vol: LabelVolume, path: Path | str) -> Path:
    path = Path(path)
    nx, ny, nz = vol.extents
    with open(path, "wb") as fh:
        fh.write(f"{LABEL_MAGIC} {nx} {ny} {nz}\n".encode("ascii"))
        fh.write(vol.labels.astype("<u4", copy=False).tobytes(order="F"))
    return path


def load_labels(path: Path | str) -> LabelVolume:
    path = Path(path)
    with open(path, "rb") as fh:
        fields = fh.readline().decode("ascii", errors="replace").split()
        if len(fields) != 4 or fields[0] != LABEL_MAGIC:
            raise InvalidArgumentError(f"{path}: not a {LABEL_MAGIC} label file")
        nx, ny, nz = (int(v) for v in fields[1:4])
        raw = fh.read(nx * ny * nz * 4)
    if len(raw) != nx * ny * nz * 4:
        raise InvalidArgumentError(f"{path}: truncated label payload")
    labels = np.frombuffer(raw, dtype="<u4").reshape((nx, ny, nz), order="F")
    return LabelVolume(labels=np.ascontiguousarray(labels))


def gaussian_blur_3d(block: VolumeBlock, sigma_um: float) -> np.ndarray:
    """Separable Gaussian blur with reflective edges; sigma 0 is a float cast.

    The physical sigma is converted per axis to voxel units via the block
    resolution.
    """
    if sigma_um < 0:
        raise InvalidArgumentError(f"sigma must be non-negative, got {sigma_um}")
    data = block.voxels.astype(np.float64)
    if sigma_um == 0:
        return data
    res = block.resolution
    sigmas = (sigma_um / res.dx, sigma_um / res.dy, sigma_um / res.dz)
    return ndimage.gaussian_filter(data, sigma=sigmas, mode="reflect")


def difference_of_gaussians(block: VolumeBlock, params: SegParams) -> np.ndarray:
    """blur(sigma1) - blur(sigma2): positive peaks at bright blobs near sigma1 scale."""
    return gaussian_blur_3d(block, params.sigma1_um) - gaussian_blur_3d(block, params.sigma2_um)


def detect_seeds(dog: np.ndarray, threshold: float) -> list[tuple[int, int, int]]:
    """Strict 26-neighborhood local maxima above threshold.

    A plateau (connected set of equal values) counts as one maximum when
    every outside neighbor is strictly lower; it is reported at its
    lexicographically smallest coordinate. Result is sorted.
    """
    dog = np.asarray(dog, dtype=np.float64)
    nbr_max = ndimage.maximum_filter(dog, footprint=_RING26, mode="constant", cval=-np.inf)
    above = dog > threshold
    seeds = [tuple(int(v) for v in c) for c in np.argwhere(above & (dog > nbr_max))]

    plateau = above & (dog == nbr_max)
    if plateau.any():
        full_max = np.maximum(dog, nbr_max)
        for value in np.unique(dog[plateau]):
            eq = dog == value
            comp, _ = ndimage.label(eq, structure=_BOX27)
            for comp_id in np.unique(comp[plateau & eq]):
                members = comp == comp_id
                if full_max[members].max() == value:  # no strictly greater neighbor
                    coords = np.argwhere(members)
                    best = min(map(tuple, coords.tolist()))
                    seeds.append(tuple(int(v) for v in best))
    seeds.sort()
    return seeds


def _flood_python(relief: np.ndarray, mask: np.ndarray, labels: np.ndarray,
                  seeds: list[tuple[int, int, int]]):
    nx, ny, nz = relief.shape
    heap: list[tuple[float, int, int, int, int, int]] = []
    seq = 0
    for i, (x, y, z) in enumerate(seeds, start=1):
        if mask[x, y, z]:
            heap.append((relief[x, y, z], seq, x, y, z, i))
            seq += 1
    heapq.heapify(heap)
    while heap:
        _, _, x, y, z, lab = heapq.heappop(heap)
        if labels[x, y, z]:
            continue
        labels[x, y, z] = lab
        for dx, dy, dz in _NEIGHBOR_OFFSETS:
            u, v, w = x + dx, y + dy, z + dz
            if 0 <= u < nx and 0 <= v < ny and 0 <= w < nz \
                    and mask[u, v, w] and not labels[u, v, w]:
                heapq.heappush(heap, (relief[u, v, w], seq, u, v, w, lab))
                seq += 1


try:  # the compiled flood keeps per-block work off the interpreter hot path
    from ._flood import flood_compiled as _flood_fast
except ImportError:  # pragma: no cover - numba not installed
    _flood_fast = None

_kernels_warm = False


def warm_kernels():
    """Force JIT compilation/cache load of the flood kernel in this process.

    Worker pools fork after calling this so children inherit the compiled
    kernel instead of each paying the load cost.
    """
    global _kernels_warm
    if _kernels_warm or _flood_fast is None:
        return
    relief = np.full((3, 3, 3), -1.0)
    watershed_3d(relief, [(1, 1, 1)], mask_threshold=0.0)
    _kernels_warm = True


def watershed_3d(relief: np.ndarray, seeds: list[tuple[int, int, int]],
                 mask_threshold: float) -> LabelVolume:
    """Priority-flood from seeds over the 26-connected mask ``relief < mask_threshold``.

    A min-heap ordered by (relief value, insertion sequence) grows each
    seed's label into unassigned in-mask neighbors; unreachable mask
    voxels stay background. Seed i (0-based) floods label i+1.
    """
    relief = np.ascontiguousarray(relief, dtype=np.float64)
    if len(seeds) == 0:
        raise InvalidArgumentError("watershed needs at least one seed")
    if len(set(map(tuple, seeds))) != len(seeds):
        raise InvalidArgumentError("duplicate seed coordinates")
    nx, ny, nz = relief.shape
    for x, y, z in seeds:
        if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
            raise InvalidArgumentError(f"seed {(x, y, z)} outside volume")
    labels = np.zeros(relief.shape, dtype=np.uint32)
    mask = relief < mask_threshold
    if _flood_fast is not None:
        seed_arr = np.asarray(seeds, dtype=np.int64).reshape(len(seeds), 3)
        _flood_fast(relief, mask, labels, seed_arr)
    else:
        _flood_python(relief, mask, labels, seeds)
    return LabelVolume(labels=labels)


def extract_regions(labels: LabelVolume, block: VolumeBlock, min_region_voxels: int
                    ) -> tuple[LabelVolume, list[RegionRecord]]:
    """Summarize surviving labels and renumber them contiguously.

    Regions below the voxel floor are cleared to background; the returned
    label volume has ids 1..K in ascending original order. Centroids are
    unweighted mean voxel coordinates.
    """
    if labels.extents != block.extents:
        raise InvalidArgumentError(
            f"label extents {labels.extents} != block extents {block.extents}"
        )
    lab = labels.labels
    flat = lab.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_vals = flat[order]
    first_fg = np.searchsorted(sorted_vals, 1)
    out = np.zeros_like(lab)
    records: list[RegionRecord] = []
    res = block.resolution
    i = first_fg
    new_id = 0
    n = flat.size
    while i < n:
        value = sorted_vals[i]
        j = np.searchsorted(sorted_vals, value, side="right")
        count = int(j - i)
        if count >= min_region_voxels:
            new_id += 1
            idx = order[i:j]
            coords = np.stack(np.unravel_index(idx, lab.shape), axis=1)
            out.ravel()[idx] = new_id
            intensities = block.voxels.ravel()[idx]
            centroid = coords.mean(axis=0)
            records.append(RegionRecord(
                label=new_id,
                centroid=tuple(float(v) for v in centroid),
                voxel_count=count,
                features=compute_features(coords, intensities, res),
            ))
        i = j
    return LabelVolume(labels=out), records


def segment_block(block: VolumeBlock, params: SegParams
                  ) -> tuple[LabelVolume, list[RegionRecord]]:
    """Full per-block segmentation: DoG, seeds, watershed, region extraction."""
    dog = difference_of_gaussians(block, params)
    seeds = detect_seeds(dog, params.seed_threshold)
    if not seeds:
        return LabelVolume(labels=np.zeros(block.extents, dtype=np.uint32)), []
    labeled = watershed_3d(-dog, seeds, mask_threshold=-params.seed_threshold)
    return extract_regions(labeled, block, params.min_region_voxels)
