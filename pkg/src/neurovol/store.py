"""On-disk chunked multi-scale volume store with a revisioned annotation side.

Layout under one root::

    {root}/{dataset}/info.json
    {root}/{dataset}/scales/{key}/{x0}-{x1}_{y0}-{y1}_{z0}-{z1}
    {root}/{dataset}/ann/{layer}/rev-{n}/{blockkey}.json
    {root}/{dataset}/ann/{layer}/rev-{n}/revision.json
    {root}/{dataset}/ann/{layer}/HEAD
    {root}/{dataset}/regions/{block_id}.json
    {root}/{dataset}/models/v{n}.nvm

Chunk files are raw little-endian voxels, x-fastest then y then z, one
section per channel (channel slowest). Annotation revisions are full
snapshots: a commit writes the changed block files and hardlinks the
rest from its parent, so every historical revision stays readable.
Commits are compare-and-set against the layer HEAD, serialized by a
process lock plus a file lock.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from filelock import FileLock

from .classify import FeatureVector, SvmModel, load_model, save_model
from .errors import ConflictError, InvalidArgumentError, NotFoundError
from .segmentation import RegionRecord
from .volume import VolumeBlock

DEFAULT_CHUNK_SIZE = (64, 64, 64)
DEFAULT_ANNOTATION_BLOCK_SIZE = (256, 256, 256)

ANNOTATION_KINDS = ("point", "polyline")
PROVENANCES = ("algorithm", "human")

_DTYPES = {"uint16": np.uint16, "uint32": np.uint32}

_process_locks: dict[str, threading.Lock] = {}
_process_locks_guard = threading.Lock()


@contextmanager
def _exclusive(lock_path: Path):
    """Serialize a critical section across threads and processes."""
    key = str(lock_path)
    with _process_locks_guard:
        proc_lock = _process_locks.setdefault(key, threading.Lock())
    lock_path.parent.mkdir(parents=True, exist_ok=True)
    with proc_lock, FileLock(str(lock_path)):
        yield


def _canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def _atomic_write_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str):
    _atomic_write_bytes(path, text.encode("utf-8"))


@dataclass(frozen=True)
class ScaleInfo:
    key: str
    size: tuple[int, int, int]
    resolution_nm: tuple[float, float, float]
    chunk_size: tuple[int, int, int]
    encoding: str = "raw"

    def to_json_obj(self) -> dict:
        return {
            "key": self.key,
            "size": list(self.size),
            "resolution": list(self.resolution_nm),
            "chunk_sizes": [list(self.chunk_size)],
            "encoding": self.encoding,
            "voxel_offset": [0, 0, 0],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ScaleInfo":
        return cls(
            key=obj["key"],
            size=tuple(obj["size"]),
            resolution_nm=tuple(obj["resolution"]),
            chunk_size=tuple(obj["chunk_sizes"][0]),
            encoding=obj.get("encoding", "raw"),
        )

    def chunk_grid(self) -> tuple[int, int, int]:
        cx, cy, cz = self.chunk_size
        nx, ny, nz = self.size
        return (math.ceil(nx / cx), math.ceil(ny / cy), math.ceil(nz / cz))

    def chunk_bounds(self, coords: tuple[int, int, int]
                     ) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
        grid = self.chunk_grid()
        bounds = []
        for axis in range(3):
            i = coords[axis]
            if not (0 <= i < grid[axis]):
                raise NotFoundError(f"chunk coords {coords} outside grid {grid}")
            lo = i * self.chunk_size[axis]
            hi = min(lo + self.chunk_size[axis], self.size[axis])
            bounds.append((lo, hi))
        return tuple(bounds)


def chunk_name(bounds) -> str:
    (x0, x1), (y0, y1), (z0, z1) = bounds
    return f"{x0}-{x1}_{y0}-{y1}_{z0}-{z1}"


@dataclass(frozen=True)
class AnnotationLayerInfo:
    kind: str = "point"
    block_size: tuple[int, int, int] = DEFAULT_ANNOTATION_BLOCK_SIZE

    def to_json_obj(self) -> dict:
        return {"kind": self.kind, "block_size": list(self.block_size)}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "AnnotationLayerInfo":
        return cls(kind=obj["kind"], block_size=tuple(obj["block_size"]))


@dataclass(frozen=True)
class DatasetManifest:
    dataset: str
    data_type: str = "uint16"
    channels: tuple[str, ...] = ()
    scales: tuple[ScaleInfo, ...] = ()
    annotation_layers: dict[str, AnnotationLayerInfo] = field(default_factory=dict)

    def __post_init__(self):
        if self.data_type not in _DTYPES:
            raise InvalidArgumentError(f"data_type must be one of {sorted(_DTYPES)}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(_DTYPES[self.data_type])

    def scale(self, key: str) -> ScaleInfo:
        for s in self.scales:
            if s.key == key:
                return s
        raise NotFoundError(f"scale {key!r} not in dataset {self.dataset!r}")

    def to_json_obj(self) -> dict:
        return {
            "dataset": self.dataset,
            "type": "image" if self.data_type == "uint16" else "segmentation",
            "data_type": self.data_type,
            "num_channels": len(self.channels),
            "channels": list(self.channels),
            "scales": [s.to_json_obj() for s in self.scales],
            "annotation_layers": {
                name: info.to_json_obj()
                for name, info in sorted(self.annotation_layers.items())
            },
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "DatasetManifest":
        return cls(
            dataset=obj["dataset"],
            data_type=obj["data_type"],
            channels=tuple(obj.get("channels", [])),
            scales=tuple(ScaleInfo.from_json_obj(s) for s in obj.get("scales", [])),
            annotation_layers={
                name: AnnotationLayerInfo.from_json_obj(info)
                for name, info in obj.get("annotation_layers", {}).items()
            },
        )


@dataclass(frozen=True)
class Annotation:
    """One point or polyline in stitched voxel space.

    The ``deleted`` flag only matters on the write path: committing a
    deleted annotation removes it from the new revision.
    """

    id: str
    kind: str
    coords: tuple[tuple[float, float, float], ...]
    class_label: str
    provenance: str = "algorithm"
    deleted: bool = False

    def __post_init__(self):
        if not self.id:
            raise InvalidArgumentError("annotation id must be non-empty")
        if self.kind not in ANNOTATION_KINDS:
            raise InvalidArgumentError(f"kind must be one of {ANNOTATION_KINDS}")
        if self.kind == "point" and len(self.coords) != 1:
            raise InvalidArgumentError("a point has exactly one coordinate")
        if self.kind == "polyline" and len(self.coords) < 2:
            raise InvalidArgumentError("a polyline needs at least two coordinates")
        if not self.class_label:
            raise InvalidArgumentError("class label must be non-empty")
        if self.provenance not in PROVENANCES:
            raise InvalidArgumentError(f"provenance must be one of {PROVENANCES}")
        object.__setattr__(
            self, "coords",
            tuple(tuple(float(v) for v in c) for c in self.coords),
        )

    def block_key(self, block_size) -> str:
        x, y, z = self.coords[0]
        bx, by, bz = block_size
        return f"{math.floor(x / bx)}_{math.floor(y / by)}_{math.floor(z / bz)}"

    def to_json_obj(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "class": self.class_label,
            "provenance": self.provenance,
            "coords": [list(c) for c in self.coords],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Annotation":
        return cls(
            id=obj["id"],
            kind=obj["kind"],
            coords=tuple(tuple(c) for c in obj["coords"]),
            class_label=obj["class"],
            provenance=obj.get("provenance", "algorithm"),
            deleted=bool(obj.get("deleted", False)),
        )


@dataclass(frozen=True)
class Revision:
    number: int
    parent: int | None
    author: str
    timestamp: str
    upserted: tuple[str, ...]
    deleted: tuple[str, ...]

    def to_json_obj(self) -> dict:
        return {
            "revision": self.number,
            "parent": self.parent,
            "author": self.author,
            "timestamp": self.timestamp,
            "upserted": list(self.upserted),
            "deleted": list(self.deleted),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Revision":
        return cls(
            number=obj["revision"],
            parent=obj["parent"],
            author=obj["author"],
            timestamp=obj["timestamp"],
            upserted=tuple(obj["upserted"]),
            deleted=tuple(obj["deleted"]),
        )


def downsample(volume: np.ndarray, factors: tuple[int, int, int]) -> np.ndarray:
    """Mean-pool over factor boxes (factors in {1, 2} per axis), rounding
    half up to uint16. Odd tails pool over the truncated box."""
    for f in factors:
        if f not in (1, 2):
            raise InvalidArgumentError(f"downsample factors must be 1 or 2, got {factors}")
    if volume.ndim != 3:
        raise InvalidArgumentError("downsample expects a 3D volume")
    acc = volume.astype(np.float64)
    for axis, f in enumerate(factors):
        if f == 1:
            continue
        n = acc.shape[axis]
        k = n // 2
        sl = lambda s: tuple(s if i == axis else slice(None) for i in range(3))
        body = (acc[sl(slice(0, 2 * k, 2))] + acc[sl(slice(1, 2 * k, 2))]) / 2.0
        if n % 2:
            body = np.concatenate([body, acc[sl(slice(2 * k, n))]], axis=axis)
        acc = body
    return np.clip(np.floor(acc + 0.5), 0, np.iinfo(volume.dtype).max).astype(volume.dtype)


def _next_factors(size) -> tuple[int, int, int]:
    return tuple(2 if s >= 2 else 1 for s in size)


def _build_pyramid(voxels: np.ndarray, base_resolution_nm, chunk_size,
                   num_scales: int) -> list[tuple[ScaleInfo, np.ndarray]]:
    levels = []
    current = voxels
    cum = (1, 1, 1)
    for _ in range(num_scales):
        key = f"{cum[0]}_{cum[1]}_{cum[2]}"
        res = tuple(base_resolution_nm[i] * cum[i] for i in range(3))
        levels.append((ScaleInfo(key=key, size=current.shape, resolution_nm=res,
                                 chunk_size=tuple(chunk_size)), current))
        factors = _next_factors(current.shape)
        if factors == (1, 1, 1):
            break
        current = downsample(current, factors)
        cum = tuple(cum[i] * factors[i] for i in range(3))
    return levels


def _iter_chunks(scale: ScaleInfo):
    gx, gy, gz = scale.chunk_grid()
    for i in range(gx):
        for j in range(gy):
            for k in range(gz):
                yield (i, j, k), scale.chunk_bounds((i, j, k))


class PrecomputedStore:
    """Handle on one store root; all methods are safe for concurrent readers."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    # -- paths -------------------------------------------------------------

    def dataset_dir(self, dataset: str) -> Path:
        if not dataset or "/" in dataset or dataset.startswith("."):
            raise InvalidArgumentError(f"bad dataset id: {dataset!r}")
        return self.root / dataset

    def info_path(self, dataset: str) -> Path:
        return self.dataset_dir(dataset) / "info.json"

    def _layer_dir(self, dataset: str, layer: str) -> Path:
        if not layer or "/" in layer or layer.startswith("."):
            raise InvalidArgumentError(f"bad layer name: {layer!r}")
        return self.dataset_dir(dataset) / "ann" / layer

    # -- manifests ---------------------------------------------------------

    def list_datasets(self) -> list[str]:
        if not self.root.exists():
            return []
        return sorted(
            p.name for p in self.root.iterdir()
            if p.is_dir() and (p / "info.json").exists()
        )

    def load_manifest(self, dataset: str) -> DatasetManifest:
        path = self.info_path(dataset)
        if not path.exists():
            raise NotFoundError(f"dataset {dataset!r} not found")
        return DatasetManifest.from_json_obj(json.loads(path.read_text()))

    def _write_manifest(self, manifest: DatasetManifest):
        path = self.info_path(manifest.dataset)
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(path, _canonical_json(manifest.to_json_obj()))

    def _manifest_lock(self, dataset: str) -> Path:
        return self.dataset_dir(dataset) / ".manifest.lock"

    # -- imagery -----------------------------------------------------------

    def ingest_volume(self, volume: VolumeBlock, dataset: str,
                      chunk_size=DEFAULT_CHUNK_SIZE, num_scales: int = 1
                      ) -> DatasetManifest:
        """Write a stitched volume as chunked scales; a second call with a
        new channel extends every existing chunk in place."""
        if num_scales < 1:
            raise InvalidArgumentError("num_scales must be >= 1")
        base_res_nm = tuple(v * 1000.0 for v in volume.resolution.as_tuple())
        with _exclusive(self._manifest_lock(dataset)):
            existing = None
            if self.info_path(dataset).exists():
                existing = self.load_manifest(dataset)
            if existing is not None and existing.channels:
                if volume.channel in existing.channels:
                    raise ConflictError(
                        f"dataset {dataset!r} already has channel {volume.channel!r}"
                    )
                if existing.scales and tuple(existing.scales[0].size) != volume.extents:
                    raise InvalidArgumentError(
                        f"channel extents {volume.extents} != dataset extents "
                        f"{existing.scales[0].size}"
                    )
                levels = _build_pyramid(volume.voxels, base_res_nm,
                                        existing.scales[0].chunk_size,
                                        len(existing.scales))
                for scale, level in levels:
                    canonical = existing.scale(scale.key)
                    if canonical.size != tuple(level.shape):
                        raise InvalidArgumentError("pyramid shape mismatch on extension")
                    self._append_channel_chunks(dataset, canonical, level)
                manifest = replace(existing, channels=existing.channels + (volume.channel,))
            else:
                levels = _build_pyramid(volume.voxels, base_res_nm, chunk_size, num_scales)
                for scale, level in levels:
                    self._write_scale_chunks(dataset, scale, level)
                manifest = DatasetManifest(
                    dataset=dataset,
                    data_type=str(volume.voxels.dtype),
                    channels=(volume.channel,),
                    scales=tuple(s for s, _ in levels),
                    annotation_layers=existing.annotation_layers if existing else {},
                )
            self._write_manifest(manifest)
        return manifest

    def ingest_labels(self, labels, dataset: str, resolution,
                      chunk_size=DEFAULT_CHUNK_SIZE) -> DatasetManifest:
        """Write a stitched uint32 label volume as a single-scale
        segmentation dataset. Label ids cannot be mean-pooled, so no
        pyramid is built."""
        arr = np.asarray(labels.labels if hasattr(labels, "labels") else labels)
        if arr.dtype != np.uint32 or arr.ndim != 3:
            raise InvalidArgumentError("label volume must be a 3D uint32 array")
        base_res_nm = tuple(v * 1000.0 for v in resolution.as_tuple())
        with _exclusive(self._manifest_lock(dataset)):
            if self.info_path(dataset).exists():
                raise ConflictError(f"dataset {dataset!r} already exists")
            scale = ScaleInfo(key="1_1_1", size=arr.shape,
                              resolution_nm=base_res_nm,
                              chunk_size=tuple(chunk_size))
            self._write_scale_chunks(dataset, scale, arr)
            manifest = DatasetManifest(dataset=dataset, data_type="uint32",
                                       channels=("labels",), scales=(scale,))
            self._write_manifest(manifest)
        return manifest

    def _scale_dir(self, dataset: str, key: str) -> Path:
        return self.dataset_dir(dataset) / "scales" / key

    def _write_scale_chunks(self, dataset: str, scale: ScaleInfo, level: np.ndarray):
        scale_dir = self._scale_dir(dataset, scale.key)
        scale_dir.mkdir(parents=True, exist_ok=True)
        little = level.dtype.newbyteorder("<")
        for _, bounds in _iter_chunks(scale):
            (x0, x1), (y0, y1), (z0, z1) = bounds
            sub = level[x0:x1, y0:y1, z0:z1]
            _atomic_write_bytes(scale_dir / chunk_name(bounds),
                                sub.astype(little).tobytes(order="F"))

    def _append_channel_chunks(self, dataset: str, scale: ScaleInfo, level: np.ndarray):
        scale_dir = self._scale_dir(dataset, scale.key)
        for _, bounds in _iter_chunks(scale):
            (x0, x1), (y0, y1), (z0, z1) = bounds
            path = scale_dir / chunk_name(bounds)
            sub = level[x0:x1, y0:y1, z0:z1]
            _atomic_write_bytes(
                path,
                path.read_bytes() + sub.astype(sub.dtype.newbyteorder("<")).tobytes(order="F"),
            )

    def read_chunk(self, dataset: str, scale_key: str, chunk_coords) -> bytes:
        """Raw little-endian bytes of one chunk, all channels concatenated."""
        manifest = self.load_manifest(dataset)
        scale = manifest.scale(scale_key)
        bounds = scale.chunk_bounds(tuple(chunk_coords))
        path = self._scale_dir(dataset, scale_key) / chunk_name(bounds)
        if not path.exists():
            raise NotFoundError(f"chunk {chunk_name(bounds)} missing from scale {scale_key}")
        return path.read_bytes()

    def chunk_path(self, dataset: str, scale_key: str, name: str) -> Path:
        """Resolve a chunk file by its name, validating it is a real chunk."""
        manifest = self.load_manifest(dataset)
        scale = manifest.scale(scale_key)
        for _, bounds in _iter_chunks(scale):
            if chunk_name(bounds) == name:
                path = self._scale_dir(dataset, scale_key) / name
                if not path.exists():
                    raise NotFoundError(f"chunk {name} missing from scale {scale_key}")
                return path
        raise NotFoundError(f"no chunk named {name!r} in scale {scale_key}")

    # -- annotations ---------------------------------------------------------

    def head_revision(self, dataset: str, layer: str) -> int:
        head_path = self._layer_dir(dataset, layer) / "HEAD"
        if not head_path.exists():
            return 0
        return int(head_path.read_text().strip())

    def _rev_dir(self, dataset: str, layer: str, revision: int) -> Path:
        return self._layer_dir(dataset, layer) / f"rev-{revision}"

    def _load_rev_blocks(self, rev_dir: Path) -> dict[str, dict]:
        """id -> (block_key, json obj) for every annotation in a revision."""
        out: dict[str, dict] = {}
        for path in sorted(rev_dir.glob("*.json")):
            if path.name == "revision.json":
                continue
            block_key = path.stem
            for obj in json.loads(path.read_text()):
                out[obj["id"]] = {"block": block_key, "obj": obj}
        return out

    def write_annotations(self, dataset: str, layer: str, annotations, base_revision: int,
                          author: str, kind: str | None = None,
                          block_size=None) -> Revision:
        """Commit a change set against the given base revision (CAS).

        Upserts non-deleted annotations, removes deleted ones, snapshots
        the result as revision ``base + 1``. Raises ConflictError with the
        current head when the base is stale.
        """
        layer_dir = self._layer_dir(dataset, layer)
        annotations = list(annotations)
        with _exclusive(layer_dir / ".layer.lock"):
            with _exclusive(self._manifest_lock(dataset)):
                if self.info_path(dataset).exists():
                    manifest = self.load_manifest(dataset)
                else:
                    manifest = DatasetManifest(dataset=dataset)
                if layer not in manifest.annotation_layers:
                    info = AnnotationLayerInfo(
                        kind=kind or (annotations[0].kind if annotations else "point"),
                        block_size=tuple(block_size) if block_size
                        else DEFAULT_ANNOTATION_BLOCK_SIZE,
                    )
                    layers = dict(manifest.annotation_layers)
                    layers[layer] = info
                    manifest = replace(manifest, annotation_layers=layers)
                    self._write_manifest(manifest)
                layer_info = manifest.annotation_layers[layer]

            head = self.head_revision(dataset, layer)
            if base_revision != head:
                raise ConflictError(
                    f"stale base revision {base_revision}, head is {head}", head=head
                )

            extents = tuple(manifest.scales[0].size) if manifest.scales else None
            if extents:
                for ann in annotations:
                    for c in ann.coords:
                        if any(not (0 <= c[i] <= extents[i]) for i in range(3)):
                            raise InvalidArgumentError(
                                f"annotation {ann.id!r} coordinate {c} outside "
                                f"extents {extents}"
                            )

            current = (self._load_rev_blocks(self._rev_dir(dataset, layer, head))
                       if head else {})
            upserted: list[str] = []
            deleted: list[str] = []
            changed_blocks: set[str] = set()
            for ann in annotations:
                prior = current.get(ann.id)
                if ann.deleted:
                    if prior is not None:
                        changed_blocks.add(prior["block"])
                        del current[ann.id]
                        deleted.append(ann.id)
                    continue
                block = ann.block_key(layer_info.block_size)
                if prior is not None and prior["block"] != block:
                    changed_blocks.add(prior["block"])
                changed_blocks.add(block)
                current[ann.id] = {"block": block, "obj": ann.to_json_obj()}
                upserted.append(ann.id)

            new_rev = head + 1
            new_dir = self._rev_dir(dataset, layer, new_rev)
            new_dir.mkdir(parents=True, exist_ok=False)
            by_block: dict[str, list[dict]] = {}
            for entry in current.values():
                by_block.setdefault(entry["block"], []).append(entry["obj"])
            old_dir = self._rev_dir(dataset, layer, head)
            for block_key, objs in by_block.items():
                target = new_dir / f"{block_key}.json"
                if block_key in changed_blocks or head == 0:
                    objs.sort(key=lambda o: o["id"])
                    _atomic_write_text(target, _canonical_json(objs))
                else:
                    source = old_dir / f"{block_key}.json"
                    try:
                        os.link(source, target)
                    except OSError:
                        shutil.copy2(source, target)
            # blocks that became empty simply have no file in the new revision
            revision = Revision(
                number=new_rev,
                parent=head if head else None,
                author=author,
                timestamp=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                upserted=tuple(sorted(set(upserted))),
                deleted=tuple(sorted(set(deleted))),
            )
            _atomic_write_text(new_dir / "revision.json",
                               _canonical_json(revision.to_json_obj()))
            _atomic_write_text(layer_dir / "HEAD", f"{new_rev}\n")
        return revision

    def _resolve_revision(self, dataset: str, layer: str, revision: int | None) -> int:
        head = self.head_revision(dataset, layer)
        if head == 0:
            raise NotFoundError(f"layer {layer!r} has no revisions in dataset {dataset!r}")
        rev = head if revision is None else int(revision)
        if not (1 <= rev <= head):
            raise NotFoundError(f"revision {rev} does not exist (head is {head})")
        return rev

    def read_annotations(self, dataset: str, layer: str, blocks=None,
                         revision: int | None = None) -> list[Annotation]:
        """Non-deleted annotations as of a revision (default HEAD), optionally
        filtered to the given block keys; sorted by id."""
        rev = self._resolve_revision(dataset, layer, revision)
        rev_dir = self._rev_dir(dataset, layer, rev)
        wanted = set(blocks) if blocks else None
        out: list[Annotation] = []
        for path in sorted(rev_dir.glob("*.json")):
            if path.name == "revision.json":
                continue
            if wanted is not None and path.stem not in wanted:
                continue
            out.extend(Annotation.from_json_obj(o) for o in json.loads(path.read_text()))
        out.sort(key=lambda a: a.id)
        return out

    def read_revision(self, dataset: str, layer: str, revision: int) -> Revision:
        rev = self._resolve_revision(dataset, layer, revision)
        path = self._rev_dir(dataset, layer, rev) / "revision.json"
        return Revision.from_json_obj(json.loads(path.read_text()))

    # -- annotation documents -------------------------------------------------

    def annotations_document(self, dataset: str, layer: str,
                             revision: int | None = None, blocks=None) -> dict:
        rev = self._resolve_revision(dataset, layer, revision)
        anns = self.read_annotations(dataset, layer, blocks=blocks, revision=rev)
        return {
            "dataset": dataset,
            "layer": layer,
            "revision": rev,
            "annotations": [a.to_json_obj() for a in anns],
        }

    def export_annotations(self, dataset: str, layer: str,
                           revision: int | None = None, fmt: str = "json") -> str:
        """Canonical JSON or CSV document of one revision; imports of either
        format round-trip byte-identically."""
        if fmt == "json":
            return _canonical_json(self.annotations_document(dataset, layer, revision))
        if fmt == "csv":
            anns = self.read_annotations(dataset, layer, revision=revision)
            lines = ["id,kind,class,provenance,point_index,x,y,z"]
            for a in anns:
                for i, (x, y, z) in enumerate(a.coords):
                    lines.append(
                        f"{a.id},{a.kind},{a.class_label},{a.provenance},{i},{x!r},{y!r},{z!r}"
                    )
            return "\n".join(lines) + "\n"
        raise InvalidArgumentError(f"format must be json or csv, got {fmt!r}")

    # -- region features (feed the retraining join) ------------------------

    def _region_dir(self, dataset: str) -> Path:
        return self.dataset_dir(dataset) / "regions"

    def write_region_features(self, dataset: str, block_id: str,
                              records: list[RegionRecord]):
        """Persist one grid block's region records (stitched-frame centroids)."""
        d = self._region_dir(dataset)
        d.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(d / f"{block_id}.json",
                           _canonical_json([r.to_json_obj() for r in records]))

    def read_region_features(self, dataset: str) -> dict[str, FeatureVector]:
        """All stored features keyed by the annotation id convention {block}/{label}."""
        out: dict[str, FeatureVector] = {}
        d = self._region_dir(dataset)
        if not d.exists():
            return out
        for path in sorted(d.glob("*.json")):
            for obj in json.loads(path.read_text()):
                out[f"{path.stem}/{obj['label']}"] = \
                    FeatureVector.from_json_obj(obj["features"])
        return out

    def read_region_records(self, dataset: str) -> dict[str, list[RegionRecord]]:
        out: dict[str, list[RegionRecord]] = {}
        d = self._region_dir(dataset)
        if not d.exists():
            return out
        for path in sorted(d.glob("*.json")):
            out[path.stem] = [RegionRecord.from_json_obj(o)
                              for o in json.loads(path.read_text())]
        return out

    # -- model versions -----------------------------------------------------

    def _model_dir(self, dataset: str) -> Path:
        return self.dataset_dir(dataset) / "models"

    def model_head(self, dataset: str) -> int:
        head_path = self._model_dir(dataset) / "MODEL_HEAD"
        if not head_path.exists():
            return 0
        return int(head_path.read_text().strip())

    def save_model_version(self, dataset: str, model: SvmModel) -> int:
        """Persist a model under the next monotonically increasing version."""
        d = self._model_dir(dataset)
        with _exclusive(d / ".models.lock"):
            version = self.model_head(dataset) + 1
            save_model(replace(model, version=version), d / f"v{version}.nvm")
            _atomic_write_text(d / "MODEL_HEAD", f"{version}\n")
        return version

    def load_model_version(self, dataset: str, version: int | None = None) -> SvmModel:
        head = self.model_head(dataset)
        if head == 0:
            raise NotFoundError(f"no models stored for dataset {dataset!r}")
        v = head if version is None else version
        path = self._model_dir(dataset) / f"v{v}.nvm"
        if not path.exists():
            raise NotFoundError(f"model version {v} not found")
        return load_model(path)


def parse_annotation_document(text: str, fmt: str = "json") -> list[Annotation]:
    """Inverse of export_annotations; returns the annotation list."""
    if fmt == "json":
        doc = json.loads(text)
        return [Annotation.from_json_obj(o) for o in doc["annotations"]]
    if fmt == "csv":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "id,kind,class,provenance,point_index,x,y,z":
            raise InvalidArgumentError("bad CSV header")
        grouped: dict[str, dict] = {}
        order: list[str] = []
        for line in lines[1:]:
            ann_id, kind, cls, prov, idx, x, y, z = line.split(",")
            if ann_id not in grouped:
                grouped[ann_id] = {"kind": kind, "class": cls, "prov": prov, "coords": {}}
                order.append(ann_id)
            grouped[ann_id]["coords"][int(idx)] = (float(x), float(y), float(z))
        out = []
        for ann_id in order:
            g = grouped[ann_id]
            coords = tuple(g["coords"][i] for i in sorted(g["coords"]))
            out.append(Annotation(id=ann_id, kind=g["kind"], coords=coords,
                                  class_label=g["class"], provenance=g["prov"]))
        return out
    raise InvalidArgumentError(f"format must be json or csv, got {fmt!r}")


