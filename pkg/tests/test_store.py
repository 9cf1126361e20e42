"""Chunk partitioning, multi-scale ingest, CAS revisions, and export formats."""

import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurovol.errors import ConflictError, InvalidArgumentError, NotFoundError
from neurovol.store import (Annotation, DatasetManifest, PrecomputedStore,
                            downsample, parse_annotation_document)
from neurovol.volume import Resolution, VolumeBlock


def make_volume(extents, channel="dapi", seed=0):
    rng = np.random.default_rng(seed)
    vox = rng.integers(0, 65536, size=extents, dtype=np.uint16)
    return VolumeBlock(voxels=vox, channel=channel, grid_pos=(0, 0),
                       resolution=Resolution(0.227, 0.227, 1.0))


def reassemble(store, dataset, key, num_channels=1):
    manifest = store.load_manifest(dataset)
    scale = manifest.scale(key)
    nx, ny, nz = scale.size
    out = np.zeros((num_channels, nx, ny, nz), dtype=np.uint16)
    gx, gy, gz = scale.chunk_grid()
    for i in range(gx):
        for j in range(gy):
            for k in range(gz):
                bounds = scale.chunk_bounds((i, j, k))
                (x0, x1), (y0, y1), (z0, z1) = bounds
                raw = store.read_chunk(dataset, key, (i, j, k))
                arr = np.frombuffer(raw, dtype="<u2").reshape(
                    (x1 - x0, y1 - y0, z1 - z0, num_channels), order="F")
                for c in range(num_channels):
                    out[c, x0:x1, y0:y1, z0:z1] = arr[..., c]
    return out


class TestDownsample:
    def test_identity_factors(self):
        vol = make_volume((5, 6, 7)).voxels
        assert np.array_equal(downsample(vol, (1, 1, 1)), vol)

    def test_constant_cube(self):
        vol = np.full((2, 2, 2), 10, dtype=np.uint16)
        out = downsample(vol, (2, 2, 2))
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 10

    def test_mean_of_two(self):
        vol = np.zeros((2, 1, 1), dtype=np.uint16)
        vol[1] = 10
        assert downsample(vol, (2, 1, 1))[0, 0, 0] == 5

    def test_round_half_up(self):
        vol = np.array([[[1]], [[2]]], dtype=np.uint16)  # mean 1.5
        assert downsample(vol, (2, 1, 1))[0, 0, 0] == 2

    def test_odd_tail_truncated_box(self):
        vol = np.array([[[2]], [[4]], [[9]]], dtype=np.uint16)
        out = downsample(vol, (2, 1, 1))
        assert out.shape == (2, 1, 1)
        assert out[0, 0, 0] == 3   # mean(2, 4)
        assert out[1, 0, 0] == 9   # lone tail voxel

    def test_bad_factor_rejected(self):
        with pytest.raises(InvalidArgumentError):
            downsample(np.zeros((2, 2, 2), dtype=np.uint16), (3, 1, 1))

    @given(nx=st.integers(1, 9), ny=st.integers(1, 9), nz=st.integers(1, 9))
    @settings(max_examples=30)
    def test_matches_box_mean_oracle(self, nx, ny, nz):
        rng = np.random.default_rng(nx * 100 + ny * 10 + nz)
        vol = rng.integers(0, 65536, size=(nx, ny, nz), dtype=np.uint16)
        out = downsample(vol, (2, 2, 2))
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                for k in range(out.shape[2]):
                    box = vol[2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2]
                    expected = int(np.floor(box.astype(np.float64).mean() + 0.5))
                    assert out[i, j, k] == expected


class TestIngestAndChunks:
    def test_single_chunk_dataset(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        vol = make_volume((64, 64, 64))
        manifest = store.ingest_volume(vol, "one", chunk_size=(64, 64, 64), num_scales=1)
        assert [s.key for s in manifest.scales] == ["1_1_1"]
        raw = store.read_chunk("one", "1_1_1", (0, 0, 0))
        assert raw == vol.voxels.astype("<u2").tobytes(order="F")

    def test_edge_chunks_truncated(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        store.ingest_volume(make_volume((100, 100, 100)), "edge",
                            chunk_size=(64, 64, 64))
        scale = store.load_manifest("edge").scale("1_1_1")
        assert scale.chunk_grid() == (2, 2, 2)
        assert scale.chunk_bounds((1, 0, 0))[0] == (64, 100)  # 36 deep
        raw = store.read_chunk("edge", "1_1_1", (1, 1, 1))
        assert len(raw) == 36 * 36 * 36 * 2

    @pytest.mark.parametrize("extents", [(64, 64, 64), (100, 100, 100), (128, 96, 40)])
    @pytest.mark.parametrize("chunk", [(64, 64, 64), (32, 32, 32)])
    def test_reassembly_bit_exact_and_chunks_match_slice_oracle(
            self, tmp_path, extents, chunk):
        store = PrecomputedStore(tmp_path)
        vol = make_volume(extents, seed=hash((extents, chunk)) % 1000)
        store.ingest_volume(vol, "ds", chunk_size=chunk, num_scales=2)
        assert np.array_equal(reassemble(store, "ds", "1_1_1")[0], vol.voxels)
        manifest = store.load_manifest("ds")
        for scale, level in [("1_1_1", vol.voxels),
                             ("2_2_2", downsample(vol.voxels, (2, 2, 2)))]:
            info = manifest.scale(scale)
            gx, gy, gz = info.chunk_grid()
            for i in range(gx):
                for j in range(gy):
                    for k in range(gz):
                        (x0, x1), (y0, y1), (z0, z1) = info.chunk_bounds((i, j, k))
                        raw = store.read_chunk("ds", scale, (i, j, k))
                        oracle = level[x0:x1, y0:y1, z0:z1]
                        assert raw == oracle.astype("<u2").tobytes(order="F")

    def test_out_of_range_chunk_not_found(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        store.ingest_volume(make_volume((64, 64, 64)), "ds")
        with pytest.raises(NotFoundError):
            store.read_chunk("ds", "1_1_1", (1, 0, 0))
        with pytest.raises(NotFoundError):
            store.read_chunk("ds", "9_9_9", (0, 0, 0))
        with pytest.raises(NotFoundError):
            store.read_chunk("nope", "1_1_1", (0, 0, 0))

    def test_second_channel_extends_chunks(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        dapi = make_volume((80, 60, 40), "dapi", seed=1)
        cfos = make_volume((80, 60, 40), "cfos", seed=2)
        store.ingest_volume(dapi, "two", chunk_size=(64, 64, 64), num_scales=2)
        manifest = store.ingest_volume(cfos, "two", num_scales=2)
        assert manifest.channels == ("dapi", "cfos")
        planes = reassemble(store, "two", "1_1_1", num_channels=2)
        assert np.array_equal(planes[0], dapi.voxels)
        assert np.array_equal(planes[1], cfos.voxels)

    def test_same_channel_conflict(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        store.ingest_volume(make_volume((64, 64, 64)), "ds")
        with pytest.raises(ConflictError):
            store.ingest_volume(make_volume((64, 64, 64)), "ds")

    def test_scales_halve_extents(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        manifest = store.ingest_volume(make_volume((64, 64, 16)), "pyr",
                                       chunk_size=(32, 32, 32), num_scales=3)
        sizes = [s.size for s in manifest.scales]
        assert sizes == [(64, 64, 16), (32, 32, 8), (16, 16, 4)]
        res = [s.resolution_nm for s in manifest.scales]
        assert res[1] == (454.0, 454.0, 2000.0)

    def test_manifest_round_trip(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        manifest = store.ingest_volume(make_volume((64, 64, 64)), "ds", num_scales=2)
        loaded = store.load_manifest("ds")
        assert loaded == manifest
        assert DatasetManifest.from_json_obj(manifest.to_json_obj()) == manifest

    @given(
        nx=st.integers(1, 80), ny=st.integers(1, 80), nz=st.integers(1, 40),
        cx=st.integers(1, 64), cy=st.integers(1, 64), cz=st.integers(1, 64),
    )
    @settings(max_examples=20, deadline=None)
    def test_chunk_partition_property(self, tmp_path_factory, nx, ny, nz, cx, cy, cz):
        # chunks tile the volume: disjoint, covering, reassembly bit-exact
        root = tmp_path_factory.mktemp("prop")
        store = PrecomputedStore(root)
        rng = np.random.default_rng(nx * 7919 + ny * 104729 + nz + cx + cy + cz)
        vox = rng.integers(0, 65536, size=(nx, ny, nz), dtype=np.uint16)
        vol = VolumeBlock(voxels=vox, channel="dapi", grid_pos=(0, 0),
                          resolution=Resolution(1, 1, 1))
        manifest = store.ingest_volume(vol, "prop", chunk_size=(cx, cy, cz))
        scale = manifest.scale("1_1_1")
        seen = np.zeros(vox.shape, dtype=np.int16)
        out = np.zeros_like(vox)
        gx, gy, gz = scale.chunk_grid()
        for i in range(gx):
            for j in range(gy):
                for k in range(gz):
                    (x0, x1), (y0, y1), (z0, z1) = scale.chunk_bounds((i, j, k))
                    raw = store.read_chunk("prop", "1_1_1", (i, j, k))
                    arr = np.frombuffer(raw, dtype="<u2").reshape(
                        (x1 - x0, y1 - y0, z1 - z0), order="F")
                    out[x0:x1, y0:y1, z0:z1] = arr
                    seen[x0:x1, y0:y1, z0:z1] += 1
        assert np.all(seen == 1)
        assert np.array_equal(out, vox)

    def test_label_volume_dataset(self, tmp_path):
        from neurovol.segmentation import LabelVolume

        store = PrecomputedStore(tmp_path)
        rng = np.random.default_rng(1)
        labels = LabelVolume(labels=rng.integers(0, 40, size=(70, 40, 30))
                             .astype(np.uint32))
        manifest = store.ingest_labels(labels, "segm", Resolution(1, 1, 1),
                                       chunk_size=(64, 64, 64))
        assert manifest.data_type == "uint32"
        assert manifest.to_json_obj()["type"] == "segmentation"
        raw = store.read_chunk("segm", "1_1_1", (1, 0, 0))
        assert len(raw) == 6 * 40 * 30 * 4  # truncated edge, 4 bytes per voxel
        oracle = labels.labels[64:70, 0:40, 0:30]
        assert raw == oracle.astype("<u4").tobytes(order="F")


def point(i, coords=(1.0, 2.0, 3.0), cls="neuron", deleted=False):
    return Annotation(id=f"a{i:04d}", kind="point", coords=(coords,),
                      class_label=cls, deleted=deleted)


class TestAnnotations:
    def test_empty_change_set_commits(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        rev = store.write_annotations("ds", "layer", [], base_revision=0, author="t")
        assert rev.number == 1
        assert rev.upserted == () and rev.deleted == ()
        assert store.read_annotations("ds", "layer") == []

    def test_cas_second_writer_conflicts(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        store.write_annotations("ds", "layer", [point(1)], base_revision=0, author="a")
        with pytest.raises(ConflictError) as err:
            store.write_annotations("ds", "layer", [point(2)], base_revision=0,
                                    author="b")
        assert err.value.head == 1

    def test_cas_from_a_later_base(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        for i in range(3):
            store.write_annotations("ds", "layer", [point(i)], base_revision=i,
                                    author="a")
        first = store.write_annotations("ds", "layer", [point(10)], base_revision=3,
                                        author="a")
        assert first.number == 4
        with pytest.raises(ConflictError) as err:
            store.write_annotations("ds", "layer", [point(11)], base_revision=3,
                                    author="b")
        assert err.value.head == 4

    def test_block_partitioning(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        rng = np.random.default_rng(0)
        annotations = [
            Annotation(id=f"p{i:04d}", kind="point",
                       coords=((float(rng.integers(0, 512)),
                                float(rng.integers(0, 512)),
                                float(rng.integers(0, 512))),),
                       class_label="centroid")
            for i in range(1000)
        ]
        store.write_annotations("ds", "pts", annotations, base_revision=0, author="t",
                                block_size=(256, 256, 256))
        rev_dir = tmp_path / "ds" / "ann" / "pts" / "rev-1"
        block_files = [p for p in rev_dir.glob("*.json") if p.name != "revision.json"]
        assert len(block_files) == 8
        union = []
        for path in block_files:
            union.extend(json.loads(path.read_text()))
        assert sorted(o["id"] for o in union) == sorted(a.id for a in annotations)
        # block filter returns exactly the matching points
        got = store.read_annotations("ds", "pts", blocks=["0_0_0"])
        for ann in got:
            assert all(c < 256 for c in ann.coords[0])

    def test_revision_immutability(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        store.write_annotations("ds", "layer", [point(1), point(2)],
                                base_revision=0, author="t")
        original = store.read_annotations("ds", "layer", revision=1)
        store.write_annotations("ds", "layer", [point(1, deleted=True), point(3)],
                                base_revision=1, author="t")
        assert store.read_annotations("ds", "layer", revision=1) == original
        head = store.read_annotations("ds", "layer")
        assert [a.id for a in head] == ["a0002", "a0003"]

    def test_delete_then_read(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        store.write_annotations("ds", "layer", [point(1), point(2)],
                                base_revision=0, author="t")
        rev = store.write_annotations("ds", "layer", [point(2, deleted=True)],
                                      base_revision=1, author="t")
        assert rev.deleted == ("a0002",)
        assert [a.id for a in store.read_annotations("ds", "layer")] == ["a0001"]

    def test_move_across_blocks(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        store.write_annotations("ds", "layer", [point(1, coords=(10.0, 10.0, 10.0))],
                                base_revision=0, author="t",
                                block_size=(256, 256, 256))
        moved = point(1, coords=(400.0, 10.0, 10.0))
        store.write_annotations("ds", "layer", [moved], base_revision=1, author="t")
        anns = store.read_annotations("ds", "layer")
        assert len(anns) == 1
        assert anns[0].coords[0] == (400.0, 10.0, 10.0)
        assert anns[0].block_key((256, 256, 256)) == "1_0_0"

    def test_unknown_revision_not_found(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        store.write_annotations("ds", "layer", [point(1)], base_revision=0, author="t")
        with pytest.raises(NotFoundError):
            store.read_annotations("ds", "layer", revision=5)
        with pytest.raises(NotFoundError):
            store.read_annotations("ds", "missing")

    def test_coords_outside_extents_rejected(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        store.ingest_volume(make_volume((64, 64, 64)), "ds")
        with pytest.raises(InvalidArgumentError):
            store.write_annotations("ds", "layer",
                                    [point(1, coords=(100.0, 0.0, 0.0))],
                                    base_revision=0, author="t")

    def test_annotation_validation(self):
        with pytest.raises(InvalidArgumentError):
            Annotation(id="x", kind="point", coords=((1, 2, 3), (4, 5, 6)),
                       class_label="neuron")
        with pytest.raises(InvalidArgumentError):
            Annotation(id="x", kind="polyline", coords=((1, 2, 3),),
                       class_label="axon")
        with pytest.raises(InvalidArgumentError):
            Annotation(id="", kind="point", coords=((1, 2, 3),), class_label="c")
        with pytest.raises(InvalidArgumentError):
            Annotation(id="x", kind="point", coords=((1, 2, 3),),
                       class_label="c", provenance="robot")

    def test_concurrent_writers_exactly_one_success_per_head(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        success_revisions = []
        lock = threading.Lock()
        total_target = 40

        def writer(worker_id):
            counter = 0
            while True:
                with lock:
                    if len(success_revisions) >= total_target:
                        return
                base = store.head_revision("ds", "layer")
                ann = Annotation(id=f"w{worker_id}-{counter}", kind="point",
                                 coords=((1.0, 1.0, 1.0),), class_label="centroid")
                try:
                    rev = store.write_annotations("ds", "layer", [ann],
                                                  base_revision=base,
                                                  author=f"w{worker_id}")
                except ConflictError:
                    continue
                counter += 1
                with lock:
                    if len(success_revisions) < total_target:
                        success_revisions.append(rev.number)
                    else:
                        return

        threads = [threading.Thread(target=writer, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(success_revisions) == list(range(1, total_target + 1))


class TestExportImport:
    def build_layer(self, store, n_points=6, n_lines=2):
        rng = np.random.default_rng(3)
        annotations = [point(i, coords=(float(rng.integers(0, 100)), 2.0, 3.5))
                       for i in range(n_points)]
        for i in range(n_lines):
            coords = tuple((float(v), float(v + 1), 0.25) for v in range(i + 2))
            annotations.append(Annotation(id=f"line{i}", kind="polyline",
                                          coords=coords, class_label="axon"))
        store.write_annotations("ds", "mix", annotations, base_revision=0, author="t")
        return annotations

    def test_empty_layer_exports(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        store.write_annotations("ds", "empty", [], base_revision=0, author="t")
        doc = json.loads(store.export_annotations("ds", "empty", fmt="json"))
        assert doc["annotations"] == []
        csv_text = store.export_annotations("ds", "empty", fmt="csv")
        assert csv_text == "id,kind,class,provenance,point_index,x,y,z\n"

    def test_csv_polyline_rows_share_id(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        self.build_layer(store, n_points=0, n_lines=1)
        lines = store.export_annotations("ds", "mix", fmt="csv").splitlines()
        assert len(lines) == 3
        assert lines[1].startswith("line0,polyline,axon,algorithm,0,")
        assert lines[2].startswith("line0,polyline,axon,algorithm,1,")

    @pytest.mark.parametrize("fmt", ["json", "csv"])
    def test_export_import_export_byte_identical(self, tmp_path, fmt):
        store_a = PrecomputedStore(tmp_path / "a")
        self.build_layer(store_a)
        first = store_a.export_annotations("ds", "mix", fmt=fmt)
        imported = parse_annotation_document(first, fmt=fmt)
        store_b = PrecomputedStore(tmp_path / "b")
        store_b.write_annotations("ds", "mix", imported, base_revision=0, author="t")
        second = store_b.export_annotations("ds", "mix", fmt=fmt)
        assert second == first

    def test_unknown_layer_not_found(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        with pytest.raises(NotFoundError):
            store.export_annotations("ds", "ghost", fmt="json")

    def test_bad_format_rejected(self, tmp_path):
        store = PrecomputedStore(tmp_path)
        store.write_annotations("ds", "layer", [], base_revision=0, author="t")
        with pytest.raises(InvalidArgumentError):
            store.export_annotations("ds", "layer", fmt="hdf5")
