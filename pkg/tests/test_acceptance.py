"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

All runs are desk-scale on synthetic phantoms with frozen seeds. Criterion 5
asserts the weak-scaling bound as stated and prints the throughput table plus
the measured wall-time ratio; on hosts whose virtualized CPUs time-share the
advertised cores it fails for environmental reasons (two concurrent compute
processes each run ~1.45x slower than solo on such hosts).
"""

import json
import threading
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from neurovol.batch import (BatchJob, BlockRef, benchmark_scaling,
                            physical_cores, run_batch)
from neurovol.classify import cross_validate
from neurovol.errors import ConflictError
from neurovol.grid import make_grid_layout
from neurovol.phantom import (NUCLEUS_CHANNEL, PhantomSpec, generate_phantom,
                              save_phantom, single_block_spec)
from neurovol.segmentation import SegParams, segment_block
from neurovol.stitching import find_optimal_overlap, stitch_grid
from neurovol.store import (Annotation, PrecomputedStore, downsample,
                            parse_annotation_document)
from neurovol.volume import Resolution, VolumeBlock, scan_block_dir

FG, BG = 12000, 1000
DYNAMIC_RANGE = FG - BG


@contextmanager
def criterion(number, name):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} {name}: FAIL")
        raise
    print(f"ACCEPTANCE {number} {name}: PASS")


def test_01_stitching_exactness():
    with criterion(1, "stitching exactness (5x5 noiseless)"):
        spec = PhantomSpec(grid=make_grid_layout(5, 5), block_extents=(64, 64, 64),
                           true_overlap_x=6, true_overlap_y=5, nuclei_per_block=12,
                           radius_range=(3.0, 5.0), foreground=FG, background=BG,
                           noise_sigma=0.0)
        blocks, _ = generate_phantom(spec, seed=11)
        start = time.monotonic()
        _, plan = stitch_grid(blocks[NUCLEUS_CHANNEL], spec.grid)
        elapsed = time.monotonic() - start
        assert len(plan.pair_results) == 40
        for pair in plan.pair_results:
            truth = 6 if pair["axis"] == "x" else 5
            assert pair["best_overlap"] == truth, pair
            assert pair["loss"] == 0.0, pair
        assert elapsed < 60.0


def test_02_stitching_noise_robustness():
    with criterion(2, "stitching robustness (5% noise, 100 trials)"):
        sigma = 0.05 * DYNAMIC_RANGE
        hits = 0
        for seed in range(100):
            spec = PhantomSpec(grid=make_grid_layout(1, 2),
                               block_extents=(64, 64, 64), true_overlap_x=6,
                               true_overlap_y=5, nuclei_per_block=12,
                               radius_range=(3.0, 5.0), foreground=FG,
                               background=BG, noise_sigma=sigma)
            blocks, _ = generate_phantom(spec, seed=seed)
            result = find_optimal_overlap(blocks[NUCLEUS_CHANNEL][(0, 0)],
                                          blocks[NUCLEUS_CHANNEL][(0, 1)], "x")
            if abs(result.best_overlap - 6) <= 1:
                hits += 1
        print(f"  recovered within +-1 voxel in {hits}/100 trials")
        assert hits >= 95


def test_03_segmentation_recall():
    with criterion(3, "segmentation recall (50 nuclei, 2% noise)"):
        spec = single_block_spec(extent=(128, 128, 128), nuclei_per_block=50,
                                 radius_range=(4.0, 6.0), foreground=FG,
                                 background=BG,
                                 noise_sigma=0.02 * DYNAMIC_RANGE)
        blocks, truth = generate_phantom(spec, seed=42)
        params = SegParams(sigma1_um=4.0, sigma2_um=6.4, seed_threshold=400.0,
                           min_region_voxels=30)
        _, records = segment_block(blocks[NUCLEUS_CHANNEL][(0, 0)], params)
        centers = np.array([n.center for n in truth.nuclei])
        detected = np.array([r.centroid for r in records])
        cost = np.linalg.norm(centers[:, None, :] - detected[None, :, :], axis=2)
        rows, cols = linear_sum_assignment(cost)
        matched = sum(1 for r, c in zip(rows, cols) if cost[r, c] <= 2.0)
        spurious = len(records) - matched
        print(f"  detected {len(records)}, matched {matched}/50, "
              f"spurious {spurious}")
        assert matched >= 48
        assert spurious <= 2


def test_04_classifier_cv_auc():
    with criterion(4, "classifier 5-fold CV mean AUC >= 0.97"):
        rng = np.random.default_rng(77)
        glia = rng.normal(0.0, 1.0, size=(200, 6))
        neuron = rng.normal(0.0, 1.0, size=(200, 6))
        neuron[:, 0] += 3.0  # 3 pooled standard deviations along 2 features
        neuron[:, 1] += 3.0
        x = np.vstack([neuron, glia])
        labels = ["neuron"] * 200 + ["glia"] * 200
        report = cross_validate(x, labels, k=5, c=1.0, seed=5)
        again = cross_validate(x, labels, k=5, c=1.0, seed=5)
        print(f"  fold AUCs {[round(a, 4) for a in report.fold_aucs]} "
              f"mean {report.mean_auc:.4f}")
        assert report.mean_auc >= 0.97
        assert report == again  # seed-deterministic


def test_05_weak_scaling():
    with criterion(5, "weak scaling: W volumes on W workers <= 1.3x one volume"):
        workers = min(8, physical_cores())
        report = benchmark_scaling([1, workers] if workers > 1 else [1],
                                   block_extents=(64, 64, 64), workers=workers,
                                   seed=0, repeats=3, nuclei_per_block=10)
        print(report.throughput_table())
        base = report.rows[0]
        assert base.voxels_per_s == pytest.approx(base.voxels / base.wall_s)
        assert "%" in report.throughput_table()  # paper-format ratio table
        if workers > 1:
            scaled = report.rows[1]
            ratio = scaled.wall_s / base.wall_s
            print(f"  W={workers}: {scaled.wall_s:.3f}s vs {base.wall_s:.3f}s "
                  f"-> ratio {ratio:.2f} (bound 1.30)")
            assert ratio <= 1.30


def test_06_store_round_trip():
    with criterion(6, "store ingest/reassemble bit-exact + chunk slice oracle"):
        import tempfile

        with tempfile.TemporaryDirectory() as root:
            store = PrecomputedStore(root)
            cases = [(64, 64, 64), (100, 100, 100), (128, 96, 40)]
            chunks = [(64, 64, 64), (32, 32, 32)]
            for extents in cases:
                for chunk in chunks:
                    name = f"ds{extents[0]}x{extents[1]}x{extents[2]}" \
                           f"_c{chunk[0]}"
                    rng = np.random.default_rng(hash((extents, chunk)) % 2 ** 31)
                    vox = rng.integers(0, 65536, size=extents, dtype=np.uint16)
                    vol = VolumeBlock(voxels=vox, channel="dapi", grid_pos=(0, 0),
                                      resolution=Resolution(1, 1, 1))
                    manifest = store.ingest_volume(vol, name, chunk_size=chunk,
                                                   num_scales=2)
                    for scale_info, level in [
                        (manifest.scale("1_1_1"), vox),
                        (manifest.scale("2_2_2"), downsample(vox, (2, 2, 2))),
                    ]:
                        out = np.zeros(scale_info.size, dtype=np.uint16)
                        gx, gy, gz = scale_info.chunk_grid()
                        for i in range(gx):
                            for j in range(gy):
                                for k in range(gz):
                                    bounds = scale_info.chunk_bounds((i, j, k))
                                    (x0, x1), (y0, y1), (z0, z1) = bounds
                                    raw = store.read_chunk(name, scale_info.key,
                                                           (i, j, k))
                                    oracle = level[x0:x1, y0:y1, z0:z1]
                                    assert raw == oracle.astype("<u2").tobytes(
                                        order="F")
                                    out[x0:x1, y0:y1, z0:z1] = np.frombuffer(
                                        raw, dtype="<u2").reshape(
                                        oracle.shape, order="F")
                        assert np.array_equal(out, level)


def test_07_revision_safety_under_concurrency():
    with criterion(7, "CAS revision safety: 100 writes, 8 writers"):
        import tempfile

        with tempfile.TemporaryDirectory() as root:
            store = PrecomputedStore(root)
            target = 100
            successes: list[tuple[int, str]] = []
            guard = threading.Lock()

            def writer(worker):
                attempt = 0
                while True:
                    with guard:
                        if len(successes) >= target:
                            return
                    base = store.head_revision("ds", "layer")
                    ann_id = f"w{worker}-{attempt}"
                    ann = Annotation(id=ann_id, kind="point",
                                     coords=((float(worker), float(attempt), 0.0),),
                                     class_label="centroid")
                    attempt += 1
                    try:
                        rev = store.write_annotations("ds", "layer", [ann],
                                                      base_revision=base,
                                                      author=f"w{worker}")
                    except ConflictError:
                        continue
                    with guard:
                        successes.append((rev.number, ann_id))

            threads = [threading.Thread(target=writer, args=(i,)) for i in range(8)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            successes = successes[:target]
            revisions = sorted(r for r, _ in successes)
            # exactly one success per head value, no skips, no lost updates
            assert revisions == list(range(1, target + 1))
            head_anns = {a.id for a in store.read_annotations("ds", "layer")}
            committed = {ann_id for _, ann_id in successes}
            assert committed <= head_anns
            for rev_number, _ in successes:
                historical = store.read_annotations("ds", "layer",
                                                    revision=rev_number)
                assert len(historical) == rev_number
            print(f"  {len(successes)} committed, head "
                  f"{store.head_revision('ds', 'layer')}")


def test_08_annotation_format_round_trip():
    with criterion(8, "JSON+CSV export/import/export byte-identical (1000 anns)"):
        import tempfile

        rng = np.random.default_rng(12)
        annotations = []
        for i in range(800):
            annotations.append(Annotation(
                id=f"p{i:05d}", kind="point",
                coords=((float(rng.integers(0, 500)) + 0.5,
                         float(rng.integers(0, 500)),
                         float(rng.uniform(0, 64))),),
                class_label=str(rng.choice(["neuron", "glia", "centroid"])),
            ))
        for i in range(200):
            n_vertices = int(rng.integers(2, 6))
            coords = tuple((float(rng.integers(0, 500)),
                            float(rng.integers(0, 500)),
                            float(rng.uniform(0, 64))) for _ in range(n_vertices))
            annotations.append(Annotation(id=f"line{i:05d}", kind="polyline",
                                          coords=coords, class_label="axon"))
        for fmt in ("json", "csv"):
            with tempfile.TemporaryDirectory() as root_a, \
                    tempfile.TemporaryDirectory() as root_b:
                store_a = PrecomputedStore(root_a)
                store_a.write_annotations("ds", "layer", annotations,
                                          base_revision=0, author="t")
                first = store_a.export_annotations("ds", "layer", fmt=fmt)
                imported = parse_annotation_document(first, fmt=fmt)
                store_b = PrecomputedStore(root_b)
                store_b.write_annotations("ds", "layer", imported,
                                          base_revision=0, author="t")
                second = store_b.export_annotations("ds", "layer", fmt=fmt)
                assert second == first, f"{fmt} round trip not byte-identical"


def test_09_batch_determinism(tmp_path):
    with criterion(9, "25-block job bit-identical across 1/2/8 workers"):
        spec = PhantomSpec(grid=make_grid_layout(5, 5), block_extents=(32, 32, 32),
                           true_overlap_x=3, true_overlap_y=3, nuclei_per_block=3,
                           radius_range=(2.0, 3.0), foreground=FG, background=BG,
                           noise_sigma=60.0)
        blocks, truth = generate_phantom(spec, seed=4)
        save_phantom(blocks, truth, tmp_path)
        refs = tuple(BlockRef(grid_pos=pos, path=path) for pos, path in
                     sorted(scan_block_dir(tmp_path, NUCLEUS_CHANNEL).items()))
        assert len(refs) == 25
        params = SegParams(sigma1_um=2.2, sigma2_um=3.5, seed_threshold=400.0,
                           min_region_voxels=20)
        outputs = {}
        for workers in (1, 2, 8):
            job = BatchJob(dataset_id="det", blocks=refs, workers=workers,
                           seg_params=params)
            outputs[workers] = run_batch(job)
        reference = outputs[1]
        assert not reference.failures
        for workers in (2, 8):
            other = outputs[workers]
            assert set(other.results) == set(reference.results)
            for pos in reference.results:
                a, b = reference.results[pos], other.results[pos]
                assert a.labels.labels.tobytes() == b.labels.labels.tobytes()
                assert a.regions == b.regions
