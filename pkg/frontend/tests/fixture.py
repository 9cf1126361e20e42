"""Build a small served dataset for the review-UI integration test.

Usage: python3 fixture.py <store_root>

Generates a 2x2 two-channel phantom, segments it, assigns classes from the
ground truth, stitches both channels, and ingests imagery + region features
+ classed centroid annotations into a fresh store.
"""

import sys
from pathlib import Path

import numpy as np

from neurovol.classify import CLASS_GLIA, CLASS_NEURON
from neurovol.grid import make_grid_layout
from neurovol.phantom import (ACTIVITY_CHANNEL, NUCLEUS_CHANNEL, PhantomSpec,
                              generate_phantom)
from neurovol.segmentation import SegParams, segment_block
from neurovol.stitching import place_blocks, stitch_grid, translate_annotations
from neurovol.store import Annotation, PrecomputedStore

DATASET = "phantom2x2"


def main(store_root: str) -> None:
    spec = PhantomSpec(grid=make_grid_layout(2, 2), block_extents=(48, 48, 48),
                       true_overlap_x=4, true_overlap_y=4, nuclei_per_block=8,
                       radius_range=(2.5, 3.5), neuron_fraction=0.5,
                       noise_sigma=60.0)
    blocks, truth = generate_phantom(spec, seed=2024)
    params = SegParams(sigma1_um=2.5, sigma2_um=4.0, seed_threshold=400.0,
                       min_region_voxels=20)

    stitched, plan = stitch_grid(blocks[NUCLEUS_CHANNEL], spec.grid)
    cfos = place_blocks(blocks[ACTIVITY_CHANNEL], spec.grid, plan)

    store = PrecomputedStore(store_root)
    store.ingest_volume(stitched, DATASET, chunk_size=(64, 64, 64), num_scales=2)
    store.ingest_volume(cfos, DATASET, num_scales=2)

    centers = np.array([n.center for n in truth.nuclei])
    classes = [n.class_label for n in truth.nuclei]
    annotations = []
    for pos in truth.block_origins:
        _, regions = segment_block(blocks[NUCLEUS_CHANNEL][pos], params)
        translated = translate_annotations(regions, pos, plan)
        for rec in translated:
            nearest = int(np.argmin(
                np.linalg.norm(centers - np.array(rec.centroid), axis=1)))
            rec.class_label = CLASS_NEURON if classes[nearest] == CLASS_NEURON \
                else CLASS_GLIA
        block_id = f"r{pos[0]}_c{pos[1]}"
        store.write_region_features(DATASET, block_id, translated)
        for rec in translated:
            annotations.append(Annotation(
                id=f"{block_id}/{rec.label}", kind="point",
                coords=(rec.centroid,), class_label=rec.class_label,
                provenance="algorithm",
            ))
    store.write_annotations(DATASET, "centroids", annotations, base_revision=0,
                            author="fixture")
    print(f"fixture ready: {DATASET} with {len(annotations)} centroids")


if __name__ == "__main__":
    main(sys.argv[1])
