"""Compiled priority-flood kernel for the seeded watershed.

Same algorithm and tie-breaking as the pure-Python fallback in
segmentation.py: a binary min-heap ordered by (relief value, insertion
sequence number), grown into unassigned 26-neighbors inside the mask.
The heap lives in parallel flat arrays so the whole flood runs in
machine code.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _sift_up(vals, seqs, idxs, labs, pos):
    while pos > 0:
        parent = (pos - 1) >> 1
        if (vals[pos] < vals[parent]) or (
            vals[pos] == vals[parent] and seqs[pos] < seqs[parent]
        ):
            vals[pos], vals[parent] = vals[parent], vals[pos]
            seqs[pos], seqs[parent] = seqs[parent], seqs[pos]
            idxs[pos], idxs[parent] = idxs[parent], idxs[pos]
            labs[pos], labs[parent] = labs[parent], labs[pos]
            pos = parent
        else:
            break


@njit(cache=True)
def _sift_down(vals, seqs, idxs, labs, size):
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= size:
            break
        right = left + 1
        best = left
        if right < size and (
            vals[right] < vals[left]
            or (vals[right] == vals[left] and seqs[right] < seqs[left])
        ):
            best = right
        if (vals[best] < vals[pos]) or (
            vals[best] == vals[pos] and seqs[best] < seqs[pos]
        ):
            vals[pos], vals[best] = vals[best], vals[pos]
            seqs[pos], seqs[best] = seqs[best], seqs[pos]
            idxs[pos], idxs[best] = idxs[best], idxs[pos]
            labs[pos], labs[best] = labs[best], labs[pos]
            pos = best
        else:
            break


@njit(cache=True)
def flood_compiled(relief, mask, labels, seeds):
    nx, ny, nz = relief.shape
    relief_flat = relief.ravel()
    mask_flat = mask.ravel()
    labels_flat = labels.ravel()

    # a voxel is pushed at most once per labeled neighbor; 4x the mask
    # population covers typical floods without regrowing
    capacity = 4 * np.int64(mask_flat.sum()) + 64
    vals = np.empty(capacity, dtype=np.float64)
    seqs = np.empty(capacity, dtype=np.int64)
    idxs = np.empty(capacity, dtype=np.int64)
    labs = np.empty(capacity, dtype=np.uint32)
    size = 0
    seq = 0

    for i in range(seeds.shape[0]):
        x, y, z = seeds[i, 0], seeds[i, 1], seeds[i, 2]
        flat = (x * ny + y) * nz + z
        if mask_flat[flat]:
            vals[size] = relief_flat[flat]
            seqs[size] = seq
            idxs[size] = flat
            labs[size] = np.uint32(i + 1)
            _sift_up(vals, seqs, idxs, labs, size)
            size += 1
            seq += 1

    while size > 0:
        flat = idxs[0]
        lab = labs[0]
        size -= 1
        vals[0] = vals[size]
        seqs[0] = seqs[size]
        idxs[0] = idxs[size]
        labs[0] = labs[size]
        _sift_down(vals, seqs, idxs, labs, size)
        if labels_flat[flat] != 0:
            continue
        labels_flat[flat] = lab
        z = flat % nz
        y = (flat // nz) % ny
        x = flat // (ny * nz)
        for dx in range(-1, 2):
            u = x + dx
            if u < 0 or u >= nx:
                continue
            for dy in range(-1, 2):
                v = y + dy
                if v < 0 or v >= ny:
                    continue
                for dz in range(-1, 2):
                    if dx == 0 and dy == 0 and dz == 0:
                        continue
                    w = z + dz
                    if w < 0 or w >= nz:
                        continue
                    nflat = (u * ny + v) * nz + w
                    if mask_flat[nflat] and labels_flat[nflat] == 0:
                        if size == vals.shape[0]:
                            new_cap = vals.shape[0] * 2
                            nv = np.empty(new_cap, dtype=np.float64)
                            ns = np.empty(new_cap, dtype=np.int64)
                            ni = np.empty(new_cap, dtype=np.int64)
                            nl = np.empty(new_cap, dtype=np.uint32)
                            nv[:size] = vals[:size]
                            ns[:size] = seqs[:size]
                            ni[:size] = idxs[:size]
                            nl[:size] = labs[:size]
                            vals, seqs, idxs, labs = nv, ns, ni, nl
                        vals[size] = relief_flat[nflat]
                        seqs[size] = seq
                        idxs[size] = nflat
                        labs[size] = lab
                        _sift_up(vals, seqs, idxs, labs, size)
                        size += 1
                        seq += 1
