/** Chunk-level slice assembly: fetch only the chunks a cross-section needs. */

import type { ApiClient } from "./api.js";
import type { Manifest, ScaleInfo } from "./types.js";

export type SliceAxis = "xy" | "xz" | "zy";

/** Pick the scale whose downsampling best matches the current zoom
 * (screen pixels per full-resolution voxel). */
export function pickScale(manifest: Manifest, zoom: number): ScaleInfo {
  let best = manifest.scales[0];
  let bestCost = Infinity;
  for (const scale of manifest.scales) {
    const factor = scale.size.length ? manifest.scales[0].size[0] / scale.size[0] : 1;
    const cost = Math.abs(Math.log2(Math.max(zoom, 1e-6) * factor));
    if (cost < bestCost) {
      bestCost = cost;
      best = scale;
    }
  }
  return best;
}

export function chunkGrid(scale: ScaleInfo): [number, number, number] {
  const [cx, cy, cz] = scale.chunk_sizes[0];
  return [
    Math.ceil(scale.size[0] / cx),
    Math.ceil(scale.size[1] / cy),
    Math.ceil(scale.size[2] / cz),
  ];
}

export function chunkBounds(
  scale: ScaleInfo,
  coords: [number, number, number],
): [number, number][] {
  const chunk = scale.chunk_sizes[0];
  return [0, 1, 2].map((axis) => {
    const lo = coords[axis] * chunk[axis];
    return [lo, Math.min(lo + chunk[axis], scale.size[axis])] as [number, number];
  });
}

export function chunkName(bounds: [number, number][]): string {
  return bounds.map(([lo, hi]) => `${lo}-${hi}`).join("_");
}

export interface SlicePlane {
  width: number;
  height: number;
  data: Uint16Array; // row-major, width fastest
}

const AXIS_OF: Record<SliceAxis, number> = { xy: 2, xz: 1, zy: 0 };

/** Which chunk coordinates intersect a cross-section at `index` along the
 * slicing axis. */
export function chunksForSlice(
  scale: ScaleInfo,
  axis: SliceAxis,
  index: number,
): [number, number, number][] {
  const fixed = AXIS_OF[axis];
  const chunk = scale.chunk_sizes[0];
  const grid = chunkGrid(scale);
  const fixedChunk = Math.floor(index / chunk[fixed]);
  if (fixedChunk < 0 || fixedChunk >= grid[fixed]) return [];
  const out: [number, number, number][] = [];
  const axes = [0, 1, 2].filter((a) => a !== fixed);
  for (let i = 0; i < grid[axes[0]]; i++) {
    for (let j = 0; j < grid[axes[1]]; j++) {
      const coords: [number, number, number] = [0, 0, 0];
      coords[fixed] = fixedChunk;
      coords[axes[0]] = i;
      coords[axes[1]] = j;
      out.push(coords);
    }
  }
  return out;
}

/** Copy one decoded chunk's cross-section into the assembled plane.
 * Chunk data layout: x fastest, then y, then z, then channel. */
export function blitChunkSlice(
  plane: SlicePlane,
  axis: SliceAxis,
  index: number,
  bounds: [number, number][],
  chunkData: Uint16Array,
  channel: number,
): void {
  const [nx, ny, nz] = bounds.map(([lo, hi]) => hi - lo);
  const chanOffset = channel * nx * ny * nz;
  const [x0, y0, z0] = bounds.map(([lo]) => lo);
  const flat = (x: number, y: number, z: number) =>
    chanOffset + x + nx * (y + ny * z);
  if (axis === "xy") {
    const z = index - z0;
    for (let y = 0; y < ny; y++) {
      for (let x = 0; x < nx; x++) {
        plane.data[(y0 + y) * plane.width + (x0 + x)] = chunkData[flat(x, y, z)];
      }
    }
  } else if (axis === "xz") {
    const y = index - y0;
    for (let z = 0; z < nz; z++) {
      for (let x = 0; x < nx; x++) {
        plane.data[(z0 + z) * plane.width + (x0 + x)] = chunkData[flat(x, y, z)];
      }
    }
  } else {
    const x = index - x0;
    for (let y = 0; y < ny; y++) {
      for (let z = 0; z < nz; z++) {
        plane.data[(y0 + y) * plane.width + (z0 + z)] = chunkData[flat(x, y, z)];
      }
    }
  }
}

/** Plane dimensions for a slicing axis: width x height in voxels. */
export function planeShape(scale: ScaleInfo, axis: SliceAxis): [number, number] {
  const [nx, ny, nz] = scale.size;
  if (axis === "xy") return [nx, ny];
  if (axis === "xz") return [nx, nz];
  return [nz, ny];
}

export async function fetchSlice(
  client: ApiClient,
  dataset: string,
  manifest: Manifest,
  scale: ScaleInfo,
  axis: SliceAxis,
  index: number,
  channel: number,
): Promise<SlicePlane> {
  const [width, height] = planeShape(scale, axis);
  const plane: SlicePlane = { width, height, data: new Uint16Array(width * height) };
  const wanted = chunksForSlice(scale, axis, index);
  await Promise.all(
    wanted.map(async (coords) => {
      const bounds = chunkBounds(scale, coords);
      const data = await client.getChunk(dataset, scale.key, chunkName(bounds));
      blitChunkSlice(plane, axis, index, bounds, data, channel);
    }),
  );
  return plane;
}
