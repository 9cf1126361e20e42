/** Canvas drawing: grayscale slices, annotation overlays, 3D scatter pane. */

import type { SlicePlane, SliceAxis } from "./slices.js";
import type { Annotation, Vec3 } from "./types.js";
import { classColor } from "./state.js";

/** Map a voxel position onto a pane's 2D plane coordinates. */
export function project(axis: SliceAxis, pos: Vec3): [number, number] {
  if (axis === "xy") return [pos[0], pos[1]];
  if (axis === "xz") return [pos[0], pos[2]];
  return [pos[2], pos[1]];
}

export function sliceDepth(axis: SliceAxis, pos: Vec3): number {
  if (axis === "xy") return pos[2];
  if (axis === "xz") return pos[1];
  return pos[0];
}

export function drawSlice(
  ctx: CanvasRenderingContext2D,
  plane: SlicePlane,
  scalePx: number,
  windowMax = 0,
): void {
  const max = windowMax || Math.max(1, ...plane.data);
  const image = new ImageData(plane.width, plane.height);
  for (let i = 0; i < plane.data.length; i++) {
    const v = Math.min(255, Math.round((plane.data[i] / max) * 255));
    image.data[4 * i] = v;
    image.data[4 * i + 1] = v;
    image.data[4 * i + 2] = v;
    image.data[4 * i + 3] = 255;
  }
  const off = new OffscreenCanvas(plane.width, plane.height);
  const offCtx = off.getContext("2d")!;
  offCtx.putImageData(image, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  ctx.drawImage(off, 0, 0, plane.width * scalePx, plane.height * scalePx);
}

export function drawAnnotations(
  ctx: CanvasRenderingContext2D,
  axis: SliceAxis,
  sliceIndex: number,
  annotations: Annotation[],
  scalePx: number,
  depthTolerance = 3,
  selectedId: string | null = null,
): void {
  for (const ann of annotations) {
    ctx.strokeStyle = ctx.fillStyle = classColor(ann.class);
    if (ann.kind === "point") {
      const pos = ann.coords[0];
      if (Math.abs(sliceDepth(axis, pos) - sliceIndex) > depthTolerance) continue;
      const [u, v] = project(axis, pos);
      ctx.beginPath();
      ctx.arc(u * scalePx, v * scalePx, ann.id === selectedId ? 6 : 4, 0, 2 * Math.PI);
      ctx.fill();
      if (ann.id === selectedId) {
        ctx.strokeStyle = "#fff";
        ctx.stroke();
      }
    } else {
      ctx.beginPath();
      ann.coords.forEach((pos, i) => {
        const [u, v] = project(axis, pos);
        if (i === 0) ctx.moveTo(u * scalePx, v * scalePx);
        else ctx.lineTo(u * scalePx, v * scalePx);
      });
      ctx.lineWidth = 2;
      ctx.stroke();
    }
  }
}

/** Simple orthographic scatter of annotation geometry for the 3D pane. */
export function drawScatter3d(
  ctx: CanvasRenderingContext2D,
  annotations: Annotation[],
  extents: Vec3,
  angle: number,
): void {
  const { width, height } = ctx.canvas;
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#111";
  ctx.fillRect(0, 0, width, height);
  const cos = Math.cos(angle);
  const sin = Math.sin(angle);
  const cx = extents[0] / 2;
  const cy = extents[1] / 2;
  const scale = (0.8 * Math.min(width, height)) / Math.max(...extents);
  const place = (pos: Vec3): [number, number] => {
    const x = (pos[0] - cx) * cos - (pos[1] - cy) * sin;
    const depthY = (pos[0] - cx) * sin + (pos[1] - cy) * cos;
    const y = 0.6 * depthY - (pos[2] - extents[2] / 2);
    return [width / 2 + x * scale, height / 2 + y * scale];
  };
  for (const ann of annotations) {
    ctx.strokeStyle = ctx.fillStyle = classColor(ann.class);
    if (ann.kind === "point") {
      const [u, v] = place(ann.coords[0]);
      ctx.fillRect(u - 1.5, v - 1.5, 3, 3);
    } else {
      ctx.beginPath();
      ann.coords.forEach((pos, i) => {
        const [u, v] = place(pos);
        if (i === 0) ctx.moveTo(u, v);
        else ctx.lineTo(u, v);
      });
      ctx.stroke();
    }
  }
}
