/** DOM wiring: four panes (three orthogonal cross-sections + 3D scatter),
 * layer checkboxes, annotation editing, save/retrain controls.
 *
 * Key bindings (also listed in the in-app help bar):
 *   a - add a point at the cursor     d - delete the selected annotation
 *   drag - move the selected point    s - save pending edits
 */

import { ApiClient } from "./api.js";
import {
  addPoint,
  cursorOverlay,
  deleteAnnotation,
  effectiveAnnotations,
  loadDataset,
  moveAnnotation,
  saveEdits,
  toggleLayer,
  triggerRetrain,
  updateCursor,
  ViewState,
} from "./state.js";
import { fetchSlice, pickScale, planeShape, SliceAxis } from "./slices.js";
import { drawAnnotations, drawScatter3d, drawSlice, project, sliceDepth } from "./render.js";
import type { Vec3 } from "./types.js";

const PANES: SliceAxis[] = ["xy", "xz", "zy"];
const SCALE_PX = 4;

const params = new URLSearchParams(location.search);
const serverUrl = params.get("server") ?? location.origin;
const datasetId = params.get("dataset") ?? "";

const client = new ApiClient(serverUrl);
let state: ViewState | null = null;
let selectedId: string | null = null;
let annotationLayer = "centroids";
let spinAngle = 0.6;

const banner = document.getElementById("banner") as HTMLDivElement;
const layerBox = document.getElementById("layers") as HTMLDivElement;
const status = document.getElementById("status") as HTMLDivElement;

function showError(message: string): void {
  banner.textContent = message;
  banner.style.display = "block";
}

function paneCanvas(axis: SliceAxis | "volume"): HTMLCanvasElement {
  return document.getElementById(`pane-${axis}`) as HTMLCanvasElement;
}

function setStatus(): void {
  if (!state) return;
  const pending = state.pendingEdits.length;
  const rev = state.baseRevision[annotationLayer] ?? 0;
  status.textContent =
    `${state.dataset} r${rev}` + (pending ? ` | ${pending} unsaved edit(s)` : "") +
    (state.error ? ` | ${state.error}` : "");
}

function renderLayerControls(): void {
  if (!state) return;
  layerBox.replaceChildren();
  for (const layer of state.layers) {
    const label = document.createElement("label");
    const box = document.createElement("input");
    box.type = "checkbox";
    box.checked = layer.visible;
    box.addEventListener("change", () => {
      state = toggleLayer(state!, layer.name);
      void renderAll();
    });
    label.append(box, ` ${layer.name} (${layer.kind})`);
    layerBox.append(label);
  }
}

function visibleImageChannel(): number {
  if (!state) return 0;
  const channels = state.manifest.channels;
  const firstVisible = state.layers.findIndex(
    (l) => l.kind === "image" && l.visible,
  );
  if (firstVisible < 0) return -1;
  return channels.indexOf(state.layers[firstVisible].name);
}

async function renderPane(axis: SliceAxis): Promise<void> {
  if (!state) return;
  const canvas = paneCanvas(axis);
  const ctx = canvas.getContext("2d")!;
  const scale = pickScale(state.manifest, state.zoom[axis === "zy" ? "zy" : axis]);
  const [w, h] = planeShape(scale, axis);
  canvas.width = w * SCALE_PX;
  canvas.height = h * SCALE_PX;
  const channel = visibleImageChannel();
  const index = Math.min(
    Math.max(Math.round(sliceDepth(axis, state.center)), 0),
    (axis === "xy" ? scale.size[2] : axis === "xz" ? scale.size[1] : scale.size[0]) - 1,
  );
  if (channel >= 0) {
    const plane = await fetchSlice(
      client, state.dataset, state.manifest, scale, axis, index, channel,
    );
    drawSlice(ctx, plane, SCALE_PX);
  } else {
    ctx.clearRect(0, 0, canvas.width, canvas.height);
  }
  for (const layer of state.layers) {
    if (layer.kind !== "annotation" || !layer.visible) continue;
    // interactivity rule: only the cursor block's annotations are overlaid
    drawAnnotations(ctx, axis, index, cursorOverlay(state, layer.name),
                    SCALE_PX, 3, selectedId);
  }
}

function render3d(): void {
  if (!state) return;
  const ctx = paneCanvas("volume").getContext("2d")!;
  const extents = state.manifest.scales[0].size;
  const visible = state.layers
    .filter((l) => l.kind === "annotation" && l.visible)
    .flatMap((l) => effectiveAnnotations(state!, l.name));
  drawScatter3d(ctx, visible, extents, spinAngle);
}

async function renderAll(): Promise<void> {
  await Promise.all(PANES.map((axis) => renderPane(axis)));
  render3d();
  setStatus();
}

function canvasToVoxel(axis: SliceAxis, event: MouseEvent): Vec3 {
  const canvas = paneCanvas(axis);
  const rect = canvas.getBoundingClientRect();
  const u = (event.clientX - rect.left) / SCALE_PX;
  const v = (event.clientY - rect.top) / SCALE_PX;
  const center = state!.center;
  if (axis === "xy") return [u, v, Math.round(center[2])];
  if (axis === "xz") return [u, Math.round(center[1]), v];
  return [Math.round(center[0]), v, u];
}

function nearestAnnotation(axis: SliceAxis, pos: Vec3): string | null {
  if (!state) return null;
  let best: string | null = null;
  let bestDist = 8; // voxel pick radius
  for (const ann of effectiveAnnotations(state, annotationLayer)) {
    if (ann.kind !== "point") continue;
    const [u0, v0] = project(axis, ann.coords[0]);
    const [u1, v1] = project(axis, pos);
    const d = Math.hypot(u0 - u1, v0 - v1);
    if (d < bestDist) {
      bestDist = d;
      best = ann.id;
    }
  }
  return best;
}

function wirePane(axis: SliceAxis): void {
  const canvas = paneCanvas(axis);
  let dragging = false;
  canvas.addEventListener("mousemove", (event) => {
    if (!state) return;
    const pos = canvasToVoxel(axis, event);
    state = updateCursor(state, pos, annotationLayer);
    if (dragging && selectedId) {
      state = moveAnnotation(state, annotationLayer, selectedId, [pos]);
    }
    void renderAll();
  });
  canvas.addEventListener("mousedown", (event) => {
    if (!state) return;
    const pos = canvasToVoxel(axis, event);
    selectedId = nearestAnnotation(axis, pos);
    dragging = selectedId !== null;
  });
  canvas.addEventListener("mouseup", () => {
    dragging = false;
  });
  canvas.addEventListener("wheel", (event) => {
    if (!state) return;
    event.preventDefault();
    const delta = event.deltaY > 0 ? 1 : -1;
    const center: Vec3 = [...state.center];
    if (axis === "xy") center[2] += delta;
    else if (axis === "xz") center[1] += delta;
    else center[0] += delta;
    state = { ...state, center };
    void renderAll();
  });
}

function wireKeys(): void {
  document.addEventListener("keydown", (event) => {
    if (!state) return;
    if (event.key === "a" && state.cursorBlockKey !== null) {
      const pos = state.center;
      state = addPoint(state, annotationLayer, [pos[0], pos[1], pos[2]], "neuron");
      void renderAll();
    } else if (event.key === "d" && selectedId) {
      state = deleteAnnotation(state, annotationLayer, selectedId);
      selectedId = null;
      void renderAll();
    } else if (event.key === "s") {
      void doSave();
    }
  });
}

let saveInFlight = false;

async function doSave(): Promise<void> {
  if (!state || saveInFlight) return; // at most one in-flight save
  saveInFlight = true;
  try {
    const result = await saveEdits(client, state, annotationLayer);
    state = result.state;
    if (result.conflicts.length) {
      showError(`conflicting edits on: ${result.conflicts.join(", ")} (server kept)`);
    }
  } catch (err) {
    showError(`save failed, edits retained: ${err}`);
  } finally {
    saveInFlight = false;
  }
  void renderAll();
}

async function doRetrain(): Promise<void> {
  if (!state) return;
  try {
    const report = await triggerRetrain(client, state, annotationLayer);
    const folds = report.fold_aucs.map((a) => a.toFixed(3)).join(" ");
    status.textContent =
      `model v${report.model_version}: mean AUC ${report.mean_auc.toFixed(4)} ` +
      `(folds ${folds})`;
  } catch (err) {
    showError(`retrain failed: ${err}`);
  }
}

async function boot(): Promise<void> {
  if (!datasetId) {
    const datasets = await client.listDatasets();
    showError(`no dataset selected; available: ${datasets.join(", ")} ` +
      `(use ?server=...&dataset=...)`);
    return;
  }
  try {
    state = await loadDataset(client, datasetId);
  } catch (err) {
    showError(`failed to load ${datasetId}: ${err}`);
    return;
  }
  const layers = Object.keys(state.manifest.annotation_layers);
  if (layers.length) annotationLayer = layers[0];
  renderLayerControls();
  PANES.forEach(wirePane);
  wireKeys();
  document.getElementById("save")!.addEventListener("click", () => void doSave());
  document.getElementById("retrain")!.addEventListener("click", () => void doRetrain());
  setInterval(() => {
    spinAngle += 0.02;
    render3d();
  }, 100);
  await renderAll();
}

void boot();
