/** Review-session state: layers, pending edits, and the save/retrain loop.
 *
 * All functions are pure (state in, state out) except the ones that talk to
 * the server through an ApiClient; rendering code consumes the same state.
 */

import type { ApiClient, SaveOutcome } from "./api.js";
import type { Annotation, AnnotationLayerInfo, Manifest, RetrainResult, Vec3 } from "./types.js";

export interface LayerDescriptor {
  name: string;
  kind: "image" | "annotation";
  visible: boolean;
  /** image layers: display tint; annotation layers: fallback point color */
  color: string;
}

export type Edit =
  | { type: "add"; layer: string; annotation: Annotation }
  | { type: "move"; layer: string; id: string; coords: Vec3[] }
  | { type: "delete"; layer: string; id: string };

export interface PaneZoom {
  xy: number;
  xz: number;
  zy: number;
  volume: number;
}

export interface ViewState {
  dataset: string;
  manifest: Manifest;
  center: Vec3;
  zoom: PaneZoom;
  layers: LayerDescriptor[];
  /** loaded HEAD annotations per layer, keyed by id */
  annotations: Record<string, Map<string, Annotation>>;
  baseRevision: Record<string, number>;
  pendingEdits: Edit[];
  cursorBlockKey: string | null;
  error: string | null;
}

export const CLASS_COLORS: Record<string, string> = {
  neuron: "#e33",
  glia: "#36c",
  centroid: "#e33",
  axon: "#3c6",
  active: "#fc0",
  inactive: "#888",
};

const IMAGE_TINTS = ["#ffffff", "#7ef77e", "#f7a97e", "#7ea9f7"];

export function classColor(cls: string): string {
  return CLASS_COLORS[cls] ?? "#ccc";
}

/** Fetch manifest plus HEAD of every registered annotation layer. */
export async function loadDataset(client: ApiClient, dataset: string): Promise<ViewState> {
  const manifest = await client.getInfo(dataset);
  const layers: LayerDescriptor[] = manifest.channels.map((name, i) => ({
    name,
    kind: "image",
    visible: true, // every layer is on by default
    color: IMAGE_TINTS[i % IMAGE_TINTS.length],
  }));
  const annotations: Record<string, Map<string, Annotation>> = {};
  const baseRevision: Record<string, number> = {};
  for (const name of Object.keys(manifest.annotation_layers).sort()) {
    layers.push({ name, kind: "annotation", visible: true, color: "#e33" });
    const doc = await client.getAnnotations(dataset, name);
    annotations[name] = new Map(doc.annotations.map((a) => [a.id, a]));
    baseRevision[name] = doc.revision;
  }
  const size = manifest.scales[0]?.size ?? [1, 1, 1];
  return {
    dataset,
    manifest,
    center: [size[0] / 2, size[1] / 2, size[2] / 2],
    zoom: { xy: 1, xz: 1, zy: 1, volume: 1 },
    layers,
    annotations,
    baseRevision,
    pendingEdits: [],
    cursorBlockKey: null,
    error: null,
  };
}

export function toggleLayer(state: ViewState, name: string): ViewState {
  const layers = state.layers.map((layer) =>
    layer.name === name ? { ...layer, visible: !layer.visible } : layer,
  );
  if (!state.layers.some((l) => l.name === name)) {
    throw new Error(`no such layer: ${name}`);
  }
  return { ...state, layers };
}

export function visibleLayers(state: ViewState): string[] {
  return state.layers.filter((l) => l.visible).map((l) => l.name);
}

export function blockKeyFor(pos: Vec3, info: AnnotationLayerInfo): string {
  const [bx, by, bz] = info.block_size;
  return `${Math.floor(pos[0] / bx)}_${Math.floor(pos[1] / by)}_${Math.floor(pos[2] / bz)}`;
}

/** Track the mouse: annotation overlays come from this block only. */
export function updateCursor(state: ViewState, pos: Vec3 | null, layer?: string): ViewState {
  if (pos === null) return { ...state, cursorBlockKey: null };
  const layerName = layer ?? Object.keys(state.manifest.annotation_layers)[0];
  const info = state.manifest.annotation_layers[layerName];
  if (!info) return { ...state, cursorBlockKey: null };
  return { ...state, cursorBlockKey: blockKeyFor(pos, info) };
}

/** Annotations of one layer with pending edits applied (optimistic view). */
export function effectiveAnnotations(state: ViewState, layer: string): Annotation[] {
  const merged = new Map(state.annotations[layer] ?? []);
  for (const edit of state.pendingEdits) {
    if (edit.layer !== layer) continue;
    if (edit.type === "add") merged.set(edit.annotation.id, edit.annotation);
    else if (edit.type === "delete") merged.delete(edit.id);
    else {
      const existing = merged.get(edit.id);
      if (existing) merged.set(edit.id, { ...existing, coords: edit.coords });
    }
  }
  return [...merged.values()].sort((a, b) => (a.id < b.id ? -1 : 1));
}

/** Overlay set for the cursor's block: at most one block at a time. */
export function cursorOverlay(state: ViewState, layer: string): Annotation[] {
  if (state.cursorBlockKey === null) return [];
  const info = state.manifest.annotation_layers[layer];
  if (!info) return [];
  return effectiveAnnotations(state, layer).filter(
    (a) => blockKeyFor(a.coords[0], info) === state.cursorBlockKey,
  );
}

let editCounter = 0;

export function nextHumanId(): string {
  editCounter += 1;
  return `h-${Date.now().toString(36)}-${editCounter}`;
}

export function addPoint(
  state: ViewState,
  layer: string,
  pos: Vec3,
  cls: string,
  id?: string,
): ViewState {
  const annotation: Annotation = {
    id: id ?? nextHumanId(),
    kind: "point",
    class: cls,
    provenance: "human",
    coords: [pos],
  };
  return {
    ...state,
    pendingEdits: [...state.pendingEdits, { type: "add", layer, annotation }],
  };
}

export function moveAnnotation(
  state: ViewState,
  layer: string,
  id: string,
  coords: Vec3[],
): ViewState {
  const known =
    state.annotations[layer]?.has(id) ||
    state.pendingEdits.some((e) => e.type === "add" && e.annotation.id === id);
  if (!known) throw new Error(`cannot move unknown annotation ${id}`);
  return { ...state, pendingEdits: [...state.pendingEdits, { type: "move", layer, id, coords }] };
}

export function deleteAnnotation(state: ViewState, layer: string, id: string): ViewState {
  return { ...state, pendingEdits: [...state.pendingEdits, { type: "delete", layer, id }] };
}

/** Collapse pending edits into the wire change set, one entry per id. */
export function buildChangeSet(state: ViewState, layer: string): Annotation[] {
  const out = new Map<string, Annotation>();
  for (const edit of state.pendingEdits) {
    if (edit.layer !== layer) continue;
    if (edit.type === "add") {
      out.set(edit.annotation.id, { ...edit.annotation });
    } else if (edit.type === "move") {
      const current =
        out.get(edit.id) ?? state.annotations[layer]?.get(edit.id);
      if (current) out.set(edit.id, { ...current, coords: edit.coords, provenance: "human" });
    } else {
      const current = out.get(edit.id) ?? state.annotations[layer]?.get(edit.id);
      if (current) out.set(edit.id, { ...current, deleted: true, provenance: "human" });
      else out.delete(edit.id);
    }
  }
  return [...out.values()].sort((a, b) => (a.id < b.id ? -1 : 1));
}

export interface SaveResult {
  state: ViewState;
  outcome: SaveOutcome | null;
  /** ids edited locally AND changed server-side; user must decide these */
  conflicts: string[];
}

/** PUT pending edits against the base revision.
 *
 * Success adopts the new revision and clears pending. A stale base refetches
 * the head: untouched annotations adopt the server version silently, while
 * ids the user edited are surfaced for per-conflict resolution. Network
 * failures leave pending edits untouched.
 */
export async function saveEdits(
  client: ApiClient,
  state: ViewState,
  layer: string,
): Promise<SaveResult> {
  const changes = buildChangeSet(state, layer);
  if (changes.length === 0) return { state, outcome: null, conflicts: [] };
  const outcome = await client.putAnnotations(
    state.dataset,
    layer,
    state.baseRevision[layer] ?? 0,
    changes,
  );
  if (outcome.status === "saved") {
    const merged = new Map(state.annotations[layer]);
    for (const ann of changes) {
      if (ann.deleted) merged.delete(ann.id);
      else merged.set(ann.id, ann);
    }
    return {
      state: {
        ...state,
        annotations: { ...state.annotations, [layer]: merged },
        baseRevision: { ...state.baseRevision, [layer]: outcome.revision },
        pendingEdits: state.pendingEdits.filter((e) => e.layer !== layer),
        error: null,
      },
      outcome,
      conflicts: [],
    };
  }
  // stale base: server wins for untouched annotations
  const doc = await client.getAnnotations(state.dataset, layer);
  const touched = new Set(changes.map((a) => a.id));
  const serverMap = new Map(doc.annotations.map((a) => [a.id, a]));
  const oldMap = state.annotations[layer] ?? new Map<string, Annotation>();
  const conflicts: string[] = [];
  for (const id of touched) {
    const before = oldMap.get(id);
    const now = serverMap.get(id);
    if (JSON.stringify(before ?? null) !== JSON.stringify(now ?? null)) {
      conflicts.push(id);
    }
  }
  return {
    state: {
      ...state,
      annotations: { ...state.annotations, [layer]: serverMap },
      baseRevision: { ...state.baseRevision, [layer]: doc.revision },
      // pending edits are retained for retry after the user resolves
      error: `save conflict: head moved to r${doc.revision}`,
    },
    outcome,
    conflicts: conflicts.sort(),
  };
}

export async function triggerRetrain(
  client: ApiClient,
  state: ViewState,
  layer = "centroids",
  seed = 0,
): Promise<RetrainResult> {
  return client.retrain(state.dataset, layer, seed);
}
