/** End-to-end review loop against a real server process.
 *
 * Builds a fixture store with the pipeline package, serves it, then drives
 * the UI state machine headlessly: load, toggle every layer off/on, move one
 * centroid, delete one, add one, save (head +1, fresh load shows exactly the
 * three edits), and retrain (CV report + model version bump).
 */

import { execFileSync, spawn, ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, dirname } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import {
  addPoint,
  deleteAnnotation,
  effectiveAnnotations,
  loadDataset,
  moveAnnotation,
  saveEdits,
  toggleLayer,
  triggerRetrain,
  visibleLayers,
} from "../src/state.js";

const HERE = dirname(fileURLToPath(import.meta.url));
const PORT = 8941;
const BASE = `http://127.0.0.1:${PORT}`;
const DATASET = "phantom2x2";

let serverProc: ChildProcess | null = null;
let storeRoot = "";

async function waitForServer(timeoutMs = 30000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      const r = await fetch(`${BASE}/datasets`);
      if (r.ok) return;
    } catch {
      /* not up yet */
    }
    await new Promise((resolve) => setTimeout(resolve, 200));
  }
  throw new Error("server did not come up");
}

beforeAll(async () => {
  storeRoot = mkdtempSync(join(tmpdir(), "nv-ui-"));
  execFileSync("python3", [join(HERE, "fixture.py"), storeRoot], {
    stdio: "inherit",
    timeout: 240_000,
  });
  serverProc = spawn(
    "python3",
    ["-m", "neurovol.cli", "serve", "--root", storeRoot, "--port", String(PORT)],
    { stdio: "ignore" },
  );
  await waitForServer();
}, 300_000);

afterAll(() => {
  serverProc?.kill("SIGINT");
  if (storeRoot) rmSync(storeRoot, { recursive: true, force: true });
});

describe("review loop end-to-end", () => {
  it("loads, toggles, edits, saves, reloads, retrains", async () => {
    const client = new ApiClient(BASE);
    expect(await client.listDatasets()).toContain(DATASET);

    let state = await loadDataset(client, DATASET);
    expect(visibleLayers(state)).toEqual(["dapi", "cfos", "centroids"]);
    const initialCount = state.annotations["centroids"].size;
    expect(initialCount).toBeGreaterThanOrEqual(16);
    const baseRevision = state.baseRevision["centroids"];

    // toggle each layer off and back on; the rendered set must round-trip
    for (const layer of [...state.layers]) {
      const off = toggleLayer(state, layer.name);
      expect(visibleLayers(off)).not.toContain(layer.name);
      state = toggleLayer(off, layer.name);
    }
    expect(visibleLayers(state)).toEqual(["dapi", "cfos", "centroids"]);

    // one move, one delete, one add
    const ids = [...state.annotations["centroids"].keys()].sort();
    const movedId = ids[0];
    const deletedId = ids[1];
    const moved = state.annotations["centroids"].get(movedId)!;
    const newCoords: [number, number, number] = [
      moved.coords[0][0] + 2.0,
      moved.coords[0][1],
      moved.coords[0][2],
    ];
    state = moveAnnotation(state, "centroids", movedId, [newCoords]);
    state = deleteAnnotation(state, "centroids", deletedId);
    state = addPoint(state, "centroids", [30, 30, 24], "glia", "h-added-1");

    const optimistic = effectiveAnnotations(state, "centroids");
    expect(optimistic.length).toBe(initialCount); // -1 +1

    const result = await saveEdits(client, state, "centroids");
    expect(result.outcome?.status).toBe("saved");
    expect(result.state.pendingEdits).toEqual([]);
    expect(result.state.baseRevision["centroids"]).toBe(baseRevision + 1);

    // a fresh load reflects exactly the three edits
    const fresh = await loadDataset(client, DATASET);
    expect(fresh.baseRevision["centroids"]).toBe(baseRevision + 1);
    const freshMap = fresh.annotations["centroids"];
    expect(freshMap.size).toBe(initialCount);
    expect(freshMap.has(deletedId)).toBe(false);
    expect(freshMap.get(movedId)?.coords[0]).toEqual(newCoords);
    expect(freshMap.get(movedId)?.provenance).toBe("human");
    const added = freshMap.get("h-added-1")!;
    expect(added.class).toBe("glia");
    expect(added.coords[0]).toEqual([30, 30, 24]);
    // everything else untouched
    for (const id of ids.slice(2)) {
      expect(freshMap.get(id)).toEqual(state.annotations["centroids"].get(id));
    }

    // retraining returns a CV report and bumps the model version
    const report1 = await triggerRetrain(client, fresh, "centroids", 7);
    expect(report1.fold_aucs.length).toBe(5);
    expect(report1.mean_auc).toBeGreaterThan(0.5);
    expect(report1.model_version).toBe(1);
    expect(report1.trained_revision).toBe(baseRevision + 1);
    const report2 = await triggerRetrain(client, fresh, "centroids", 7);
    expect(report2.model_version).toBe(2);
  }, 120_000);

  it("serves chunk bytes consistent with the manifest", async () => {
    const client = new ApiClient(BASE);
    const manifest = await client.getInfo(DATASET);
    const scale = manifest.scales[0];
    expect(manifest.channels).toEqual(["dapi", "cfos"]);
    const [cx, cy, cz] = scale.chunk_sizes[0];
    const nx = Math.min(cx, scale.size[0]);
    const ny = Math.min(cy, scale.size[1]);
    const nz = Math.min(cz, scale.size[2]);
    const chunk = await client.getChunk(
      DATASET, scale.key, `0-${nx}_0-${ny}_0-${nz}`,
    );
    expect(chunk.length).toBe(nx * ny * nz * manifest.num_channels);
  });
});
