/** Thin fetch client for the serving layer's HTTP API. */

import type { Annotation, AnnotationDoc, Manifest, RetrainResult } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
    public body: unknown = null,
  ) {
    super(message);
  }
}

export interface SaveOutcome {
  status: "saved" | "conflict";
  revision: number; // new revision on save, current head on conflict
}

async function raiseFor(response: Response): Promise<never> {
  let body: unknown = null;
  try {
    body = await response.json();
  } catch {
    /* non-JSON error body */
  }
  throw new ApiError(response.status, `HTTP ${response.status}`, body);
}

export class ApiClient {
  constructor(public baseUrl: string) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  async listDatasets(): Promise<string[]> {
    const r = await fetch(`${this.baseUrl}/datasets`);
    if (!r.ok) await raiseFor(r);
    return r.json();
  }

  async getInfo(dataset: string): Promise<Manifest> {
    const r = await fetch(`${this.baseUrl}/d/${dataset}/info`);
    if (!r.ok) await raiseFor(r);
    return r.json();
  }

  /** Raw chunk bytes: little-endian uint16, x fastest, channel slowest. */
  async getChunk(dataset: string, scaleKey: string, name: string): Promise<Uint16Array> {
    const r = await fetch(`${this.baseUrl}/d/${dataset}/scales/${scaleKey}/${name}`);
    if (!r.ok) await raiseFor(r);
    return new Uint16Array(await r.arrayBuffer());
  }

  async getAnnotations(
    dataset: string,
    layer: string,
    opts: { blocks?: string[]; rev?: number } = {},
  ): Promise<AnnotationDoc> {
    const params = new URLSearchParams();
    if (opts.blocks?.length) params.set("blocks", opts.blocks.join(","));
    if (opts.rev !== undefined) params.set("rev", String(opts.rev));
    const query = params.toString();
    const r = await fetch(
      `${this.baseUrl}/d/${dataset}/ann/${layer}${query ? "?" + query : ""}`,
    );
    if (!r.ok) await raiseFor(r);
    return r.json();
  }

  async putAnnotations(
    dataset: string,
    layer: string,
    base: number,
    annotations: Annotation[],
    author = "reviewer",
  ): Promise<SaveOutcome> {
    const r = await fetch(`${this.baseUrl}/d/${dataset}/ann/${layer}?base=${base}`, {
      method: "PUT",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ annotations, author }),
    });
    if (r.status === 409) {
      const body = (await r.json()) as { head: number };
      return { status: "conflict", revision: body.head };
    }
    if (!r.ok) await raiseFor(r);
    const body = (await r.json()) as { revision: number };
    return { status: "saved", revision: body.revision };
  }

  async exportLayer(dataset: string, layer: string, format: "json" | "csv"): Promise<string> {
    const r = await fetch(
      `${this.baseUrl}/d/${dataset}/ann/${layer}/export?format=${format}`,
    );
    if (!r.ok) await raiseFor(r);
    return r.text();
  }

  async retrain(dataset: string, layer = "centroids", seed = 0): Promise<RetrainResult> {
    const r = await fetch(`${this.baseUrl}/d/${dataset}/retrain`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ layer, seed }),
    });
    if (!r.ok) await raiseFor(r);
    return r.json();
  }
}
