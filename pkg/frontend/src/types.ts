/** Wire types mirrored from the server's JSON documents. */

export interface ScaleInfo {
  key: string;
  size: [number, number, number];
  resolution: [number, number, number];
  chunk_sizes: [number, number, number][];
  encoding: string;
  voxel_offset: [number, number, number];
}

export interface AnnotationLayerInfo {
  kind: "point" | "polyline";
  block_size: [number, number, number];
}

export interface Manifest {
  dataset: string;
  type: string;
  data_type: string;
  num_channels: number;
  channels: string[];
  scales: ScaleInfo[];
  annotation_layers: Record<string, AnnotationLayerInfo>;
}

export interface Annotation {
  id: string;
  kind: "point" | "polyline";
  class: string;
  provenance: "algorithm" | "human";
  coords: [number, number, number][];
  deleted?: boolean;
}

export interface AnnotationDoc {
  dataset: string;
  layer: string;
  revision: number;
  annotations: Annotation[];
}

export interface RetrainResult {
  model_version: number;
  trained_revision: number;
  mean_auc: number;
  fold_aucs: number[];
}

export type Vec3 = [number, number, number];
