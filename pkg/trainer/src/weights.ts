import * as fs from "node:fs";

import { FEATURE_VERSION } from "./features.js";
import { Layer, Mlp } from "./mlp.js";

export function exportWeights(mlp: Mlp): string {
  const doc = {
    layers: mlp.layers.map((l) => ({
      rows: l.rows,
      cols: l.cols,
      w: Array.from(l.w),
      b: Array.from(l.b),
    })),
    activation: "tanh",
    input_norm: { offset: mlp.inputNorm.offset, scale: mlp.inputNorm.scale },
    output_norm: { offset: mlp.outputNorm.offset, scale: mlp.outputNorm.scale },
    feature_version: FEATURE_VERSION,
  };
  return JSON.stringify(doc);
}

export function importWeights(raw: string): Mlp {
  const doc = JSON.parse(raw);
  if (doc.feature_version !== FEATURE_VERSION) {
    throw new Error(`unknown feature_version ${doc.feature_version}`);
  }
  if (doc.activation !== "tanh") {
    throw new Error(`unsupported activation ${doc.activation}`);
  }
  const layers: Layer[] = doc.layers.map((l: any) => ({
    rows: l.rows,
    cols: l.cols,
    w: Float64Array.from(l.w),
    b: Float64Array.from(l.b),
  }));
  return {
    layers,
    inputNorm: doc.input_norm,
    outputNorm: doc.output_norm,
  };
}

export function saveWeights(mlp: Mlp, file: string): void {
  fs.writeFileSync(file, exportWeights(mlp));
}

export function loadWeights(file: string): Mlp {
  return importWeights(fs.readFileSync(file, "utf-8"));
}
