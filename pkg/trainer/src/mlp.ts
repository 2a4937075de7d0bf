import { Rng } from "./rng.js";

/** Row-major dense layers with tanh hidden activations (the portable format). */
export interface Layer {
  rows: number;
  cols: number;
  w: Float64Array;
  b: Float64Array;
}

export interface Norm {
  offset: number[];
  scale: number[];
}

export interface Mlp {
  layers: Layer[];
  inputNorm: Norm;
  outputNorm: Norm;
}

export function createMlp(sizes: number[], rng: Rng, inputNorm: Norm, outputNorm: Norm): Mlp {
  const layers: Layer[] = [];
  for (let i = 1; i < sizes.length; i++) {
    const rows = sizes[i];
    const cols = sizes[i - 1];
    const w = new Float64Array(rows * cols);
    const scale = Math.sqrt(2.0 / (rows + cols));
    for (let k = 0; k < w.length; k++) {
      w[k] = rng.normal() * scale;
    }
    layers.push({ rows, cols, w, b: new Float64Array(rows) });
  }
  return { layers, inputNorm, outputNorm };
}

function normalize(x: number[], norm: Norm): Float64Array {
  const out = new Float64Array(x.length);
  for (let i = 0; i < x.length; i++) {
    out[i] = (x[i] - norm.offset[i]) / norm.scale[i];
  }
  return out;
}

/** Forward pass returning denormalized outputs plus per-layer activations. */
export function forwardDetailed(mlp: Mlp, input: number[]): {
  output: number[];
  activations: Float64Array[];
} {
  let x = normalize(input, mlp.inputNorm);
  const activations: Float64Array[] = [x];
  const last = mlp.layers.length - 1;
  mlp.layers.forEach((layer, idx) => {
    const y = new Float64Array(layer.rows);
    for (let r = 0; r < layer.rows; r++) {
      let acc = layer.b[r];
      const base = r * layer.cols;
      for (let c = 0; c < layer.cols; c++) {
        acc += layer.w[base + c] * x[c];
      }
      y[r] = idx < last ? Math.tanh(acc) : acc;
    }
    activations.push(y);
    x = y;
  });
  const out = new Array<number>(x.length);
  for (let i = 0; i < x.length; i++) {
    out[i] = x[i] * mlp.outputNorm.scale[i] + mlp.outputNorm.offset[i];
  }
  return { output: out, activations };
}

export function forward(mlp: Mlp, input: number[]): number[] {
  return forwardDetailed(mlp, input).output;
}

export interface AdamState {
  mW: Float64Array[];
  vW: Float64Array[];
  mB: Float64Array[];
  vB: Float64Array[];
  step: number;
}

export function adamInit(mlp: Mlp): AdamState {
  return {
    mW: mlp.layers.map((l) => new Float64Array(l.w.length)),
    vW: mlp.layers.map((l) => new Float64Array(l.w.length)),
    mB: mlp.layers.map((l) => new Float64Array(l.b.length)),
    vB: mlp.layers.map((l) => new Float64Array(l.b.length)),
    step: 0,
  };
}

/**
 * One mini-batch L1-loss gradient step. The loss weights the final offset
 * pair by `finalWeight` (goal teacher forcing is realized on the loss side).
 * Returns the weighted mean absolute error over the batch.
 */
export function trainBatch(
  mlp: Mlp,
  state: AdamState,
  batch: { features: number[]; target: number[] }[],
  lr: number,
  finalWeight: number,
): number {
  let batchLoss = 0;
  const accW: Float64Array[] = mlp.layers.map((l) => new Float64Array(l.w.length));
  const accB: Float64Array[] = mlp.layers.map((l) => new Float64Array(l.b.length));
  for (const example of batch) {
    batchLoss += accumulateGradients(mlp, example.features, example.target,
                                     finalWeight, accW, accB);
  }
  const inv = 1.0 / batch.length;
  applyAdam(mlp, state, accW, accB, lr, inv);
  return batchLoss / batch.length;
}

function accumulateGradients(
  mlp: Mlp,
  input: number[],
  target: number[],
  finalWeight: number,
  accW: Float64Array[],
  accB: Float64Array[],
): number {
  const { output, activations } = forwardDetailed(mlp, input);
  const n = output.length;
  let loss = 0;
  let weightSum = 0;
  for (let i = 0; i < n; i++) {
    const weight = i >= n - 2 ? finalWeight : 1.0;
    loss += weight * Math.abs(output[i] - target[i]);
    weightSum += weight;
  }
  // gradient of the weighted L1 wrt the pre-normalization network output
  const gradOut = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    const weight = i >= n - 2 ? finalWeight : 1.0;
    const diff = output[i] - target[i];
    gradOut[i] = (weight * Math.sign(diff) * mlp.outputNorm.scale[i]) / weightSum;
  }

  // backpropagate, accumulating into the batch buffers
  let grad = gradOut;
  for (let idx = mlp.layers.length - 1; idx >= 0; idx--) {
    const layer = mlp.layers[idx];
    const inAct = activations[idx];
    const outAct = activations[idx + 1];
    const local = new Float64Array(layer.rows);
    const isHidden = idx < mlp.layers.length - 1;
    for (let r = 0; r < layer.rows; r++) {
      local[r] = isHidden ? grad[r] * (1 - outAct[r] * outAct[r]) : grad[r];
    }
    const gPrev = new Float64Array(layer.cols);
    for (let r = 0; r < layer.rows; r++) {
      const base = r * layer.cols;
      accB[idx][r] += local[r];
      for (let c = 0; c < layer.cols; c++) {
        accW[idx][base + c] += local[r] * inAct[c];
        gPrev[c] += layer.w[base + c] * local[r];
      }
    }
    grad = gPrev;
  }
  return loss / weightSum;
}

function applyAdam(
  mlp: Mlp,
  state: AdamState,
  accW: Float64Array[],
  accB: Float64Array[],
  lr: number,
  inv: number,
): void {
  state.step += 1;
  const b1 = 0.9;
  const b2 = 0.999;
  const eps = 1e-8;
  const corr1 = 1 - Math.pow(b1, state.step);
  const corr2 = 1 - Math.pow(b2, state.step);
  mlp.layers.forEach((layer, idx) => {
    for (let k = 0; k < layer.w.length; k++) {
      const g = accW[idx][k] * inv;
      state.mW[idx][k] = b1 * state.mW[idx][k] + (1 - b1) * g;
      state.vW[idx][k] = b2 * state.vW[idx][k] + (1 - b2) * g * g;
      layer.w[k] -= (lr * (state.mW[idx][k] / corr1)) / (Math.sqrt(state.vW[idx][k] / corr2) + eps);
    }
    for (let k = 0; k < layer.b.length; k++) {
      const g = accB[idx][k] * inv;
      state.mB[idx][k] = b1 * state.mB[idx][k] + (1 - b1) * g;
      state.vB[idx][k] = b2 * state.vB[idx][k] + (1 - b2) * g * g;
      layer.b[k] -= (lr * (state.mB[idx][k] / corr1)) / (Math.sqrt(state.vB[idx][k] / corr2) + eps);
    }
  });
}
