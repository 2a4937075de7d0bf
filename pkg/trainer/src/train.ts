import { Example } from "./dataset.js";
import { FEATURE_SIZE } from "./features.js";
import { AdamState, Mlp, Norm, adamInit, createMlp, forward, trainBatch } from "./mlp.js";
import { Rng } from "./rng.js";

export interface TrainOptions {
  epochs: number;
  lr: number;
  seed: number;
  hidden: number[];
  finalWeight: number;
  holdoutFraction: number;
  batchSize: number;
}

export const DEFAULT_OPTIONS: TrainOptions = {
  epochs: 150,
  lr: 3e-3,
  seed: 0,
  hidden: [64, 64],
  finalWeight: 10.0,
  holdoutFraction: 0.1,
  batchSize: 32,
};

export interface TrainResult {
  mlp: Mlp;
  trainSet: Example[];
  holdout: Example[];
  epochLosses: number[];
}

function datasetNorms(examples: Example[]): { input: Norm; output: Norm } {
  const fDim = examples[0].features.length;
  const tDim = examples[0].target.length;
  const norm = (dim: number, pick: (e: Example) => number[]): Norm => {
    const offset = new Array(dim).fill(0);
    const scale = new Array(dim).fill(0);
    for (const e of examples) {
      const row = pick(e);
      for (let i = 0; i < dim; i++) offset[i] += row[i];
    }
    for (let i = 0; i < dim; i++) offset[i] /= examples.length;
    for (const e of examples) {
      const row = pick(e);
      for (let i = 0; i < dim; i++) scale[i] += (row[i] - offset[i]) ** 2;
    }
    for (let i = 0; i < dim; i++) {
      scale[i] = Math.max(Math.sqrt(scale[i] / examples.length), 1e-3);
    }
    return { offset, scale };
  };
  return { input: norm(fDim, (e) => e.features), output: norm(tDim, (e) => e.target) };
}

export function splitDataset(examples: Example[], seed: number, holdoutFraction: number) {
  const shuffled = new Rng(seed ^ 0x5f3759df).shuffle(examples);
  const nHold = Math.max(1, Math.floor(shuffled.length * holdoutFraction));
  return { trainSet: shuffled.slice(nHold), holdout: shuffled.slice(0, nHold) };
}

export function train(examples: Example[], options: TrainOptions = DEFAULT_OPTIONS): TrainResult {
  if (examples.length < 100) {
    throw new Error(`need at least 100 examples, got ${examples.length}`);
  }
  const { trainSet, holdout } = splitDataset(examples, options.seed, options.holdoutFraction);
  const norms = datasetNorms(trainSet);
  const outDim = trainSet[0].target.length;
  const sizes = [FEATURE_SIZE, ...options.hidden, outDim];
  const rng = new Rng(options.seed);
  const mlp = createMlp(sizes, rng, norms.input, norms.output);
  const adam: AdamState = adamInit(mlp);

  const epochLosses: number[] = [];
  for (let epoch = 0; epoch < options.epochs; epoch++) {
    const order = rng.shuffle(trainSet);
    // step decay keeps late epochs from oscillating around the L1 kinks
    const decay = Math.pow(0.5, Math.floor((3 * epoch) / options.epochs));
    const lr = options.lr * decay;
    let total = 0;
    for (let start = 0; start < order.length; start += options.batchSize) {
      const batch = order.slice(start, start + options.batchSize);
      const loss = trainBatch(mlp, adam, batch, lr, options.finalWeight);
      if (!Number.isFinite(loss)) {
        throw new Error(`training diverged at epoch ${epoch}: loss=${loss}`);
      }
      total += loss * batch.length;
    }
    epochLosses.push(total / order.length);
  }
  return { mlp, trainSet, holdout, epochLosses };
}

export interface DisplacementErrors {
  ade: number;
  fde: number;
  meanAbsError: number;
  finalAbsError: number;
}

/** Average/final displacement error of the model against target offsets. */
export function evaluate(mlp: Mlp, examples: Example[]): DisplacementErrors {
  let ade = 0;
  let fde = 0;
  let mae = 0;
  let finalMae = 0;
  for (const example of examples) {
    const out = forward(mlp, example.features);
    const steps = out.length / 2;
    let sum = 0;
    for (let k = 0; k < steps; k++) {
      const dx = out[2 * k] - example.target[2 * k];
      const dy = out[2 * k + 1] - example.target[2 * k + 1];
      sum += Math.hypot(dx, dy);
      mae += (Math.abs(dx) + Math.abs(dy)) / 2;
    }
    ade += sum / steps;
    const dx = out[out.length - 2] - example.target[out.length - 2];
    const dy = out[out.length - 1] - example.target[out.length - 1];
    fde += Math.hypot(dx, dy);
    finalMae += (Math.abs(dx) + Math.abs(dy)) / 2;
  }
  const n = examples.length;
  const steps = examples[0].target.length / 2;
  return {
    ade: ade / n,
    fde: fde / n,
    meanAbsError: mae / (n * steps),
    finalAbsError: finalMae / n,
  };
}

/** The untrained reference: all-zero offsets (the documented degenerate plan). */
export function fallbackErrors(examples: Example[]): DisplacementErrors {
  let ade = 0;
  let fde = 0;
  for (const example of examples) {
    const steps = example.target.length / 2;
    let sum = 0;
    for (let k = 0; k < steps; k++) {
      sum += Math.hypot(example.target[2 * k], example.target[2 * k + 1]);
    }
    ade += sum / steps;
    fde += Math.hypot(example.target[example.target.length - 2],
                      example.target[example.target.length - 1]);
  }
  return { ade: ade / examples.length, fde: fde / examples.length,
           meanAbsError: NaN, finalAbsError: NaN };
}
