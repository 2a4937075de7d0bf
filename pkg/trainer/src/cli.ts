import * as fs from "node:fs";
import * as path from "node:path";

import { buildDataset } from "./dataset.js";
import { FEATURE_SIZE } from "./features.js";
import { forward } from "./mlp.js";
import { Rng } from "./rng.js";
import { DEFAULT_OPTIONS, evaluate, fallbackErrors, splitDataset, train } from "./train.js";
import { exportWeights, loadWeights } from "./weights.js";

interface Args {
  command: string;
  options: Map<string, string>;
}

function parseArgs(argv: string[]): Args {
  if (argv.length === 0) {
    throw new Error("usage: cli <build-data|train|eval> [--key value ...]");
  }
  const [command, ...rest] = argv;
  const options = new Map<string, string>();
  for (let i = 0; i < rest.length; i += 2) {
    if (!rest[i].startsWith("--") || i + 1 >= rest.length) {
      throw new Error(`bad argument ${rest[i]}`);
    }
    options.set(rest[i].slice(2), rest[i + 1]);
  }
  return { command, options };
}

function required(args: Args, key: string): string {
  const value = args.options.get(key);
  if (value === undefined) {
    throw new Error(`missing --${key}`);
  }
  return value;
}

function main(): number {
  const args = parseArgs(process.argv.slice(2));
  const horizon = parseInt(args.options.get("horizon") ?? "60", 10);
  const seed = parseInt(args.options.get("seed") ?? "0", 10);

  if (args.command === "build-data") {
    const examples = buildDataset(required(args, "scenarios"), horizon);
    fs.writeFileSync(required(args, "out"), JSON.stringify({ horizon, examples }));
    console.log(`wrote ${examples.length} examples`);
    return 0;
  }

  if (args.command === "train") {
    const dataFile = args.options.get("data");
    const examples = dataFile
      ? JSON.parse(fs.readFileSync(dataFile, "utf-8")).examples
      : buildDataset(required(args, "scenarios"), horizon);
    const options = {
      ...DEFAULT_OPTIONS,
      seed,
      epochs: parseInt(args.options.get("epochs") ?? String(DEFAULT_OPTIONS.epochs), 10),
      lr: parseFloat(args.options.get("lr") ?? String(DEFAULT_OPTIONS.lr)),
    };
    const result = train(examples, options);
    const outDir = required(args, "out");
    fs.mkdirSync(outDir, { recursive: true });
    fs.writeFileSync(path.join(outDir, "weights.json"), exportWeights(result.mlp));

    const trained = evaluate(result.mlp, result.holdout);
    const fallback = fallbackErrors(result.holdout);
    const metrics = {
      n_examples: examples.length,
      n_holdout: result.holdout.length,
      epochs: options.epochs,
      seed,
      first_epoch_loss: result.epochLosses[0],
      last_epoch_loss: result.epochLosses[result.epochLosses.length - 1],
      holdout: trained,
      fallback: { ade: fallback.ade, fde: fallback.fde },
    };
    fs.writeFileSync(path.join(outDir, "metrics.json"), JSON.stringify(metrics, null, 2));

    // forward-pass fixtures for the cross-runtime numerical contract
    const rng = new Rng(seed ^ 0x9e3779b9);
    const cases = [];
    for (let i = 0; i < 100; i++) {
      const input = new Array(FEATURE_SIZE);
      for (let k = 0; k < FEATURE_SIZE; k++) {
        input[k] = rng.normal() * 5;
      }
      cases.push({ input, output: forward(result.mlp, input) });
    }
    fs.writeFileSync(path.join(outDir, "forward_fixtures.json"), JSON.stringify({ cases }));
    console.log(JSON.stringify(metrics.holdout));
    return 0;
  }

  if (args.command === "eval") {
    const mlp = loadWeights(required(args, "weights"));
    const examples = buildDataset(required(args, "scenarios"), horizon);
    const { holdout } = splitDataset(examples, seed, DEFAULT_OPTIONS.holdoutFraction);
    console.log(JSON.stringify(evaluate(mlp, holdout)));
    return 0;
  }

  throw new Error(`unknown command ${args.command}`);
}

try {
  process.exitCode = main();
} catch (err) {
  console.error(String(err));
  process.exitCode = 2;
}
