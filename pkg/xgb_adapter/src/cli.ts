#!/usr/bin/env node
/**
 * train-export: fit a gradient-boosted classifier on external coarse-label
 * data and write row-aligned grouped predictions for the primary file.
 *
 * Usage:
 *   xgb-adapter train-export --external FILE --primary FILE --out FILE
 *                            [--seed N] [--split 0.8] [--depth 6]
 *                            [--learning-rate 0.1] [--rounds 500]
 *                            [--patience 20] [--z-cols x1,x2,...]
 */

import { AdapterConfig, DEFAULT_CONFIG, trainAndExport } from "./adapter";

function parseArgs(argv: string[]): AdapterConfig {
  if (argv[0] !== "train-export") {
    throw new Error("usage: xgb-adapter train-export --external FILE --primary FILE --out FILE");
  }
  const opts = new Map<string, string>();
  for (let i = 1; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`malformed option: ${argv[i]}`);
    }
    opts.set(argv[i].slice(2), argv[i + 1]);
  }
  const need = (name: string): string => {
    const v = opts.get(name);
    if (!v) throw new Error(`missing required option --${name}`);
    return v;
  };
  const numeric = (name: string, fallback: number): number => {
    const v = opts.get(name);
    if (v === undefined) return fallback;
    const parsed = Number(v);
    if (!Number.isFinite(parsed)) throw new Error(`--${name}: not a number: '${v}'`);
    return parsed;
  };
  return {
    externalPath: need("external"),
    primaryPath: need("primary"),
    outPath: need("out"),
    seed: numeric("seed", DEFAULT_CONFIG.seed),
    splitRatio: numeric("split", DEFAULT_CONFIG.splitRatio),
    maxDepth: numeric("depth", DEFAULT_CONFIG.maxDepth),
    learningRate: numeric("learning-rate", DEFAULT_CONFIG.learningRate),
    maxRounds: numeric("rounds", DEFAULT_CONFIG.maxRounds),
    earlyStoppingPatience: numeric("patience", DEFAULT_CONFIG.earlyStoppingPatience),
    zColumns: opts.get("z-cols")?.split(",").map((s) => s.trim()),
  };
}

function main(): number {
  try {
    const config = parseArgs(process.argv.slice(2));
    const result = trainAndExport(config);
    console.log(
      `wrote ${config.outPath}: ${result.rows} rows, ${result.nClasses} classes, ` +
      `best round ${result.bestRound}/${result.roundsTrained} ` +
      `(validation log loss ${result.validationLoss.toFixed(4)})`,
    );
    return 0;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

process.exit(main());
