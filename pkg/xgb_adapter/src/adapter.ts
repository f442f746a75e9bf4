import {
  formatPredictionsCsv,
  readExternalCsv,
  readPrimaryCsv,
  writeFileAtomic,
} from "./csv";
import { DEFAULT_OPTIONS, GbdtOptions, trainGbdt } from "./gbdt";
import { Rng } from "./rng";

export interface AdapterConfig {
  externalPath: string;
  primaryPath: string;
  outPath: string;
  seed: number;
  splitRatio: number; // training fraction (4:1 split = 0.8)
  maxDepth: number;
  learningRate: number;
  maxRounds: number;
  earlyStoppingPatience: number;
  /**
   * Primary covariate columns carrying the external features, in external
   * order; defaults to the first nz covariates (x1..x{nz}).
   */
  zColumns?: string[];
}

export const DEFAULT_CONFIG = {
  seed: 0,
  splitRatio: 0.8,
  maxDepth: DEFAULT_OPTIONS.maxDepth,
  learningRate: DEFAULT_OPTIONS.learningRate,
  maxRounds: DEFAULT_OPTIONS.maxRounds,
  earlyStoppingPatience: DEFAULT_OPTIONS.earlyStoppingPatience,
};

export interface AdapterResult {
  nClasses: number;
  roundsTrained: number;
  bestRound: number;
  validationLoss: number;
  rows: number;
}

/**
 * Train on the external (u, z) file with a held-out validation split and
 * early stopping, score the primary file's Z columns, and write the
 * grouped-prediction CSV (last class omitted). Deterministic given the seed.
 */
export function trainAndExport(config: AdapterConfig): AdapterResult {
  if (!(config.splitRatio > 0 && config.splitRatio < 1)) {
    throw new Error(`split ratio must lie in (0,1), got ${config.splitRatio}`);
  }
  const external = readExternalCsv(config.externalPath);
  const primary = readPrimaryCsv(config.primaryPath);

  const nClasses = Math.max(...Array.from(external.labels));
  if (new Set(external.labels).size < 2) {
    throw new Error("external file must contain at least two coarse classes");
  }

  let zIdx: number[];
  if (config.zColumns && config.zColumns.length) {
    zIdx = config.zColumns.map((name) => {
      const k = primary.header.indexOf(name);
      if (k < 0) throw new Error(`primary file has no column '${name}'`);
      return k;
    });
  } else {
    zIdx = Array.from({ length: external.nFeatures }, (_, i) => i);
  }
  if (zIdx.length !== external.nFeatures) {
    throw new Error(
      `external file has ${external.nFeatures} feature column(s) but ` +
      `${zIdx.length} primary column(s) were selected`,
    );
  }
  if (primary.nFeatures < external.nFeatures) {
    throw new Error(
      `primary file has ${primary.nFeatures} covariates, fewer than the ` +
      `${external.nFeatures} external features`,
    );
  }

  // deterministic shuffled split
  const rng = new Rng(config.seed);
  const perm = rng.permutation(external.features.length);
  const nTrain = Math.max(1, Math.floor(config.splitRatio * perm.length));
  const trainIdx = Int32Array.from(perm.slice(0, nTrain));
  const validIdx = Int32Array.from(perm.slice(nTrain));
  if (validIdx.length === 0) {
    throw new Error("validation split is empty; lower the split ratio");
  }
  const trainClasses = new Set<number>();
  for (const i of Array.from(trainIdx)) trainClasses.add(external.labels[i]);
  if (trainClasses.size < nClasses) {
    throw new Error("a coarse class is absent from the training split");
  }

  const labels0 = Int32Array.from(external.labels, (u) => u - 1);
  const options: GbdtOptions = {
    nClasses,
    maxDepth: config.maxDepth,
    learningRate: config.learningRate,
    maxRounds: config.maxRounds,
    earlyStoppingPatience: config.earlyStoppingPatience,
    minChildWeight: DEFAULT_OPTIONS.minChildWeight,
    l2: DEFAULT_OPTIONS.l2,
    nBins: DEFAULT_OPTIONS.nBins,
  };
  const model = trainGbdt(external.features, labels0, trainIdx, validIdx, options);

  const scoreRows = primary.features.map((row) =>
    Float64Array.from(zIdx, (k) => row[k]),
  );
  const proba = model.predictProba(scoreRows);
  const grouped = proba.map((p) => p.slice(0, nClasses - 1));
  writeFileAtomic(config.outPath, formatPredictionsCsv(grouped, nClasses - 1));
  return {
    nClasses,
    roundsTrained: model.validationLoss.length,
    bestRound: model.bestRound,
    validationLoss: Math.min(...model.validationLoss),
    rows: grouped.length,
  };
}
