/**
 * Histogram-based gradient-boosted trees with a multiclass softmax
 * objective: second-order leaf values, depth-wise greedy splits on
 * quantile-binned features, and early stopping on validation log loss.
 */

export interface GbdtOptions {
  nClasses: number;
  maxDepth: number;
  learningRate: number;
  maxRounds: number;
  earlyStoppingPatience: number;
  minChildWeight: number;
  l2: number;
  nBins: number;
}

export const DEFAULT_OPTIONS: Omit<GbdtOptions, "nClasses"> = {
  maxDepth: 6,
  learningRate: 0.1,
  maxRounds: 500,
  earlyStoppingPatience: 20,
  minChildWeight: 1.0,
  l2: 1.0,
  nBins: 256,
};

interface TreeNode {
  feature: number; // -1 marks a leaf
  bin: number; // go left when binned value <= bin
  left: number;
  right: number;
  value: number;
}

type Tree = TreeNode[];

export class GbdtModel {
  constructor(
    readonly nClasses: number,
    readonly cutpoints: Float64Array[],
    readonly trees: Tree[][], // trees[round][class]
    readonly baseScores: Float64Array,
    readonly bestRound: number,
    readonly validationLoss: number[],
  ) {}

  /** Class-probability rows for raw feature rows. */
  predictProba(rows: Float64Array[] | number[][]): number[][] {
    const out: number[][] = [];
    for (const row of rows) {
      const binned = binRow(row as Float64Array, this.cutpoints);
      const margins = Array.from(this.baseScores);
      for (let r = 0; r < this.bestRound; r++) {
        for (let c = 0; c < this.nClasses; c++) {
          margins[c] += evalTree(this.trees[r][c], binned);
        }
      }
      out.push(softmax(margins));
    }
    return out;
  }
}

function softmax(margins: number[]): number[] {
  let mx = -Infinity;
  for (const m of margins) mx = Math.max(mx, m);
  let total = 0;
  const exps = margins.map((m) => {
    const e = Math.exp(m - mx);
    total += e;
    return e;
  });
  return exps.map((e) => e / total);
}

function evalTree(tree: Tree, binned: Uint16Array): number {
  let node = 0;
  for (;;) {
    const t = tree[node];
    if (t.feature < 0) return t.value;
    node = binned[t.feature] <= t.bin ? t.left : t.right;
  }
}

function binRow(row: Float64Array, cutpoints: Float64Array[]): Uint16Array {
  const out = new Uint16Array(cutpoints.length);
  for (let f = 0; f < cutpoints.length; f++) {
    out[f] = binValue(row[f], cutpoints[f]);
  }
  return out;
}

function binValue(v: number, cuts: Float64Array): number {
  // first bin whose upper cut is >= v; values beyond fall in the last bin
  let lo = 0;
  let hi = cuts.length;
  while (lo < hi) {
    const mid = (lo + hi) >> 1;
    if (v <= cuts[mid]) hi = mid;
    else lo = mid + 1;
  }
  return lo;
}

/** Quantile cut points (bin upper edges) from the training column. */
function computeCutpoints(values: number[], nBins: number): Float64Array {
  const sorted = Float64Array.from(values).sort();
  const cuts: number[] = [];
  for (let b = 1; b < nBins; b++) {
    const q = sorted[Math.min(sorted.length - 1, Math.floor((b * sorted.length) / nBins))];
    if (cuts.length === 0 || q > cuts[cuts.length - 1]) cuts.push(q);
  }
  return Float64Array.from(cuts);
}

interface NodeRange {
  id: number;
  rows: Int32Array;
  depth: number;
  sumG: number;
  sumH: number;
}

function buildTree(
  binned: Uint16Array[],
  nFeatures: number,
  nBinsPerFeature: number[],
  rows: Int32Array,
  grad: Float64Array,
  hess: Float64Array,
  opts: GbdtOptions,
): Tree {
  const tree: Tree = [];
  let sumG = 0;
  let sumH = 0;
  for (const i of rows) {
    sumG += grad[i];
    sumH += hess[i];
  }
  tree.push({ feature: -1, bin: 0, left: -1, right: -1, value: 0 });
  const queue: NodeRange[] = [{ id: 0, rows, depth: 0, sumG, sumH }];

  while (queue.length) {
    const node = queue.shift()!;
    const leafValue = -node.sumG / (node.sumH + opts.l2);
    if (node.depth >= opts.maxDepth || node.rows.length < 2) {
      tree[node.id].value = leafValue;
      continue;
    }
    // best split over features and bins from gradient/hessian histograms
    let bestGain = 1e-12;
    let bestFeature = -1;
    let bestBin = -1;
    const parentScore = (node.sumG * node.sumG) / (node.sumH + opts.l2);
    for (let f = 0; f < nFeatures; f++) {
      const nb = nBinsPerFeature[f];
      if (nb <= 1) continue;
      const histG = new Float64Array(nb);
      const histH = new Float64Array(nb);
      for (const i of node.rows) {
        const b = binned[i][f];
        histG[b] += grad[i];
        histH[b] += hess[i];
      }
      let leftG = 0;
      let leftH = 0;
      for (let b = 0; b < nb - 1; b++) {
        leftG += histG[b];
        leftH += histH[b];
        const rightG = node.sumG - leftG;
        const rightH = node.sumH - leftH;
        if (leftH < opts.minChildWeight || rightH < opts.minChildWeight) continue;
        const gain =
          (leftG * leftG) / (leftH + opts.l2) +
          (rightG * rightG) / (rightH + opts.l2) -
          parentScore;
        if (gain > bestGain) {
          bestGain = gain;
          bestFeature = f;
          bestBin = b;
        }
      }
    }
    if (bestFeature < 0) {
      tree[node.id].value = leafValue;
      continue;
    }
    const leftRows: number[] = [];
    const rightRows: number[] = [];
    let leftG = 0;
    let leftH = 0;
    for (const i of node.rows) {
      if (binned[i][bestFeature] <= bestBin) {
        leftRows.push(i);
        leftG += grad[i];
        leftH += hess[i];
      } else {
        rightRows.push(i);
      }
    }
    const leftId = tree.length;
    tree.push({ feature: -1, bin: 0, left: -1, right: -1, value: 0 });
    const rightId = tree.length;
    tree.push({ feature: -1, bin: 0, left: -1, right: -1, value: 0 });
    tree[node.id] = {
      feature: bestFeature,
      bin: bestBin,
      left: leftId,
      right: rightId,
      value: 0,
    };
    queue.push({
      id: leftId, rows: Int32Array.from(leftRows), depth: node.depth + 1,
      sumG: leftG, sumH: leftH,
    });
    queue.push({
      id: rightId, rows: Int32Array.from(rightRows), depth: node.depth + 1,
      sumG: node.sumG - leftG, sumH: node.sumH - leftH,
    });
  }
  return tree;
}

export function trainGbdt(
  features: Float64Array[],
  labels0: Int32Array, // 0-based class indices
  trainIdx: Int32Array,
  validIdx: Int32Array,
  options: GbdtOptions,
): GbdtModel {
  const K = options.nClasses;
  const nFeatures = features[0].length;
  const n = features.length;

  const cutpoints: Float64Array[] = [];
  for (let f = 0; f < nFeatures; f++) {
    const col: number[] = [];
    for (const i of trainIdx) col.push(features[i][f]);
    cutpoints.push(computeCutpoints(col, options.nBins));
  }
  const nBinsPerFeature = cutpoints.map((c) => c.length + 1);
  const binned: Uint16Array[] = [];
  for (let i = 0; i < n; i++) binned.push(binRow(features[i], cutpoints));

  // base score: training log-frequencies
  const counts = new Float64Array(K);
  for (const i of trainIdx) counts[labels0[i]] += 1;
  const baseScores = new Float64Array(K);
  for (let c = 0; c < K; c++) {
    baseScores[c] = Math.log(Math.max(counts[c], 1) / trainIdx.length);
  }

  const margins = new Float64Array(n * K);
  for (let i = 0; i < n; i++) {
    for (let c = 0; c < K; c++) margins[i * K + c] = baseScores[c];
  }
  const grad = new Float64Array(n);
  const hess = new Float64Array(n);
  const probs = new Float64Array(n * K);

  const refreshProbs = (idx: Int32Array) => {
    for (const i of idx) {
      let mx = -Infinity;
      for (let c = 0; c < K; c++) mx = Math.max(mx, margins[i * K + c]);
      let total = 0;
      for (let c = 0; c < K; c++) {
        const e = Math.exp(margins[i * K + c] - mx);
        probs[i * K + c] = e;
        total += e;
      }
      for (let c = 0; c < K; c++) probs[i * K + c] /= total;
    }
  };
  const logLoss = (idx: Int32Array) => {
    let loss = 0;
    for (const i of idx) {
      loss -= Math.log(Math.max(probs[i * K + labels0[i]], 1e-15));
    }
    return loss / Math.max(idx.length, 1);
  };

  const trees: Tree[][] = [];
  const validationLoss: number[] = [];
  let bestLoss = Infinity;
  let bestRound = 0;
  for (let round = 0; round < options.maxRounds; round++) {
    refreshProbs(trainIdx);
    const roundTrees: Tree[] = [];
    for (let c = 0; c < K; c++) {
      for (const i of trainIdx) {
        const p = probs[i * K + c];
        grad[i] = p - (labels0[i] === c ? 1 : 0);
        hess[i] = Math.max(p * (1 - p), 1e-12);
      }
      const tree = buildTree(
        binned, nFeatures, nBinsPerFeature, trainIdx, grad, hess, options,
      );
      // leaf values carry the learning rate, so stored trees apply as-is
      for (const node of tree) {
        if (node.feature < 0) node.value *= options.learningRate;
      }
      roundTrees.push(tree);
      for (const i of trainIdx) {
        margins[i * K + c] += evalTree(tree, binned[i]);
      }
      for (const i of validIdx) {
        margins[i * K + c] += evalTree(tree, binned[i]);
      }
    }
    trees.push(roundTrees);
    refreshProbs(validIdx);
    const loss = logLoss(validIdx);
    validationLoss.push(loss);
    if (loss < bestLoss - 1e-9) {
      bestLoss = loss;
      bestRound = round + 1;
    } else if (round + 1 - bestRound >= options.earlyStoppingPatience) {
      break;
    }
  }
  return new GbdtModel(K, cutpoints, trees, baseScores, bestRound, validationLoss);
}
