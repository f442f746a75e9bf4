import * as fs from "fs";

export interface ExternalData {
  labels: Int32Array; // coarse labels 1..L
  features: Float64Array[]; // row-major
  nFeatures: number;
}

export interface PrimaryData {
  features: Float64Array[];
  nFeatures: number;
  header: string[];
}

function splitLines(text: string): string[] {
  const lines = text.split(/\r?\n/);
  while (lines.length && lines[lines.length - 1] === "") lines.pop();
  return lines;
}

/** Parse `u,z1,...` rows; labels must be positive integers. */
export function readExternalCsv(path: string): ExternalData {
  const lines = splitLines(fs.readFileSync(path, "utf8"));
  if (lines.length === 0) throw new Error(`${path}: empty file`);
  const header = lines[0].split(",");
  if (header[0] !== "u") {
    throw new Error(`${path}: first column must be 'u', got '${header[0]}'`);
  }
  for (let j = 1; j < header.length; j++) {
    if (header[j] !== `z${j}`) {
      throw new Error(`${path}: column ${j + 1} must be 'z${j}', got '${header[j]}'`);
    }
  }
  const nFeatures = header.length - 1;
  const labels = new Int32Array(lines.length - 1);
  const features: Float64Array[] = [];
  for (let i = 1; i < lines.length; i++) {
    const cells = lines[i].split(",");
    if (cells.length !== header.length) {
      throw new Error(`${path}: row ${i + 1} has ${cells.length} fields, expected ${header.length}`);
    }
    const u = Number(cells[0]);
    if (!Number.isInteger(u) || u < 1) {
      throw new Error(`${path}: row ${i + 1}, column u: not a positive integer: '${cells[0]}'`);
    }
    labels[i - 1] = u;
    const row = new Float64Array(nFeatures);
    for (let j = 0; j < nFeatures; j++) {
      const v = Number(cells[j + 1]);
      if (!Number.isFinite(v) || cells[j + 1].trim() === "") {
        throw new Error(`${path}: row ${i + 1}, column z${j + 1}: not a number: '${cells[j + 1]}'`);
      }
      row[j] = v;
    }
    features.push(row);
  }
  if (features.length === 0) throw new Error(`${path}: no data rows`);
  return { labels, features, nFeatures };
}

/** Parse `label,x1,...` rows; only the covariates are kept. */
export function readPrimaryCsv(path: string): PrimaryData {
  const lines = splitLines(fs.readFileSync(path, "utf8"));
  if (lines.length === 0) throw new Error(`${path}: empty file`);
  const header = lines[0].split(",");
  if (header[0] !== "label") {
    throw new Error(`${path}: first column must be 'label', got '${header[0]}'`);
  }
  const nFeatures = header.length - 1;
  const features: Float64Array[] = [];
  for (let i = 1; i < lines.length; i++) {
    const cells = lines[i].split(",");
    if (cells.length !== header.length) {
      throw new Error(`${path}: row ${i + 1} has ${cells.length} fields, expected ${header.length}`);
    }
    const row = new Float64Array(nFeatures);
    for (let j = 0; j < nFeatures; j++) {
      const v = Number(cells[j + 1]);
      if (!Number.isFinite(v) || cells[j + 1].trim() === "") {
        throw new Error(`${path}: row ${i + 1}, column ${header[j + 1]}: not a number: '${cells[j + 1]}'`);
      }
      row[j] = v;
    }
    features.push(row);
  }
  if (features.length === 0) throw new Error(`${path}: no data rows`);
  return { features, nFeatures, header: header.slice(1) };
}

/** Serialize grouped probabilities as `q1..q{L-1}` with shortest round-trip floats. */
export function formatPredictionsCsv(rows: number[][], nGroupsMinus1: number): string {
  const header = Array.from({ length: nGroupsMinus1 }, (_, i) => `q${i + 1}`).join(",");
  const body = rows.map((r) => r.map((v) => String(v)).join(",")).join("\n");
  return `${header}\n${body}\n`;
}

export function writeFileAtomic(path: string, text: string): void {
  const tmp = `${path}.tmp-${process.pid}`;
  fs.writeFileSync(tmp, text);
  fs.renameSync(tmp, path);
}
