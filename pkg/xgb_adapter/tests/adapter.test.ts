import * as fs from "fs";
import * as os from "os";
import * as path from "path";

import { beforeAll, describe, expect, it } from "vitest";

import { DEFAULT_CONFIG, trainAndExport } from "../src/adapter";
import { readPrimaryCsv } from "../src/csv";
import { Rng } from "../src/rng";

function tmpdir(): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), "xgb-adapter-"));
}

function expit(t: number): number {
  return 1 / (1 + Math.exp(-t));
}

/** Small synthetic pair of files: binary coarse label, two features. */
function writeSyntheticFiles(dir: string, nExternal = 2500, nPrimary = 120) {
  const rng = new Rng(13);
  const extLines = ["u,z1,z2"];
  for (let i = 0; i < nExternal; i++) {
    const z1 = 2 * rng.next() - 1;
    const z2 = 2 * rng.next() - 1;
    const p = expit(1.5 * z1 - z2);
    const u = rng.next() < p ? 1 : 2;
    extLines.push(`${u},${z1},${z2}`);
  }
  const primLines = ["label,x1,x2,x3"];
  for (let i = 0; i < nPrimary; i++) {
    const x1 = 2 * rng.next() - 1;
    const x2 = 2 * rng.next() - 1;
    const x3 = rng.next();
    primLines.push(`1,${x1},${x2},${x3}`);
  }
  const external = path.join(dir, "external.csv");
  const primary = path.join(dir, "primary.csv");
  fs.writeFileSync(external, extLines.join("\n") + "\n");
  fs.writeFileSync(primary, primLines.join("\n") + "\n");
  return { external, primary };
}

describe("trainAndExport", () => {
  let dir: string;
  let external: string;
  let primary: string;

  beforeAll(() => {
    dir = tmpdir();
    ({ external, primary } = writeSyntheticFiles(dir));
  });

  it("writes a valid grouped-prediction file", () => {
    const out = path.join(dir, "preds.csv");
    const result = trainAndExport({
      ...DEFAULT_CONFIG, externalPath: external, primaryPath: primary,
      outPath: out, seed: 1,
    });
    expect(result.rows).toBe(120);
    expect(result.nClasses).toBe(2);
    const lines = fs.readFileSync(out, "utf8").trim().split("\n");
    expect(lines[0]).toBe("q1");
    expect(lines).toHaveLength(121);
    for (const line of lines.slice(1)) {
      const v = Number(line);
      expect(v).toBeGreaterThanOrEqual(0);
      expect(v).toBeLessThanOrEqual(1);
    }
  });

  it("predictions track the generating probabilities", () => {
    const out = path.join(dir, "preds2.csv");
    trainAndExport({
      ...DEFAULT_CONFIG, externalPath: external, primaryPath: primary,
      outPath: out, seed: 1,
    });
    const rows = fs.readFileSync(out, "utf8").trim().split("\n").slice(1).map(Number);
    const prim = readPrimaryCsv(primary);
    let err = 0;
    for (let i = 0; i < rows.length; i++) {
      const p = expit(1.5 * prim.features[i][0] - prim.features[i][1]);
      err += Math.abs(rows[i] - p);
    }
    expect(err / rows.length).toBeLessThan(0.12);
  });

  it("fixed seed gives byte-identical output", () => {
    const o1 = path.join(dir, "d1.csv");
    const o2 = path.join(dir, "d2.csv");
    for (const out of [o1, o2]) {
      trainAndExport({
        ...DEFAULT_CONFIG, externalPath: external, primaryPath: primary,
        outPath: out, seed: 9,
      });
    }
    expect(fs.readFileSync(o1)).toEqual(fs.readFileSync(o2));
  });

  it("permuting primary rows permutes the output identically", () => {
    const text = fs.readFileSync(primary, "utf8").trim().split("\n");
    const header = text[0];
    const rows = text.slice(1);
    const perm = new Rng(4).permutation(rows.length);
    const permuted = path.join(dir, "primary_perm.csv");
    fs.writeFileSync(
      permuted, [header, ...perm.map((i) => rows[i])].join("\n") + "\n",
    );
    const outBase = path.join(dir, "p_base.csv");
    const outPerm = path.join(dir, "p_perm.csv");
    trainAndExport({
      ...DEFAULT_CONFIG, externalPath: external, primaryPath: primary,
      outPath: outBase, seed: 2,
    });
    trainAndExport({
      ...DEFAULT_CONFIG, externalPath: external, primaryPath: permuted,
      outPath: outPerm, seed: 2,
    });
    const base = fs.readFileSync(outBase, "utf8").trim().split("\n").slice(1);
    const permOut = fs.readFileSync(outPerm, "utf8").trim().split("\n").slice(1);
    expect(permOut).toEqual(perm.map((i) => base[i]));
  });

  it("rejects invalid split ratios", () => {
    expect(() => trainAndExport({
      ...DEFAULT_CONFIG, externalPath: external, primaryPath: primary,
      outPath: path.join(dir, "x.csv"), seed: 0, splitRatio: 1.5,
    })).toThrow(/split ratio/);
  });

  it("rejects single-class external data", () => {
    const solo = path.join(dir, "solo.csv");
    fs.writeFileSync(solo, "u,z1\n1,0.1\n1,0.2\n1,0.3\n1,0.4\n1,0.5\n");
    expect(() => trainAndExport({
      ...DEFAULT_CONFIG, externalPath: solo, primaryPath: primary,
      outPath: path.join(dir, "y.csv"), seed: 0,
    })).toThrow(/two coarse classes/);
  });

  it("rejects z-column mismatch", () => {
    const narrow = path.join(dir, "narrow.csv");
    fs.writeFileSync(narrow, "label,x1\n1,0.0\n2,0.5\n");
    expect(() => trainAndExport({
      ...DEFAULT_CONFIG, externalPath: external, primaryPath: narrow,
      outPath: path.join(dir, "z.csv"), seed: 0,
    })).toThrow(/covariates/);
  });

  it("honours explicit z-column selection", () => {
    const out1 = path.join(dir, "zc1.csv");
    const out2 = path.join(dir, "zc2.csv");
    trainAndExport({
      ...DEFAULT_CONFIG, externalPath: external, primaryPath: primary,
      outPath: out1, seed: 3,
    });
    trainAndExport({
      ...DEFAULT_CONFIG, externalPath: external, primaryPath: primary,
      outPath: out2, seed: 3, zColumns: ["x1", "x2"],
    });
    expect(fs.readFileSync(out1)).toEqual(fs.readFileSync(out2));
  });

  it("reports malformed cells with their location", () => {
    const bad = path.join(dir, "bad.csv");
    fs.writeFileSync(bad, "u,z1\n1,0.5\n2,oops\n");
    expect(() => trainAndExport({
      ...DEFAULT_CONFIG, externalPath: bad, primaryPath: primary,
      outPath: path.join(dir, "w.csv"), seed: 0,
    })).toThrow(/row 3, column z1/);
  });
});
