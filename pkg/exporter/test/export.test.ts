import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { beforeAll, describe, expect, it } from "vitest";

import { HashImageEncoder, HashSentenceEncoder, HashVQAModel } from "../src/encoders.js";
import { runExport, type ExportSummary } from "../src/export.js";
import { crc32 } from "../src/crc32.js";

const K = 24;
const VOCAB = 8;

function makeInputs(dir: string) {
  // 8 originals, each with 24 neighbors drawn from a shared image pool
  const questions: any[] = [];
  const annotations: any[] = [];
  const knn: Record<string, string[]> = {};
  const complements: any[] = [];
  const answers = ["yes", "no", "red", "blue", "cat", "dog", "two", "three",
                   "tennis", "pizza", "left", "right"];
  const pool = Array.from({ length: 60 }, (_, i) => `9${i.toString().padStart(3, "0")}`);
  for (let i = 0; i < 8; i++) {
    const imageId = `10${i}`;
    const questionId = `50${i}`;
    questions.push({ image_id: Number(imageId), question_id: Number(questionId),
                     question: `what is in picture ${i}?` });
    annotations.push({ image_id: Number(imageId), question_id: Number(questionId),
                       multiple_choice_answer: answers[i % answers.length] });
    const neighbors = Array.from({ length: K }, (_, j) => pool[(i * 7 + j) % pool.length]);
    knn[imageId] = neighbors;
    if (i % 4 !== 3) {
      // labeled complement; some deliberately outside the neighbor list
      const inside = i % 4 !== 2;
      complements.push({
        image_id: Number(imageId),
        complement_image_id: Number(inside ? neighbors[2] : "888"),
        complement_answer: answers[(i + 1) % answers.length],
      });
    }
  }
  const paths = {
    questions: join(dir, "questions.json"),
    annotations: join(dir, "annotations.json"),
    knn: join(dir, "knn.json"),
    complements: join(dir, "complements.json"),
  };
  writeFileSync(paths.questions, JSON.stringify({ questions }));
  writeFileSync(paths.annotations, JSON.stringify({ annotations }));
  writeFileSync(paths.knn, JSON.stringify(knn));
  writeFileSync(paths.complements, JSON.stringify(complements));
  return paths;
}

function exportTo(dir: string, inputs: ReturnType<typeof makeInputs>, tag: string): {
  store: string; manifest: string; summary: ExportSummary;
} {
  const store = join(dir, `features-${tag}.cxfs`);
  const manifest = join(dir, `manifest-${tag}.cxm`);
  const summary = runExport({
    questionsPath: inputs.questions,
    annotationsPath: inputs.annotations,
    complementsPath: inputs.complements,
    knnPath: inputs.knn,
    imagesDir: null,
    imageEncoder: new HashImageEncoder(32),
    sentenceEncoder: new HashSentenceEncoder(16),
    vqaModel: new HashVQAModel(VOCAB, 8),
    vocabularySize: VOCAB,
    k: K,
    storePath: store,
    manifestPath: manifest,
    log: () => undefined,
  });
  return { store, manifest, summary };
}

function python(code: string): string {
  return execFileSync("python3", ["-c", code], { encoding: "utf-8" });
}

describe("export pipeline", () => {
  let dir: string;
  let inputs: ReturnType<typeof makeInputs>;
  let out: ReturnType<typeof exportTo>;

  beforeAll(() => {
    dir = mkdtempSync(join(tmpdir(), "cxrank-export-"));
    inputs = makeInputs(dir);
    out = exportTo(dir, inputs, "a");
  });

  it("emits one raw record per usable annotation", () => {
    expect(out.summary.records).toBe(8);
    const lines = readFileSync(out.manifest, "utf-8").trim().split("\n");
    expect(lines.length).toBe(1 + 8);
  });

  it("every record carries exactly K candidates", () => {
    const lines = readFileSync(out.manifest, "utf-8").trim().split("\n").slice(1);
    for (const line of lines) {
      expect(JSON.parse(line).candidates.length).toBe(K);
    }
  });

  it("manifest header checksum is valid CRC-32 of the header json", () => {
    const header = readFileSync(out.manifest, "utf-8").split("\n")[0];
    const [magic, crcHex, json] = header.split(" ", 3).length === 3
      ? [header.split(" ")[0], header.split(" ")[1], header.slice(header.indexOf("{"))]
      : ["", "", ""];
    expect(magic).toBe("CXM1");
    expect(crc32(Buffer.from(json, "utf-8")).toString(16).padStart(8, "0")).toBe(crcHex);
  });

  it("re-export is byte-identical", () => {
    const again = exportTo(dir, inputs, "b");
    expect(readFileSync(again.store)).toEqual(readFileSync(out.store));
    expect(readFileSync(again.manifest, "utf-8")).toBe(readFileSync(out.manifest, "utf-8"));
  });

  it("the consumer's readers load the files with zero validation errors", () => {
    const output = python(`
import json
from cxrank.data import read_feature_store, read_manifest
store = read_feature_store(${JSON.stringify(out.store)})
manifest = read_manifest(${JSON.stringify(out.manifest)})
store.validate()
store.validate_coverage(manifest)
print(json.dumps({
    "dims": [store.dims.v_dim, store.dims.q_dim, store.dims.n_answers,
             store.dims.emb_dim, store.dims.z_dim],
    "records": len(manifest.examples),
    "split": manifest.split,
    "images": len(store.v),
    "oracle_records": len(store.dz),
    "table_rows": store.answer_table.n_answers,
}))
`);
    const info = JSON.parse(output);
    expect(info.dims).toEqual([32, 16, VOCAB, 16, 8]);
    expect(info.records).toBe(8);
    expect(info.split).toBe("raw");
    expect(info.table_rows).toBe(VOCAB);
    expect(info.oracle_records).toBe(out.summary.oracleRecords);
  });

  it("exported answer distributions satisfy the consumer's invariants", () => {
    const output = python(`
from cxrank.core import AnswerDistribution
from cxrank.data import read_feature_store
store = read_feature_store(${JSON.stringify(out.store)})
for dist, z in store.dz.values():
    AnswerDistribution(dist)
print("ok", len(store.dz))
`);
    expect(output).toContain("ok");
  });

  it("the consumer's filter resolves labels and drops the asymmetric one", () => {
    const output = python(`
import json
from cxrank.data import read_manifest, build_dataset
built = build_dataset(read_manifest(${JSON.stringify(out.manifest)}))
c = built.counts
print(json.dumps([c.total, c.kept, c.dropped_no_complement, c.dropped_knn_asymmetry]))
`);
    // 8 records: 6 labeled (i%4 != 3), of which 2 (i%4 == 2) point outside
    const [total, kept, noComplement, asymmetric] = JSON.parse(output);
    expect(total).toBe(8);
    expect(noComplement).toBe(2);
    expect(asymmetric).toBe(2);
    expect(kept).toBe(4);
  });

  it("oracle records round-trip through the consumer's table oracle", () => {
    const output = python(`
import numpy as np
from cxrank.data import read_feature_store, read_manifest
from cxrank.oracle import TableOracle, vqa_eval
store = read_feature_store(${JSON.stringify(out.store)})
manifest = read_manifest(${JSON.stringify(out.manifest)})
ex = manifest.examples[0]
oracle = TableOracle(store)
v = store.v[ex.candidates.candidate_ids[0]].astype(np.float64)
q = store.q[ex.question_id].astype(np.float64)
out = vqa_eval(oracle, v, q, key=(ex.candidates.candidate_ids[0], ex.question_id))
print("probs-sum", float(out.answer_dist.probs.sum()))
`);
    expect(output).toContain("probs-sum 1.0");
  });

  it("rejects neighbor lists of the wrong length", () => {
    const badDir = mkdtempSync(join(tmpdir(), "cxrank-export-bad-"));
    const bad = makeInputs(badDir);
    const knn = JSON.parse(readFileSync(bad.knn, "utf-8"));
    knn["100"] = knn["100"].slice(0, 5);
    writeFileSync(bad.knn, JSON.stringify(knn));
    expect(() => exportTo(badDir, bad, "x")).toThrow(/expected 24/);
  });
});
