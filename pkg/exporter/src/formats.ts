/**
 * Writers for the two cxrank file formats. The byte layouts are defined
 * by the consuming package; this module holds no format logic beyond
 * them, and exported files are validated by the consumer's readers.
 *
 * Feature store (CXFS), little-endian:
 *   magic "CXFS" | version u16 | v_dim u32 | q_dim u32 | n_answers u32 |
 *   emb_dim u32 | z_dim u32 | section_count u32 | crc32(header) u32
 *   then sections: kind u8 | record_count u64 | dim u32 | records of
 *   (u16-length-prefixed UTF-8 id(s), dim x float32).
 *
 * Manifest: UTF-8 text, header line "CXM1 <crc32-hex8> <header-json>"
 * followed by one compact JSON record per line with sorted keys (the
 * byte encoding matches Python's json.dumps(sort_keys=True,
 * separators=(",", ":")) for the value types used here).
 */

import { writeFileSync, renameSync } from "node:fs";
import { crc32 } from "./crc32.js";

export const CXFS_MAGIC = "CXFS";
export const CXFS_VERSION = 1;
export const MANIFEST_MAGIC = "CXM1";

export const SECTION_V = 1;
export const SECTION_Q = 2;
export const SECTION_DZ = 3;
export const SECTION_TABLE = 4;

export interface StoreDims {
  vDim: number;
  qDim: number;
  nAnswers: number;
  embDim: number;
  zDim: number;
}

export interface FeatureStoreData {
  dims: StoreDims;
  v: Map<string, Float32Array>;
  q: Map<string, Float32Array>;
  /** key "imageIdquestionId" -> concatenated dist+z payload */
  dz: Map<string, Float32Array>;
  /** answer-table rows in answer-index order, or null */
  table: Float32Array[] | null;
}

class ByteSink {
  private chunks: Buffer[] = [];

  u8(x: number) {
    const b = Buffer.alloc(1);
    b.writeUInt8(x);
    this.chunks.push(b);
  }

  u16(x: number) {
    const b = Buffer.alloc(2);
    b.writeUInt16LE(x);
    this.chunks.push(b);
  }

  u32(x: number) {
    const b = Buffer.alloc(4);
    b.writeUInt32LE(x >>> 0);
    this.chunks.push(b);
  }

  u64(x: number) {
    const b = Buffer.alloc(8);
    b.writeBigUInt64LE(BigInt(x));
    this.chunks.push(b);
  }

  raw(data: Uint8Array) {
    this.chunks.push(Buffer.from(data));
  }

  str(s: string) {
    const encoded = Buffer.from(s, "utf-8");
    if (encoded.length > 0xffff) {
      throw new Error(`id too long to encode: ${s.slice(0, 32)}...`);
    }
    this.u16(encoded.length);
    this.chunks.push(encoded);
  }

  floats(values: Float32Array) {
    const b = Buffer.alloc(values.length * 4);
    for (let i = 0; i < values.length; i++) {
      b.writeFloatLE(values[i], i * 4);
    }
    this.chunks.push(b);
  }

  bytes(): Buffer {
    return Buffer.concat(this.chunks);
  }
}

function atomicWrite(path: string, data: Buffer | string) {
  const tmp = `${path}.tmp`;
  writeFileSync(tmp, data);
  renameSync(tmp, path);
}

function checkDim(label: string, payload: Float32Array, dim: number) {
  if (payload.length !== dim) {
    throw new Error(`${label} has ${payload.length} values, expected ${dim}`);
  }
}

export function encodeFeatureStore(store: FeatureStoreData): Buffer {
  const d = store.dims;
  const sections: Array<{ kind: number; dim: number; body: ByteSink; count: number }> = [];

  const vSection = new ByteSink();
  for (const [key, payload] of store.v) {
    checkDim(`V record ${key}`, payload, d.vDim);
    vSection.str(key);
    vSection.floats(payload);
  }
  sections.push({ kind: SECTION_V, dim: d.vDim, body: vSection, count: store.v.size });

  const qSection = new ByteSink();
  for (const [key, payload] of store.q) {
    checkDim(`Q record ${key}`, payload, d.qDim);
    qSection.str(key);
    qSection.floats(payload);
  }
  sections.push({ kind: SECTION_Q, dim: d.qDim, body: qSection, count: store.q.size });

  if (store.dz.size > 0) {
    const dzDim = d.nAnswers + d.zDim;
    const dzSection = new ByteSink();
    for (const [joined, payload] of store.dz) {
      const [imageId, questionId] = joined.split("");
      checkDim(`oracle record ${imageId}/${questionId}`, payload, dzDim);
      dzSection.str(imageId);
      dzSection.str(questionId);
      dzSection.floats(payload);
    }
    sections.push({ kind: SECTION_DZ, dim: dzDim, body: dzSection, count: store.dz.size });
  }

  if (store.table !== null) {
    if (store.table.length !== d.nAnswers) {
      throw new Error(
        `answer table has ${store.table.length} rows, header declares ${d.nAnswers}`,
      );
    }
    const tableSection = new ByteSink();
    store.table.forEach((row, index) => {
      checkDim(`answer row ${index}`, row, d.embDim);
      tableSection.str(String(index));
      tableSection.floats(row);
    });
    sections.push({
      kind: SECTION_TABLE, dim: d.embDim, body: tableSection, count: store.table.length,
    });
  }

  const header = new ByteSink();
  header.raw(Buffer.from(CXFS_MAGIC, "ascii"));
  header.u16(CXFS_VERSION);
  header.u32(d.vDim);
  header.u32(d.qDim);
  header.u32(d.nAnswers);
  header.u32(d.embDim);
  header.u32(d.zDim);
  header.u32(sections.length);
  const headerBytes = header.bytes();

  const out = new ByteSink();
  out.raw(headerBytes);
  out.u32(crc32(headerBytes));
  for (const section of sections) {
    out.u8(section.kind);
    out.u64(section.count);
    out.u32(section.dim);
    out.raw(section.body.bytes());
  }
  return out.bytes();
}

export function writeFeatureStore(store: FeatureStoreData, path: string) {
  atomicWrite(path, encodeFeatureStore(store));
}

export interface ManifestRecord {
  imageId: string;
  questionId: string;
  answerIndex: number;
  candidates: string[];
  truthImageId: string | null;
  truthAnswerIndex: number | null;
}

/** Compact JSON with sorted keys, matching the consumer's encoder byte
 * for byte on strings, integers, nulls, and arrays thereof. */
function compactSortedJson(obj: Record<string, unknown>): string {
  const keys = Object.keys(obj).sort();
  const parts = keys.map((key) => `${JSON.stringify(key)}:${encodeValue(obj[key])}`);
  return `{${parts.join(",")}}`;
}

function encodeValue(value: unknown): string {
  if (value === null) return "null";
  if (Array.isArray(value)) return `[${value.map(encodeValue).join(",")}]`;
  if (typeof value === "object") return compactSortedJson(value as Record<string, unknown>);
  return JSON.stringify(value);
}

export function encodeManifest(records: ManifestRecord[], split = "raw", k = 24): string {
  const header = compactSortedJson({
    counts: null,
    k,
    n_records: records.length,
    split,
    version: 1,
  });
  const crc = crc32(Buffer.from(header, "utf-8")).toString(16).padStart(8, "0");
  const lines = [`${MANIFEST_MAGIC} ${crc} ${header}`];
  for (const record of records) {
    lines.push(compactSortedJson({
      answer_index: record.answerIndex,
      candidates: record.candidates,
      image_id: record.imageId,
      question_id: record.questionId,
      truth_answer_index: record.truthAnswerIndex,
      truth_image_id: record.truthImageId,
      truth_index: null,
    }));
  }
  return lines.join("\n") + "\n";
}

export function writeManifest(records: ManifestRecord[], path: string, split = "raw", k = 24) {
  atomicWrite(path, encodeManifest(records, split, k));
}
