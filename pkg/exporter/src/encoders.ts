/**
 * Encoder boundary. Real deployments plug pretrained image/sentence
 * encoders and a VQA model in behind these interfaces; the bundled
 * implementations are deterministic content-hash projections so the
 * export pipeline runs (and is testable) without model downloads. All
 * implementations must be deterministic in eval mode -- re-exports are
 * expected to be byte-identical.
 */

import { createHash } from "node:crypto";
import { readFileSync, existsSync } from "node:fs";
import { join } from "node:path";

export interface ImageEncoder {
  dim: number;
  /** Encode one image by id; implementations may read imagesDir/<id>. */
  encode(imageId: string, imagesDir: string | null): Float32Array;
}

export interface SentenceEncoder {
  dim: number;
  encode(text: string): Float32Array;
}

export interface VQAModel {
  nAnswers: number;
  zDim: number;
  /** Answer distribution plus multimodal embedding for one pair. */
  evaluate(v: Float32Array, q: Float32Array, key: string): { dist: Float32Array; z: Float32Array };
}

/** splitmix64 stream seeded from a blake2 digest of arbitrary content. */
class KeyedStream {
  private state: bigint;

  constructor(...parts: (string | Uint8Array)[]) {
    const hash = createHash("blake2b512");
    for (const part of parts) hash.update(part);
    this.state = hash.digest().readBigUInt64LE(0);
  }

  next(): number {
    this.state = (this.state + 0x9e3779b97f4a7c15n) & 0xffffffffffffffffn;
    let z = this.state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & 0xffffffffffffffffn;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & 0xffffffffffffffffn;
    z = z ^ (z >> 31n);
    return Number(z >> 11n) / 2 ** 53;
  }

  gaussian(): number {
    // Box-Muller; one value per call keeps the stream layout simple
    const u = Math.max(this.next(), 1e-12);
    const v = this.next();
    return Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * v);
  }

  unitVector(dim: number, scale = 1.0): Float32Array {
    const values = new Float64Array(dim);
    let norm = 0;
    for (let i = 0; i < dim; i++) {
      values[i] = this.gaussian();
      norm += values[i] * values[i];
    }
    norm = Math.sqrt(norm) || 1;
    const out = new Float32Array(dim);
    for (let i = 0; i < dim; i++) out[i] = (values[i] / norm) * scale;
    return out;
  }
}

/** Projects image content (file bytes when present, else the id) to a
 * fixed-norm vector. Stands in for a pooled CNN feature. */
export class HashImageEncoder implements ImageEncoder {
  constructor(public dim: number = 2048, private scale = 2.0) {}

  encode(imageId: string, imagesDir: string | null): Float32Array {
    if (imagesDir) {
      const path = join(imagesDir, imageId);
      if (existsSync(path)) {
        return new KeyedStream("image-bytes", readFileSync(path)).unitVector(this.dim, this.scale);
      }
    }
    return new KeyedStream("image-id", imageId).unitVector(this.dim, this.scale);
  }
}

/** Projects text to a unit vector; stands in for a sentence encoder. */
export class HashSentenceEncoder implements SentenceEncoder {
  constructor(public dim: number = 2400) {}

  encode(text: string): Float32Array {
    return new KeyedStream("sentence", text).unitVector(this.dim);
  }
}

/** Keyed stand-in for a pretrained VQA checkpoint: sharp-ish softmax
 * over keyed logits plus a keyed embedding. */
export class HashVQAModel implements VQAModel {
  constructor(public nAnswers: number = 2000, public zDim: number = 360) {}

  evaluate(_v: Float32Array, _q: Float32Array, key: string): { dist: Float32Array; z: Float32Array } {
    const stream = new KeyedStream("vqa", key);
    const logits = new Float64Array(this.nAnswers);
    for (let i = 0; i < this.nAnswers; i++) logits[i] = stream.gaussian();
    const dist = renormalize(softmax(logits));
    const z = new Float32Array(this.zDim);
    for (let i = 0; i < this.zDim; i++) z[i] = stream.next();
    return { dist, z };
  }
}

function softmax(logits: Float64Array): Float32Array {
  let max = -Infinity;
  for (const x of logits) max = Math.max(max, x);
  let total = 0;
  const out = new Float64Array(logits.length);
  for (let i = 0; i < logits.length; i++) {
    out[i] = Math.exp(logits[i] - max);
    total += out[i];
  }
  const result = new Float32Array(logits.length);
  for (let i = 0; i < logits.length; i++) result[i] = out[i] / total;
  return result;
}

/** Rescale a (possibly truncated) distribution so it sums to one within
 * float32 resolution; the consumer validates this invariant on load. */
export function renormalize(dist: Float32Array): Float32Array {
  let total = 0;
  for (const p of dist) {
    if (p < 0) throw new Error("negative probability mass");
    total += p;
  }
  if (total <= 0) throw new Error("distribution has no mass");
  const out = new Float32Array(dist.length);
  for (let i = 0; i < dist.length; i++) out[i] = dist[i] / total;
  return out;
}
