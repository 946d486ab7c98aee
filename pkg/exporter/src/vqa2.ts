/**
 * Readers for VQA-2.0-style inputs: a questions file, an annotations
 * file, the complementary-pairs file, and per-image nearest-neighbor
 * lists. Numeric ids are carried as decimal strings from here on.
 */

import { readFileSync } from "node:fs";

export interface QuestionRecord {
  questionId: string;
  imageId: string;
  question: string;
}

export interface AnnotationRecord {
  questionId: string;
  imageId: string;
  answer: string;
}

export function readQuestions(path: string): QuestionRecord[] {
  const payload = JSON.parse(readFileSync(path, "utf-8"));
  const rows = payload.questions ?? payload;
  return rows.map((row: any) => ({
    questionId: String(row.question_id),
    imageId: String(row.image_id),
    question: String(row.question),
  }));
}

export function readAnnotations(path: string): AnnotationRecord[] {
  const payload = JSON.parse(readFileSync(path, "utf-8"));
  const rows = payload.annotations ?? payload;
  return rows.map((row: any) => ({
    questionId: String(row.question_id),
    imageId: String(row.image_id),
    answer: String(row.multiple_choice_answer ?? row.answer),
  }));
}

/** image id -> labeled complement image id (and its answer if known) */
export function readComplements(path: string): Map<string, { imageId: string; answer: string | null }> {
  const payload = JSON.parse(readFileSync(path, "utf-8"));
  const out = new Map<string, { imageId: string; answer: string | null }>();
  if (Array.isArray(payload)) {
    for (const entry of payload) {
      if (Array.isArray(entry)) {
        out.set(String(entry[0]), { imageId: String(entry[1]), answer: null });
      } else {
        out.set(String(entry.image_id), {
          imageId: String(entry.complement_image_id),
          answer: entry.complement_answer != null ? String(entry.complement_answer) : null,
        });
      }
    }
    return out;
  }
  for (const [key, value] of Object.entries(payload)) {
    if (typeof value === "string" || typeof value === "number") {
      out.set(String(key), { imageId: String(value), answer: null });
    } else {
      const v = value as any;
      out.set(String(key), {
        imageId: String(v.image_id ?? v.complement_image_id),
        answer: v.answer != null ? String(v.answer) : null,
      });
    }
  }
  return out;
}

/** image id -> neighbor image ids in ascending visual distance */
export function readKnnLists(path: string): Map<string, string[]> {
  const payload = JSON.parse(readFileSync(path, "utf-8"));
  const out = new Map<string, string[]>();
  for (const [key, value] of Object.entries(payload)) {
    out.set(String(key), (value as any[]).map(String));
  }
  return out;
}

/** The most frequent answers, ties broken lexicographically. */
export function buildVocabulary(annotations: AnnotationRecord[], size: number): string[] {
  const counts = new Map<string, number>();
  for (const row of annotations) {
    counts.set(row.answer, (counts.get(row.answer) ?? 0) + 1);
  }
  return [...counts.entries()]
    .sort((a, b) => (b[1] - a[1]) || (a[0] < b[0] ? -1 : 1))
    .slice(0, size)
    .map(([answer]) => answer);
}
