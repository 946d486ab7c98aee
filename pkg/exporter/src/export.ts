/**
 * Export pipeline: encode every referenced image and question, build the
 * answer vocabulary and its embedding table, optionally run a VQA model
 * over each (image, question) pair, and emit a CXFS feature store plus a
 * raw (unfiltered) manifest. Filtering stays with the consumer.
 */

import { ImageEncoder, SentenceEncoder, VQAModel } from "./encoders.js";
import {
  FeatureStoreData,
  ManifestRecord,
  writeFeatureStore,
  writeManifest,
} from "./formats.js";
import {
  AnnotationRecord,
  QuestionRecord,
  buildVocabulary,
  readAnnotations,
  readComplements,
  readKnnLists,
  readQuestions,
} from "./vqa2.js";

export interface ExportJob {
  questionsPath: string;
  annotationsPath: string;
  complementsPath: string | null;
  knnPath: string;
  imagesDir: string | null;
  imageEncoder: ImageEncoder;
  sentenceEncoder: SentenceEncoder;
  vqaModel: VQAModel | null;
  vocabularySize: number;
  k: number;
  storePath: string;
  manifestPath: string;
  /** log skipped/odd records instead of printing */
  log?: (message: string) => void;
}

export interface ExportSummary {
  records: number;
  images: number;
  questions: number;
  vocabulary: string[];
  oracleRecords: number;
}

function dzKey(imageId: string, questionId: string): string {
  return `${imageId}${questionId}`;
}

export function runExport(job: ExportJob): ExportSummary {
  const log = job.log ?? ((message: string) => console.error(message));
  const questions = readQuestions(job.questionsPath);
  const annotations = readAnnotations(job.annotationsPath);
  const complements = job.complementsPath ? readComplements(job.complementsPath) : new Map();
  const knn = readKnnLists(job.knnPath);

  const questionById = new Map<string, QuestionRecord>();
  for (const q of questions) questionById.set(q.questionId, q);

  const vocabulary = buildVocabulary(annotations, job.vocabularySize);
  const answerIndex = new Map(vocabulary.map((answer, index) => [answer, index]));

  // one raw record per annotation that has a question and a neighbor list
  const records: ManifestRecord[] = [];
  const imageIds = new Set<string>();
  for (const annotation of annotations) {
    const question = questionById.get(annotation.questionId);
    if (!question) {
      log(`skipping ${annotation.questionId}: no matching question`);
      continue;
    }
    const neighbors = knn.get(annotation.imageId);
    if (!neighbors) {
      log(`skipping ${annotation.questionId}: no neighbor list for image ${annotation.imageId}`);
      continue;
    }
    if (neighbors.length !== job.k) {
      throw new Error(
        `image ${annotation.imageId} has ${neighbors.length} neighbors, expected ${job.k}`,
      );
    }
    const aIndex = answerIndex.get(annotation.answer);
    if (aIndex === undefined) {
      log(`skipping ${annotation.questionId}: answer outside the vocabulary`);
      continue;
    }
    const complement = complements.get(annotation.imageId) ?? null;
    const truthAnswerIndex =
      complement?.answer != null ? answerIndex.get(complement.answer) ?? null : null;

    records.push({
      imageId: annotation.imageId,
      questionId: annotation.questionId,
      answerIndex: aIndex,
      candidates: neighbors,
      truthImageId: complement ? complement.imageId : null,
      truthAnswerIndex,
    });
    imageIds.add(annotation.imageId);
    for (const neighbor of neighbors) imageIds.add(neighbor);
    if (complement) imageIds.add(complement.imageId);
  }

  // referential check: every candidate id must be encodable
  const store: FeatureStoreData = {
    dims: {
      vDim: job.imageEncoder.dim,
      qDim: job.sentenceEncoder.dim,
      nAnswers: vocabulary.length,
      embDim: job.sentenceEncoder.dim,
      zDim: job.vqaModel ? job.vqaModel.zDim : 0,
    },
    v: new Map(),
    q: new Map(),
    dz: new Map(),
    table: null,
  };

  for (const imageId of [...imageIds].sort()) {
    store.v.set(imageId, job.imageEncoder.encode(imageId, job.imagesDir));
  }
  for (const record of records) {
    const question = questionById.get(record.questionId)!;
    store.q.set(record.questionId, job.sentenceEncoder.encode(question.question));
  }
  store.table = vocabulary.map((answer) => job.sentenceEncoder.encode(answer));

  let oracleRecords = 0;
  if (job.vqaModel) {
    const model = job.vqaModel;
    if (model.nAnswers !== vocabulary.length) {
      throw new Error(
        `VQA model emits ${model.nAnswers} answers, vocabulary has ${vocabulary.length}`,
      );
    }
    for (const record of records) {
      const q = store.q.get(record.questionId)!;
      for (const imageId of [record.imageId, ...record.candidates]) {
        const key = dzKey(imageId, record.questionId);
        if (store.dz.has(key)) continue;
        const { dist, z } = model.evaluate(store.v.get(imageId)!, q,
                                           `${imageId}|${record.questionId}`);
        if (dist.length !== vocabulary.length || z.length !== model.zDim) {
          throw new Error(`VQA model output has wrong dimensions for ${key}`);
        }
        const payload = new Float32Array(dist.length + z.length);
        payload.set(dist, 0);
        payload.set(z, dist.length);
        store.dz.set(key, payload);
        oracleRecords += 1;
      }
    }
  }

  writeFeatureStore(store, job.storePath);
  writeManifest(records, job.manifestPath, "raw", job.k);
  return {
    records: records.length,
    images: store.v.size,
    questions: store.q.size,
    vocabulary,
    oracleRecords,
  };
}
