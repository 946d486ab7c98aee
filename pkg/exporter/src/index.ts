export { crc32 } from "./crc32.js";
export {
  encodeFeatureStore,
  encodeManifest,
  writeFeatureStore,
  writeManifest,
  type FeatureStoreData,
  type ManifestRecord,
  type StoreDims,
} from "./formats.js";
export {
  HashImageEncoder,
  HashSentenceEncoder,
  HashVQAModel,
  renormalize,
  type ImageEncoder,
  type SentenceEncoder,
  type VQAModel,
} from "./encoders.js";
export {
  buildVocabulary,
  readAnnotations,
  readComplements,
  readKnnLists,
  readQuestions,
} from "./vqa2.js";
export { runExport, type ExportJob, type ExportSummary } from "./export.js";
