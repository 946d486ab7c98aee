#!/usr/bin/env node
/** Command-line front end for the export pipeline. */

import { parseArgs } from "node:util";
import { HashImageEncoder, HashSentenceEncoder, HashVQAModel } from "./encoders.js";
import { runExport } from "./export.js";

const HELP = `cxrank-export: write a CXFS feature store and raw manifest from VQA-style inputs

required:
  --questions PATH      questions JSON
  --annotations PATH    annotations JSON
  --knn PATH            per-image nearest-neighbor lists JSON
  --store PATH          output feature store (.cxfs)
  --manifest PATH       output raw manifest (.cxm)

optional:
  --complements PATH    complementary-pairs JSON (default: none)
  --images DIR          image directory for content hashing (default: ids only)
  --vocab N             answer vocabulary size (default: 2000)
  --k N                 candidates per example (default: 24)
  --v-dim N             image feature dimension (default: 2048)
  --q-dim N             sentence embedding dimension (default: 2400)
  --z-dim N             VQA multimodal dimension (default: 360)
  --with-vqa            also write answer-distribution + Z records
  --help                this text
`;

export function main(argv: string[]): number {
  const { values } = parseArgs({
    args: argv,
    options: {
      questions: { type: "string" },
      annotations: { type: "string" },
      complements: { type: "string" },
      knn: { type: "string" },
      images: { type: "string" },
      store: { type: "string" },
      manifest: { type: "string" },
      vocab: { type: "string", default: "2000" },
      k: { type: "string", default: "24" },
      "v-dim": { type: "string", default: "2048" },
      "q-dim": { type: "string", default: "2400" },
      "z-dim": { type: "string", default: "360" },
      "with-vqa": { type: "boolean", default: false },
      help: { type: "boolean", default: false },
    },
  });

  if (values.help) {
    process.stdout.write(HELP);
    return 0;
  }
  for (const required of ["questions", "annotations", "knn", "store", "manifest"] as const) {
    if (!values[required]) {
      process.stderr.write(`error: missing --${required}\n${HELP}`);
      return 1;
    }
  }

  const vocabSize = Number(values.vocab);
  try {
    const summary = runExport({
      questionsPath: values.questions!,
      annotationsPath: values.annotations!,
      complementsPath: values.complements ?? null,
      knnPath: values.knn!,
      imagesDir: values.images ?? null,
      imageEncoder: new HashImageEncoder(Number(values["v-dim"])),
      sentenceEncoder: new HashSentenceEncoder(Number(values["q-dim"])),
      vqaModel: values["with-vqa"]
        ? new HashVQAModel(vocabSize, Number(values["z-dim"]))
        : null,
      vocabularySize: vocabSize,
      k: Number(values.k),
      storePath: values.store!,
      manifestPath: values.manifest!,
    });
    process.stdout.write(
      `exported ${summary.records} records, ${summary.images} images, ` +
      `${summary.questions} questions, |A|=${summary.vocabulary.length}, ` +
      `${summary.oracleRecords} oracle records\n`,
    );
    return 0;
  } catch (error) {
    process.stderr.write(`error: ${(error as Error).message}\n`);
    return 1;
  }
}

if (import.meta.url === `file://${process.argv[1]}`) {
  process.exit(main(process.argv.slice(2)));
}
