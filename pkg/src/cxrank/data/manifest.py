"""Line-delimited dataset manifests, filtering, and splits.

A manifest file is UTF-8 text: a header line

    CXM1 <crc32-hex> <header-json>

where the checksum covers the header-JSON bytes, followed by one compact
JSON record per example. Text records keep the format diffable; the bulky
numeric payloads live in the binary feature store.

Raw manifests reference the labeled complement by image id
(``truth_image_id``); :func:`build_dataset` resolves it to an index into
the candidate list and drops records whose complement is missing or --
because nearest-neighborhood is not symmetric -- absent from the
candidates.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass

from ..core import CandidateSet, CXExample, key_rng

__all__ = [
    "MANIFEST_MAGIC",
    "ManifestCounts",
    "DatasetManifest",
    "ManifestFormatError",
    "write_manifest",
    "read_manifest",
    "build_dataset",
    "split_dataset",
]

MANIFEST_MAGIC = "CXM1"

SPLIT_TAGS = ("raw", "built", "train", "val", "test")


class ManifestFormatError(Exception):
    pass


@dataclass(frozen=True)
class ManifestCounts:
    total: int
    kept: int
    dropped_no_complement: int
    dropped_knn_asymmetry: int

    def __post_init__(self):
        if self.kept + self.dropped_no_complement + self.dropped_knn_asymmetry != self.total:
            raise ValueError("manifest counts do not add up to the total")


@dataclass
class DatasetManifest:
    examples: list
    split: str
    counts: ManifestCounts | None = None

    def __post_init__(self):
        if self.split not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {self.split!r}")

    def __len__(self) -> int:
        return len(self.examples)


def _record_to_json(ex: CXExample) -> str:
    record = {
        "image_id": ex.image_id,
        "question_id": ex.question_id,
        "answer_index": ex.answer_index,
        "candidates": list(ex.candidates.candidate_ids),
        "truth_image_id": ex.truth_image_id,
        "truth_index": ex.truth_index,
        "truth_answer_index": ex.truth_answer_index,
    }
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def _record_from_json(obj: dict, k: int) -> CXExample:
    return CXExample(
        image_id=obj["image_id"],
        question_id=obj["question_id"],
        answer_index=int(obj["answer_index"]),
        candidates=CandidateSet(tuple(obj["candidates"]), k=k),
        truth_image_id=obj.get("truth_image_id"),
        truth_index=None if obj.get("truth_index") is None else int(obj["truth_index"]),
        truth_answer_index=(None if obj.get("truth_answer_index") is None
                            else int(obj["truth_answer_index"])),
    )


def write_manifest(manifest: DatasetManifest, path) -> None:
    k = manifest.examples[0].k if manifest.examples else 0
    header = {
        "version": 1,
        "split": manifest.split,
        "k": k,
        "n_records": len(manifest.examples),
        "counts": None if manifest.counts is None else {
            "total": manifest.counts.total,
            "kept": manifest.counts.kept,
            "dropped_no_complement": manifest.counts.dropped_no_complement,
            "dropped_knn_asymmetry": manifest.counts.dropped_knn_asymmetry,
        },
    }
    header_json = json.dumps(header, sort_keys=True, separators=(",", ":"))
    crc = zlib.crc32(header_json.encode("utf-8"))
    lines = [f"{MANIFEST_MAGIC} {crc:08x} {header_json}"]
    lines.extend(_record_to_json(ex) for ex in manifest.examples)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines))
        f.write("\n")
    os.replace(tmp, path)


def read_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as f:
        header_line = f.readline()
        if not header_line:
            raise ManifestFormatError("empty file: missing manifest header")
        parts = header_line.rstrip("\n").split(" ", 2)
        if len(parts) != 3 or parts[0] != MANIFEST_MAGIC:
            raise ManifestFormatError(f"bad manifest header: {header_line[:60]!r}")
        crc = zlib.crc32(parts[2].encode("utf-8"))
        if f"{crc:08x}" != parts[1]:
            raise ManifestFormatError(
                f"manifest header checksum mismatch: stored {parts[1]}, computed {crc:08x}"
            )
        try:
            header = json.loads(parts[2])
        except json.JSONDecodeError as e:
            raise ManifestFormatError(f"unparseable manifest header: {e}") from None

        examples = []
        for index, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                examples.append(_record_from_json(obj, k=header["k"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ManifestFormatError(f"malformed record at index {index}: {e}") from None
        if len(examples) != header["n_records"]:
            raise ManifestFormatError(
                f"header promises {header['n_records']} records, found {len(examples)}"
            )

    counts = None
    if header.get("counts"):
        c = header["counts"]
        counts = ManifestCounts(
            total=c["total"], kept=c["kept"],
            dropped_no_complement=c["dropped_no_complement"],
            dropped_knn_asymmetry=c["dropped_knn_asymmetry"],
        )
    return DatasetManifest(examples=examples, split=header["split"], counts=counts)


def build_dataset(raw: DatasetManifest, split: str = "built") -> DatasetManifest:
    """Filter a raw manifest down to usable training examples.

    Drops records without a labeled complement, then records whose
    complement does not appear in their own candidate list, and resolves
    ``truth_index`` for everything that survives. Input order is
    preserved, so rebuilding is deterministic and idempotent.
    """
    kept = []
    dropped_no_complement = 0
    dropped_asymmetry = 0
    for ex in raw.examples:
        if ex.truth_image_id is None:
            dropped_no_complement += 1
            continue
        index = ex.candidates.index_of(ex.truth_image_id)
        if index is None:
            dropped_asymmetry += 1
            continue
        if ex.truth_index == index:
            kept.append(ex)
        else:
            kept.append(CXExample(
                image_id=ex.image_id,
                question_id=ex.question_id,
                answer_index=ex.answer_index,
                candidates=ex.candidates,
                truth_image_id=ex.truth_image_id,
                truth_index=index,
                truth_answer_index=ex.truth_answer_index,
            ))
    counts = ManifestCounts(
        total=len(raw.examples),
        kept=len(kept),
        dropped_no_complement=dropped_no_complement,
        dropped_knn_asymmetry=dropped_asymmetry,
    )
    return DatasetManifest(examples=kept, split=split, counts=counts)


def _trivial_counts(n: int) -> ManifestCounts:
    return ManifestCounts(total=n, kept=n, dropped_no_complement=0,
                          dropped_knn_asymmetry=0)


def split_dataset(manifest: DatasetManifest, val_fraction: float, seed: int,
                  tags=("train", "val")):
    """Disjoint, exhaustive, seeded-shuffle split into two manifests."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0,1), got {val_fraction}")
    n = len(manifest.examples)
    order = key_rng("split", seed).permutation(n)
    n_val = int(n * val_fraction)
    val_idx = sorted(order[:n_val].tolist())
    train_idx = sorted(order[n_val:].tolist())
    train = DatasetManifest(
        examples=[manifest.examples[i] for i in train_idx],
        split=tags[0], counts=_trivial_counts(len(train_idx)),
    )
    val = DatasetManifest(
        examples=[manifest.examples[i] for i in val_idx],
        split=tags[1], counts=_trivial_counts(len(val_idx)),
    )
    return train, val
