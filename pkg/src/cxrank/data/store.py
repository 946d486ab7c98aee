"""Binary feature-store format (CXFS).

Layout, all little-endian:

    magic            4 bytes  b"CXFS"
    version          u16
    v_dim            u32      image-feature dimension
    q_dim            u32      question-embedding dimension
    n_answers        u32      answer vocabulary size (0 if absent)
    emb_dim          u32      answer-embedding dimension (0 if absent)
    z_dim            u32      multimodal-embedding dimension (0 if absent)
    section_count    u32
    header_crc       u32      CRC-32 of all preceding header bytes

followed by ``section_count`` sections:

    kind             u8       1=V  2=Q  3=DZ  4=ANSWER_TABLE
    record_count     u64
    dim              u32      payload length in reals
    records:
        key          length-prefixed (u16) UTF-8 id; DZ records carry two
                     ids (image_id then question_id); answer-table keys are
                     the decimal answer index
        payload      dim x float32

Corruption is reported through distinct exception types so callers can
tell a wrong file apart from a damaged one.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..core import AnswerEmbeddingTable

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "StoreDims",
    "FeatureStore",
    "StoreFormatError",
    "StoreMagicError",
    "StoreVersionError",
    "StoreChecksumError",
    "StoreTruncationError",
    "StoreDimensionError",
    "write_feature_store",
    "read_feature_store",
]

MAGIC = b"CXFS"
FORMAT_VERSION = 1

_SECTION_V = 1
_SECTION_Q = 2
_SECTION_DZ = 3
_SECTION_TABLE = 4


class StoreFormatError(Exception):
    """Base class for feature-store format problems."""


class StoreMagicError(StoreFormatError):
    pass


class StoreVersionError(StoreFormatError):
    pass


class StoreChecksumError(StoreFormatError):
    pass


class StoreTruncationError(StoreFormatError):
    def __init__(self, offset: int, wanted: int, got: int):
        self.offset = offset
        super().__init__(
            f"file truncated at byte offset {offset}: wanted {wanted} bytes, got {got}"
        )


class StoreDimensionError(StoreFormatError):
    pass


@dataclass(frozen=True)
class StoreDims:
    v_dim: int
    q_dim: int
    n_answers: int = 0
    emb_dim: int = 0
    z_dim: int = 0


@dataclass
class FeatureStore:
    """In-memory keyed feature records, float32 payloads."""

    dims: StoreDims
    v: dict = field(default_factory=dict)        # image_id -> (v_dim,)
    q: dict = field(default_factory=dict)        # question_id -> (q_dim,)
    dz: dict = field(default_factory=dict)       # (image_id, question_id) -> (dist, z)
    answer_table: AnswerEmbeddingTable | None = None

    def image_features(self, image_id: str) -> np.ndarray:
        try:
            return self.v[image_id]
        except KeyError:
            raise KeyError(f"no image features for {image_id!r}") from None

    def question_embedding(self, question_id: str) -> np.ndarray:
        try:
            return self.q[question_id]
        except KeyError:
            raise KeyError(f"no question embedding for {question_id!r}") from None

    def validate(self) -> None:
        """Check every record against the declared dimensions."""
        for key, vec in self.v.items():
            if vec.shape != (self.dims.v_dim,):
                raise StoreDimensionError(
                    f"V record {key!r} has shape {vec.shape}, expected ({self.dims.v_dim},)"
                )
        for key, vec in self.q.items():
            if vec.shape != (self.dims.q_dim,):
                raise StoreDimensionError(
                    f"Q record {key!r} has shape {vec.shape}, expected ({self.dims.q_dim},)"
                )
        for key, (dist, z) in self.dz.items():
            if dist.shape != (self.dims.n_answers,) or z.shape != (self.dims.z_dim,):
                raise StoreDimensionError(f"oracle record {key!r} has inconsistent shape")
        if self.answer_table is not None:
            rows = self.answer_table.rows
            if rows.shape != (self.dims.n_answers, self.dims.emb_dim):
                raise StoreDimensionError(
                    f"answer table has shape {rows.shape}, expected "
                    f"({self.dims.n_answers}, {self.dims.emb_dim})"
                )

    def validate_coverage(self, manifest) -> None:
        """Every image/question referenced by the manifest must resolve."""
        missing = []
        for ex in manifest.examples:
            if ex.image_id not in self.v:
                missing.append(ex.image_id)
            for cid in ex.candidates.candidate_ids:
                if cid not in self.v:
                    missing.append(cid)
            if ex.question_id not in self.q:
                missing.append(ex.question_id)
            if missing:
                raise KeyError(f"feature store missing records for {missing[:5]!r}")


def _write_str(buf, s: str) -> None:
    data = s.encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValueError(f"id too long to encode: {s[:32]!r}...")
    buf.write(struct.pack("<H", len(data)))
    buf.write(data)


def _write_section(buf, kind: int, dim: int, records) -> None:
    buf.write(struct.pack("<BQI", kind, len(records), dim))
    for keys, payload in records:
        for key in keys:
            _write_str(buf, key)
        arr = np.ascontiguousarray(payload, dtype="<f4")
        if arr.shape != (dim,):
            raise StoreDimensionError(
                f"record {keys!r} has {arr.shape} values, section dim is {dim}"
            )
        buf.write(arr.tobytes())


def write_feature_store(store: FeatureStore, path) -> None:
    """Serialize the store; writes are atomic (temp file + rename)."""
    store.validate()
    d = store.dims
    sections = []
    sections.append((_SECTION_V, d.v_dim,
                     [((k,), v) for k, v in store.v.items()]))
    sections.append((_SECTION_Q, d.q_dim,
                     [((k,), v) for k, v in store.q.items()]))
    if store.dz:
        dz_dim = d.n_answers + d.z_dim
        records = [((img, qid), np.concatenate([dist, z]))
                   for (img, qid), (dist, z) in store.dz.items()]
        sections.append((_SECTION_DZ, dz_dim, records))
    if store.answer_table is not None:
        rows = store.answer_table.rows
        records = [((str(i),), rows[i]) for i in range(rows.shape[0])]
        sections.append((_SECTION_TABLE, d.emb_dim, records))

    header = MAGIC + struct.pack(
        "<HIIIIII", FORMAT_VERSION, d.v_dim, d.q_dim, d.n_answers,
        d.emb_dim, d.z_dim, len(sections)
    )
    buf = io.BytesIO()
    buf.write(header)
    buf.write(struct.pack("<I", zlib.crc32(header)))
    for kind, dim, records in sections:
        _write_section(buf, kind, dim, records)

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, f):
        self.f = f

    def read(self, n: int) -> bytes:
        offset = self.f.tell()
        data = self.f.read(n)
        if len(data) != n:
            raise StoreTruncationError(offset, n, len(data))
        return data

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def read_str(self) -> str:
        (n,) = self.unpack("<H")
        return self.read(n).decode("utf-8")

    def read_payload(self, dim: int) -> np.ndarray:
        data = self.read(dim * 4)
        return np.frombuffer(data, dtype="<f4").copy()


def read_feature_store(path) -> FeatureStore:
    with open(path, "rb") as f:
        r = _Reader(f)
        magic = r.read(4)
        if magic != MAGIC:
            raise StoreMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        rest = r.read(struct.calcsize("<HIIIIII"))
        version, v_dim, q_dim, n_answers, emb_dim, z_dim, n_sections = struct.unpack(
            "<HIIIIII", rest
        )
        (crc,) = r.unpack("<I")
        actual = zlib.crc32(magic + rest)
        if crc != actual:
            raise StoreChecksumError(
                f"header checksum mismatch: stored {crc:#010x}, computed {actual:#010x}"
            )
        if version != FORMAT_VERSION:
            raise StoreVersionError(
                f"unsupported format version {version}, expected {FORMAT_VERSION}"
            )

        dims = StoreDims(v_dim=v_dim, q_dim=q_dim, n_answers=n_answers,
                         emb_dim=emb_dim, z_dim=z_dim)
        store = FeatureStore(dims=dims)
        expected_dims = {
            _SECTION_V: v_dim,
            _SECTION_Q: q_dim,
            _SECTION_DZ: n_answers + z_dim,
            _SECTION_TABLE: emb_dim,
        }
        table_rows: list[np.ndarray] = []
        for _ in range(n_sections):
            kind, count, dim = r.unpack("<BQI")
            if kind not in expected_dims:
                raise StoreFormatError(f"unknown section kind {kind}")
            if dim != expected_dims[kind]:
                raise StoreDimensionError(
                    f"section kind {kind} declares dim {dim}, header implies "
                    f"{expected_dims[kind]}"
                )
            for _ in range(count):
                if kind == _SECTION_V:
                    key = r.read_str()
                    store.v[key] = r.read_payload(dim)
                elif kind == _SECTION_Q:
                    key = r.read_str()
                    store.q[key] = r.read_payload(dim)
                elif kind == _SECTION_DZ:
                    img, qid = r.read_str(), r.read_str()
                    payload = r.read_payload(dim)
                    store.dz[(img, qid)] = (payload[:n_answers], payload[n_answers:])
                else:
                    idx = int(r.read_str())
                    payload = r.read_payload(dim)
                    while len(table_rows) <= idx:
                        table_rows.append(None)
                    table_rows[idx] = payload
        if table_rows:
            if len(table_rows) != n_answers or any(row is None for row in table_rows):
                raise StoreDimensionError(
                    f"answer table has {len(table_rows)} rows, header declares {n_answers}"
                )
            store.answer_table = AnswerEmbeddingTable(np.stack(table_rows))
    store.validate()
    return store
