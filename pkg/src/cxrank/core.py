"""Shared domain types and the small vector-math kernel.

Vectors are plain 1-D numpy arrays. Structured values (candidate sets,
examples, rankings, answer distributions) are immutable dataclasses that
validate their invariants on construction. Accumulating arithmetic (dot
products, norms, sums) is done in float64 even when inputs are float32.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AnswerDistribution",
    "AnswerEmbeddingTable",
    "CandidateSet",
    "CXExample",
    "ScoredRanking",
    "cosine_similarity",
    "l2_distance",
    "pointwise_product",
    "expected_embedding",
    "rank_candidates",
    "stable_seed",
    "key_rng",
]

DEFAULT_K = 24

# Floor used when a probability enters a logarithm; keeps degenerate
# oracles (mass exactly 0 on an answer) from producing infinities.
PROB_EPS = 1e-12


def stable_seed(*parts) -> int:
    """Derive a 64-bit seed from a tuple of hashable parts.

    Hash-based (blake2b), so results do not depend on process state,
    evaluation order, or platform. Every piece of keyed randomness in the
    package (planted oracles, per-example scoring noise, ablation noise)
    goes through here.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def key_rng(*parts) -> np.random.Generator:
    """A fresh numpy Generator seeded from ``stable_seed(*parts)``."""
    return np.random.Generator(np.random.PCG64(stable_seed(*parts)))


def _as_vector(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def _check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise ValueError(
            f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}"
        )


@dataclass(frozen=True)
class AnswerDistribution:
    """Probability vector over the discrete answer vocabulary."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 1:
            raise ValueError("answer distribution must be 1-D")
        if not np.all(np.isfinite(probs)):
            raise ValueError("answer distribution contains non-finite values")
        if np.any(probs < 0):
            raise ValueError("answer distribution contains negative mass")
        total = float(probs.sum())
        if abs(total - 1.0) > 1e-5:
            raise ValueError(f"answer distribution sums to {total}, not 1")

    @property
    def n_answers(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class AnswerEmbeddingTable:
    """Dense embedding row per answer class (|A| x d_emb)."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows)
        object.__setattr__(self, "rows", rows)
        if rows.ndim != 2:
            raise ValueError("embedding table must be 2-D")
        norms = np.linalg.norm(rows.astype(np.float64), axis=1)
        if np.any(norms == 0.0):
            bad = int(np.argmin(norms))
            raise ValueError(f"embedding table row {bad} is all-zero")

    @property
    def n_answers(self) -> int:
        return self.rows.shape[0]

    @property
    def emb_dim(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class CandidateSet:
    """The K nearest-neighbor image ids, closest first."""

    candidate_ids: tuple
    k: int = DEFAULT_K

    def __post_init__(self):
        ids = tuple(self.candidate_ids)
        object.__setattr__(self, "candidate_ids", ids)
        if len(ids) != self.k:
            raise ValueError(f"expected {self.k} candidates, got {len(ids)}")
        if len(set(ids)) != len(ids):
            raise ValueError("candidate ids are not unique")

    def index_of(self, image_id: str) -> int | None:
        try:
            return self.candidate_ids.index(image_id)
        except ValueError:
            return None


@dataclass(frozen=True)
class CXExample:
    """One counterexample-prediction instance.

    Raw (unfiltered) records reference their labeled complement by image
    id; ``truth_index`` is resolved against the candidate list when a
    dataset is built, and stays None when the complement is missing from
    the candidates.
    """

    image_id: str
    question_id: str
    answer_index: int
    candidates: CandidateSet
    truth_image_id: str | None = None
    truth_index: int | None = None
    truth_answer_index: int | None = None

    def __post_init__(self):
        if self.truth_index is not None:
            if not 0 <= self.truth_index < self.candidates.k:
                raise ValueError(
                    f"truth_index {self.truth_index} outside [0, {self.candidates.k})"
                )

    @property
    def k(self) -> int:
        return self.candidates.k

    @property
    def labeled(self) -> bool:
        return self.truth_image_id is not None


@dataclass(frozen=True)
class ScoredRanking:
    """K candidate scores plus the induced permutation (best first)."""

    scores: np.ndarray
    permutation: np.ndarray = field(default=None)

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        perm = np.asarray(self.permutation)
        object.__setattr__(self, "permutation", perm)
        k = scores.shape[0]
        if sorted(perm.tolist()) != list(range(k)):
            raise ValueError("permutation is not a permutation of 0..K-1")

    @property
    def k(self) -> int:
        return self.scores.shape[0]

    def position_of(self, candidate_index: int) -> int:
        return int(np.nonzero(self.permutation == candidate_index)[0][0])


def cosine_similarity(a, b) -> float:
    """a.b / (|a||b|), in [-1, 1]. Zero vectors are rejected."""
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    _check_same_dim(a, b)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero vector")
    return float(np.dot(a, b) / (na * nb))


def l2_distance(a, b) -> float:
    """Euclidean distance between two vectors of equal dimension."""
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    _check_same_dim(a, b)
    return float(np.linalg.norm(a - b))


def pointwise_product(a, b) -> np.ndarray:
    """Elementwise product of two vectors of equal dimension."""
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    _check_same_dim(a, b)
    return a * b


def expected_embedding(table: AnswerEmbeddingTable, dist: AnswerDistribution) -> np.ndarray:
    """Distribution-weighted mean of the embedding rows: rows^T . probs."""
    if table.n_answers != dist.n_answers:
        raise ValueError(
            f"table has {table.n_answers} answers, distribution has {dist.n_answers}"
        )
    return table.rows.astype(np.float64).T @ dist.probs


def rank_candidates(scores) -> ScoredRanking:
    """Sort candidates by descending score, ties broken by ascending index.

    A stable sort on the negated scores gives exactly that tie-breaking
    rule, which keeps recall@k reproducible when scorers emit equal scores.
    """
    scores = _as_vector(scores, "scores")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain NaN or infinity")
    perm = np.argsort(-scores, kind="stable")
    return ScoredRanking(scores=scores, permutation=perm)
