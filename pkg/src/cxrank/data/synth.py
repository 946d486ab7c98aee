"""Synthetic dataset generator with planted ground truth.

The generator manufactures a raw manifest plus feature store whose
statistics mirror the documented quirks of the real data: the labeled
counterexample is biased toward low nearest-neighbor ranks (truncated
geometric, fitted so the top-5 mass hits ``rank_skew``), a fraction of
labels repeat the original answer, a fraction of records carry no label
at all, and a further fraction reference a complement that is missing
from the candidate list.

Answers live on the unit sphere in a handful of semantic clusters so
that answer-embedding similarity carries signal: the planted answer of a
true counterexample tends to fall in the original answer's cluster,
while distractor candidates repeat the original answer or answer
something unrelated. Independently, a fraction of true counterexamples
get their feature vector tilted toward a global direction (at unchanged
distance from the original image), giving a learnable visual cue that
plain feature distance cannot see.

All randomness is a pure function of (seed, example index), so
regeneration is bitwise reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq

from ..core import AnswerEmbeddingTable, CandidateSet, CXExample, key_rng
from ..oracle import OracleDims, PlantedOracle
from .manifest import DatasetManifest
from .store import FeatureStore, StoreDims

__all__ = [
    "SyntheticSpec",
    "GeneratorTruth",
    "generate_synthetic",
    "fit_truncated_geometric",
    "write_truth",
    "read_truth",
]

TOP_RANKS = 5


@dataclass(frozen=True)
class SyntheticSpec:
    n_examples: int
    seed: int
    k: int = 24
    n_answers: int = 32
    v_dim: int = 64
    q_dim: int = 32
    emb_dim: int = 16
    z_dim: int = 16
    rank_skew: float = 0.44
    same_answer_rate: float = 0.09
    no_complement_rate: float = 0.22
    asymmetry_rate: float = 0.03
    n_clusters: int = 6
    cluster_spread: float = 0.55
    # answer priors are heavily skewed in the wild (yes/no-style answers
    # dominate); a dominant cluster gives the answer features a learnable
    # marginal structure on top of the per-example cluster relation
    dominant_cluster_rate: float = 0.8
    truth_near_rate: float = 0.75
    distractor_same_rate: float = 0.25
    distractor_near_rate: float = 0.08
    visual_mark_rate: float = 0.25
    visual_mark_strength: float = 0.55
    # nearest neighbors sit in a narrow distance band: base + slope*rank.
    # A wide band would let feature magnitude leak rank information into
    # any smooth function of the features, which nothing real exhibits.
    # Image features share a fixed norm (encoder convention) and distances
    # are small fractions of it.
    feature_scale: float = 2.0
    distance_base: float = 0.5
    distance_slope: float = 0.005
    include_oracle_records: bool = False
    oracle_accuracy: float = 0.477
    oracle_sharpness: float = 4.0
    oracle_tail_noise: float = 0.6

    def __post_init__(self):
        if self.n_examples < 0:
            raise ValueError("n_examples must be non-negative")
        if self.k < 2:
            raise ValueError("need at least two candidates")
        for name in ("rank_skew", "same_answer_rate", "no_complement_rate",
                     "asymmetry_rate", "dominant_cluster_rate", "truth_near_rate",
                     "distractor_same_rate", "distractor_near_rate",
                     "visual_mark_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {value}")
        if self.k <= TOP_RANKS:
            raise ValueError(f"k must exceed {TOP_RANKS} for the rank-skew fit")
        if self.rank_skew <= TOP_RANKS / self.k:
            raise ValueError(
                f"rank_skew {self.rank_skew} is infeasible: the uniform "
                f"distribution already gives {TOP_RANKS}/{self.k} = {TOP_RANKS / self.k:.4f}"
            )
        if self.n_answers < 2 * self.n_clusters:
            raise ValueError("need at least two answers per cluster")

    @property
    def oracle_dims(self) -> OracleDims:
        return OracleDims(v_dim=self.v_dim, q_dim=self.q_dim,
                          z_dim=self.z_dim, n_answers=self.n_answers)


@dataclass
class GeneratorTruth:
    """Everything the generator planted, for oracles and verification."""

    spec: SyntheticSpec
    planted: dict                      # (image_id, question_id) -> answer index
    truth_ranks: dict = field(default_factory=dict)    # question_id -> rank or None
    visual_marks: dict = field(default_factory=dict)   # question_id -> bool
    status: dict = field(default_factory=dict)         # question_id -> ok|no_complement|asymmetric
    geometric_p: float = 0.0

    def planted_oracle(self, trainable: bool = False) -> PlantedOracle:
        s = self.spec
        return PlantedOracle(
            planted=self.planted, accuracy=s.oracle_accuracy,
            sharpness=s.oracle_sharpness, dims=s.oracle_dims,
            seed=s.seed, tail_noise=s.oracle_tail_noise, trainable=trainable,
        )


def fit_truncated_geometric(k: int, top_m: int, target: float) -> float:
    """Success probability p with P(rank index < top_m) == target.

    The rank index r in 0..k-1 has mass proportional to (1-p)^r; the
    top-m mass is continuous and increasing in p, from top_m/k at p -> 0
    to 1 at p -> 1, so a bracketed root always exists for feasible
    targets.
    """

    def top_mass(p: float) -> float:
        q = 1.0 - p
        return (1.0 - q ** top_m) / (1.0 - q ** k)

    return brentq(lambda p: top_mass(p) - target, 1e-12, 1.0 - 1e-12, xtol=1e-12)


def _sample_rank(rng: np.random.Generator, k: int, p: float) -> int:
    q = 1.0 - p
    weights = q ** np.arange(k)
    cdf = np.cumsum(weights / weights.sum())
    return int(np.searchsorted(cdf, rng.random(), side="right"))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _answer_table(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Unit-sphere answer embeddings in a few semantic clusters.

    Clusters are spaced along one dominant axis (embeddings in the wild
    carry strong principal components) with a per-cluster orthogonal
    offset, so cosine similarity is graded: highest within a cluster,
    moderate for neighboring clusters, low across the scale.
    """
    axis = _unit(rng.normal(0.0, 1.0, spec.emb_dim))
    positions = np.linspace(-1.0, 1.0, spec.n_clusters)
    centers = np.empty((spec.n_clusters, spec.emb_dim))
    for c in range(spec.n_clusters):
        offset = rng.normal(0.0, 1.0, spec.emb_dim)
        offset -= (offset @ axis) * axis
        centers[c] = _unit(positions[c] * axis + 0.8 * _unit(offset))
    rows = np.empty((spec.n_answers, spec.emb_dim))
    for a in range(spec.n_answers):
        center = centers[a % spec.n_clusters]
        noise = rng.normal(0.0, 1.0, spec.emb_dim)
        rows[a] = _unit(center + spec.cluster_spread * _unit(noise))
    return rows.astype(np.float32)


def _cluster_members(spec: SyntheticSpec, answer: int) -> np.ndarray:
    members = np.arange(answer % spec.n_clusters, spec.n_answers, spec.n_clusters)
    return members[members != answer]


def _distractor_answer(spec: SyntheticSpec, rng: np.random.Generator, a: int) -> int:
    u = rng.random()
    if u < spec.distractor_same_rate:
        return a
    if u < spec.distractor_same_rate + spec.distractor_near_rate:
        members = _cluster_members(spec, a)
        return int(rng.choice(members))
    r = int(rng.integers(spec.n_answers - 1))
    return r + (1 if r >= a else 0)


def _truth_answer(spec: SyntheticSpec, rng: np.random.Generator, a: int) -> int:
    if rng.random() < spec.same_answer_rate:
        return a
    if rng.random() < spec.truth_near_rate:
        members = _cluster_members(spec, a)
        return int(rng.choice(members))
    r = int(rng.integers(spec.n_answers - 1))
    return r + (1 if r >= a else 0)


def generate_synthetic(spec: SyntheticSpec):
    """Build (raw manifest, feature store, generator truth) for a spec."""
    geometric_p = fit_truncated_geometric(spec.k, TOP_RANKS, spec.rank_skew)
    global_rng = key_rng("synth-global", spec.seed)
    table_rows = _answer_table(spec, global_rng)

    store = FeatureStore(dims=StoreDims(
        v_dim=spec.v_dim, q_dim=spec.q_dim, n_answers=spec.n_answers,
        emb_dim=spec.emb_dim, z_dim=spec.z_dim,
    ))
    store.answer_table = AnswerEmbeddingTable(table_rows)
    truth = GeneratorTruth(spec=spec, planted={}, geometric_p=geometric_p)
    examples = []

    for i in range(spec.n_examples):
        rng = key_rng("synth-example", spec.seed, i)
        qid = f"q{i:06d}"
        orig_id = f"i{i:06d}o"
        cand_ids = tuple(f"i{i:06d}c{j:02d}" for j in range(spec.k))

        v_dir = _unit(rng.normal(0.0, 1.0, spec.v_dim))
        v = spec.feature_scale * v_dir
        # bounded non-negative activations, like pooled encoder outputs;
        # questions carry no counterexample signal by construction
        q = rng.uniform(0.0, 1.0, spec.q_dim)
        if rng.random() < spec.dominant_cluster_rate:
            members = np.arange(0, spec.n_answers, spec.n_clusters)
            answer = int(rng.choice(members))
        else:
            rest = np.arange(spec.n_answers)
            rest = rest[rest % spec.n_clusters != 0]
            answer = int(rng.choice(rest))

        if rng.random() < spec.no_complement_rate:
            status = "no_complement"
        elif rng.random() < spec.asymmetry_rate:
            status = "asymmetric"
        else:
            status = "ok"

        # Candidate geometry: strictly increasing distances define the
        # nearest-neighbor order; directions are isotropic except for the
        # optional counterexample tilt, which preserves the distance.
        distances = spec.distance_base + spec.distance_slope * (
            np.arange(spec.k) + rng.uniform(0.1, 0.9, spec.k))
        directions = rng.normal(0.0, 1.0, (spec.k, spec.v_dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)

        truth_rank = None
        truth_answer = None
        marked = False
        if status != "no_complement":
            truth_rank = _sample_rank(rng, spec.k, geometric_p)
            truth_answer = _truth_answer(spec, rng, answer)
            marked = rng.random() < spec.visual_mark_rate
            # true counterexamples tend to lie along the original image's
            # own direction (visually alike beyond raw distance). The
            # alignment is shifted in mean but keeps the spread of an
            # unmarked candidate, so the cue surfaces in the
            # pointwise-product feature without distorting the overall
            # direction geometry that distance-free scorers see.
            if marked and status == "ok":
                sigma = 1.0 / np.sqrt(spec.v_dim)
                c = np.clip(rng.normal(spec.visual_mark_strength, sigma), -0.95, 0.95)
                perp = rng.normal(0.0, 1.0, spec.v_dim)
                perp -= (perp @ v_dir) * v_dir
                directions[truth_rank] = c * v_dir + np.sqrt(1.0 - c * c) * _unit(perp)

        candidates_v = (v[None, :] + distances[:, None] * directions).astype(np.float32)

        store.v[orig_id] = v.astype(np.float32)
        for j, cid in enumerate(cand_ids):
            store.v[cid] = candidates_v[j]
        store.q[qid] = q.astype(np.float32)

        truth.planted[(orig_id, qid)] = answer
        for j, cid in enumerate(cand_ids):
            if status == "ok" and j == truth_rank:
                truth.planted[(cid, qid)] = truth_answer
            else:
                truth.planted[(cid, qid)] = _distractor_answer(spec, rng, answer)

        truth_image_id = None
        if status == "ok":
            truth_image_id = cand_ids[truth_rank]
        elif status == "asymmetric":
            # the labeled complement fell outside this example's own
            # neighbor list; it still exists as an image
            truth_image_id = f"i{i:06d}x"
            phantom_dir = _unit(rng.normal(0.0, 1.0, spec.v_dim))
            phantom_dist = spec.distance_base + spec.distance_slope * (spec.k + 1.5)
            phantom_v = v + phantom_dist * phantom_dir
            store.v[truth_image_id] = phantom_v.astype(np.float32)
            truth.planted[(truth_image_id, qid)] = truth_answer

        truth.truth_ranks[qid] = truth_rank if status == "ok" else None
        truth.visual_marks[qid] = bool(marked and status == "ok")
        truth.status[qid] = status

        examples.append(CXExample(
            image_id=orig_id,
            question_id=qid,
            answer_index=answer,
            candidates=CandidateSet(cand_ids, k=spec.k),
            truth_image_id=truth_image_id,
            truth_index=None,
            truth_answer_index=truth_answer if status != "no_complement" else None,
        ))

    if spec.include_oracle_records:
        oracle = truth.planted_oracle()
        for ex in examples:
            ids = (ex.image_id,) + ex.candidates.candidate_ids
            V = np.stack([store.v[i] for i in ids]).astype(np.float64)
            keys = [(i, ex.question_id) for i in ids]
            probs, z = oracle.evaluate_batch(V, store.q[ex.question_id].astype(np.float64), keys)
            for key, p, zrow in zip(keys, probs, z):
                store.dz[key] = (p.astype(np.float32), zrow.astype(np.float32))

    manifest = DatasetManifest(examples=examples, split="raw", counts=None)
    return manifest, store, truth


def write_truth(truth: GeneratorTruth, path) -> None:
    payload = {
        "spec": asdict(truth.spec),
        "geometric_p": truth.geometric_p,
        "planted": {f"{img}\x1f{qid}": a for (img, qid), a in truth.planted.items()},
        "truth_ranks": truth.truth_ranks,
        "visual_marks": truth.visual_marks,
        "status": truth.status,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    os.replace(tmp, path)


def read_truth(path) -> GeneratorTruth:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    spec = SyntheticSpec(**payload["spec"])
    planted = {}
    for joined, a in payload["planted"].items():
        img, qid = joined.split("\x1f")
        planted[(img, qid)] = int(a)
    return GeneratorTruth(
        spec=spec,
        planted=planted,
        truth_ranks={k: v for k, v in payload["truth_ranks"].items()},
        visual_marks=payload["visual_marks"],
        status=payload["status"],
        geometric_p=payload["geometric_p"],
    )
