"""Non-neural counterexample scorers.

Three training-free baselines (random, feature distance, hard negative
mining), the unsupervised embedding scorer that trades answer-similarity
against answer-repetition, and a reference implementation of the older
two-headed ranker (projection alignment + KxK output layer) trained with
a pairwise hinge ranking loss.

All scorers return K raw scores for one example; ranking them is the
caller's job (``core.rank_candidates``). Scores are pure functions of
(example, oracle state, params, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PROB_EPS, AnswerEmbeddingTable, CXExample, key_rng
from .neuralcx import AdamState, adam_step

__all__ = [
    "EmbeddingModelParams",
    "TwoHeadedParams",
    "TwoHeadedTrainConfig",
    "score_random",
    "score_distance",
    "score_hard_negative",
    "score_embedding",
    "answer_similarities",
    "two_headed_score",
    "two_headed_loss",
    "init_two_headed",
    "train_two_headed",
]


def candidate_feature_matrix(example: CXExample, store) -> np.ndarray:
    """(K, v_dim) float64 matrix of candidate image features."""
    return np.stack([
        store.image_features(c) for c in example.candidates.candidate_ids
    ]).astype(np.float64)


def candidate_oracle_outputs(example: CXExample, oracle, store):
    """Per-candidate (probs, z) from one batched oracle evaluation."""
    q = store.question_embedding(example.question_id).astype(np.float64)
    V = candidate_feature_matrix(example, store)
    keys = [(c, example.question_id) for c in example.candidates.candidate_ids]
    return oracle.evaluate_batch(V, q, keys)


def score_random(example: CXExample, seed: int) -> np.ndarray:
    """Uniform scores, deterministic per (example, seed)."""
    rng = key_rng("random-scorer", seed, example.image_id, example.question_id)
    return rng.random(example.k)


def score_distance(example: CXExample, store) -> np.ndarray:
    """Negated L2 distance to the original image: closer is better."""
    v = store.image_features(example.image_id).astype(np.float64)
    V = candidate_feature_matrix(example, store)
    return -np.linalg.norm(V - v[None, :], axis=1)


def score_hard_negative(example: CXExample, oracle, store) -> np.ndarray:
    """Negated probability of the original answer on each candidate."""
    probs, _ = candidate_oracle_outputs(example, oracle, store)
    return -probs[:, example.answer_index]


@dataclass(frozen=True)
class EmbeddingModelParams:
    """Relative weight of answer-similarity vs answer-repetition terms."""

    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0,1], got {self.lam}")


def answer_similarities(table: AnswerEmbeddingTable, answer_index: int) -> np.ndarray:
    """cossim(a, A) for every answer a, with the A entry zeroed.

    Zeroing the original answer implements the a != A exclusion as a dot
    product; callers cache this per distinct answer since it is reused by
    every candidate of every example sharing that answer.
    """
    rows = table.rows.astype(np.float64)
    target = rows[answer_index]
    sims = rows @ target / (np.linalg.norm(rows, axis=1) * np.linalg.norm(target))
    sims[answer_index] = 0.0
    return sims


def score_embedding(example: CXExample, oracle, store, table: AnswerEmbeddingTable,
                    params: EmbeddingModelParams, sim_cache: dict | None = None) -> np.ndarray:
    """Similarity-weighted answer mass minus log-probability of repeating.

    score_i = lam * sum_{a != A} cossim(a, A) P(a|I'_i, Q)
              - (1 - lam) * ln P(A|I'_i, Q)

    Probabilities entering the log are clamped at 1e-12 so degenerate
    oracles cannot produce infinities.
    """
    a = example.answer_index
    if sim_cache is not None and a in sim_cache:
        sims = sim_cache[a]
    else:
        sims = answer_similarities(table, a)
        if sim_cache is not None:
            sim_cache[a] = sims
    probs, _ = candidate_oracle_outputs(example, oracle, store)
    similarity_term = probs @ sims
    repeat_term = np.log(np.maximum(probs[:, a], PROB_EPS))
    return params.lam * similarity_term - (1.0 - params.lam) * repeat_term


@dataclass
class TwoHeadedParams:
    """Projection alignment scorer with a KxK output layer."""

    w_zd: np.ndarray
    b_zd: np.ndarray
    w_ad: np.ndarray
    b_ad: np.ndarray
    w_kk: np.ndarray
    b_kk: np.ndarray
    margin: float = 0.2
    lambda_joint: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        d = self.w_zd.shape[0]
        k = self.w_kk.shape[0]
        if self.w_ad.shape[0] != d or self.b_zd.shape != (d,) or self.b_ad.shape != (d,):
            raise ValueError("projection shapes do not share a common dimension")
        if self.w_kk.shape != (k, k) or self.b_kk.shape != (k,):
            raise ValueError("output layer must be KxK")

    def tensors(self) -> list:
        return [self.w_zd, self.b_zd, self.w_ad, self.b_ad, self.w_kk, self.b_kk]

    def replace_tensors(self, tensors) -> "TwoHeadedParams":
        return TwoHeadedParams(*tensors, margin=self.margin,
                               lambda_joint=self.lambda_joint)


def init_two_headed(seed: int, z_dim: int, emb_dim: int, k: int, d: int = 8,
                    margin: float = 0.2, lambda_joint: float = 1.0) -> TwoHeadedParams:
    rng = key_rng("two-headed-init", seed)
    return TwoHeadedParams(
        w_zd=rng.normal(0.0, 1.0 / np.sqrt(z_dim), (d, z_dim)),
        b_zd=np.zeros(d),
        w_ad=rng.normal(0.0, 1.0 / np.sqrt(emb_dim), (d, emb_dim)),
        b_ad=np.zeros(d),
        w_kk=np.eye(k),
        b_kk=np.zeros(k),
        margin=margin,
        lambda_joint=lambda_joint,
    )


def _two_headed_raw(params: TwoHeadedParams, Z: np.ndarray, a_emb: np.ndarray):
    u = Z @ params.w_zd.T + params.b_zd          # (K, d)
    w = params.w_ad @ a_emb + params.b_ad        # (d,)
    raw = u @ w                                  # (K,)
    return u, w, raw


def two_headed_score(example: CXExample, oracle, store, table: AnswerEmbeddingTable,
                     params: TwoHeadedParams) -> np.ndarray:
    """Alignment of projected candidate embeddings with the projected answer."""
    _, Z = candidate_oracle_outputs(example, oracle, store)
    a_emb = table.rows[example.answer_index].astype(np.float64)
    _, _, raw = _two_headed_raw(params, Z, a_emb)
    return params.w_kk @ raw + params.b_kk


def two_headed_loss(scores, truth_index: int, answer_dist, answer_index: int,
                    params: TwoHeadedParams) -> float:
    """Answer cross-entropy plus the weighted pairwise hinge ranking loss."""
    scores = np.asarray(scores, dtype=np.float64)
    answer_ce = -np.log(max(float(answer_dist.probs[answer_index]), PROB_EPS))
    gaps = params.margin - (scores[truth_index] - scores)
    gaps[truth_index] = 0.0
    return answer_ce + params.lambda_joint * float(np.maximum(gaps, 0.0).sum())


def _hinge_grads(params: TwoHeadedParams, Z: np.ndarray, a_emb: np.ndarray,
                 truth_index: int):
    """Loss value and parameter gradients of the hinge term for one example."""
    u, w, raw = _two_headed_raw(params, Z, a_emb)
    scores = params.w_kk @ raw + params.b_kk
    gaps = params.margin - (scores[truth_index] - scores)
    gaps[truth_index] = 0.0
    active = gaps > 0
    loss = float(gaps[active].sum()) * params.lambda_joint

    d_scores = np.where(active, params.lambda_joint, 0.0)
    d_scores[truth_index] = -params.lambda_joint * active.sum()
    d_raw = params.w_kk.T @ d_scores
    d_u = d_raw[:, None] * w[None, :]
    d_w = u.T @ d_raw
    grads = [
        d_u.T @ Z,                      # w_zd
        d_u.sum(axis=0),                # b_zd
        np.outer(d_w, a_emb),           # w_ad
        d_w,                            # b_ad
        np.outer(d_scores, raw),        # w_kk
        d_scores,                       # b_kk
    ]
    return loss, grads


@dataclass
class TwoHeadedTrainConfig:
    d: int = 8
    margin: float = 0.2
    lambda_joint: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 5
    seed: int = 0


def train_two_headed(train_manifest, oracle, store, table: AnswerEmbeddingTable,
                     config: TwoHeadedTrainConfig) -> TwoHeadedParams:
    """Fit the two-headed reference scorer with Adam on the hinge loss.

    The shared base is the (frozen) oracle, so the answer-head term of the
    joint loss is constant with respect to the head parameters and only
    its hinge component drives updates.
    """
    examples = [ex for ex in train_manifest.examples if ex.truth_index is not None]
    if not examples:
        raise ValueError("two-headed training needs labeled examples")
    k = examples[0].k
    params = init_two_headed(config.seed, z_dim=oracle.dims.z_dim,
                             emb_dim=table.emb_dim, k=k, d=config.d,
                             margin=config.margin, lambda_joint=config.lambda_joint)

    # oracle is frozen during head training: cache Z per example
    cached = []
    rows = table.rows.astype(np.float64)
    for ex in examples:
        _, Z = candidate_oracle_outputs(ex, oracle, store)
        cached.append((Z, rows[ex.answer_index], ex.truth_index))

    state = AdamState.zeros_like(params.tensors())
    rng = key_rng("two-headed-train", config.seed)
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(cached))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            grads = [np.zeros_like(t) for t in params.tensors()]
            for idx in batch:
                Z, a_emb, t_idx = cached[idx]
                _, g = _hinge_grads(params, Z, a_emb, t_idx)
                for acc, part in zip(grads, g):
                    acc += part
            grads = [g / len(batch) for g in grads]
            step += 1
            params = params.replace_tensors(
                adam_step(params.tensors(), grads, state, step,
                          lr=config.learning_rate)
            )
    return params
