"""Counterexample ranking for visual question answering.

Given an original image/question/answer and its K visually-similar
candidate images, score and rank the candidates by their suitability as
counterexamples -- images that would change the answer. The package
provides training-free baselines, an unsupervised answer-embedding
scorer, a supervised neural ranker with feature ablation, a synthetic
data generator with planted ground truth, and an evaluation harness
reporting recall@k.
"""

from .core import (
    AnswerDistribution,
    AnswerEmbeddingTable,
    CandidateSet,
    CXExample,
    ScoredRanking,
    cosine_similarity,
    expected_embedding,
    l2_distance,
    pointwise_product,
    rank_candidates,
)
from .oracle import (
    OracleDims,
    OracleOutput,
    PlantedOracle,
    TableOracle,
    UntrainedOracle,
    oracle_backprop,
    vqa_eval,
)

__version__ = "0.1.0"

__all__ = [
    "AnswerDistribution",
    "AnswerEmbeddingTable",
    "CandidateSet",
    "CXExample",
    "ScoredRanking",
    "cosine_similarity",
    "expected_embedding",
    "l2_distance",
    "pointwise_product",
    "rank_candidates",
    "OracleDims",
    "OracleOutput",
    "PlantedOracle",
    "TableOracle",
    "UntrainedOracle",
    "oracle_backprop",
    "vqa_eval",
    "__version__",
]
