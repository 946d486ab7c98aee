"""Metrics and the experiment/ablation runners.

recall@k is the percentage of examples whose labeled counterexample
lands in the top k of the induced permutation. The experiment runner
reproduces the full model grid (baselines, embedding scorer, two-headed
reference, neural ranker under three oracle conditions) on one dataset
with one seed; the ablation runner retrains the neural ranker once per
mask. Cells may run concurrently (``CXRANK_THREADS`` caps the pool) --
each cell owns its oracle and RNG streams, and aggregation order is
fixed, so results are independent of scheduling.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import rank_candidates, stable_seed
from .data.manifest import split_dataset
from .neuralcx import (
    AblationMask,
    NeuralCXConfig,
    TrainDeps,
    evaluate_ranker,
    train,
)
from .oracle import OracleDims, UntrainedOracle
from .scorers import (
    EmbeddingModelParams,
    TwoHeadedTrainConfig,
    score_distance,
    score_embedding,
    score_hard_negative,
    score_random,
    train_two_headed,
    two_headed_score,
)

__all__ = [
    "EvalResult",
    "GridConfig",
    "recall_at_k",
    "rank_histogram",
    "run_experiment",
    "run_ablation",
    "lambda_sweep",
    "results_to_csv",
    "read_results_csv",
]


@dataclass(frozen=True)
class EvalResult:
    model: str
    oracle_mode: str
    mask: str
    recall_at_1: float
    recall_at_5: float
    n_examples: int
    histogram: tuple
    seed: int
    wallclock_s: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.recall_at_1 <= self.recall_at_5 <= 100.0:
            raise ValueError("recalls must satisfy 0 <= r@1 <= r@5 <= 100")
        if sum(self.histogram) != self.n_examples:
            raise ValueError("rank histogram does not sum to the example count")


def _positions(rankings) -> np.ndarray:
    if not rankings:
        raise ValueError("no rankings to evaluate")
    out = np.empty(len(rankings), dtype=np.int64)
    for i, (ranking, truth_index) in enumerate(rankings):
        out[i] = ranking.position_of(truth_index)
    return out


def recall_at_k(rankings, k: int) -> float:
    """Percent of examples whose truth lands in the top k positions."""
    positions = _positions(rankings)
    kk = rankings[0][0].k
    if not 1 <= k <= kk:
        raise ValueError(f"k must be in [1, {kk}], got {k}")
    return 100.0 * float((positions < k).mean())


def rank_histogram(rankings) -> np.ndarray:
    """counts[r] = number of examples whose truth sits at position r."""
    positions = _positions(rankings)
    k = rankings[0][0].k
    return np.bincount(positions, minlength=k)


def summarize(model: str, oracle_mode: str, rankings, seed: int,
              mask: str = "none", wallclock_s: float | None = None) -> EvalResult:
    hist = rank_histogram(rankings)
    return EvalResult(
        model=model, oracle_mode=oracle_mode, mask=mask,
        recall_at_1=recall_at_k(rankings, 1),
        recall_at_5=recall_at_k(rankings, 5),
        n_examples=len(rankings), histogram=tuple(int(c) for c in hist),
        seed=seed, wallclock_s=wallclock_s,
    )


def score_dataset(examples, score_fn) -> list:
    """Apply a per-example scorer and rank, in fixed example order."""
    return [(rank_candidates(score_fn(ex)), ex.truth_index) for ex in examples]


@dataclass
class GridConfig:
    seed: int = 0
    test_fraction: float = 0.5
    val_fraction: float = 0.2
    embedding_lambda: float = 1.0
    neural: NeuralCXConfig = None
    two_headed: TwoHeadedTrainConfig = None
    models: tuple = ("random", "hnm", "embedding", "distance", "two_headed", "neuralcx")
    timing: bool = False


def _max_workers() -> int:
    env = os.environ.get("CXRANK_THREADS", "")
    if env.strip():
        return max(1, int(env))
    return os.cpu_count() or 1


def _run_cells(cells):
    """Run (label, thunk) cells, possibly concurrently, in stable order."""
    workers = min(_max_workers(), len(cells)) or 1
    results = [None] * len(cells)
    if workers == 1:
        for i, (label, thunk) in enumerate(cells):
            results[i] = _run_cell(label, thunk)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, label, thunk) for label, thunk in cells]
            for i, future in enumerate(futures):
                results[i] = future.result()
    return results


def _run_cell(label, thunk):
    try:
        return thunk()
    except Exception as e:
        raise RuntimeError(f"experiment cell {label} failed: {e}") from e


def split_for_training(manifest, config: GridConfig):
    """(train, val, test) split used by every trained cell of a grid."""
    rest, test = split_dataset(manifest, config.test_fraction,
                               stable_seed("grid-test-split", config.seed),
                               tags=("built", "test"))
    train_set, val_set = split_dataset(rest, config.val_fraction,
                                       stable_seed("grid-val-split", config.seed))
    return train_set, val_set, test


def run_experiment(config: GridConfig, manifest, store, truth) -> list:
    """One EvalResult per (model, oracle condition) cell, fixed order."""
    train_set, val_set, test = split_for_training(manifest, config)
    table = store.answer_table
    dims = OracleDims(v_dim=store.dims.v_dim, q_dim=store.dims.q_dim,
                      z_dim=store.dims.z_dim, n_answers=store.dims.n_answers)
    seed = config.seed

    def untrained_oracle():
        return UntrainedOracle(stable_seed("grid-untrained", seed), dims)

    def scored(model, oracle_mode, fn):
        def thunk():
            t0 = time.perf_counter()
            rankings = score_dataset(test.examples, fn)
            wallclock = time.perf_counter() - t0 if config.timing else None
            return summarize(model, oracle_mode, rankings, seed,
                             wallclock_s=wallclock)
        return (f"{model}/{oracle_mode}", thunk)

    def neural_cell(oracle_label):
        def thunk():
            t0 = time.perf_counter()
            if oracle_label == "untrained":
                oracle, mode = untrained_oracle(), "untrained"
            elif oracle_label == "planted":
                oracle, mode = truth.planted_oracle(), "pretrained"
            else:
                oracle, mode = truth.planted_oracle(trainable=True), "trainable"
            deps = TrainDeps(store=store, table=table, oracle=oracle)
            result = train(config.neural, train_set, val_set, deps,
                           oracle_mode=mode)
            rankings = evaluate_ranker(result.params, test, deps, result.layout)
            wallclock = time.perf_counter() - t0 if config.timing else None
            return summarize("neuralcx", oracle_label, rankings, seed,
                             wallclock_s=wallclock)
        return (f"neuralcx/{oracle_label}", thunk)

    def two_headed_cell():
        def thunk():
            t0 = time.perf_counter()
            oracle = truth.planted_oracle()
            params = train_two_headed(train_set, oracle, store, table,
                                      config.two_headed or TwoHeadedTrainConfig(seed=seed))
            rankings = score_dataset(
                test.examples,
                lambda ex: two_headed_score(ex, oracle, store, table, params))
            wallclock = time.perf_counter() - t0 if config.timing else None
            return summarize("two_headed", "planted", rankings, seed,
                             wallclock_s=wallclock)
        return ("two_headed/planted", thunk)

    cells = []
    emb_params = EmbeddingModelParams(config.embedding_lambda)
    if "random" in config.models:
        cells.append(scored("random", "-", lambda ex: score_random(ex, seed)))
    if "hnm" in config.models:
        hnm_untrained = untrained_oracle()
        hnm_planted = truth.planted_oracle()
        cells.append(scored("hnm", "untrained",
                            lambda ex: score_hard_negative(ex, hnm_untrained, store)))
        cells.append(scored("hnm", "planted",
                            lambda ex: score_hard_negative(ex, hnm_planted, store)))
    if "embedding" in config.models:
        emb_untrained = untrained_oracle()
        emb_planted = truth.planted_oracle()
        cache_u: dict = {}
        cache_p: dict = {}
        cells.append(scored("embedding", "untrained",
                            lambda ex: score_embedding(ex, emb_untrained, store,
                                                       table, emb_params, cache_u)))
        cells.append(scored("embedding", "planted",
                            lambda ex: score_embedding(ex, emb_planted, store,
                                                       table, emb_params, cache_p)))
    if "distance" in config.models:
        cells.append(scored("distance", "-", lambda ex: score_distance(ex, store)))
    if "two_headed" in config.models:
        cells.append(two_headed_cell())
    if "neuralcx" in config.models:
        cells.append(neural_cell("untrained"))
        cells.append(neural_cell("planted"))
        cells.append(neural_cell("trainable"))
    return _run_cells(cells)


def run_ablation(masks, config: GridConfig, manifest, store, truth) -> list:
    """Full retrain + evaluation per mask, sorted by recall@5 ascending."""
    train_set, val_set, test = split_for_training(manifest, config)
    table = store.answer_table
    # every cell uses the same frozen planted oracle, so its outputs are
    # shared across retrains through one cache
    oracle = truth.planted_oracle()
    shared_cache: dict = {}

    def cell(mask: AblationMask):
        def thunk():
            t0 = time.perf_counter()
            deps = TrainDeps(store=store, table=table, oracle=oracle,
                             oracle_cache=shared_cache)
            result = train(config.neural, train_set, val_set, deps, mask=mask,
                           oracle_mode="pretrained")
            rankings = evaluate_ranker(result.params, test, deps, result.layout,
                                       mask=mask)
            wallclock = time.perf_counter() - t0 if config.timing else None
            return summarize("neuralcx", "planted", rankings, config.seed,
                             mask=mask.spec_string, wallclock_s=wallclock)
        return (f"ablate/{mask.spec_string}", thunk)

    results = _run_cells([cell(m) for m in masks])
    return sorted(results, key=lambda r: r.recall_at_5)


def lambda_sweep(lambdas, examples, oracle, store, table, seed: int,
                 oracle_label: str = "planted") -> list:
    """Embedding-model recall across a list of lambda values."""
    results = []
    for lam in lambdas:
        params = EmbeddingModelParams(lam)
        cache: dict = {}
        rankings = score_dataset(
            examples, lambda ex: score_embedding(ex, oracle, store, table,
                                                 params, cache))
        result = summarize(f"embedding[lam={lam:.2f}]", oracle_label, rankings, seed)
        results.append((lam, result))
    return results


RESULTS_COLUMNS = ("model", "oracle_mode", "mask", "recall_at_1",
                   "recall_at_5", "n", "seed", "wallclock_s")


def results_to_csv(results, path) -> None:
    """Write the results table; mask specs contain commas, so fields are
    CSV-quoted where needed."""
    import csv

    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(RESULTS_COLUMNS)
        for r in results:
            wallclock = "" if r.wallclock_s is None else f"{r.wallclock_s:.3f}"
            writer.writerow([r.model, r.oracle_mode, r.mask,
                             f"{r.recall_at_1:.2f}", f"{r.recall_at_5:.2f}",
                             r.n_examples, r.seed, wallclock])
    os.replace(tmp, path)


def read_results_csv(path) -> list:
    import csv

    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader, ()))
        if header != RESULTS_COLUMNS:
            raise ValueError(f"unexpected results header: {header!r}")
        rows = []
        for record in reader:
            if not record:
                continue
            model, mode, mask, r1, r5, n, seed, wallclock = record
            rows.append({
                "model": model, "oracle_mode": mode, "mask": mask,
                "recall_at_1": float(r1), "recall_at_5": float(r5),
                "n": int(n), "seed": int(seed),
                "wallclock_s": float(wallclock) if wallclock else None,
            })
    return rows
