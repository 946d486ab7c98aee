"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. Full-scale reference numbers are display-only fixtures; every
assertion here is a property of the desk-scale synthetic pipeline at the
stated tolerance. The grid/ablation training cells dominate the runtime.
"""

import os
import subprocess
import sys

import numpy as np
import pytest

from cxrank.core import key_rng, stable_seed
from cxrank.data import (
    StoreChecksumError,
    StoreMagicError,
    StoreTruncationError,
    StoreVersionError,
    SyntheticSpec,
    build_dataset,
    generate_synthetic,
    read_feature_store,
    write_feature_store,
)
from cxrank.evaluation import (
    GridConfig,
    lambda_sweep,
    rank_histogram,
    recall_at_k,
    run_ablation,
    run_experiment,
    score_dataset,
    split_for_training,
)
from cxrank.neuralcx import (
    NeuralCXConfig,
    adam_step,
    AdamState,
    backward,
    candidate_loss,
    desk_feature_dims,
    forward,
    init_mlp,
    parse_mask,
)
from cxrank.report import write_lambda_sweep_csv
from cxrank.scorers import (
    EmbeddingModelParams,
    init_two_headed,
    score_distance,
    score_embedding,
    score_random,
    two_headed_loss,
)
from cxrank.core import AnswerDistribution

ACCEPT_DATA_SEED = 7
ACCEPT_GRID_SEED = 11
CHANCE_AT_5 = 100.0 * 5 / 24
CHANCE_AT_1 = 100.0 / 24


def _report(criterion: str, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[{criterion}] {status}: {detail}")


@pytest.fixture(scope="module")
def dataset():
    spec = SyntheticSpec(n_examples=14_000, seed=ACCEPT_DATA_SEED)
    manifest, store, truth = generate_synthetic(spec)
    built = build_dataset(manifest)
    assert built.counts.kept >= 10_000
    return spec, manifest, built, store, truth


@pytest.fixture(scope="module")
def grid_config(dataset):
    spec, manifest, built, store, truth = dataset
    d = store.dims
    neural = NeuralCXConfig(
        n_layers=2, hidden_units=64, dropout_p=0.25, learning_rate=1.5e-3,
        batch_size=64, max_epochs=18, patience=5, seed=ACCEPT_GRID_SEED,
        feature_dims=desk_feature_dims(d.v_dim, d.q_dim, d.emb_dim, d.z_dim, spec.k),
    )
    return GridConfig(seed=ACCEPT_GRID_SEED, test_fraction=0.55, val_fraction=0.27,
                      embedding_lambda=1.0, neural=neural)


@pytest.fixture(scope="module")
def grid_results(dataset, grid_config):
    spec, manifest, built, store, truth = dataset
    results = run_experiment(grid_config, built, store, truth)
    return {(r.model, r.oracle_mode): r for r in results}


@pytest.fixture(scope="module")
def ablation_results(dataset, grid_config):
    spec, manifest, built, store, truth = dataset
    masks = [parse_mask(s, noise_seed=5)
             for s in ("none", "V,Vm,Vd,Rank", "A", "Q", "Z", "all")]
    results = run_ablation(masks, grid_config, built, store, truth)
    return {r.mask: r for r in results}


class TestCriterion1MetricAnalytics:
    def test_random_scorer_matches_analytic_rates(self, dataset):
        spec, manifest, built, store, truth = dataset
        examples = built.examples[:10_000]
        rankings = score_dataset(examples, lambda ex: score_random(ex, 123))
        r1 = recall_at_k(rankings, 1)
        r5 = recall_at_k(rankings, 5)
        ok = abs(r1 - CHANCE_AT_1) <= 0.5 and abs(r5 - CHANCE_AT_5) <= 1.0
        _report("criterion 1", ok,
                f"random scorer n=10000: recall@1 {r1:.2f} (4.17+-0.5), "
                f"recall@5 {r5:.2f} (20.83+-1.0)")
        assert ok


class TestCriterion2GeneratorStatistics:
    def test_planted_statistics(self, dataset):
        spec, manifest, built, store, truth = dataset
        assert len(manifest.examples) >= 10_000
        ranks = np.array([ex.truth_index for ex in built.examples])
        skew = float((ranks < 5).mean())
        same = float(np.mean([ex.truth_answer_index == ex.answer_index
                              for ex in built.examples]))
        drop = built.counts.dropped_no_complement / built.counts.total
        ok = (abs(skew - 0.44) <= 0.02 and abs(same - 0.09) <= 0.01
              and abs(drop - 0.22) <= 0.015)
        _report("criterion 2", ok,
                f"P(rank<=5) {skew:.4f} (0.44+-0.02), same-answer {same:.4f} "
                f"(0.09+-0.01), no-complement drop {drop:.4f} (0.22+-0.015)")
        assert ok


class TestCriterion3DistanceBaseline:
    def test_recall_equals_histogram_mass_and_skew(self, dataset):
        spec, manifest, built, store, truth = dataset
        rankings = score_dataset(built.examples, lambda ex: score_distance(ex, store))
        r5 = recall_at_k(rankings, 5)
        hist = rank_histogram(rankings)
        mass = 100.0 * hist[:5].sum() / hist.sum()
        exact = r5 == pytest.approx(mass, abs=1e-12)
        near_skew = abs(r5 - 100.0 * spec.rank_skew) <= 2.0
        ok = exact and near_skew
        _report("criterion 3", ok,
                f"distance recall@5 {r5:.2f} == top-5 mass {mass:.2f}, "
                f"planted skew {100 * spec.rank_skew:.1f}+-2")
        assert ok


class TestCriterion4GridOrdering:
    def test_table_ordering(self, grid_results):
        g = grid_results
        rnd = g[("random", "-")].recall_at_5
        hnm_u = g[("hnm", "untrained")].recall_at_5
        hnm_p = g[("hnm", "planted")].recall_at_5
        emb_u = g[("embedding", "untrained")].recall_at_5
        emb_p = g[("embedding", "planted")].recall_at_5
        dist = g[("distance", "-")].recall_at_5
        n_u = g[("neuralcx", "untrained")].recall_at_5
        n_p = g[("neuralcx", "planted")].recall_at_5
        n_t = g[("neuralcx", "trainable")].recall_at_5
        n = g[("random", "-")].n_examples

        checks = [
            ("random ~ hnm(untrained) within 1.5", abs(rnd - hnm_u) <= 1.5),
            ("hnm(planted) > random by >= 1", hnm_p - rnd >= 1.0),
            ("embedding(planted) > hnm(planted) by >= 3", emb_p - hnm_p >= 3.0),
            ("distance > embedding(planted)", dist > emb_p),
            ("neuralcx(untrained) > distance by >= 5", n_u - dist >= 5.0),
            ("neuralcx(planted) >= neuralcx(untrained)", n_p >= n_u),
            ("neuralcx(trainable) >= neuralcx(planted) - 0.5", n_t >= n_p - 0.5),
            ("embedding(untrained) ~ chance within 1.5",
             abs(emb_u - CHANCE_AT_5) <= 1.5),
            ("test split has >= 5000 examples", n >= 5000),
        ]
        ok = all(flag for _, flag in checks)
        detail = (f"n={n} rnd {rnd:.2f} hnm_u {hnm_u:.2f} hnm_p {hnm_p:.2f} "
                  f"emb_u {emb_u:.2f} emb_p {emb_p:.2f} dist {dist:.2f} "
                  f"ncx {n_u:.2f}/{n_p:.2f}/{n_t:.2f}")
        _report("criterion 4", ok, detail)
        for name, flag in checks:
            assert flag, f"{name} -- {detail}"


class TestCriterion5Ablations:
    def test_ablation_directions(self, ablation_results):
        a = ablation_results
        base = a["none"].recall_at_5
        visual_cost = base - a["V,Vm,Vd,Rank"].recall_at_5
        a_cost = base - a["A"].recall_at_5
        q_cost = base - a["Q"].recall_at_5
        z_cost = base - a["Z"].recall_at_5
        all_r5 = a["all"].recall_at_5

        checks = [
            ("all-visual ablation costs >= 5", visual_cost >= 5.0),
            ("A ablation costs >= 1", a_cost >= 1.0),
            ("Q ablation costs < 1", q_cost < 1.0),
            ("Z ablation costs < 1", z_cost < 1.0),
            ("all-features ablation within 2 of chance",
             abs(all_r5 - CHANCE_AT_5) <= 2.0),
        ]
        ok = all(flag for _, flag in checks)
        detail = (f"base {base:.2f}, visual -{visual_cost:.2f}, A -{a_cost:.2f}, "
                  f"Q -{q_cost:.2f}, Z -{z_cost:.2f}, all {all_r5:.2f} "
                  f"(chance {CHANCE_AT_5:.2f})")
        _report("criterion 5", ok, detail)
        for name, flag in checks:
            assert flag, f"{name} -- {detail}"


class TestCriterion6NumericalCore:
    def test_numerics(self):
        # gradient check across depths and widths
        worst = 0.0
        for n_layers in (1, 2, 3):
            for hidden in (4, 16, 64):
                worst = max(worst, _gradcheck(n_layers, hidden))
        grad_ok = worst < 1e-4

        loss_err = abs(candidate_loss(np.zeros(24), 0) - np.log(24))
        loss_ok = loss_err <= 1e-9

        theta = [np.array([1.0, 1.0])]
        state = AdamState.zeros_like(theta)
        for t in range(1, 201):
            theta = adam_step(theta, [theta[0].copy()], state, t, lr=0.05)
        adam_ok = float(np.linalg.norm(theta[0])) < 1e-2

        params = init_two_headed(0, z_dim=2, emb_dim=2, k=3, d=2, margin=0.5)
        hinge = two_headed_loss(np.array([1.0, 2.0, 1.6]), 1,
                                AnswerDistribution(np.array([1.0, 0.0, 0.0])),
                                0, params)
        hinge_ok = abs(hinge - 0.1) <= 1e-9

        # embedding-score hand example: lam=1, cossims (x, 0.5, -0.2),
        # P=(0.2, 0.5, 0.3) -> 0.5*0.5 - 0.2*0.3 = 0.19
        sims = np.array([0.0, 0.5, -0.2])
        p = np.array([0.2, 0.5, 0.3])
        eq1 = float(sims @ p)
        eq1_ok = abs(eq1 - 0.19) <= 1e-9

        ok = grad_ok and loss_ok and adam_ok and hinge_ok and eq1_ok
        _report("criterion 6", ok,
                f"gradcheck max rel err {worst:.2e} (<1e-4), ln24 err {loss_err:.1e}, "
                f"adam |theta|={np.linalg.norm(theta[0]):.2e} (<1e-2), "
                f"hinge {hinge:.10f}, eq1 {eq1:.10f}")
        assert ok


def _gradcheck(n_layers, hidden, h=1e-4):
    rng = key_rng("accept-fd", n_layers, hidden)
    D, K, B = 10, 4, 2
    params = init_mlp(D, n_layers, hidden, seed=stable_seed("fd", n_layers, hidden))
    X = rng.normal(0, 1, (B, K, D))
    truths = rng.integers(0, K, B)
    _, grads = backward(params, X, truths)

    def loss_at():
        return float(np.mean([candidate_loss(forward(params, X[b]), truths[b])
                              for b in range(B)]))

    worst = 0.0
    for tensor, grad in zip(params.tensors(), grads.tensors()):
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + h
            up = loss_at()
            tensor[idx] = orig - h
            down = loss_at()
            tensor[idx] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(grad[idx] - fd) / max(abs(grad[idx]), abs(fd), 1.0))
    return worst


class TestCriterion7Determinism:
    def test_pipelines_rerun_byte_identical(self, tmp_path):
        env = dict(os.environ, CXRANK_THREADS="2")

        def pipeline(tag):
            root = tmp_path / tag
            gen = root / "gen"
            built = root / "built"
            trained = root / "trained"
            evald = root / "eval"
            report = root / "report"
            cmds = [
                ["generate", "--n", "260", "--seed", "3", "--out", str(gen)],
                ["build", "--manifest", str(gen / "manifest.cxm"), "--out", str(built)],
                ["train", "--manifest", str(built / "manifest.cxm"),
                 "--features", str(gen / "features.cxfs"),
                 "--truth", str(gen / "truth.json"), "--seed", "3",
                 "--out", str(trained), "--hidden", "16", "--layers", "1",
                 "--epochs", "2", "--lr", "0.002"],
                ["eval", "--model", "distance",
                 "--manifest", str(built / "manifest.cxm"),
                 "--features", str(gen / "features.cxfs"),
                 "--seed", "3", "--out", str(evald)],
                ["report", "--results", str(evald / "results.csv"),
                 "--out", str(report), "--figures", ],
            ]
            for cmd in cmds:
                proc = subprocess.run(
                    [sys.executable, "-m", "cxrank.cli"] + cmd,
                    capture_output=True, text=True, env=env)
                assert proc.returncode == 0, f"{cmd}: {proc.stderr}"
            return root

        a = pipeline("a")
        b = pipeline("b")
        compared = []
        for rel in ("gen/manifest.cxm", "gen/features.cxfs", "gen/truth.json",
                    "built/manifest.cxm", "trained/checkpoint.cxck",
                    "trained/train_log.csv", "eval/results.csv",
                    "eval/rank_histograms.csv", "report/results.csv",
                    "report/comparison.txt", "report/rank_histograms.csv"):
            same = (a / rel).read_bytes() == (b / rel).read_bytes()
            compared.append((rel, same))
        ok = all(same for _, same in compared)
        bad = [rel for rel, same in compared if not same]
        _report("criterion 7", ok,
                f"{len(compared)} artifacts byte-compared across reruns"
                + (f"; MISMATCH: {bad}" if bad else ""))
        assert ok


class TestCriterion8FormatRobustness:
    def test_round_trip_and_distinct_errors(self, dataset, tmp_path):
        spec = SyntheticSpec(n_examples=30, seed=9, include_oracle_records=True)
        _, store, _ = generate_synthetic(spec)
        path = tmp_path / "f.cxfs"
        write_feature_store(store, path)
        loaded = read_feature_store(path)
        lossless = all(
            np.array_equal(loaded.v[k], store.v[k]) for k in store.v
        ) and all(
            np.array_equal(loaded.q[k], store.q[k]) for k in store.q
        ) and all(
            np.array_equal(loaded.dz[k][0], store.dz[k][0])
            and np.array_equal(loaded.dz[k][1], store.dz[k][1])
            for k in store.dz
        ) and np.array_equal(loaded.answer_table.rows, store.answer_table.rows)

        original = path.read_bytes()
        outcomes = {}

        bad = bytearray(original)
        bad[0:4] = b"XXXX"
        (tmp_path / "magic").write_bytes(bad)
        outcomes["magic"] = _error_kind(tmp_path / "magic")

        bad = bytearray(original)
        import struct
        import zlib
        bad[4:6] = struct.pack("<H", 9)
        bad[30:34] = struct.pack("<I", zlib.crc32(bytes(bad[0:30])))
        (tmp_path / "version").write_bytes(bad)
        outcomes["version"] = _error_kind(tmp_path / "version")

        bad = bytearray(original)
        bad[10] ^= 0x55
        (tmp_path / "checksum").write_bytes(bad)
        outcomes["checksum"] = _error_kind(tmp_path / "checksum")

        (tmp_path / "trunc").write_bytes(original[:-11])
        outcomes["truncation"] = _error_kind(tmp_path / "trunc")

        expected = {
            "magic": StoreMagicError,
            "version": StoreVersionError,
            "checksum": StoreChecksumError,
            "truncation": StoreTruncationError,
        }
        distinct = all(isinstance(outcomes[k], expected[k]) for k in expected)
        ok = lossless and distinct
        _report("criterion 8", ok,
                "round trip lossless; errors: "
                + ", ".join(f"{k}={type(v).__name__}" for k, v in outcomes.items()))
        assert ok


def _error_kind(path):
    try:
        read_feature_store(path)
    except Exception as e:  # noqa: BLE001 - the error type is the result
        return e
    return None


class TestCriterion9LambdaSweep:
    def test_similarity_term_dominates(self, dataset, grid_config, tmp_path):
        spec, manifest, built, store, truth = dataset
        _, _, test = split_for_training(built, grid_config)
        examples = test.examples[:2000]
        oracle = truth.planted_oracle()
        sweep = lambda_sweep([0.0, 0.25, 0.5, 0.75, 1.0], examples, oracle,
                             store, store.answer_table, seed=ACCEPT_GRID_SEED)
        csv_path = tmp_path / "lambda_sweep.csv"
        write_lambda_sweep_csv(sweep, csv_path)
        by_lam = {lam: r.recall_at_5 for lam, r in sweep}
        ok = by_lam[1.0] >= by_lam[0.0] and csv_path.exists()
        _report("criterion 9", ok,
                "recall@5 by lambda: "
                + ", ".join(f"{lam:.2f}->{r:.2f}" for lam, r in sorted(by_lam.items()))
                + f"; CSV at {csv_path.name}")
        assert ok
