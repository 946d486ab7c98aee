import numpy as np
import pytest

from cxrank.core import key_rng
from cxrank.data import FeatureStore, StoreDims
from cxrank.neuralcx import AdamState, adam_step
from cxrank.oracle import (
    OracleDims,
    PlantedOracle,
    TableOracle,
    UntrainedOracle,
    oracle_backprop,
    vqa_eval,
)

DIMS = OracleDims(v_dim=10, q_dim=6, z_dim=4, n_answers=8)


def probe_inputs(seed, n=10):
    rng = key_rng("oracle-probe", seed)
    return rng.normal(0, 1, (n, DIMS.v_dim)), rng.normal(0, 1, DIMS.q_dim)


class TestUntrainedOracle:
    def test_distribution_contract(self):
        oracle = UntrainedOracle(3, DIMS)
        V, q = probe_inputs(0)
        for v in V:
            out = vqa_eval(oracle, v, q)
            assert out.answer_dist.probs.sum() == pytest.approx(1.0, abs=1e-5)

    def test_same_seed_identical(self):
        V, q = probe_inputs(1)
        a = UntrainedOracle(7, DIMS)
        b = UntrainedOracle(7, DIMS)
        pa, za = a.evaluate_batch(V, q)
        pb, zb = b.evaluate_batch(V, q)
        np.testing.assert_array_equal(pa, pb)
        np.testing.assert_array_equal(za, zb)

    def test_different_seeds_differ(self):
        V, q = probe_inputs(2)
        pa, _ = UntrainedOracle(1, DIMS).evaluate_batch(V, q)
        pb, _ = UntrainedOracle(2, DIMS).evaluate_batch(V, q)
        assert not np.allclose(pa, pb)

    def test_positive_entropy(self):
        oracle = UntrainedOracle(5, DIMS)
        V, q = probe_inputs(3)
        probs, _ = oracle.evaluate_batch(V, q)
        entropy = -(probs * np.log(probs + 1e-300)).sum(axis=1)
        assert np.all(entropy > 0)

    def test_dim_validation(self):
        oracle = UntrainedOracle(5, DIMS)
        with pytest.raises(ValueError, match="image features"):
            vqa_eval(oracle, np.zeros(3), np.zeros(DIMS.q_dim))
        with pytest.raises(ValueError, match="question embedding"):
            vqa_eval(oracle, np.zeros(DIMS.v_dim), np.zeros(2))

    def test_repeated_evaluation_identical(self):
        oracle = UntrainedOracle(9, DIMS)
        V, q = probe_inputs(4)
        p1, z1 = oracle.evaluate_batch(V, q)
        p2, z2 = oracle.evaluate_batch(V, q)
        np.testing.assert_array_equal(p1, p2)
        np.testing.assert_array_equal(z1, z2)


def fd_check_oracle(oracle, V, q, keys, h=1e-4):
    """Max relative error between backprop and central finite differences
    of a random linear functional of (probs, z)."""
    rng = key_rng("oracle-fd", 0)
    w_p = rng.normal(0, 1, (V.shape[0], oracle.dims.n_answers))
    w_z = rng.normal(0, 1, (V.shape[0], oracle.dims.z_dim))

    def value():
        probs, z = oracle.evaluate_batch(V, q, keys)
        return float((w_p * probs).sum() + (w_z * z).sum())

    probs, z, cache = oracle.evaluate_batch_cached(V, q, keys)
    grads = oracle_backprop(oracle, cache, w_p, w_z)

    worst = 0.0
    params = oracle.get_params()
    for name, tensor in params.items():
        g = grads[name]
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + h
            up = value()
            tensor[idx] = orig - h
            down = value()
            tensor[idx] = orig
            fd = (up - down) / (2 * h)
            rel = abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), 1.0)
            worst = max(worst, rel)
    return worst


class TestOracleBackprop:
    def test_untrained_gradients_match_finite_differences(self):
        oracle = UntrainedOracle(11, DIMS, trainable=True)
        V, q = probe_inputs(5, n=3)
        assert fd_check_oracle(oracle, V, q, None) < 1e-4

    def test_planted_gradients_match_finite_differences(self):
        planted = {(f"i{j}", "q0"): j % DIMS.n_answers for j in range(3)}
        oracle = PlantedOracle(planted, accuracy=0.8, sharpness=3.0, dims=DIMS,
                               seed=1, trainable=True)
        # zero-output-weight init leaves probs locally insensitive to Wv/Wq;
        # perturb Wo so every parameter has visible effect
        oracle.params["Wo"] = key_rng("wo", 0).normal(0, 0.5, oracle.params["Wo"].shape)
        V, q = probe_inputs(6, n=3)
        keys = [(f"i{j}", "q0") for j in range(3)]
        assert fd_check_oracle(oracle, V, q, keys) < 1e-4

    def test_zero_upstream_gives_zero_gradients(self):
        oracle = UntrainedOracle(13, DIMS, trainable=True)
        V, q = probe_inputs(7, n=2)
        _, _, cache = oracle.evaluate_batch_cached(V, q)
        grads = oracle_backprop(oracle, cache,
                                np.zeros((2, DIMS.n_answers)), np.zeros((2, DIMS.z_dim)))
        for g in grads.values():
            np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_table_oracle_rejected(self):
        store = _tiny_store()
        oracle = TableOracle(store)
        with pytest.raises(ValueError, match="not trainable"):
            oracle_backprop(oracle, {}, None, None)

    def test_frozen_oracle_rejected(self):
        oracle = UntrainedOracle(5, DIMS, trainable=False)
        with pytest.raises(ValueError, match="not trainable"):
            oracle_backprop(oracle, {}, None, None)

    def test_overfit_one_example_decreases_loss(self):
        oracle = UntrainedOracle(17, DIMS, trainable=True)
        V, q = probe_inputs(8, n=1)
        target = 3

        def loss_and_grads():
            probs, _, cache = oracle.evaluate_batch_cached(V, q)
            loss = -np.log(probs[0, target])
            d_probs = np.zeros_like(probs)
            d_probs[0, target] = -1.0 / probs[0, target]
            grads = oracle.backprop(cache, d_probs, np.zeros((1, DIMS.z_dim)))
            return loss, grads

        names = sorted(oracle.get_params())
        state = AdamState.zeros_like([oracle.get_params()[n] for n in names])
        first, _ = loss_and_grads()
        for t in range(1, 101):
            loss, grads = loss_and_grads()
            updated = adam_step([oracle.get_params()[n] for n in names],
                                [grads[n] for n in names], state, t, lr=0.05)
            oracle.set_params(dict(zip(names, updated)))
        last, _ = loss_and_grads()
        assert last < first


class TestPlantedOracle:
    def test_high_accuracy_sharp_mode(self):
        planted = {(f"i{j}", "q"): j % DIMS.n_answers for j in range(50)}
        oracle = PlantedOracle(planted, accuracy=1.0, sharpness=50.0, dims=DIMS, seed=2)
        V, q = probe_inputs(9, n=1)
        for j in range(50):
            out = oracle.evaluate(V[0], q, key=(f"i{j}", "q"))
            assert int(np.argmax(out.answer_dist.probs)) == j % DIMS.n_answers

    def test_mode_correct_rate_tracks_accuracy(self):
        planted = {(f"i{j}", "q"): j % DIMS.n_answers for j in range(10_000)}
        oracle = PlantedOracle(planted, accuracy=0.5, sharpness=8.0, dims=DIMS, seed=3)
        V, q = probe_inputs(10, n=1)
        hits = 0
        for j in range(10_000):
            out = oracle.evaluate(V[0], q, key=(f"i{j}", "q"))
            hits += int(np.argmax(out.answer_dist.probs)) == j % DIMS.n_answers
        assert hits / 10_000 == pytest.approx(0.5, abs=0.02)

    def test_wrong_mode_is_never_the_planted_answer(self):
        planted = {(f"i{j}", "q"): 2 for j in range(500)}
        oracle = PlantedOracle(planted, accuracy=0.0, sharpness=20.0, dims=DIMS, seed=4)
        V, q = probe_inputs(11, n=1)
        for j in range(0, 500, 25):
            out = oracle.evaluate(V[0], q, key=(f"i{j}", "q"))
            assert int(np.argmax(out.answer_dist.probs)) != 2

    def test_missing_key_errors(self):
        oracle = PlantedOracle({("a", "b"): 0}, accuracy=1.0, sharpness=5.0,
                               dims=DIMS, seed=5)
        V, q = probe_inputs(12, n=1)
        with pytest.raises(KeyError, match="no planted answer"):
            oracle.evaluate(V[0], q, key=("missing", "b"))

    def test_order_independence(self):
        planted = {(f"i{j}", "q"): j % DIMS.n_answers for j in range(6)}
        oracle_a = PlantedOracle(planted, accuracy=0.6, sharpness=4.0, dims=DIMS, seed=6)
        oracle_b = PlantedOracle(planted, accuracy=0.6, sharpness=4.0, dims=DIMS, seed=6)
        V, q = probe_inputs(13, n=1)
        forward = [oracle_a.evaluate(V[0], q, key=(f"i{j}", "q")).answer_dist.probs
                   for j in range(6)]
        backward = [oracle_b.evaluate(V[0], q, key=(f"i{j}", "q")).answer_dist.probs
                    for j in reversed(range(6))]
        for j in range(6):
            np.testing.assert_array_equal(forward[j], backward[5 - j])

    def test_accuracy_validation(self):
        with pytest.raises(ValueError, match="accuracy"):
            PlantedOracle({}, accuracy=1.5, sharpness=1.0, dims=DIMS)
        with pytest.raises(ValueError, match="sharpness"):
            PlantedOracle({}, accuracy=0.5, sharpness=0.0, dims=DIMS)

    def test_trainable_starts_identical_to_frozen(self):
        planted = {(f"i{j}", "q"): j % DIMS.n_answers for j in range(4)}
        frozen = PlantedOracle(planted, accuracy=0.7, sharpness=4.0, dims=DIMS, seed=7)
        trainable = PlantedOracle(planted, accuracy=0.7, sharpness=4.0, dims=DIMS,
                                  seed=7, trainable=True)
        V, q = probe_inputs(14, n=4)
        keys = [(f"i{j}", "q") for j in range(4)]
        pf, _ = frozen.evaluate_batch(V, q, keys)
        pt, _ = trainable.evaluate_batch(V, q, keys)
        np.testing.assert_array_equal(pf, pt)


def _tiny_store():
    dims = StoreDims(v_dim=DIMS.v_dim, q_dim=DIMS.q_dim, n_answers=DIMS.n_answers,
                     emb_dim=3, z_dim=DIMS.z_dim)
    store = FeatureStore(dims=dims)
    dist = np.zeros(DIMS.n_answers, dtype=np.float32)
    dist[1] = np.float32(0.2)
    dist[4] = np.float32(0.8)
    store.dz[("img7", "q3")] = (dist, np.ones(DIMS.z_dim, dtype=np.float32))
    return store


class TestTableOracle:
    def test_exact_lookup(self):
        store = _tiny_store()
        oracle = TableOracle(store)
        v = np.zeros(DIMS.v_dim)
        q = np.zeros(DIMS.q_dim)
        out = vqa_eval(oracle, v, q, key=("img7", "q3"))
        assert out.answer_dist.probs[1] == np.float32(0.2)
        assert out.answer_dist.probs[4] == np.float32(0.8)

    def test_missing_entry_errors(self):
        oracle = TableOracle(_tiny_store())
        with pytest.raises(KeyError, match="no oracle record"):
            vqa_eval(oracle, np.zeros(DIMS.v_dim), np.zeros(DIMS.q_dim),
                     key=("nope", "q3"))

    def test_never_trainable(self):
        assert TableOracle(_tiny_store()).trainable is False


class TestLabelIndependence:
    def test_untrained_outputs_ignore_labels(self):
        # permuting ground-truth labels cannot change untrained-oracle outputs
        oracle = UntrainedOracle(19, DIMS)
        V, q = probe_inputs(15)
        before, _ = oracle.evaluate_batch(V, q)
        after, _ = oracle.evaluate_batch(V, q)  # labels live outside the oracle
        np.testing.assert_array_equal(before, after)
