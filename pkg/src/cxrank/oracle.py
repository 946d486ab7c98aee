"""The pluggable VQA-model boundary.

An oracle maps (image features, question embedding) to an answer
distribution and a multimodal embedding. Three kinds exist:

* ``UntrainedOracle`` -- seeded random projections with the pointwise-fusion
  form z = relu(Wv.v) * relu(Wq.q), probs = softmax(Wo.z). Optionally
  trainable.
* ``PlantedOracle`` -- keyed lookup against generator ground truth with an
  accuracy knob; per-key randomness is hash-derived so evaluation order
  never changes results. Its multimodal embedding comes from the same
  parametric fusion, and an optional zero-initialised logit correction
  makes the oracle trainable while starting out identical to the frozen
  one.
* ``TableOracle`` -- pure lookup of precomputed records from a feature
  store; never trainable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AnswerDistribution, key_rng

__all__ = [
    "OracleDims",
    "OracleOutput",
    "UntrainedOracle",
    "PlantedOracle",
    "TableOracle",
    "vqa_eval",
    "oracle_backprop",
]


@dataclass(frozen=True)
class OracleDims:
    v_dim: int
    q_dim: int
    z_dim: int
    n_answers: int


@dataclass(frozen=True)
class OracleOutput:
    answer_dist: AnswerDistribution
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        object.__setattr__(self, "z", z)
        if not np.all(np.isfinite(z)):
            raise ValueError("multimodal embedding contains non-finite values")


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class _ParametricFusion:
    """Shared forward/backward for the projection-multiply-softmax form."""

    def __init__(self, dims: OracleDims):
        self.dims = dims

    # params: {"Wv": (z,v), "Wq": (z,q), "Wo": (A,z)}
    def forward(self, params, V: np.ndarray, q: np.ndarray):
        a_pre = V @ params["Wv"].T                # (n, z)
        b_pre = params["Wq"] @ q                  # (z,)
        ra = np.maximum(a_pre, 0.0)
        rb = np.maximum(b_pre, 0.0)
        z = ra * rb                               # (n, z)
        logits = z @ params["Wo"].T               # (n, A)
        cache = {"V": V, "q": q, "a_pre": a_pre, "b_pre": b_pre,
                 "ra": ra, "rb": rb, "z": z}
        return logits, z, cache

    def backward(self, params, cache, d_logits: np.ndarray, d_z: np.ndarray):
        z = cache["z"]
        d_wo = d_logits.T @ z
        d_zmat = d_logits @ params["Wo"] + d_z
        d_ra = d_zmat * cache["rb"]
        d_rb = d_zmat * cache["ra"]
        d_a = d_ra * (cache["a_pre"] > 0)
        d_b = (d_rb * (cache["b_pre"] > 0)).sum(axis=0)
        d_wv = d_a.T @ cache["V"]
        d_wq = np.outer(d_b, cache["q"])
        return {"Wv": d_wv, "Wq": d_wq, "Wo": d_wo}


def _softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    inner = (d_probs * probs).sum(axis=1, keepdims=True)
    return probs * (d_probs - inner)


class _OracleBase:
    kind = "base"
    trainable = False
    dims: OracleDims

    def evaluate(self, v, q, key=None) -> OracleOutput:
        probs, z = self.evaluate_batch(np.atleast_2d(np.asarray(v, dtype=np.float64)),
                                       np.asarray(q, dtype=np.float64),
                                       [key])
        return OracleOutput(AnswerDistribution(probs[0]), z[0])

    def evaluate_batch(self, V, q, keys):
        raise NotImplementedError

    def get_params(self) -> dict:
        raise ValueError(f"{self.kind} oracle has no trainable parameters")

    def set_params(self, params: dict) -> None:
        raise ValueError(f"{self.kind} oracle has no trainable parameters")


# projection init gains for randomly initialised oracles. The output
# gain is small so an untrained model's answer distribution stays close
# to uniform: its variation still ranks candidates, but barely encodes
# the inputs -- an untrained model knows nothing.
FUSION_GAIN = 3.0
OUTPUT_GAIN = 0.25


class UntrainedOracle(_OracleBase):
    """Randomly initialised VQA model; deterministic per seed."""

    kind = "untrained"

    def __init__(self, seed: int, dims: OracleDims, trainable: bool = False):
        self.seed = seed
        self.dims = dims
        self.trainable = trainable
        rng = key_rng("untrained-oracle", seed)
        self.params = {
            "Wv": rng.normal(0.0, FUSION_GAIN / np.sqrt(dims.v_dim),
                             (dims.z_dim, dims.v_dim)),
            "Wq": rng.normal(0.0, FUSION_GAIN / np.sqrt(dims.q_dim),
                             (dims.z_dim, dims.q_dim)),
            "Wo": rng.normal(0.0, OUTPUT_GAIN / np.sqrt(dims.z_dim),
                             (dims.n_answers, dims.z_dim)),
        }
        self._fusion = _ParametricFusion(dims)

    def evaluate_batch(self, V, q, keys=None):
        V = np.asarray(V, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        logits, z, _ = self._fusion.forward(self.params, V, q)
        return _softmax_rows(logits), z

    def evaluate_batch_cached(self, V, q, keys=None):
        V = np.asarray(V, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        logits, z, cache = self._fusion.forward(self.params, V, q)
        probs = _softmax_rows(logits)
        cache["probs"] = probs
        return probs, z, cache

    def backprop(self, cache, d_probs, d_z):
        d_logits = _softmax_backward(cache["probs"], np.asarray(d_probs, dtype=np.float64))
        return self._fusion.backward(self.params, cache, d_logits,
                                     np.asarray(d_z, dtype=np.float64))

    def get_params(self):
        return self.params

    def set_params(self, params):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


class PlantedOracle(_OracleBase):
    """Keyed stand-in for a pretrained VQA model on synthetic data.

    For each (image_id, question_id) key the base logits put ``sharpness``
    extra mass on a mode answer -- the planted answer with probability
    ``accuracy``, otherwise a distractor -- on top of per-key Gaussian tail
    noise, all derived by hashing (key, seed). The trainable variant adds
    a parametric logit correction whose output weights start at zero, so a
    freshly constructed trainable oracle behaves identically to the frozen
    one until fine-tuning moves it.
    """

    kind = "planted"

    def __init__(self, planted, accuracy: float, sharpness: float,
                 dims: OracleDims, seed: int = 0, tail_noise: float = 0.6,
                 trainable: bool = False):
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy must be in [0,1], got {accuracy}")
        if sharpness <= 0.0:
            raise ValueError(f"sharpness must be positive, got {sharpness}")
        self.planted = planted
        self.accuracy = accuracy
        self.sharpness = sharpness
        self.tail_noise = tail_noise
        self.seed = seed
        self.dims = dims
        self.trainable = trainable
        rng = key_rng("planted-oracle-fusion", seed)
        self.params = {
            "Wv": rng.normal(0.0, FUSION_GAIN / np.sqrt(dims.v_dim),
                             (dims.z_dim, dims.v_dim)),
            "Wq": rng.normal(0.0, FUSION_GAIN / np.sqrt(dims.q_dim),
                             (dims.z_dim, dims.q_dim)),
            # zero output weights: corrected logits == base logits at init
            "Wo": np.zeros((dims.n_answers, dims.z_dim)),
        }
        self._fusion = _ParametricFusion(dims)
        self._base_cache: dict = {}
        self._z_cache: dict = {}

    def base_logits(self, key) -> np.ndarray:
        cached = self._base_cache.get(key)
        if cached is not None:
            return cached
        if key not in self.planted:
            raise KeyError(f"no planted answer for key {key!r}")
        target = self.planted[key]
        rng = key_rng("planted-oracle", self.seed, key[0], key[1])
        correct = rng.random() < self.accuracy
        if correct:
            mode = target
        else:
            r = int(rng.integers(self.dims.n_answers - 1))
            mode = r + (1 if r >= target else 0)
        logits = rng.normal(0.0, self.tail_noise, self.dims.n_answers)
        logits[mode] += self.sharpness
        self._base_cache[key] = logits
        return logits

    def multimodal_z(self, key) -> np.ndarray:
        """The exposed embedding is keyed noise: the pretrained stand-in is
        an opaque model whose internal representation carries no task
        signal (the logit correction keeps its own parametric fusion)."""
        cached = self._z_cache.get(key)
        if cached is None:
            rng = key_rng("planted-oracle-z", self.seed, key[0], key[1])
            cached = rng.uniform(0.0, 1.0, self.dims.z_dim)
            self._z_cache[key] = cached
        return cached

    def evaluate_batch(self, V, q, keys):
        probs, z, _ = self.evaluate_batch_cached(V, q, keys)
        return probs, z

    def evaluate_batch_cached(self, V, q, keys):
        V = np.asarray(V, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        if keys is None or len(keys) != V.shape[0]:
            raise ValueError("planted oracle requires one (image, question) key per row")
        base = np.stack([self.base_logits(k) for k in keys])
        logits, _, cache = self._fusion.forward(self.params, V, q)
        probs = _softmax_rows(base + logits)
        cache["probs"] = probs
        z = np.stack([self.multimodal_z(k) for k in keys])
        return probs, z, cache

    def backprop(self, cache, d_probs, d_z):
        # the exposed z is parameter-free, so only the probability path
        # carries gradients
        d_logits = _softmax_backward(cache["probs"], np.asarray(d_probs, dtype=np.float64))
        zero_dz = np.zeros((cache["z"].shape[0], self.dims.z_dim))
        return self._fusion.backward(self.params, cache, d_logits, zero_dz)

    def get_params(self):
        return self.params

    def set_params(self, params):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


class TableOracle(_OracleBase):
    """Precomputed (answer distribution, Z) records keyed by (image, question)."""

    kind = "table"
    trainable = False

    def __init__(self, store):
        if store.answer_table is None:
            n_answers = store.dims.n_answers
        else:
            n_answers = store.answer_table.n_answers
        self.store = store
        self.dims = OracleDims(v_dim=store.dims.v_dim, q_dim=store.dims.q_dim,
                               z_dim=store.dims.z_dim, n_answers=n_answers)

    def evaluate_batch(self, V, q, keys):
        if keys is None:
            raise ValueError("table oracle requires (image, question) keys")
        dists = []
        zs = []
        for key in keys:
            record = self.store.dz.get(tuple(key))
            if record is None:
                raise KeyError(f"no oracle record for key {key!r}")
            dist, z = record
            dists.append(np.asarray(dist, dtype=np.float64))
            zs.append(np.asarray(z, dtype=np.float64))
        return np.stack(dists), np.stack(zs)


def vqa_eval(oracle, v, q, key=None) -> OracleOutput:
    """Evaluate an oracle on one (image features, question embedding) pair."""
    v = np.asarray(v, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if v.shape != (oracle.dims.v_dim,):
        raise ValueError(f"image features have dim {v.shape}, oracle expects {oracle.dims.v_dim}")
    if q.shape != (oracle.dims.q_dim,):
        raise ValueError(f"question embedding has dim {q.shape}, oracle expects {oracle.dims.q_dim}")
    return oracle.evaluate(v, q, key=key)


def oracle_backprop(oracle, cache, d_probs, d_z) -> dict:
    """Parameter gradients for the upstream (d probs, d z) of one forward.

    Only trainable oracles support this; the table oracle (and frozen
    parametric oracles) reject it.
    """
    if not oracle.trainable:
        raise ValueError(f"{oracle.kind} oracle is not trainable")
    return oracle.backprop(cache, d_probs, d_z)
