"""The supervised neural counterexample ranker.

Ten features per (example, candidate) pair -- raw image features for the
original and the candidate, their pointwise product, their distance,
the candidate's one-hot neighbor rank, the question embedding, the
original answer's embedding, the distribution-weighted candidate answer
embedding, and the two multimodal embeddings -- are concatenated and
pushed through a fully-connected ReLU network with inverted dropout to
an unnormalized scalar score. Training runs K forward passes per
example, applies softmax-over-candidates cross-entropy at the labeled
counterexample, and optimizes with bias-corrected Adam under early
stopping on validation recall@5.

Ablation replaces whole features with keyed uniform noise, at training
and evaluation time alike, so a retrained model measures what the
feature was worth.

Everything here is plain numpy with float64 arithmetic; gradients are
exact and checked against finite differences in the test suite.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .core import CXExample, key_rng, rank_candidates

__all__ = [
    "FEATURE_NAMES",
    "MASK_GROUPS",
    "FeatureLayout",
    "FeatureAssembly",
    "AblationMask",
    "parse_mask",
    "NeuralCXConfig",
    "MLPParams",
    "AdamState",
    "TrainDeps",
    "TrainResult",
    "EpochLog",
    "paper_feature_dims",
    "desk_feature_dims",
    "assemble_features",
    "assemble_example",
    "forward",
    "candidate_loss",
    "backward",
    "adam_step",
    "init_mlp",
    "train",
    "score_example",
    "evaluate_ranker",
    "write_checkpoint",
    "read_checkpoint",
    "params_from_checkpoint",
    "write_train_log",
]

# concatenation order of the input features
FEATURE_NAMES = ("V", "Vp", "Vm", "Vd", "Rank", "Q", "A", "Ap", "Z", "Zp")

# mask spec names -> features they cover; the candidate-side twin is
# always masked together with its original-side feature
MASK_GROUPS = {
    "V": ("V", "Vp"),
    "Vm": ("Vm",),
    "Vd": ("Vd",),
    "Rank": ("Rank",),
    "Q": ("Q",),
    "A": ("A", "Ap"),
    "Z": ("Z", "Zp"),
}

# features that are constant across an example's candidates; their noise
# replacement is drawn once per example so the replacement keeps the
# feature's example-level structure
EXAMPLE_LEVEL = frozenset({"V", "Q", "A", "Z"})


def paper_feature_dims(k: int = 24) -> dict:
    return {"V": 2048, "Vp": 2048, "Vm": 2048, "Vd": 1, "Rank": k,
            "Q": 2400, "A": 2400, "Ap": 2400, "Z": 360, "Zp": 360}


def desk_feature_dims(v_dim: int, q_dim: int, emb_dim: int, z_dim: int, k: int) -> dict:
    return {"V": v_dim, "Vp": v_dim, "Vm": v_dim, "Vd": 1, "Rank": k,
            "Q": q_dim, "A": emb_dim, "Ap": emb_dim, "Z": z_dim, "Zp": z_dim}


class FeatureLayout:
    """Feature name -> slice of the concatenated input vector."""

    def __init__(self, feature_dims: dict):
        missing = set(FEATURE_NAMES) - set(feature_dims)
        if missing:
            raise ValueError(f"feature dims missing entries: {sorted(missing)}")
        self.dims = {name: int(feature_dims[name]) for name in FEATURE_NAMES}
        self.slices = {}
        offset = 0
        for name in FEATURE_NAMES:
            self.slices[name] = slice(offset, offset + self.dims[name])
            offset += self.dims[name]
        self.total_dim = offset

    @classmethod
    def for_store(cls, store, k: int) -> "FeatureLayout":
        d = store.dims
        return cls(desk_feature_dims(d.v_dim, d.q_dim, d.emb_dim, d.z_dim, k))

    def __eq__(self, other):
        return isinstance(other, FeatureLayout) and self.dims == other.dims


@dataclass(frozen=True)
class FeatureAssembly:
    """One candidate's concatenated input vector plus its layout."""

    values: np.ndarray
    layout: FeatureLayout

    @property
    def total_dim(self) -> int:
        return self.values.shape[-1]

    def feature(self, name: str) -> np.ndarray:
        return self.values[..., self.layout.slices[name]]


@dataclass(frozen=True)
class AblationMask:
    """Features to replace with keyed uniform noise."""

    masked: frozenset = frozenset()
    noise_seed: int = 0
    noise_low: float = 0.0
    noise_high: float = 1.0

    def __post_init__(self):
        unknown = set(self.masked) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown features in mask: {sorted(unknown)}")
        if self.noise_high <= self.noise_low:
            raise ValueError("noise_high must exceed noise_low")

    @classmethod
    def none(cls, noise_seed: int = 0) -> "AblationMask":
        return cls(frozenset(), noise_seed)

    @property
    def spec_string(self) -> str:
        if not self.masked:
            return "none"
        if self.masked == frozenset(FEATURE_NAMES):
            return "all"
        names = [n for n in MASK_GROUPS if set(MASK_GROUPS[n]) <= self.masked]
        return ",".join(names)


def parse_mask(spec: str, noise_seed: int = 0, noise_low: float = 0.0,
               noise_high: float = 1.0) -> AblationMask:
    """Parse a mask spec like ``"V,Rank"``; ``all`` and ``none`` are aliases."""
    spec = spec.strip()
    if spec in ("", "none"):
        return AblationMask(frozenset(), noise_seed, noise_low, noise_high)
    if spec == "all":
        return AblationMask(frozenset(FEATURE_NAMES), noise_seed, noise_low, noise_high)
    masked = set()
    for token in spec.split(","):
        token = token.strip()
        if token not in MASK_GROUPS:
            raise ValueError(
                f"unknown mask feature {token!r}; expected one of {list(MASK_GROUPS)}"
            )
        masked.update(MASK_GROUPS[token])
    return AblationMask(frozenset(masked), noise_seed, noise_low, noise_high)


@dataclass
class NeuralCXConfig:
    n_layers: int = 2
    hidden_units: int = 512
    dropout_p: float = 0.25
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    feature_dims: dict = field(default_factory=paper_feature_dims)
    # fine-tuning steps the oracle more gently than the fresh ranker
    oracle_lr_scale: float = 0.02
    timing: bool = False

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("need at least one hidden layer")
        if self.hidden_units < 1:
            raise ValueError("need at least one hidden unit")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0,1)")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainDeps:
    """Everything feature assembly needs besides the example itself."""

    store: object
    table: object
    oracle: object
    oracle_cache: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# feature assembly


def _oracle_rows(example: CXExample, deps: TrainDeps, use_cache: bool):
    """probs over answers for each candidate, plus z for original+candidates."""
    cache_key = (id(deps.oracle), example.image_id, example.question_id)
    if use_cache:
        hit = deps.oracle_cache.get(cache_key)
        if hit is not None:
            return hit
    store = deps.store
    ids = (example.image_id,) + example.candidates.candidate_ids
    V = np.stack([store.image_features(i) for i in ids]).astype(np.float64)
    q = store.question_embedding(example.question_id).astype(np.float64)
    keys = [(i, example.question_id) for i in ids]
    probs, z = deps.oracle.evaluate_batch(V, q, keys)
    out = (probs[1:].astype(np.float32), z[0].astype(np.float32),
           z[1:].astype(np.float32))
    if use_cache:
        deps.oracle_cache[cache_key] = out
    return out


def _noise_block(mask: AblationMask, example: CXExample, name: str,
                 k: int, dim: int) -> np.ndarray:
    rng = key_rng("ablation-noise", mask.noise_seed, example.image_id,
                  example.question_id, name)
    if name in EXAMPLE_LEVEL:
        return np.broadcast_to(rng.uniform(mask.noise_low, mask.noise_high, dim),
                               (k, dim))
    return rng.uniform(mask.noise_low, mask.noise_high, (k, dim))


def assemble_example(example: CXExample, deps: TrainDeps, layout: FeatureLayout,
                     mask: AblationMask | None = None,
                     cache_oracle: bool = True) -> np.ndarray:
    """(K, total_dim) float64 feature matrix for all candidates of one example."""
    mask = mask or AblationMask.none()
    store = deps.store
    k = example.k
    X = np.empty((k, layout.total_dim))

    v = store.image_features(example.image_id).astype(np.float64)
    Vc = np.stack([store.image_features(c)
                   for c in example.candidates.candidate_ids]).astype(np.float64)
    q = store.question_embedding(example.question_id).astype(np.float64)
    a_emb = deps.table.rows[example.answer_index].astype(np.float64)
    probs, z_orig, z_cands = _oracle_rows(example, deps, use_cache=cache_oracle)

    s = layout.slices
    X[:, s["V"]] = v
    X[:, s["Vp"]] = Vc
    X[:, s["Vm"]] = v * Vc
    X[:, s["Vd"]] = np.linalg.norm(Vc - v, axis=1, keepdims=True)
    X[:, s["Rank"]] = np.eye(k)
    X[:, s["Q"]] = q
    X[:, s["A"]] = a_emb
    X[:, s["Ap"]] = probs.astype(np.float64) @ deps.table.rows.astype(np.float64)
    X[:, s["Z"]] = z_orig
    X[:, s["Zp"]] = z_cands

    for name in FEATURE_NAMES:
        if name in mask.masked:
            X[:, s[name]] = _noise_block(mask, example, name, k, layout.dims[name])
    return X


def assemble_features(example: CXExample, candidate_index: int, store, oracle,
                      table, mask: AblationMask | None = None,
                      layout: FeatureLayout | None = None) -> FeatureAssembly:
    """Input vector for a single candidate of one example."""
    if not 0 <= candidate_index < example.k:
        raise ValueError(f"candidate index {candidate_index} outside [0, {example.k})")
    if layout is None:
        layout = FeatureLayout.for_store(store, example.k)
    deps = TrainDeps(store=store, table=table, oracle=oracle)
    X = assemble_example(example, deps, layout, mask, cache_oracle=False)
    return FeatureAssembly(values=X[candidate_index], layout=layout)


# ---------------------------------------------------------------------------
# the MLP


@dataclass
class MLPParams:
    weights: list          # hidden: (h, fan_in)..., output: (1, h)
    biases: list

    def tensors(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @classmethod
    def from_tensors(cls, tensors) -> "MLPParams":
        return cls(weights=list(tensors[0::2]), biases=list(tensors[1::2]))

    def copy(self) -> "MLPParams":
        return MLPParams(weights=[w.copy() for w in self.weights],
                         biases=[b.copy() for b in self.biases])

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]


def init_mlp(input_dim: int, n_layers: int, hidden_units: int, seed: int) -> MLPParams:
    """Seeded uniform init in +-1/sqrt(fan_in) per layer."""
    rng = key_rng("mlp-init", seed)
    weights, biases = [], []
    fan_in = input_dim
    for _ in range(n_layers):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (hidden_units, fan_in)))
        biases.append(rng.uniform(-bound, bound, hidden_units))
        fan_in = hidden_units
    bound = 1.0 / np.sqrt(fan_in)
    weights.append(rng.uniform(-bound, bound, (1, fan_in)))
    biases.append(rng.uniform(-bound, bound, 1))
    return MLPParams(weights=weights, biases=biases)


def _forward_cached(params: MLPParams, X: np.ndarray, dropout_active: bool,
                    dropout_p: float, rng):
    h = X
    pres, acts, masks = [], [], []
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        pre = h @ w.T + b
        act = np.maximum(pre, 0.0)
        if dropout_active and dropout_p > 0.0:
            keep = rng.random(act.shape) >= dropout_p
            act = act * keep / (1.0 - dropout_p)
            masks.append(keep)
        else:
            masks.append(None)
        pres.append(pre)
        acts.append(act)
        h = act
    scores = h @ params.weights[-1].T + params.biases[-1]
    return scores[:, 0], {"X": X, "pres": pres, "acts": acts, "masks": masks}


def forward(params: MLPParams, x, dropout_active: bool = False,
            dropout_p: float = 0.25, seed=0):
    """Scalar score(s) for one assembly or a batch of rows.

    Dropout is the inverted variant (surviving units scaled by 1/(1-p)
    at train time), so evaluation needs no rescaling and
    ``dropout_active=False`` is fully deterministic.
    """
    if isinstance(x, FeatureAssembly):
        x = x.values
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != params.input_dim:
        raise ValueError(
            f"input dim {X.shape[1]} does not match params ({params.input_dim})"
        )
    rng = seed if isinstance(seed, np.random.Generator) else key_rng("dropout", seed)
    scores, _ = _forward_cached(params, X, dropout_active, dropout_p, rng)
    return float(scores[0]) if single else scores


def candidate_loss(scores, truth_index: int) -> float:
    """Softmax-over-candidates cross-entropy at the labeled counterexample."""
    s = np.asarray(scores, dtype=np.float64)
    if not 0 <= truth_index < s.shape[0]:
        raise ValueError(f"truth index {truth_index} outside [0, {s.shape[0]})")
    m = s.max()
    return float(np.log(np.exp(s - m).sum()) - (s[truth_index] - m))


def _backward_from_scores(params: MLPParams, cache, d_scores: np.ndarray,
                          dropout_p: float, want_input_grads: bool):
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    h_last = cache["acts"][-1] if cache["acts"] else cache["X"]
    grads_w[-1] = (d_scores[None, :] @ h_last)
    grads_b[-1] = np.array([d_scores.sum()])
    d_h = np.outer(d_scores, params.weights[-1][0])
    for l in range(len(cache["pres"]) - 1, -1, -1):
        keep = cache["masks"][l]
        if keep is not None:
            d_h = d_h * keep / (1.0 - dropout_p)
        d_pre = d_h * (cache["pres"][l] > 0)
        h_in = cache["acts"][l - 1] if l > 0 else cache["X"]
        grads_w[l] = d_pre.T @ h_in
        grads_b[l] = d_pre.sum(axis=0)
        d_h = d_pre @ params.weights[l]
    d_input = d_h if want_input_grads else None
    return MLPParams(weights=grads_w, biases=grads_b), d_input


def backward(params: MLPParams, assemblies, truths, dropout_active: bool = False,
             dropout_p: float = 0.25, rng=None, want_input_grads: bool = False):
    """Mean candidate loss over a batch and its parameter gradients.

    ``assemblies`` is (B, K, total_dim); with ``want_input_grads`` the
    gradient with respect to the inputs comes back too, which is what
    joint oracle fine-tuning consumes.
    """
    A = np.asarray(assemblies, dtype=np.float64)
    if A.ndim == 2:
        A = A[None, ...]
    B, K, D = A.shape
    truths = np.asarray(truths).reshape(B)
    if rng is None:
        rng = key_rng("dropout", 0)
    X = A.reshape(B * K, D)
    scores, cache = _forward_cached(params, X, dropout_active, dropout_p, rng)
    S = scores.reshape(B, K)
    shifted = S - S.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    P = e / e.sum(axis=1, keepdims=True)
    loss = float(-np.log(P[np.arange(B), truths]).mean())
    dS = P.copy()
    dS[np.arange(B), truths] -= 1.0
    dS /= B
    grads, d_input = _backward_from_scores(params, cache, dS.reshape(B * K),
                                           dropout_p, want_input_grads)
    if want_input_grads:
        return loss, grads, d_input.reshape(B, K, D)
    return loss, grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list

    @classmethod
    def zeros_like(cls, tensors) -> "AdamState":
        return cls(m=[np.zeros_like(t) for t in tensors],
                   v=[np.zeros_like(t) for t in tensors])


def adam_step(tensors, grads, state: AdamState, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; ``t`` is the 1-based step index."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    out = []
    for i, (theta, g) in enumerate(zip(tensors, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / (1.0 - beta1 ** t)
        v_hat = state.v[i] / (1.0 - beta2 ** t)
        out.append(theta - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_recall1: float
    val_recall5: float
    wallclock_s: float | None = None


@dataclass
class TrainResult:
    params: MLPParams
    oracle_params: dict | None
    log: list
    best_epoch: int
    best_val_recall5: float
    layout: FeatureLayout
    mask: AblationMask
    config: NeuralCXConfig
    oracle_mode: str


ORACLE_MODES = ("untrained", "pretrained", "trainable")


def _validate_layout(config: NeuralCXConfig, deps: TrainDeps, k: int) -> FeatureLayout:
    layout = FeatureLayout(config.feature_dims)
    expected = FeatureLayout.for_store(deps.store, k)
    if layout != expected:
        raise ValueError(
            f"configured feature dims {layout.dims} do not match the feature "
            f"store ({expected.dims})"
        )
    return layout


def _recalls(positions: np.ndarray) -> tuple:
    r1 = 100.0 * float((positions < 1).mean())
    r5 = 100.0 * float((positions < 5).mean())
    return r1, r5


def _eval_positions(params: MLPParams, examples, deps, layout, mask,
                    chunk: int = 512) -> np.ndarray:
    """Permutation position of the truth candidate for each example."""
    positions = np.empty(len(examples), dtype=np.int64)
    for start in range(0, len(examples), chunk):
        block = examples[start:start + chunk]
        X = np.stack([assemble_example(ex, deps, layout, mask) for ex in block])
        B, K, D = X.shape
        scores = forward(params, X.reshape(B * K, D)).reshape(B, K)
        for j, ex in enumerate(block):
            ranking = rank_candidates(scores[j])
            positions[start + j] = ranking.position_of(ex.truth_index)
    return positions


def evaluate_ranker(params: MLPParams, manifest, deps: TrainDeps,
                    layout: FeatureLayout, mask: AblationMask | None = None):
    """Rankings for every example of a manifest, dropout inactive."""
    mask = mask or AblationMask.none()
    rankings = []
    for ex in manifest.examples:
        X = assemble_example(ex, deps, layout, mask)
        scores = forward(params, X)
        rankings.append((rank_candidates(scores), ex.truth_index))
    return rankings


def score_example(params: MLPParams, example: CXExample, deps: TrainDeps,
                  layout: FeatureLayout | None = None,
                  mask: AblationMask | None = None):
    """K forward passes with dropout inactive, then rank."""
    if layout is None:
        layout = FeatureLayout.for_store(deps.store, example.k)
    X = assemble_example(example, deps, layout, mask or AblationMask.none())
    return rank_candidates(forward(params, X))


def _oracle_batch_backprop(example, deps, layout, mask, d_input_rows):
    """Translate input-feature gradients into oracle parameter gradients."""
    store = deps.store
    ids = (example.image_id,) + example.candidates.candidate_ids
    V = np.stack([store.image_features(i) for i in ids]).astype(np.float64)
    q = store.question_embedding(example.question_id).astype(np.float64)
    keys = [(i, example.question_id) for i in ids]
    probs, _, cache = deps.oracle.evaluate_batch_cached(V, q, keys)

    k = example.k
    n_ans = probs.shape[1]
    z_dim = layout.dims["Z"]
    d_probs = np.zeros((k + 1, n_ans))
    d_z = np.zeros((k + 1, z_dim))
    s = layout.slices
    if "Ap" not in mask.masked:
        d_probs[1:] = d_input_rows[:, s["Ap"]] @ deps.table.rows.astype(np.float64).T
    if "Z" not in mask.masked:
        d_z[0] = d_input_rows[:, s["Z"]].sum(axis=0)
    if "Zp" not in mask.masked:
        d_z[1:] = d_input_rows[:, s["Zp"]]
    return deps.oracle.backprop(cache, d_probs, d_z)


def train(config: NeuralCXConfig, train_manifest, val_manifest, deps: TrainDeps,
          mask: AblationMask | None = None,
          oracle_mode: str = "pretrained") -> TrainResult:
    """Fit the ranker; returns the best-on-validation parameters.

    The ablation mask, when given, is applied during training and every
    evaluation, so ablated models are fully retrained. In trainable mode
    the oracle's parameters join the Adam update via backpropagation
    through the assembled features.
    """
    if oracle_mode not in ORACLE_MODES:
        raise ValueError(f"unknown oracle mode {oracle_mode!r}")
    train_examples = [ex for ex in train_manifest.examples if ex.truth_index is not None]
    val_examples = [ex for ex in val_manifest.examples if ex.truth_index is not None]
    if not train_examples or not val_examples:
        raise ValueError("training needs labeled train and validation examples")
    mask = mask or AblationMask.none()

    joint = oracle_mode == "trainable"
    if joint and not deps.oracle.trainable:
        raise ValueError(
            f"oracle mode 'trainable' requires a trainable oracle, got "
            f"{deps.oracle.kind!r} (trainable={deps.oracle.trainable})"
        )

    k = train_examples[0].k
    layout = _validate_layout(config, deps, k)
    params = init_mlp(layout.total_dim, config.n_layers, config.hidden_units,
                      config.seed)
    state = AdamState.zeros_like(params.tensors())
    oracle_param_names = []
    oracle_state = None
    if joint:
        oracle_param_names = sorted(deps.oracle.get_params())
        oracle_state = AdamState.zeros_like(
            [deps.oracle.get_params()[n] for n in oracle_param_names])

    shuffle_rng = key_rng("neuralcx-shuffle", config.seed)
    best = {"recall5": -1.0, "epoch": 0,
            "params": params.copy(),
            "oracle": _copy_oracle_params(deps.oracle) if joint else None}
    log = []
    step = 0
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_examples))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            batch = [train_examples[i] for i in batch_idx]
            X = np.stack([
                assemble_example(ex, deps, layout, mask, cache_oracle=not joint)
                for ex in batch
            ])
            truths = np.array([ex.truth_index for ex in batch])
            drop_rng = key_rng("neuralcx-dropout", config.seed, epoch, start)
            if joint:
                loss, grads, d_input = backward(
                    params, X, truths, dropout_active=True,
                    dropout_p=config.dropout_p, rng=drop_rng,
                    want_input_grads=True)
            else:
                loss, grads = backward(params, X, truths, dropout_active=True,
                                       dropout_p=config.dropout_p, rng=drop_rng)
            losses.append(loss)
            step += 1
            params = MLPParams.from_tensors(
                adam_step(params.tensors(), grads.tensors(), state, step,
                          lr=config.learning_rate))
            if joint:
                oracle_grads = {n: np.zeros_like(deps.oracle.get_params()[n])
                                for n in oracle_param_names}
                for j, ex in enumerate(batch):
                    part = _oracle_batch_backprop(ex, deps, layout, mask, d_input[j])
                    for n in oracle_param_names:
                        oracle_grads[n] += part[n]
                current = [deps.oracle.get_params()[n] for n in oracle_param_names]
                updated = adam_step(current,
                                    [oracle_grads[n] for n in oracle_param_names],
                                    oracle_state, step,
                                    lr=config.learning_rate * config.oracle_lr_scale)
                deps.oracle.set_params(dict(zip(oracle_param_names, updated)))

        positions = _eval_positions(params, val_examples, deps, layout, mask)
        r1, r5 = _recalls(positions)
        elapsed = time.perf_counter() - t0 if config.timing else None
        log.append(EpochLog(epoch=epoch, train_loss=float(np.mean(losses)),
                            val_recall1=r1, val_recall5=r5, wallclock_s=elapsed))
        if r5 > best["recall5"]:
            best = {"recall5": r5, "epoch": epoch, "params": params.copy(),
                    "oracle": _copy_oracle_params(deps.oracle) if joint else None}
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    if joint:
        deps.oracle.set_params(best["oracle"])
    return TrainResult(params=best["params"], oracle_params=best["oracle"],
                       log=log, best_epoch=best["epoch"],
                       best_val_recall5=best["recall5"], layout=layout,
                       mask=mask, config=config, oracle_mode=oracle_mode)


def _copy_oracle_params(oracle) -> dict:
    return {n: p.copy() for n, p in oracle.get_params().items()}


# ---------------------------------------------------------------------------
# checkpoint + log files

CHECKPOINT_MAGIC = b"CXCK"
CHECKPOINT_VERSION = 1


def _config_echo(result: TrainResult) -> dict:
    cfg = result.config
    return {
        "n_layers": cfg.n_layers,
        "hidden_units": cfg.hidden_units,
        "dropout_p": cfg.dropout_p,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "max_epochs": cfg.max_epochs,
        "patience": cfg.patience,
        "seed": cfg.seed,
        "feature_dims": result.layout.dims,
        "mask": result.mask.spec_string,
        "noise_seed": result.mask.noise_seed,
        "oracle_mode": result.oracle_mode,
        "best_epoch": result.best_epoch,
    }


def write_checkpoint(result: TrainResult, path, extra_echo: dict | None = None) -> None:
    """Versioned binary checkpoint: config echo plus named float64 tensors."""
    named = []
    for i, (w, b) in enumerate(zip(result.params.weights, result.params.biases)):
        prefix = "out" if i == len(result.params.weights) - 1 else f"layer{i}"
        named.append((f"{prefix}/W", w))
        named.append((f"{prefix}/b", b))
    if result.oracle_params is not None:
        for name in sorted(result.oracle_params):
            named.append((f"oracle/{name}", result.oracle_params[name]))

    payload = _config_echo(result)
    if extra_echo:
        payload.update(extra_echo)
    echo = json.dumps(payload, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(echo)))
        f.write(echo)
        f.write(struct.pack("<I", len(named)))
        for name, tensor in named:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            arr = np.ascontiguousarray(tensor, dtype="<f8")
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Returns (config echo dict, {tensor name: array})."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<H", f.read(2))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (echo_len,) = struct.unpack("<I", f.read(4))
        echo = json.loads(f.read(echo_len).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            tensors[name] = np.frombuffer(f.read(n * 8), dtype="<f8").reshape(shape).copy()
    return echo, tensors


def params_from_checkpoint(tensors: dict) -> tuple:
    """Rebuild (MLPParams, oracle params or None) from checkpoint tensors."""
    layer_names = sorted({n.split("/")[0] for n in tensors if n.startswith("layer")},
                         key=lambda s: int(s[5:]))
    weights = [tensors[f"{n}/W"] for n in layer_names] + [tensors["out/W"]]
    biases = [tensors[f"{n}/b"] for n in layer_names] + [tensors["out/b"]]
    oracle = {n.split("/", 1)[1]: t for n, t in tensors.items()
              if n.startswith("oracle/")}
    return MLPParams(weights=weights, biases=biases), (oracle or None)


def write_train_log(log, path) -> None:
    """Append-only CSV of per-epoch training statistics."""
    lines = ["epoch,train_loss,val_recall@1,val_recall@5,wallclock_s"]
    for row in log:
        wallclock = "" if row.wallclock_s is None else f"{row.wallclock_s:.3f}"
        lines.append(f"{row.epoch},{row.train_loss:.6f},{row.val_recall1:.2f},"
                     f"{row.val_recall5:.2f},{wallclock}")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines))
        f.write("\n")
    os.replace(tmp, path)
