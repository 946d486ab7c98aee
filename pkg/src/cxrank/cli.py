"""Command-line pipeline: generate, build, train, eval, ablate, report.

Config precedence is flags > config file (JSON, --config) > defaults,
and the effective configuration is echoed into the output directory of
every run for provenance. All file writes are atomic. Subcommands are
deterministic given their flags and seed; wallclock columns stay empty
unless --timing is passed, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .core import stable_seed
from .data import (
    SyntheticSpec,
    build_dataset,
    generate_synthetic,
    read_feature_store,
    read_manifest,
    read_truth,
    split_dataset,
    write_feature_store,
    write_manifest,
    write_truth,
)
from .evaluation import (
    GridConfig,
    lambda_sweep,
    read_results_csv,
    run_ablation,
    run_experiment,
    score_dataset,
    summarize,
)
from .fixtures import TABLE_ABLATION_MASKS
from .neuralcx import (
    NeuralCXConfig,
    TrainDeps,
    desk_feature_dims,
    evaluate_ranker,
    params_from_checkpoint,
    parse_mask,
    read_checkpoint,
    train,
    write_checkpoint,
    write_train_log,
)
from .oracle import OracleDims, TableOracle, UntrainedOracle
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

# (dest, type, default, help) per subcommand; defaults live here so that
# --help can show them and the config-file merge can fill gaps
_COMMON = [
    ("seed", int, None, "base random seed"),
    ("out", str, None, "output directory"),
    ("manifest", str, None, "dataset manifest path"),
    ("features", str, None, "feature store path"),
    ("config", str, None, "JSON config file; flags override its entries"),
]

_GENERATE = [
    ("n", int, 1000, "number of raw examples to generate"),
    ("k", int, 24, "candidates per example"),
    ("answers", int, 32, "answer vocabulary size"),
    ("v_dim", int, 64, "image feature dimension"),
    ("q_dim", int, 32, "question embedding dimension"),
    ("emb_dim", int, 16, "answer embedding dimension"),
    ("z_dim", int, 16, "multimodal embedding dimension"),
    ("rank_skew", float, 0.44, "target P(truth rank <= 5)"),
    ("same_answer_rate", float, 0.09, "labels that repeat the original answer"),
    ("no_complement_rate", float, 0.22, "records emitted without a label"),
    ("asymmetry_rate", float, 0.03, "labels missing from the candidate list"),
    ("visual_mark_rate", float, 0.25, "truths carrying the visual cue"),
    ("visual_mark_strength", float, 0.55, "mean alignment of marked truths"),
    ("dominant_cluster_rate", float, 0.8, "answers drawn from the dominant cluster"),
    ("truth_near_rate", float, 0.75, "truth answers in the original's cluster"),
    ("distractor_same_rate", float, 0.25, "distractors repeating the answer"),
    ("distractor_near_rate", float, 0.08, "distractors in the answer cluster"),
    ("clusters", int, 6, "semantic answer clusters"),
    ("cluster_spread", float, 0.55, "within-cluster embedding spread"),
    ("oracle_accuracy", float, 0.477, "planted oracle mode-correct rate"),
    ("oracle_sharpness", float, 4.0, "planted oracle mode sharpness"),
    ("oracle_tail_noise", float, 0.6, "planted oracle tail logit noise"),
    ("include_oracle_records", bool, False, "dump oracle outputs into the store"),
]

_BUILD = [
    ("split", str, "built", "split tag for the filtered manifest"),
]

_NEURAL = [
    ("layers", int, 2, "hidden layers"),
    ("hidden", int, 512, "hidden units per layer"),
    ("dropout", float, 0.25, "dropout probability between hidden layers"),
    ("lr", float, 0.0001, "Adam learning rate"),
    ("batch_size", int, 64, "examples per training batch"),
    ("epochs", int, 20, "maximum training epochs"),
    ("patience", int, 3, "early-stopping patience on validation recall@5"),
]

_TRAIN = _NEURAL + [
    ("truth", str, None, "generator truth sidecar (planted/trainable oracles)"),
    ("oracle", str, "planted", "oracle: untrained | planted | trainable | table"),
    ("mask", str, "none", "ablation mask spec, e.g. V,Rank or all"),
    ("noise_seed", int, 0, "seed for ablation noise"),
    ("noise_low", float, 0.0, "ablation noise lower bound"),
    ("noise_high", float, 1.0, "ablation noise upper bound"),
    ("val_fraction", float, 0.1, "fraction reserved for validation"),
    ("timing", bool, False, "record wallclock columns (breaks rerun identity)"),
]

_EVAL = _NEURAL + [
    ("truth", str, None, "generator truth sidecar"),
    ("model", str, "grid",
     "random | distance | hnm | embedding | two_headed | neuralcx | grid"),
    ("oracle", str, "planted", "oracle for hnm/embedding: untrained | planted | table"),
    ("checkpoint", str, None, "checkpoint for --model neuralcx"),
    ("lam", float, 1.0, "embedding-model lambda"),
    ("sweep_lambda", str, None, "comma-separated lambdas to sweep (embedding)"),
    ("test_fraction", float, 0.5, "grid: fraction reserved for the test split"),
    ("val_fraction", float, 0.2, "grid: validation fraction of the remainder"),
    ("timing", bool, False, "record wallclock columns (breaks rerun identity)"),
]

_ABLATE = _NEURAL + [
    ("truth", str, None, "generator truth sidecar"),
    ("preset", str, None, "mask preset: table3"),
    ("masks", str, None, "semicolon-separated mask specs, e.g. 'V;A;none'"),
    ("noise_seed", int, 0, "seed for ablation noise"),
    ("test_fraction", float, 0.5, "fraction reserved for the test split"),
    ("val_fraction", float, 0.2, "validation fraction of the remainder"),
    ("timing", bool, False, "record wallclock columns (breaks rerun identity)"),
]

_REPORT = [
    ("results", str, None, "results.csv produced by eval or ablate"),
    ("histograms", str, None, "rank_histograms.csv produced alongside it"),
    ("sweep", str, None, "lambda_sweep.csv to include"),
    ("figures", bool, True, "render figures alongside the delimited output"),
]

_SPECS = {
    "generate": _COMMON + _GENERATE,
    "build": _COMMON + _BUILD,
    "train": _COMMON + _TRAIN,
    "eval": _COMMON + _EVAL,
    "ablate": _COMMON + _ABLATE,
    "report": _COMMON + _REPORT,
}


class CliError(Exception):
    pass


def _add_options(parser, spec):
    for dest, typ, default, help_text in spec:
        flag = "--" + dest.replace("_", "-")
        if typ is bool:
            parser.add_argument(flag, dest=dest, action="store_const", const=True,
                                default=None, help=f"{help_text} (default: {default})")
        else:
            parser.add_argument(flag, dest=dest, type=typ, default=None,
                                help=f"{help_text} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxrank",
        description="counterexample ranking: synthetic data, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "generate": "write a synthetic raw manifest, feature store, and truth sidecar",
        "build": "filter a raw manifest into a usable dataset (prints drop counts)",
        "train": "train the neural ranker; writes checkpoint and training log",
        "eval": "evaluate one model or the whole grid; writes results.csv",
        "ablate": "retrain once per ablation mask; writes sorted results.csv",
        "report": "render comparison table and figures from results files",
    }
    for name, spec in _SPECS.items():
        p = sub.add_parser(name, help=descriptions[name], description=descriptions[name])
        _add_options(p, spec)
        p.set_defaults(command=name)
    return parser


def effective_config(args, command: str) -> dict:
    spec = _SPECS[command]
    file_cfg = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            file_cfg = json.load(f)
        known = {dest for dest, _, _, _ in spec}
        unknown = set(file_cfg) - known
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
    effective = {}
    for dest, _, default, _ in spec:
        flag_value = getattr(args, dest)
        if flag_value is not None:
            effective[dest] = flag_value
        elif dest in file_cfg:
            effective[dest] = file_cfg[dest]
        else:
            effective[dest] = default
    return effective


def _echo_config(cfg: dict, command: str, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, "effective_config.json")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        json.dump({"command": command, "config": cfg}, f, sort_keys=True, indent=2)
        f.write("\n")
    os.replace(tmp, path)


def _require(cfg: dict, *keys) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise CliError(f"missing required option(s): {flags}")


def _neural_config(cfg: dict, store, k: int, seed: int) -> NeuralCXConfig:
    d = store.dims
    return NeuralCXConfig(
        n_layers=cfg["layers"], hidden_units=cfg["hidden"],
        dropout_p=cfg["dropout"], learning_rate=cfg["lr"],
        batch_size=cfg["batch_size"], max_epochs=cfg["epochs"],
        patience=cfg["patience"], seed=seed,
        feature_dims=desk_feature_dims(d.v_dim, d.q_dim, d.emb_dim, d.z_dim, k),
        timing=bool(cfg.get("timing")),
    )


def _load_dataset(cfg: dict):
    _require(cfg, "manifest", "features")
    manifest = read_manifest(cfg["manifest"])
    store = read_feature_store(cfg["features"])
    store.validate_coverage(manifest)
    return manifest, store


def _make_oracle(kind: str, cfg: dict, store, seed: int):
    if kind == "untrained":
        dims = OracleDims(v_dim=store.dims.v_dim, q_dim=store.dims.q_dim,
                          z_dim=store.dims.z_dim, n_answers=store.dims.n_answers)
        return UntrainedOracle(stable_seed("cli-untrained-oracle", seed), dims)
    if kind == "table":
        if not store.dz:
            raise CliError("feature store has no oracle records for --oracle table")
        return TableOracle(store)
    if kind in ("planted", "trainable"):
        _require(cfg, "truth")
        truth = read_truth(cfg["truth"])
        return truth.planted_oracle(trainable=(kind == "trainable"))
    raise CliError(f"unknown oracle kind {kind!r}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: dict) -> int:
    _require(cfg, "seed", "out")
    spec = SyntheticSpec(
        n_examples=cfg["n"], seed=cfg["seed"], k=cfg["k"], n_answers=cfg["answers"],
        v_dim=cfg["v_dim"], q_dim=cfg["q_dim"], emb_dim=cfg["emb_dim"],
        z_dim=cfg["z_dim"], rank_skew=cfg["rank_skew"],
        same_answer_rate=cfg["same_answer_rate"],
        no_complement_rate=cfg["no_complement_rate"],
        asymmetry_rate=cfg["asymmetry_rate"],
        n_clusters=cfg["clusters"], cluster_spread=cfg["cluster_spread"],
        dominant_cluster_rate=cfg["dominant_cluster_rate"],
        truth_near_rate=cfg["truth_near_rate"],
        distractor_same_rate=cfg["distractor_same_rate"],
        distractor_near_rate=cfg["distractor_near_rate"],
        visual_mark_rate=cfg["visual_mark_rate"],
        visual_mark_strength=cfg["visual_mark_strength"],
        include_oracle_records=bool(cfg["include_oracle_records"]),
        oracle_accuracy=cfg["oracle_accuracy"],
        oracle_sharpness=cfg["oracle_sharpness"],
        oracle_tail_noise=cfg["oracle_tail_noise"],
    )
    manifest, store, truth = generate_synthetic(spec)
    outdir = cfg["out"]
    _echo_config(cfg, "generate", outdir)
    write_manifest(manifest, os.path.join(outdir, "manifest.cxm"))
    write_feature_store(store, os.path.join(outdir, "features.cxfs"))
    write_truth(truth, os.path.join(outdir, "truth.json"))
    tallies = {"ok": 0, "no_complement": 0, "asymmetric": 0}
    for status in truth.status.values():
        tallies[status] += 1
    print(f"generated {len(manifest)} raw examples into {outdir}")
    print(f"  labeled-in-list: {tallies['ok']}  unlabeled: {tallies['no_complement']}"
          f"  label-outside-list: {tallies['asymmetric']}")
    return 0


def cmd_build(cfg: dict) -> int:
    _require(cfg, "manifest", "out")
    raw = read_manifest(cfg["manifest"])
    built = build_dataset(raw, split=cfg["split"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _echo_config(cfg, "build", out)
    write_manifest(built, os.path.join(out, "manifest.cxm"))
    c = built.counts
    print(f"kept {c.kept} of {c.total} examples "
          f"(dropped {c.dropped_no_complement} without complement, "
          f"{c.dropped_knn_asymmetry} with complement outside the candidates)")
    return 0


def cmd_train(cfg: dict) -> int:
    _require(cfg, "seed", "out")
    manifest, store = _load_dataset(cfg)
    if not manifest.examples:
        raise CliError("manifest holds no examples")
    k = manifest.examples[0].k
    oracle = _make_oracle(cfg["oracle"], cfg, store, cfg["seed"])
    mode = {"untrained": "untrained", "planted": "pretrained",
            "table": "pretrained", "trainable": "trainable"}[cfg["oracle"]]
    mask = parse_mask(cfg["mask"], cfg["noise_seed"], cfg["noise_low"], cfg["noise_high"])
    config = _neural_config(cfg, store, k, cfg["seed"])
    train_set, val_set = split_dataset(
        manifest, cfg["val_fraction"], stable_seed("cli-train-split", cfg["seed"]))
    deps = TrainDeps(store=store, table=store.answer_table, oracle=oracle)
    result = train(config, train_set, val_set, deps, mask=mask, oracle_mode=mode)

    outdir = cfg["out"]
    _echo_config(cfg, "train", outdir)
    extra = {"oracle_kind": cfg["oracle"],
             "oracle_seed": stable_seed("cli-untrained-oracle", cfg["seed"])}
    write_checkpoint(result, os.path.join(outdir, "checkpoint.cxck"), extra_echo=extra)
    write_train_log(result.log, os.path.join(outdir, "train_log.csv"))
    best = result.log[result.best_epoch - 1]
    print(f"best epoch {result.best_epoch}: "
          f"val recall@1 {best.val_recall1:.2f}, val recall@5 {best.val_recall5:.2f}")
    return 0


def _eval_neuralcx(cfg: dict, manifest, store):
    _require(cfg, "checkpoint")
    echo, tensors = read_checkpoint(cfg["checkpoint"])
    params, oracle_overlay = params_from_checkpoint(tensors)
    kind = echo.get("oracle_kind", "planted")
    if kind == "untrained":
        dims = OracleDims(v_dim=store.dims.v_dim, q_dim=store.dims.q_dim,
                          z_dim=store.dims.z_dim, n_answers=store.dims.n_answers)
        oracle = UntrainedOracle(echo["oracle_seed"], dims)
    elif kind == "table":
        oracle = TableOracle(store)
    else:
        _require(cfg, "truth")
        truth = read_truth(cfg["truth"])
        oracle = truth.planted_oracle(trainable=bool(oracle_overlay))
        if oracle_overlay:
            oracle.set_params(oracle_overlay)
    mask = parse_mask(echo["mask"], echo["noise_seed"])
    deps = TrainDeps(store=store, table=store.answer_table, oracle=oracle)
    from .neuralcx import FeatureLayout

    layout = FeatureLayout(echo["feature_dims"])
    rankings = evaluate_ranker(params, manifest, deps, layout, mask=mask)
    return rankings, echo["oracle_mode"], mask.spec_string


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "seed", "out")
    manifest, store = _load_dataset(cfg)
    table = store.answer_table
    model = cfg["model"]
    seed = cfg["seed"]
    outdir = cfg["out"]
    _echo_config(cfg, "eval", outdir)

    from .evaluation import results_to_csv
    from .report import write_lambda_sweep_csv

    sweep = None
    if model == "grid":
        _require(cfg, "truth")
        truth = read_truth(cfg["truth"])
        k = manifest.examples[0].k
        grid = GridConfig(
            seed=seed, test_fraction=cfg["test_fraction"],
            val_fraction=cfg["val_fraction"],
            embedding_lambda=cfg["lam"],
            neural=_neural_config(cfg, store, k, seed),
            two_headed=TwoHeadedTrainConfig(seed=seed),
            timing=bool(cfg.get("timing")),
        )
        results = run_experiment(grid, manifest, store, truth)
    elif model == "neuralcx":
        rankings, mode, mask_spec = _eval_neuralcx(cfg, manifest, store)
        results = [summarize("neuralcx", mode, rankings, seed, mask=mask_spec)]
    elif model == "random":
        rankings = score_dataset(manifest.examples, lambda ex: score_random(ex, seed))
        results = [summarize("random", "-", rankings, seed)]
    elif model == "distance":
        rankings = score_dataset(manifest.examples, lambda ex: score_distance(ex, store))
        results = [summarize("distance", "-", rankings, seed)]
    elif model == "hnm":
        oracle = _make_oracle(cfg["oracle"], cfg, store, seed)
        rankings = score_dataset(manifest.examples,
                                 lambda ex: score_hard_negative(ex, oracle, store))
        results = [summarize("hnm", cfg["oracle"], rankings, seed)]
    elif model == "embedding":
        oracle = _make_oracle(cfg["oracle"], cfg, store, seed)
        if cfg["sweep_lambda"]:
            lams = [float(tok) for tok in cfg["sweep_lambda"].split(",")]
            sweep = lambda_sweep(lams, manifest.examples, oracle, store, table,
                                 seed, oracle_label=cfg["oracle"])
            results = [result for _, result in sweep]
        else:
            params = EmbeddingModelParams(cfg["lam"])
            cache: dict = {}
            rankings = score_dataset(
                manifest.examples,
                lambda ex: score_embedding(ex, oracle, store, table, params, cache))
            results = [summarize("embedding", cfg["oracle"], rankings, seed)]
    elif model == "two_headed":
        _require(cfg, "truth")
        truth = read_truth(cfg["truth"])
        oracle = truth.planted_oracle()
        train_set, test = split_dataset(manifest, cfg["test_fraction"],
                                        stable_seed("cli-eval-split", seed),
                                        tags=("train", "test"))
        params = train_two_headed(train_set, oracle, store, table,
                                  TwoHeadedTrainConfig(seed=seed))
        rankings = score_dataset(
            test.examples, lambda ex: two_headed_score(ex, oracle, store, table, params))
        results = [summarize("two_headed", "planted", rankings, seed)]
    else:
        raise CliError(f"unknown model {model!r}")

    results_to_csv(results, os.path.join(outdir, "results.csv"))
    from .report import write_histogram_csv

    write_histogram_csv(results, os.path.join(outdir, "rank_histograms.csv"))
    if sweep is not None:
        write_lambda_sweep_csv(sweep, os.path.join(outdir, "lambda_sweep.csv"))
    for r in results:
        print(f"{r.model:<22} {r.oracle_mode:<10} mask={r.mask:<14} "
              f"recall@1 {r.recall_at_1:6.2f}  recall@5 {r.recall_at_5:6.2f}  "
              f"n={r.n_examples}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    _require(cfg, "seed", "out", "truth")
    manifest, store = _load_dataset(cfg)
    truth = read_truth(cfg["truth"])
    if cfg["preset"] == "table3":
        mask_specs = list(TABLE_ABLATION_MASKS)
    elif cfg["preset"]:
        raise CliError(f"unknown preset {cfg['preset']!r}")
    elif cfg["masks"]:
        mask_specs = [tok.strip() for tok in cfg["masks"].split(";") if tok.strip()]
    else:
        raise CliError("need --preset or --masks")
    masks = [parse_mask(spec, cfg["noise_seed"]) for spec in mask_specs]

    k = manifest.examples[0].k
    grid = GridConfig(
        seed=cfg["seed"], test_fraction=cfg["test_fraction"],
        val_fraction=cfg["val_fraction"],
        neural=_neural_config(cfg, store, k, cfg["seed"]),
        timing=bool(cfg.get("timing")),
    )
    results = run_ablation(masks, grid, manifest, store, truth)

    outdir = cfg["out"]
    _echo_config(cfg, "ablate", outdir)
    from .evaluation import results_to_csv
    from .report import write_histogram_csv

    results_to_csv(results, os.path.join(outdir, "results.csv"))
    write_histogram_csv(results, os.path.join(outdir, "rank_histograms.csv"))
    for r in results:
        print(f"mask={r.mask:<16} recall@1 {r.recall_at_1:6.2f}  "
              f"recall@5 {r.recall_at_5:6.2f}")
    return 0


def cmd_report(cfg: dict) -> int:
    _require(cfg, "out", "results")
    from types import SimpleNamespace

    from .evaluation import EvalResult
    from .report import emit_report, read_histogram_csv

    rows = read_results_csv(cfg["results"])
    hist_path = cfg["histograms"]
    if hist_path is None:
        guess = os.path.join(os.path.dirname(cfg["results"]), "rank_histograms.csv")
        hist_path = guess if os.path.exists(guess) else None
    if hist_path is None:
        raise CliError("need --histograms (rank_histograms.csv) to build the report")
    hist_map = read_histogram_csv(hist_path)

    results = []
    for row in rows:
        key = (row["model"], row["oracle_mode"], row["mask"])
        hist = hist_map.get(key)
        if hist is None or sum(hist) != row["n"]:
            raise CliError(f"histogram data missing or inconsistent for {key}")
        results.append(EvalResult(
            model=row["model"], oracle_mode=row["oracle_mode"], mask=row["mask"],
            recall_at_1=row["recall_at_1"], recall_at_5=row["recall_at_5"],
            n_examples=row["n"], histogram=tuple(hist), seed=row["seed"],
            wallclock_s=row["wallclock_s"],
        ))

    sweep = None
    if cfg["sweep"]:
        sweep = []
        with open(cfg["sweep"], "r", encoding="utf-8") as f:
            header = f.readline().strip()
            if header != "lambda,recall_at_1,recall_at_5,n,seed":
                raise CliError(f"unexpected sweep header: {header!r}")
            for line in f:
                if not line.strip():
                    continue
                lam, r1, r5, n, seed = line.strip().split(",")
                sweep.append((float(lam), SimpleNamespace(
                    recall_at_1=float(r1), recall_at_5=float(r5),
                    n_examples=int(n), seed=int(seed))))

    _echo_config(cfg, "report", cfg["out"])
    paths = emit_report(results, cfg["out"], sweep=sweep,
                        figures=bool(cfg["figures"]))
    for name in sorted(paths):
        print(f"wrote {paths[name]}")
    return 0


_HANDLERS = {
    "generate": cmd_generate,
    "build": cmd_build,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = effective_config(args, args.command)
        return _HANDLERS[args.command](cfg)
    except (CliError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
