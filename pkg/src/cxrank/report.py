"""Report emission: delimited results, a comparison table, and figures.

Alongside the results CSV the report writes a plain-text table that
juxtaposes desk-scale numbers with the full-scale reference fixtures
(clearly labeled as non-comparable scales), a per-cell rank-histogram
CSV, and matplotlib renderings of the recall bars, rank histograms, and
-- when sweep results are passed -- the embedding-model lambda curve.
Text outputs are byte-deterministic for identical inputs.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import results_to_csv
from .fixtures import FULL_SCALE_ABLATIONS, reference_for

__all__ = [
    "emit_report",
    "write_lambda_sweep_csv",
    "write_histogram_csv",
    "read_histogram_csv",
]

_PNG_META = {"Software": "cxrank"}


def _fmt(value, width: int = 8) -> str:
    if value is None:
        return "-".rjust(width)
    return f"{value:.2f}".rjust(width)


def _comparison_lines(results) -> list:
    lines = [
        "counterexample ranking: desk-scale results vs full-scale reference",
        "",
        "desk columns come from synthetic data at reduced dimensions; the",
        "reference columns were obtained on the real full-scale dataset and",
        "are shown for orientation only -- the scales are NOT comparable.",
        "",
        f"{'model':<22}{'oracle':<12}{'mask':<16}"
        f"{'desk@1':>8}{'desk@5':>8}{'ref@1':>8}{'ref@5':>8}{'prior@5':>9}",
        "-" * 91,
    ]
    for r in results:
        if r.mask != "none":
            ref5 = ref1 = prior = None
            for a in FULL_SCALE_ABLATIONS:
                if a.mask == r.mask:
                    ref5, ref1 = a.recall_at_5, a.recall_at_1
        else:
            ref = reference_for(r.model, r.oracle_mode)
            ref1 = ref.recall_at_1 if ref else None
            ref5 = ref.recall_at_5 if ref else None
            prior = ref.prior_recall_at_5 if ref else None
        lines.append(
            f"{r.model:<22}{r.oracle_mode:<12}{r.mask:<16}"
            f"{_fmt(r.recall_at_1)}{_fmt(r.recall_at_5)}"
            f"{_fmt(ref1)}{_fmt(ref5)}{_fmt(prior, 9)}"
        )
    return lines


def _write_text(lines, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines))
        f.write("\n")
    os.replace(tmp, path)


HISTOGRAM_COLUMNS = ("model", "oracle_mode", "mask", "position", "count")


def write_histogram_csv(results, path) -> None:
    import csv

    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HISTOGRAM_COLUMNS)
        for r in results:
            for pos, count in enumerate(r.histogram):
                writer.writerow([r.model, r.oracle_mode, r.mask, pos, count])
    os.replace(tmp, path)


def read_histogram_csv(path) -> dict:
    """(model, oracle_mode, mask) -> list of per-position counts."""
    import csv

    hist_map: dict = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader, ()))
        if header != HISTOGRAM_COLUMNS:
            raise ValueError(f"unexpected histogram header: {header!r}")
        for record in reader:
            if not record:
                continue
            model, mode, mask, pos, count = record
            hist_map.setdefault((model, mode, mask), []).append((int(pos), int(count)))
    return {key: [c for _, c in sorted(entries)] for key, entries in hist_map.items()}


def _cell_label(r) -> str:
    label = r.model if r.oracle_mode == "-" else f"{r.model}\n{r.oracle_mode}"
    if r.mask != "none":
        label += f"\nmask={r.mask}"
    return label


def _recall_figure(results, path) -> None:
    labels = [_cell_label(r) for r in results]
    desk = [r.recall_at_5 for r in results]
    refs = []
    for r in results:
        ref = reference_for(r.model, r.oracle_mode) if r.mask == "none" else None
        refs.append(ref.recall_at_5 if ref and ref.recall_at_5 else np.nan)

    x = np.arange(len(results))
    fig, ax = plt.subplots(figsize=(max(7.0, 1.1 * len(results)), 4.5))
    ax.bar(x - 0.2, desk, width=0.4, label="desk scale (synthetic)")
    ax.bar(x + 0.2, refs, width=0.4, label="full-scale reference", alpha=0.6)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("recall@5 (%)")
    ax.set_title("recall@5 by model (scales not comparable)")
    ax.axhline(100.0 * 5 / 24, color="gray", linestyle=":", linewidth=1,
               label="chance (5/24)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def _histogram_figure(results, path) -> None:
    n = len(results)
    cols = min(5, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.0 * cols, 2.4 * rows),
                             squeeze=False)
    for i, r in enumerate(results):
        ax = axes[i // cols][i % cols]
        ax.bar(np.arange(len(r.histogram)), r.histogram, width=0.9)
        ax.set_title(_cell_label(r).replace("\n", " "), fontsize=7)
        ax.set_xlabel("truth position", fontsize=6)
        ax.tick_params(labelsize=6)
    for i in range(n, rows * cols):
        axes[i // cols][i % cols].axis("off")
    fig.suptitle("rank of the labeled counterexample", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def write_lambda_sweep_csv(sweep, path) -> None:
    """CSV of (lambda, recall) pairs from an embedding-model sweep."""
    lines = ["lambda,recall_at_1,recall_at_5,n,seed"]
    for lam, result in sweep:
        lines.append(f"{lam:.4f},{result.recall_at_1:.2f},"
                     f"{result.recall_at_5:.2f},{result.n_examples},{result.seed}")
    _write_text(lines, path)


def _lambda_figure(sweep, path) -> None:
    lams = [lam for lam, _ in sweep]
    r5 = [result.recall_at_5 for _, result in sweep]
    r1 = [result.recall_at_1 for _, result in sweep]
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.plot(lams, r5, marker="o", label="recall@5")
    ax.plot(lams, r1, marker="s", label="recall@1")
    ax.set_xlabel("similarity weight (lambda)")
    ax.set_ylabel("recall (%)")
    ax.set_title("embedding model: similarity vs repetition trade-off")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def emit_report(results, outdir, sweep=None, figures: bool = True) -> dict:
    """Write the report bundle; returns {artifact name: path}.

    Always emits ``results.csv``, ``comparison.txt`` and
    ``rank_histograms.csv``; figures and the lambda-sweep artifacts are
    added when requested/available.
    """
    if not results:
        raise ValueError("no results to report")
    os.makedirs(outdir, exist_ok=True)
    paths = {}

    paths["results"] = os.path.join(outdir, "results.csv")
    results_to_csv(results, paths["results"])

    paths["comparison"] = os.path.join(outdir, "comparison.txt")
    _write_text(_comparison_lines(results), paths["comparison"])

    paths["histograms"] = os.path.join(outdir, "rank_histograms.csv")
    write_histogram_csv(results, paths["histograms"])

    if sweep:
        paths["lambda_sweep"] = os.path.join(outdir, "lambda_sweep.csv")
        write_lambda_sweep_csv(sweep, paths["lambda_sweep"])

    if figures:
        paths["recall_figure"] = os.path.join(outdir, "recall_at_5.png")
        _recall_figure(results, paths["recall_figure"])
        paths["histogram_figure"] = os.path.join(outdir, "rank_histograms.png")
        _histogram_figure(results, paths["histogram_figure"])
        if sweep:
            paths["lambda_figure"] = os.path.join(outdir, "lambda_sweep.png")
            _lambda_figure(sweep, paths["lambda_figure"])
    return paths
