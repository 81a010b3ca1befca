"""The recognition protocol: synthetic datasets per candidate recommender,
a grid of freshly trained hypothesis models, the held-out loss matrix,
and the identification decision (row-wise argmin).

The predictive recommender is never a generator row, and is excluded
from the hypothesis columns unless explicitly enabled: it reads the
user's actual future and could not run as a real recommender.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GridError, IdentificationError, RecrecogError
from .model import (
    InteractionDataset,
    ModelConfig,
    TrainedUserModel,
    build_eval_set,
    evaluate_nll,
    train_user_model,
)
from .recommenders import RecommenderConfig
from .seeding import content_digest, derive_seed, digest_to_seed
from .synthgen import SynthGenConfig, SyntheticDataset, generate_rhsd

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RecognitionConfig:
    candidates: tuple
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthGenConfig = field(default_factory=SynthGenConfig)
    include_predictive_as_hypothesis: bool = False
    holdout_fraction: float = 0.2
    master_seed: int = 0

    def validate(self):
        if len(self.candidates) < 2:
            raise ConfigError("recognition needs at least 2 candidate recommenders")
        kinds = [c.kind for c in self.candidates]
        if len(set(kinds)) != len(kinds):
            raise ConfigError(f"candidate kinds must be unique, got {kinds}")
        for c in self.candidates:
            c.validate()
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in (0, 1)")
        self.model.validate()
        self.synth.validate()


@dataclass
class RecognitionReport:
    """Held-out loss matrix (rows: generating recommender, columns:
    hypothesis), identification per row, and per-cell metadata."""

    row_kinds: tuple
    col_kinds: tuple
    loss_matrix: list  # list of rows; None marks a failed cell
    identified: dict  # row kind -> col kind (or None if the row failed)
    ties: dict
    accuracy: float
    cell_meta: dict  # (row kind, col kind) -> dict
    seeds_manifest: dict
    year: int

    def to_json_dict(self):
        """Canonical serialization; volatile fields (wall time) excluded."""
        meta = {}
        for (r, c), m in sorted(self.cell_meta.items()):
            meta[f"{r}|{c}"] = {k: v for k, v in sorted(m.items()) if k != "wall_time"}
        return {
            "row_kinds": list(self.row_kinds),
            "col_kinds": list(self.col_kinds),
            "loss_matrix": self.loss_matrix,
            "identified": dict(sorted(self.identified.items())),
            "ties": dict(sorted(self.ties.items())),
            "accuracy": self.accuracy,
            "cell_meta": meta,
            "seeds_manifest": dict(sorted(self.seeds_manifest.items())),
            "year": self.year,
        }

    @classmethod
    def from_json_dict(cls, d):
        meta = {}
        for key, m in d.get("cell_meta", {}).items():
            r, c = key.split("|")
            meta[(r, c)] = m
        return cls(
            row_kinds=tuple(d["row_kinds"]),
            col_kinds=tuple(d["col_kinds"]),
            loss_matrix=[list(row) for row in d["loss_matrix"]],
            identified=dict(d["identified"]),
            ties=dict(d["ties"]),
            accuracy=d["accuracy"],
            cell_meta=meta,
            seeds_manifest=dict(d.get("seeds_manifest", {})),
            year=d["year"],
        )


def exclude_predictive(config: RecognitionConfig):
    """Effective hypothesis (column) list for a recognition config."""
    config.validate()
    if config.include_predictive_as_hypothesis:
        return list(config.candidates)
    cols = [c for c in config.candidates if c.kind != "predictive"]
    if not cols:
        raise ConfigError("no usable hypothesis recommenders after excluding predictive")
    return cols


def generator_rows(config: RecognitionConfig):
    """Generator (row) list: the predictive recommender never generates."""
    rows = [c for c in config.candidates if c.kind != "predictive"]
    if not rows:
        raise ConfigError("no usable generator recommenders (predictive never generates)")
    return rows


def identify(report_row, candidates):
    """Argmin over a loss row; ties break toward the earlier candidate.

    Returns (candidate, tied).  Entries that are None/NaN are skipped;
    if nothing survives, identification fails.
    """
    finite = [
        (i, v) for i, v in enumerate(report_row)
        if v is not None and np.isfinite(v)
    ]
    if not finite:
        raise IdentificationError("no successful cell in report row")
    best_i, best_v = min(finite, key=lambda t: (t[1], t[0]))
    tied = sum(1 for _, v in finite if v == best_v) > 1
    return candidates[best_i], tied


def split_dataset(dataset: InteractionDataset, holdout_fraction: float):
    """Deterministic, model-independent 80/20-style split.

    Membership is decided by hashing (dataset digest, item); the same
    dataset always splits the same way, for every caller.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("holdout_fraction must be in (0, 1)")
    digest = dataset.content_digest()

    def frac(*parts):
        return digest_to_seed(content_digest(digest, *parts)) / 2.0 ** 64

    train_pos, hold_pos = [], []
    for e in dataset.positives:
        (hold_pos if frac("pair", e.u, e.v) < holdout_fraction else train_pos).append(e)
    train_counts, hold_counts = {}, {}
    for a, c in dataset.count_targets.items():
        if frac("count", a) < holdout_fraction:
            hold_counts[a] = c
        else:
            train_counts[a] = c

    def make(positives, counts):
        kwargs = dict(
            positives=tuple(positives), count_targets=counts,
            year=dataset.year, provenance=dataset.provenance,
        )
        if isinstance(dataset, SyntheticDataset):
            return SyntheticDataset(generator_meta=dataset.generator_meta, **kwargs)
        return InteractionDataset(**kwargs)

    return make(train_pos, train_counts), make(hold_pos, hold_counts)


def _run_cell(args):
    """Train and evaluate one (generator, hypothesis) cell; isolated so a
    process pool can execute cells in parallel."""
    (graph, train_ds, hold_ds, hypothesis, model_cfg, cell_seed) = args
    start = time.perf_counter()
    cfg = dataclasses.replace(model_cfg, rng_seed=cell_seed)
    rhu = train_user_model(graph, train_ds, hypothesis, cfg)
    nll = evaluate_nll(rhu, graph, hold_ds, hypothesis)
    _, checksum = build_eval_set(graph, hold_ds, cfg.negatives_per_positive)
    return {
        "loss": float(nll),
        "epochs": cfg.epochs,
        "final_train_loss": rhu.history[-1],
        "wall_time": time.perf_counter() - start,
        "eval_checksum": checksum,
        "cell_seed": cell_seed,
        "status": "ok",
    }


def run_grid(graph, year: int, rnu: TrainedUserModel, config: RecognitionConfig,
             jobs: int = 1) -> RecognitionReport:
    """The full recognition grid.

    For each generator r: synthesize D(r) from the RNU, split it, and for
    each hypothesis r' train a fresh model on the train part under r' and
    score the holdout under r'.  Cells are independently seeded from the
    master seed and may run in parallel; failures mark their cell and
    drop the row from the accuracy, and the grid aborts only when at
    least half of all cells fail.
    """
    config.validate()
    rows = generator_rows(config)
    cols = exclude_predictive(config)
    seeds_manifest = {"master_seed": config.master_seed}

    datasets = {}
    for i, r in enumerate(rows):
        ds_seed = derive_seed(config.master_seed, "rhsd", i)
        gen_cfg = dataclasses.replace(config.synth, rng_seed=ds_seed)
        seeds_manifest[f"dataset_seed[{r.kind}]"] = ds_seed
        datasets[r.kind] = generate_rhsd(rnu, graph, year, r, gen_cfg)
        log.info("generated RHSD(%s): %d positives, %d count targets",
                 r.kind, len(datasets[r.kind].positives), len(datasets[r.kind].count_targets))

    jobs_spec = []
    for i, r in enumerate(rows):
        train_ds, hold_ds = split_dataset(datasets[r.kind], config.holdout_fraction)
        for j, c in enumerate(cols):
            cell_seed = derive_seed(config.master_seed, "cell", i, j)
            seeds_manifest[f"cell_seed[{r.kind}|{c.kind}]"] = cell_seed
            jobs_spec.append(((r.kind, c.kind),
                              (graph, train_ds, hold_ds, c, config.model, cell_seed)))

    results = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {key: pool.submit(_run_cell, args) for key, args in jobs_spec}
            for key, fut in futures.items():
                try:
                    results[key] = fut.result()
                except RecrecogError as exc:
                    results[key] = {"status": "failed", "error": str(exc)}
    else:
        for key, args in jobs_spec:
            try:
                results[key] = _run_cell(args)
            except RecrecogError as exc:
                results[key] = {"status": "failed", "error": str(exc)}

    n_failed = sum(1 for m in results.values() if m["status"] != "ok")
    if n_failed * 2 >= len(results):
        raise GridError(f"{n_failed} of {len(results)} grid cells failed")

    loss_matrix = []
    identified, ties = {}, {}
    correct, counted = 0, 0
    col_kinds = tuple(c.kind for c in cols)
    for r in rows:
        row_losses = []
        row_failed = False
        for c in cols:
            meta = results[(r.kind, c.kind)]
            if meta["status"] == "ok":
                row_losses.append(meta["loss"])
            else:
                row_losses.append(None)
                row_failed = True
        loss_matrix.append(row_losses)
        try:
            winner, tied = identify(row_losses, cols)
            identified[r.kind] = winner.kind
            ties[r.kind] = tied
        except IdentificationError:
            identified[r.kind] = None
            ties[r.kind] = False
        if not row_failed and r.kind in col_kinds:
            counted += 1
            if identified[r.kind] == r.kind:
                correct += 1

    report = RecognitionReport(
        row_kinds=tuple(r.kind for r in rows),
        col_kinds=col_kinds,
        loss_matrix=loss_matrix,
        identified=identified,
        ties=ties,
        accuracy=(correct / counted) if counted else 0.0,
        cell_meta={key: meta for key, meta in results.items()},
        seeds_manifest=seeds_manifest,
        year=year,
    )
    return report


def cross_seed_summary(reports):
    """Elementwise mean/stddev of loss matrices plus per-row majority-vote
    identification across same-shaped reports."""
    if not reports:
        raise ConfigError("cross_seed_summary needs at least one report")
    first = reports[0]
    for rep in reports[1:]:
        if rep.row_kinds != first.row_kinds or rep.col_kinds != first.col_kinds:
            raise ConfigError("reports have mismatched candidate axes")

    stack = np.array(
        [[[np.nan if v is None else v for v in row] for row in rep.loss_matrix]
         for rep in reports],
        dtype=float,
    )
    mean = np.nanmean(stack, axis=0)
    std = np.nanstd(stack, axis=0)

    majority, majority_ties = {}, {}
    for r in first.row_kinds:
        votes = [rep.identified.get(r) for rep in reports if rep.identified.get(r)]
        if not votes:
            majority[r] = None
            majority_ties[r] = False
            continue
        tally = {}
        for v in votes:
            tally[v] = tally.get(v, 0) + 1
        best = max(tally.values())
        winners = sorted(k for k, n in tally.items() if n == best)
        majority[r] = winners[0]
        majority_ties[r] = len(winners) > 1

    return {
        "row_kinds": list(first.row_kinds),
        "col_kinds": list(first.col_kinds),
        "mean_loss_matrix": [[float(x) for x in row] for row in mean],
        "std_loss_matrix": [[float(x) for x in row] for row in std],
        "majority_identified": majority,
        "majority_ties": majority_ties,
        "reports": len(reports),
    }


# ----------------------------------------------------------------------
# Report emission
# ----------------------------------------------------------------------

def write_report_json(report: RecognitionReport, path):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_report_json(path) -> RecognitionReport:
    with open(path, encoding="utf-8") as fh:
        return RecognitionReport.from_json_dict(json.load(fh))


def write_loss_matrix_csv(report: RecognitionReport, path):
    lines = ["generator," + ",".join(report.col_kinds)]
    for kind, row in zip(report.row_kinds, report.loss_matrix):
        cells = ["" if v is None else repr(float(v)) for v in row]
        lines.append(kind + "," + ",".join(cells))
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_loss_matrix_csv(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    cols = lines[0].split(",")[1:]
    rows, matrix = [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        rows.append(parts[0])
        matrix.append([None if p == "" else float(p) for p in parts[1:]])
    return rows, cols, matrix


def write_heatmap_svg(report: RecognitionReport, path):
    """Vector heatmap of the loss matrix (deterministic SVG output)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "recrecog"}):
        data = np.array(
            [[np.nan if v is None else v for v in row] for row in report.loss_matrix],
            dtype=float,
        )
        fig, ax = plt.subplots(figsize=(1.2 + len(report.col_kinds), 1.0 + len(report.row_kinds)))
        im = ax.imshow(data, cmap="viridis")
        ax.set_xticks(range(len(report.col_kinds)), report.col_kinds, rotation=30, ha="right")
        ax.set_yticks(range(len(report.row_kinds)), report.row_kinds)
        ax.set_xlabel("hypothesis recommender")
        ax.set_ylabel("generating recommender")
        for i in range(data.shape[0]):
            for j in range(data.shape[1]):
                if np.isfinite(data[i, j]):
                    ax.text(j, i, f"{data[i, j]:.3f}", ha="center", va="center",
                            color="white", fontsize=8)
        fig.colorbar(im, ax=ax, label="held-out NLL")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def format_report(report: RecognitionReport) -> str:
    """Human-readable summary (includes per-cell wall time)."""
    width = max(12, max((len(k) for k in report.row_kinds), default=12) + 2)
    out = [f"recognition grid @ year {report.year} "
           f"(rows: generator, cols: hypothesis)"]
    header = " " * width + "".join(f"{k:>16}" for k in report.col_kinds)
    out.append(header)
    for kind, row in zip(report.row_kinds, report.loss_matrix):
        cells = "".join(
            f"{'failed':>16}" if v is None else f"{v:>16.5f}" for v in row
        )
        marker = report.identified.get(kind)
        suffix = f"  -> {marker}" + (" (tie)" if report.ties.get(kind) else "")
        out.append(f"{kind:<{width}}" + cells + suffix)
    out.append(f"accuracy: {report.accuracy:.3f}")
    times = [m.get("wall_time") for m in report.cell_meta.values() if m.get("wall_time")]
    if times:
        out.append(f"cell wall time: total {sum(times):.1f}s, max {max(times):.1f}s")
    return "\n".join(out)
