"""Command-line pipeline runner.

Subcommands wire the library end to end:

    gen-graph   synthesize the world graph and write it to disk
    train-rnu   train the recommender-neutral user model
    gen-rhsd    synthesize one recommender-specific dataset
    recognize   run the full recognition grid (optionally per seed)
    inspect     summarize any artifact on stdout

Configuration is an INI file (sections [paths], [graph], [rnu],
[candidates], [synth], [recognition], [run]); command-line flags win
over config values.  All randomness flows from one master seed: any
section that leaves its rng_seed unset derives one from the master.
Artifacts are written atomically and each gets a RunManifest sidecar
(<artifact>.manifest.json) with checksums; reruns with identical seeds
produce byte-identical artifacts.

Exit codes: 0 ok, 2 config error, 3 I/O or parse error, 4 hindsight
data unavailable, 5 missing model checkpoint, 6 recognition grid error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

from .errors import (
    ConfigError,
    GridError,
    HindsightUnavailableError,
    IntegrityError,
    ParseError,
    RangeError,
    RecrecogError,
)
from .graph import SynthGraphConfig, generate_synthetic_graph, load_graph, save_graph
from .lightgcn import LightGcnConfig
from .model import (
    ModelConfig,
    TrainedUserModel,
    train_rnu,
    train_rnu_marginalized,
)
from .numerics import CHECKPOINT_MAGIC, ParamStore
from .recognition import (
    RecognitionConfig,
    cross_seed_summary,
    format_report,
    load_report_json,
    run_grid,
    write_heatmap_svg,
    write_loss_matrix_csv,
    write_report_json,
)
from .recommenders import RECOMMENDER_KINDS, RecommenderConfig
from .seeding import derive_seed
from .synthgen import SynthGenConfig, dataset_stats, generate_rhsd, load_dataset, save_dataset

log = logging.getLogger(__name__)

ARTIFACT_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_HINDSIGHT = 4
EXIT_CHECKPOINT = 5
EXIT_GRID = 6


@dataclass
class ExperimentConfig:
    """Everything a pipeline run needs, resolved from INI + flags."""

    workdir: str = "out"
    graph_file: str = ""
    graph: SynthGraphConfig = field(default_factory=SynthGraphConfig)
    rnu_model: ModelConfig = field(default_factory=ModelConfig)
    rnu_mode: str = "hindsight"
    rnu_pool: tuple = ()
    candidates: tuple = ()
    synth: SynthGenConfig = field(default_factory=SynthGenConfig)
    include_predictive_as_hypothesis: bool = False
    holdout_fraction: float = 0.2
    master_seed: int = 0
    year: int = 0
    seeds: tuple = ()
    log_level: str = "info"


class _Section:
    """Typed accessors over one INI section with exact field names."""

    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self.present = parser.has_section(name)
        self._sec = parser[name] if self.present else {}

    def require(self, key, conv=int):
        if key not in self._sec:
            raise ConfigError(f"missing {key!r} field in [{self.name}] section")
        return self._get(key, conv)

    def get(self, key, default, conv=int):
        if key not in self._sec:
            return default
        return self._get(key, conv)

    def _get(self, key, conv):
        raw = self._sec[key]
        try:
            if conv is bool:
                low = raw.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            return conv(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value {raw!r} for {key!r} in [{self.name}] section")


def _parse_kind_list(raw: str):
    kinds = [k.strip() for k in raw.split(",") if k.strip()]
    for k in kinds:
        if k not in RECOMMENDER_KINDS:
            raise ConfigError(f"unknown recommender kind {k!r}")
    return tuple(kinds)


def load_experiment_config(path=None, overrides=None) -> ExperimentConfig:
    """Read the INI config (if any) and apply command-line overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path!r} does not exist")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"could not parse config {path!r}: {exc}")

    cfg = ExperimentConfig()
    paths = _Section(parser, "paths")
    cfg.workdir = paths.get("workdir", cfg.workdir, str)
    cfg.graph_file = paths.get("graph_file", "", str)

    rec = _Section(parser, "recognition")
    cfg.include_predictive_as_hypothesis = rec.get(
        "include_predictive_as_hypothesis", False, bool
    )
    cfg.holdout_fraction = rec.get("holdout_fraction", 0.2, float)
    cfg.master_seed = rec.get("master_seed", 0, int)

    run = _Section(parser, "run")
    cfg.year = run.get("year", 0, int)
    raw_seeds = run.get("seeds", "", str)
    if raw_seeds:
        cfg.seeds = tuple(int(s.strip()) for s in raw_seeds.split(",") if s.strip())
    cfg.log_level = run.get("log_level", "info", str)

    if overrides:
        for key, value in overrides.items():
            if value is not None:
                setattr(cfg, key, value)

    master = cfg.master_seed

    g = _Section(parser, "graph")
    if g.present:
        cfg.graph = SynthGraphConfig(
            years=g.require("years"),
            authors_per_year=g.require("authors_per_year"),
            papers_per_year=g.require("papers_per_year"),
            team_size_mean=g.get("team_size_mean", 2.8, float),
            topic_count=g.get("topic_count", 10),
            citation_preferential_exponent=g.get(
                "citation_preferential_exponent", 1.0, float
            ),
            rng_seed=g.get("rng_seed", derive_seed(master, "cell", 101)),
        )
    else:
        cfg.graph = dataclasses.replace(
            cfg.graph, rng_seed=derive_seed(master, "cell", 101)
        )

    r = _Section(parser, "rnu")
    cfg.rnu_mode = r.get("mode", "hindsight", str)
    if cfg.rnu_mode not in ("hindsight", "marginalized"):
        raise ConfigError(f"rnu mode must be hindsight or marginalized, got {cfg.rnu_mode!r}")
    cfg.rnu_pool = _parse_kind_list(r.get("pool", "", str)) if r.get("pool", "", str) else ()
    cfg.rnu_model = ModelConfig(
        embedding_dim=r.get("embedding_dim", 32),
        mp_layers=r.get("mp_layers", 2),
        hidden_dim=r.get("hidden_dim", 32),
        negatives_per_positive=r.get("negatives_per_positive", 5),
        count_loss_weight=r.get("count_loss_weight", 1.0, float),
        epochs=r.get("epochs", 30),
        batch_size=r.get("batch_size", 256),
        learning_rate=r.get("learning_rate", 1e-2, float),
        rng_seed=r.get("rng_seed", derive_seed(master, "cell", 102)),
    )

    c = _Section(parser, "candidates")
    kinds = _parse_kind_list(
        c.get("kinds", "null, top_paper, top_paper_topic, lightgcn", str)
    )
    lightgcn = LightGcnConfig(
        embedding_dim=c.get("lightgcn_embedding_dim", 32),
        layers=c.get("lightgcn_layers", 2),
        epochs=c.get("lightgcn_epochs", 150),
        learning_rate=c.get("lightgcn_learning_rate", 0.05, float),
        negatives_per_positive=c.get("lightgcn_negatives_per_positive", 1),
    )
    shared = dict(
        top_n=c.get("top_n", 15),
        noise_branch_prob=c.get("noise_branch_prob", 0.25, float),
        noise_branch_max=c.get("noise_branch_max", 3),
        lightgcn=lightgcn,
        rng_seed=c.get("rng_seed", derive_seed(master, "cell", 103)),
    )
    cfg.candidates = tuple(RecommenderConfig(kind=k, **shared) for k in kinds)

    s = _Section(parser, "synth")
    cfg.synth = SynthGenConfig(
        candidate_pool_size=s.get("candidate_pool_size", 30),
        selection_mode=s.get("selection_mode", "deterministic_top_m", str),
        use_true_counts=s.get("use_true_counts", False, bool),
        symmetrize=s.get("symmetrize", "union", str),
        rng_seed=s.get("rng_seed", derive_seed(master, "cell", 104)),
    )

    if not cfg.graph_file:
        cfg.graph_file = os.path.join(cfg.workdir, "graph.txt")
    if not cfg.seeds:
        cfg.seeds = (cfg.master_seed,)
    return cfg


# ----------------------------------------------------------------------
# Run manifests
# ----------------------------------------------------------------------

def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    artifact_version: int
    created: str
    command: str
    config_snapshot: dict
    input_checksums: dict
    output_checksums: dict

    def save(self, path):
        tmp = str(path) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)


def write_manifest(command, cfg: ExperimentConfig, inputs, outputs):
    """RunManifest sidecar next to the first output artifact."""
    manifest = RunManifest(
        artifact_version=ARTIFACT_VERSION,
        created=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        command=command,
        config_snapshot=_config_snapshot(cfg),
        input_checksums={str(p): _sha256_file(p) for p in inputs},
        output_checksums={str(p): _sha256_file(p) for p in outputs},
    )
    manifest.save(str(outputs[0]) + ".manifest.json")
    return manifest


def verify_manifest(path) -> bool:
    """Re-check every recorded checksum; True when all match."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    for section in ("input_checksums", "output_checksums"):
        for p, digest in data.get(section, {}).items():
            if not os.path.exists(p) or _sha256_file(p) != digest:
                return False
    return True


def _config_snapshot(cfg: ExperimentConfig) -> dict:
    return {
        "workdir": cfg.workdir,
        "graph_file": cfg.graph_file,
        "graph": dataclasses.asdict(cfg.graph),
        "rnu_model": cfg.rnu_model.to_dict(),
        "rnu_mode": cfg.rnu_mode,
        "rnu_pool": list(cfg.rnu_pool),
        "candidates": [c.to_dict() for c in cfg.candidates],
        "synth": cfg.synth.to_dict(),
        "include_predictive_as_hypothesis": cfg.include_predictive_as_hypothesis,
        "holdout_fraction": cfg.holdout_fraction,
        "master_seed": cfg.master_seed,
        "year": cfg.year,
        "seeds": list(cfg.seeds),
    }


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------

def _rnu_paths(cfg):
    return (
        os.path.join(cfg.workdir, "rnu.ckpt"),
        os.path.join(cfg.workdir, "rnu.model.json"),
    )


def cmd_gen_graph(cfg: ExperimentConfig) -> int:
    graph = generate_synthetic_graph(cfg.graph)
    os.makedirs(os.path.dirname(cfg.graph_file) or ".", exist_ok=True)
    save_graph(graph, cfg.graph_file)
    write_manifest("gen-graph", cfg, [], [cfg.graph_file])
    log.info("graph written to %s: %r", cfg.graph_file, graph)
    print(f"graph: {cfg.graph_file} ({len(graph.authors)} authors, "
          f"{len(graph.papers)} papers, years {graph.year_min}..{graph.year_max})")
    return EXIT_OK


def _candidate_by_kind(cfg: ExperimentConfig, kind: str) -> RecommenderConfig:
    for c in cfg.candidates:
        if c.kind == kind:
            return c
    raise ConfigError(f"kind {kind!r} is not among the configured candidates")


def cmd_train_rnu(cfg: ExperimentConfig) -> int:
    graph = load_graph(cfg.graph_file)
    if cfg.rnu_mode == "marginalized":
        if not cfg.rnu_pool:
            raise ConfigError("missing 'pool' field in [rnu] section for marginalized mode")
        pool = [_candidate_by_kind(cfg, k) for k in cfg.rnu_pool]
        model = train_rnu_marginalized(graph, cfg.year, pool, cfg.rnu_model)
    else:
        predictive = RecommenderConfig(
            kind="predictive",
            noise_branch_prob=cfg.candidates[0].noise_branch_prob if cfg.candidates else 0.25,
            noise_branch_max=cfg.candidates[0].noise_branch_max if cfg.candidates else 3,
            rng_seed=cfg.rnu_model.rng_seed,
        )
        model = train_rnu(graph, cfg.year, cfg.rnu_model, predictive)
    ckpt, manifest = _rnu_paths(cfg)
    os.makedirs(cfg.workdir, exist_ok=True)
    model.save(ckpt, manifest)
    write_manifest("train-rnu", cfg, [cfg.graph_file], [ckpt, manifest])
    log.info("rnu trained: loss %0.4f -> %0.4f over %d epochs",
             model.history[0], model.history[-1], len(model.history))
    print(f"rnu checkpoint: {ckpt} (final epoch loss {model.history[-1]:.4f})")
    return EXIT_OK


def _load_rnu(cfg: ExperimentConfig) -> TrainedUserModel:
    ckpt, manifest = _rnu_paths(cfg)
    for p in (ckpt, manifest):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    return TrainedUserModel.load(ckpt, manifest)


def cmd_gen_rhsd(cfg: ExperimentConfig, kind: str) -> int:
    graph = load_graph(cfg.graph_file)
    rnu = _load_rnu(cfg)
    recommender = _candidate_by_kind(cfg, kind) if kind != "predictive" else RecommenderConfig(
        kind="predictive", rng_seed=cfg.synth.rng_seed
    )
    ds = generate_rhsd(rnu, graph, cfg.year, recommender, cfg.synth)
    path = os.path.join(cfg.workdir, f"rhsd_{kind}.txt")
    save_dataset(ds, path)
    write_manifest("gen-rhsd", cfg, [cfg.graph_file, _rnu_paths(cfg)[0]], [path])
    stats = dataset_stats(ds)
    log.info("rhsd(%s): %s", kind, stats)
    print(f"dataset: {path} ({stats['edges']} edges, {stats['authors']} authors)")
    return EXIT_OK


def cmd_recognize(cfg: ExperimentConfig, jobs: int, heatmap: bool = True) -> int:
    graph = load_graph(cfg.graph_file)
    rnu = _load_rnu(cfg)
    os.makedirs(cfg.workdir, exist_ok=True)
    reports = []
    outputs = []
    for seed in cfg.seeds:
        rc = RecognitionConfig(
            candidates=cfg.candidates,
            model=cfg.rnu_model,
            synth=cfg.synth,
            include_predictive_as_hypothesis=cfg.include_predictive_as_hypothesis,
            holdout_fraction=cfg.holdout_fraction,
            master_seed=seed,
        )
        report = run_grid(graph, cfg.year, rnu, rc, jobs=jobs)
        reports.append(report)
        base = os.path.join(cfg.workdir, f"report_s{seed}")
        write_report_json(report, base + ".json")
        write_loss_matrix_csv(report, base + "_loss_matrix.csv")
        outputs += [base + ".json", base + "_loss_matrix.csv"]
        if heatmap:
            write_heatmap_svg(report, base + "_heatmap.svg")
            outputs.append(base + "_heatmap.svg")
        print(format_report(report))
        print()
    if len(reports) > 1:
        summary = cross_seed_summary(reports)
        summary_path = os.path.join(cfg.workdir, "summary.json")
        tmp = summary_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, summary_path)
        outputs.append(summary_path)
        print("majority identification:",
              json.dumps(summary["majority_identified"], sort_keys=True))
    write_manifest("recognize", cfg, [cfg.graph_file, _rnu_paths(cfg)[0]], outputs)
    return EXIT_OK


def cmd_inspect(path: str) -> int:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        head = fh.read(64)

    if head.startswith(CHECKPOINT_MAGIC):
        params = ParamStore.load(path)
        print(f"checkpoint: {path} ({params.size()} parameters)")
        for name in params.names():
            print(f"  {name:<20} {params[name].shape}")
        return EXIT_OK

    try:
        text_head = head.decode("utf-8", errors="strict")
    except UnicodeDecodeError:
        raise ConfigError(f"unrecognized artifact {path!r}")

    if text_head.startswith("# rhsd"):
        ds = load_dataset(path)
        stats = dataset_stats(ds)
        print(f"dataset: {path} (year {ds.year}, provenance {'/'.join(ds.provenance)})")
        for key, value in stats.items():
            print(f"  {key}: {value}")
        return EXIT_OK

    if text_head.lstrip().startswith("{"):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if "loss_matrix" in data:
            print(format_report(load_report_json(path)))
            return EXIT_OK
        if "recommender_used" in data:
            print(f"model manifest: {path}")
            print(f"  recommender: {data['recommender_used'].get('kind')}")
            print(f"  epochs: {len(data.get('history', []))}, "
                  f"final loss: {data.get('history', [None])[-1]}")
            return EXIT_OK
        raise ConfigError(f"unrecognized JSON artifact {path!r}")

    if text_head[:2] in ("A ", "P ", "T ", "# ") or text_head.startswith("#"):
        graph = load_graph(path)
        print(f"graph: {path} ({len(graph.authors)} authors, {len(graph.papers)} papers, "
              f"{len(graph.topics)} topics)")
        by_year = {}
        for _, y in graph.papers:
            by_year[y] = by_year.get(y, 0) + 1
        for y in sorted(by_year):
            print(f"  year {y}: {by_year[y]} papers")
        print(f"  writes {len(graph.writes)}, cites {len(graph.cites)}, "
              f"about {len(graph.about)}")
        return EXIT_OK

    raise ConfigError(f"unrecognized artifact {path!r}")


# ----------------------------------------------------------------------
# Argument parsing / dispatch
# ----------------------------------------------------------------------

def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recrecog",
        description="Recommender recognition pipeline over temporal co-authorship graphs.",
    )
    parser.add_argument("--config", help="INI experiment config")
    parser.add_argument("--workdir", help="artifact directory (overrides config)")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--seeds", help="comma-separated master seeds for recognize")
    parser.add_argument("--jobs", type=int, default=1, help="parallel grid cells")
    parser.add_argument("--log-level", default=None,
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-graph", help="generate the synthetic world graph")
    sub.add_parser("train-rnu", help="train the recommender-neutral user model")
    p = sub.add_parser("gen-rhsd", help="generate one synthetic dataset")
    p.add_argument("--kind", required=True, choices=RECOMMENDER_KINDS)
    p = sub.add_parser("recognize", help="run the recognition grid")
    p.add_argument("--no-heatmap", action="store_true")
    p = sub.add_parser("inspect", help="summarize an artifact")
    p.add_argument("artifact")
    return parser


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        if args.command == "inspect":
            logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
            return cmd_inspect(args.artifact)

        overrides = {
            "workdir": args.workdir,
            "master_seed": args.seed,
        }
        if args.seeds:
            overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))
        elif args.seed is not None:
            overrides["seeds"] = (args.seed,)
        cfg = load_experiment_config(args.config, overrides)
        level = (args.log_level or cfg.log_level).upper()
        logging.basicConfig(
            level=getattr(logging, level, logging.INFO),
            stream=sys.stderr,
            format="%(levelname)s %(name)s: %(message)s",
        )

        if args.command == "gen-graph":
            return cmd_gen_graph(cfg)
        if args.command == "train-rnu":
            return cmd_train_rnu(cfg)
        if args.command == "gen-rhsd":
            return cmd_gen_rhsd(cfg, args.kind)
        if args.command == "recognize":
            return cmd_recognize(cfg, jobs=args.jobs, heatmap=not args.no_heatmap)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, RangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HindsightUnavailableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HINDSIGHT
    except GridError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GRID
    except FileNotFoundError as exc:
        missing = str(exc.args[0] if exc.args else exc)
        if missing.endswith(".ckpt") or missing.endswith("rnu.model.json"):
            print(f"error: missing model checkpoint: {missing}", file=sys.stderr)
            return EXIT_CHECKPOINT
        print(f"error: missing file: {missing}", file=sys.stderr)
        return EXIT_IO
    except (ParseError, IntegrityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RecrecogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
