"""Synthetic interaction datasets from a trained user model plus a known
recommender.

For every author who publishes in year+1, the model predicts a partner
budget from its count head (or takes the true label count), scores a
deterministic candidate pool with its pair head under the recommender's
infospheres, selects partners, and the union (or intersection) of the
selections becomes the synthetic edge set.  Count targets are re-derived
from the symmetrized edges so the dataset is internally consistent.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, HindsightUnavailableError, IntegrityError, ParseError
from .graph import AUTHOR, PAPER, TemporalAcademicGraph, active_authors, snapshot
from .model import (
    BatchForward,
    InteractionDataset,
    InteractionExample,
    PropagationIndex,
    TrainedUserModel,
    graph_signature,
)
from .numerics import CountPrediction, sigmoid
from .recommenders import InfosphereBuilder, RecommenderConfig
from .seeding import derive_rng

SELECTION_MODES = ("deterministic_top_m", "bernoulli")
SYMMETRIZE_MODES = ("union", "intersection")


@dataclass(frozen=True)
class SynthGenConfig:
    candidate_pool_size: int = 30
    selection_mode: str = "deterministic_top_m"
    use_true_counts: bool = False
    symmetrize: str = "union"
    rng_seed: int = 0

    def validate(self):
        if self.candidate_pool_size < 1:
            raise ConfigError("candidate_pool_size must be >= 1")
        if self.selection_mode not in SELECTION_MODES:
            raise ConfigError(f"unknown selection_mode {self.selection_mode!r}")
        if self.symmetrize not in SYMMETRIZE_MODES:
            raise ConfigError(f"unknown symmetrize mode {self.symmetrize!r}")

    def to_dict(self):
        return {
            "candidate_pool_size": self.candidate_pool_size,
            "selection_mode": self.selection_mode,
            "use_true_counts": self.use_true_counts,
            "symmetrize": self.symmetrize,
            "rng_seed": self.rng_seed,
        }


@dataclass
class SyntheticDataset(InteractionDataset):
    """InteractionDataset plus provenance of its generating process."""

    generator_meta: dict = None

    def __post_init__(self):
        super().__post_init__()
        if self.generator_meta is None:
            self.generator_meta = {}


def max_coauthors(pred: CountPrediction) -> int:
    """Partner budget: mu + dispersion, rounded half-up, floored at 0."""
    return max(0, int(math.floor(pred.mu + pred.dispersion + 0.5)))


def candidate_partners(graph: TemporalAcademicGraph, year: int, author: int,
                       infosphere, pool_size: int, rng) -> list:
    """Ordered candidate pool for one author.

    Priority buckets: authors found in the infosphere, authors of papers
    in the infosphere, 2-hop coauthors, then uniformly drawn authors
    active in year+1; ids ascend within a bucket.  The author itself and
    existing (<= year) coauthors never appear; the pool is truncated (or
    padded from the random bucket) to `pool_size`.
    """
    view = snapshot(graph, year)
    view._check_author(author)
    existing = view.coauthors(author)
    excluded = set(existing) | {author}

    inf_authors = sorted(ident for (kind, ident), _ in infosphere.elements if kind == AUTHOR)
    inf_paper_authors = set()
    for (kind, ident), _ in infosphere.elements:
        if kind == PAPER and ident in view.paper_year:
            inf_paper_authors.update(view.paper_authors[ident])
    two_hop = set()
    for b in existing:
        two_hop.update(view.coauthors(b))

    pool = []
    seen = set(excluded)
    for bucket in (inf_authors, sorted(inf_paper_authors), sorted(two_hop)):
        for a in bucket:
            if a not in seen:
                seen.add(a)
                pool.append(a)
            if len(pool) >= pool_size:
                return pool[:pool_size]

    actives = sorted(active_authors(graph, year + 1))
    order = rng.permutation(len(actives))
    for i in order:
        a = actives[int(i)]
        if a not in seen:
            seen.add(a)
            pool.append(a)
        if len(pool) >= pool_size:
            break
    return pool[:pool_size]


def _weighted_sample_without_replacement(items, weights, m, rng):
    """Efraimidis-Spirakis keys: deterministic given the rng stream."""
    if m >= len(items):
        return list(items)
    w = np.maximum(np.asarray(weights, dtype=float), 1e-12)
    keys = np.log(rng.random(len(items))) / w
    top = np.argsort(-keys)[:m]
    return [items[int(i)] for i in sorted(top)]


def generate_rhsd(rnu: TrainedUserModel, graph: TemporalAcademicGraph, year: int,
                  recommender: RecommenderConfig, gen_config: SynthGenConfig) -> SyntheticDataset:
    """Run the trained model under `recommender` to synthesize year+1
    interactions for all authors active in year+1."""
    gen_config.validate()
    if graph_signature(graph) != tuple(rnu.graph_signature):
        raise IntegrityError("rnu was trained on a different graph than the one provided")
    if graph.year_max is None or year + 1 > graph.year_max:
        raise HindsightUnavailableError(
            f"generation at year {year} needs year {year + 1} authors in the graph"
        )

    view = snapshot(graph, year)
    px = PropagationIndex(view)
    builder = InfosphereBuilder(recommender, graph, year)
    actives = sorted(active_authors(graph, year + 1))

    candidates = {}
    for a in actives:
        rng = derive_rng(gen_config.rng_seed, "author", a)
        candidates[a] = candidate_partners(
            graph, year, a, builder.infosphere(a), gen_config.candidate_pool_size, rng
        )

    # One batched forward over every author that appears anywhere.
    involved = sorted(set(actives) | {w for pool in candidates.values() for w in pool})
    index = {a: i for i, a in enumerate(involved)}
    infs = [builder.infosphere(a) for a in involved]
    fwd = BatchForward(px, rnu.params, rnu.config, involved, infs)

    active_rows = np.array([index[a] for a in actives], dtype=int)
    mu, r = fwd.count_heads(active_rows)

    if gen_config.use_true_counts:
        now_co = {a: view.coauthors(a) for a in actives}
        future = snapshot(graph, year + 1)
        budgets = {a: len(future.coauthors(a) - now_co[a]) for a in actives}
    else:
        budgets = {
            a: max_coauthors(CountPrediction(float(mu[i]), float(r[i])))
            for i, a in enumerate(actives)
        }

    ia, ib = [], []
    for a in actives:
        for w in candidates[a]:
            ia.append(index[a])
            ib.append(index[w])
    probs = sigmoid(fwd.pair_logits(np.array(ia, dtype=int), np.array(ib, dtype=int))) \
        if ia else np.zeros(0)

    selections = {}
    pos = 0
    for a in actives:
        pool = candidates[a]
        p = probs[pos : pos + len(pool)]
        pos += len(pool)
        m = min(budgets[a], len(pool))
        if m == 0 or not pool:
            selections[a] = []
            continue
        if gen_config.selection_mode == "deterministic_top_m":
            order = sorted(range(len(pool)), key=lambda i: (-p[i], pool[i]))
            selections[a] = [pool[i] for i in order[:m]]
        else:
            rng = derive_rng(gen_config.rng_seed, "select", a)
            selections[a] = _weighted_sample_without_replacement(pool, p, m, rng)

    edges = set()
    if gen_config.symmetrize == "union":
        for a, chosen in selections.items():
            for w in chosen:
                edges.add((min(a, w), max(a, w)))
    else:
        for a, chosen in selections.items():
            for w in chosen:
                if w in selections and a in selections[w]:
                    edges.add((min(a, w), max(a, w)))

    degree = {a: 0 for a in actives}
    for u, v in edges:
        for e in (u, v):
            if e in degree:
                degree[e] += 1

    positives = tuple(
        InteractionExample(u=u, v=v, label=1, year=year + 1) for u, v in sorted(edges)
    )
    meta = {
        "rnu_checkpoint_digest": hashlib.sha256(rnu.params.to_bytes()).hexdigest(),
        "recommender": recommender.to_dict(),
        "gen_config": gen_config.to_dict(),
        "horizon_year": int(year),
    }
    return SyntheticDataset(
        positives=positives,
        count_targets=degree,
        year=year + 1,
        provenance=("synthetic", recommender.kind),
        generator_meta=meta,
    )


def dataset_stats(ds: InteractionDataset) -> dict:
    """Exact summary: edge count, count moments, degree histogram."""
    counts = np.array(sorted(ds.count_targets.values()), dtype=float)
    histogram = {}
    for c in ds.count_targets.values():
        histogram[int(c)] = histogram.get(int(c), 0) + 1
    return {
        "edges": len(ds.positives),
        "count_mean": float(counts.mean()) if counts.size else 0.0,
        "count_variance": float(counts.var()) if counts.size else 0.0,
        "authors": len(ds.count_targets),
        "degree_histogram": dict(sorted(histogram.items())),
    }


# ----------------------------------------------------------------------
# Dataset file format: '#'-prefixed JSON provenance header, then records
#   E <u> <v>       positive interaction
#   K <author> <n>  count target
# ----------------------------------------------------------------------

def save_dataset(ds: InteractionDataset, path):
    header = {
        "year": ds.year,
        "provenance": list(ds.provenance),
        "generator_meta": getattr(ds, "generator_meta", {}) or {},
    }
    lines = ["# rhsd " + json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for e in ds.positives:
        lines.append(f"E {e.u} {e.v}")
    for a, c in sorted(ds.count_targets.items()):
        lines.append(f"K {a} {c}")
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_dataset(path) -> SyntheticDataset:
    header = None
    positives = []
    counts = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("rhsd "):
                    try:
                        header = json.loads(body[len("rhsd "):])
                    except json.JSONDecodeError:
                        raise ParseError("malformed dataset header", line_no, path)
                continue
            if not line.strip():
                continue
            fields = line.split()
            if fields[0] == "E" and len(fields) == 3:
                u, v = int(fields[1]), int(fields[2])
                positives.append((u, v))
            elif fields[0] == "K" and len(fields) == 3:
                counts[int(fields[1])] = int(fields[2])
            else:
                raise ParseError(f"unrecognized dataset record {line!r}", line_no, path)
    if header is None:
        raise ParseError("missing dataset header", 1, path)
    year = int(header["year"])
    return SyntheticDataset(
        positives=tuple(InteractionExample(u=u, v=v, label=1, year=year) for u, v in positives),
        count_targets=counts,
        year=year,
        provenance=tuple(header["provenance"]),
        generator_meta=header.get("generator_meta", {}),
    )
