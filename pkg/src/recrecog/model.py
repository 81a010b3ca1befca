"""Parameterized user behavior model and its training/evaluation loops.

The model embeds an author by `mp_layers` rounds of mean-aggregation
message passing over the graph view, with a separate linear transform
per edge class (writes / cites / about) and a dedicated transform for
the author's infosphere elements, which act as extra in-neighbors
weighted by (score + 1).  The infosphere steers only the focal author's
own layer updates; every other node's representation is infosphere-free,
so an author's output can never depend on someone else's infosphere.

Two heads sit on the final author representation: a symmetric pair
interaction probability and a negative binomial (mean, dispersion)
co-author count prediction.  All gradients are hand-written; `grad_check`
in the numerics module verifies them against central finite differences.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import digamma as _digamma_vec
from scipy.special import gammaln as _gammaln_vec

from .errors import (
    ConfigError,
    DomainError,
    HindsightUnavailableError,
    IntegrityError,
    TrainingError,
)
from .graph import GraphView, TemporalAcademicGraph, active_authors, snapshot
from .numerics import (
    CountPrediction,
    ParamStore,
    make_optimizer_state,
    optimizer_step,
    sigmoid,
    softplus,
)
from .recommenders import Infosphere, InfosphereBuilder, RecommenderConfig
from .seeding import content_digest, derive_rng, digest_to_seed

HEAD_FLOOR = 1e-4  # additive floor keeping mu, r strictly positive


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 32
    mp_layers: int = 2
    hidden_dim: int = 32
    negatives_per_positive: int = 5
    count_loss_weight: float = 1.0
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 1e-2
    rng_seed: int = 0

    def validate(self):
        for name in ("embedding_dim", "mp_layers", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.negatives_per_positive < 0:
            raise ConfigError("negatives_per_positive must be >= 0")
        if self.count_loss_weight < 0:
            raise ConfigError("count_loss_weight must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    def to_dict(self):
        return {
            "embedding_dim": self.embedding_dim,
            "mp_layers": self.mp_layers,
            "hidden_dim": self.hidden_dim,
            "negatives_per_positive": self.negatives_per_positive,
            "count_loss_weight": self.count_loss_weight,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "rng_seed": self.rng_seed,
        }


@dataclass(frozen=True)
class InteractionExample:
    u: int
    v: int
    label: int
    year: int

    def __post_init__(self):
        if self.u == self.v:
            raise ConfigError(f"interaction endpoints must differ, got u=v={self.u}")


@dataclass
class InteractionDataset:
    """Observed (or synthetic) pair interactions plus count targets.

    `year` is the predicted year: positives happen in it, count targets
    are the new-coauthor counts of authors active in it, and all model
    features are computed from the year-1 snapshot.
    """

    positives: tuple
    count_targets: dict
    year: int
    provenance: tuple = ("real",)

    def __post_init__(self):
        self.positives = tuple(sorted(self.positives, key=lambda e: (e.u, e.v)))
        self.count_targets = dict(sorted(self.count_targets.items()))
        for ex in self.positives:
            if ex.label != 1:
                raise ConfigError("dataset positives must carry label 1")
            if ex.year != self.year:
                raise ConfigError(
                    f"positive ({ex.u},{ex.v}) year {ex.year} != dataset year {self.year}"
                )
        for a, c in self.count_targets.items():
            if c < 0:
                raise ConfigError(f"negative count target for author {a}")

    def content_digest(self) -> str:
        return content_digest(
            self.year,
            self.provenance,
            tuple((e.u, e.v) for e in self.positives),
            tuple(self.count_targets.items()),
        )

    def positive_pairs(self):
        return {(min(e.u, e.v), max(e.u, e.v)) for e in self.positives}


@dataclass
class TrainedUserModel:
    params: ParamStore
    config: ModelConfig
    recommender_used: RecommenderConfig
    history: list
    graph_signature: tuple

    def save(self, checkpoint_path, manifest_path):
        self.params.save(checkpoint_path)
        manifest = {
            "config": self.config.to_dict(),
            "recommender_used": self.recommender_used.to_dict(),
            "history": self.history,
            "graph_signature": list(self.graph_signature),
        }
        tmp = str(manifest_path) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, manifest_path)

    @classmethod
    def load(cls, checkpoint_path, manifest_path) -> "TrainedUserModel":
        params = ParamStore.load(checkpoint_path)
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        return cls(
            params=params,
            config=ModelConfig(**manifest["config"]),
            recommender_used=RecommenderConfig.from_dict(manifest["recommender_used"]),
            history=list(manifest["history"]),
            graph_signature=tuple(manifest["graph_signature"]),
        )


def graph_signature(graph: TemporalAcademicGraph) -> tuple:
    return (len(graph.authors), len(graph.papers), len(graph.topics))


# ----------------------------------------------------------------------
# Propagation machinery
# ----------------------------------------------------------------------

EDGE_CLASSES = ("writes", "cites", "about")


class PropagationIndex:
    """Node indexing and mean-aggregation operators for one view.

    `paper_rows` maps in-view papers to their rows in the whole-graph
    paper embedding table (views may exclude future papers).
    """

    def __init__(self, view: GraphView):
        self.view = view
        self.authors = tuple(sorted(view.authors))
        self.papers = tuple(view.papers)
        self.topics = tuple(sorted(view.topics))
        self.n_authors = len(self.authors)
        self.n_papers = len(self.papers)
        self.n_topics = len(self.topics)
        self.n_nodes = self.n_authors + self.n_papers + self.n_topics

        self.author_pos = {a: i for i, a in enumerate(self.authors)}
        self.paper_pos = {p: self.n_authors + i for i, p in enumerate(self.papers)}
        self.topic_pos = {t: self.n_authors + self.n_papers + i for i, t in enumerate(self.topics)}

        undirected = {
            "writes": [(self.author_pos[a], self.paper_pos[p]) for a, p in sorted(view.writes)],
            "cites": [(self.paper_pos[c], self.paper_pos[d]) for c, d in sorted(view.cites)],
            "about": [(self.paper_pos[p], self.topic_pos[t]) for p, t in sorted(view.about)],
        }
        self.mean_ops = {}
        for cls, pairs in undirected.items():
            rows, cols = [], []
            for i, j in pairs:
                rows += [i, j]
                cols += [j, i]
            counts = np.bincount(rows, minlength=self.n_nodes).astype(float)
            data = np.array([1.0 / counts[r] for r in rows]) if rows else np.zeros(0)
            self.mean_ops[cls] = sp.csr_matrix(
                (data, (rows, cols)), shape=(self.n_nodes, self.n_nodes)
            )

        rank = {p: i for i, (p, _) in enumerate(view.base.papers)}
        self.paper_rows = np.array([rank[p] for p in self.papers], dtype=int)

    def node_pos(self, ref) -> int:
        kind, ident = ref
        table = {"author": self.author_pos, "paper": self.paper_pos, "topic": self.topic_pos}[kind]
        return table[ident]


def init_params(graph: TemporalAcademicGraph, config: ModelConfig, rng=None) -> ParamStore:
    """Fresh parameters sized to the whole graph's node classes."""
    config.validate()
    if rng is None:
        rng = derive_rng(config.rng_seed, "init")
    d, h = config.embedding_dim, config.hidden_dim
    params = ParamStore()
    params.add("emb_author", rng.normal(0.0, 0.1, size=(len(graph.authors), d)))
    params.add("emb_paper", rng.normal(0.0, 0.1, size=(len(graph.papers), d)))
    params.add("emb_topic", rng.normal(0.0, 0.1, size=(len(graph.topics), d)))
    w_std = 1.0 / math.sqrt(d)
    for k in range(1, config.mp_layers + 1):
        params.add(f"mp{k}_self", rng.normal(0.0, w_std, size=(d, d)))
        for cls in EDGE_CLASSES:
            params.add(f"mp{k}_{cls}", rng.normal(0.0, w_std, size=(d, d)))
        params.add(f"mp{k}_inf", rng.normal(0.0, w_std, size=(d, d)))
        params.add(f"mp{k}_bias", np.zeros(d))
    params.add("pair_w", rng.normal(0.0, w_std, size=d))
    params.add("pair_b", np.zeros(1))
    params.add("count_hidden_w", rng.normal(0.0, w_std, size=(d, h)))
    params.add("count_hidden_b", np.zeros(h))
    params.add("count_mu_w", rng.normal(0.0, 1.0 / math.sqrt(h), size=h))
    params.add("count_mu_b", np.zeros(1))
    params.add("count_r_w", rng.normal(0.0, 1.0 / math.sqrt(h), size=h))
    params.add("count_r_b", np.zeros(1))
    return params


def _infosphere_matrix(px: PropagationIndex, infospheres, n_rows: int) -> sp.csr_matrix:
    """Row-normalized (score + 1) weights of each batch author's elements."""
    rows, cols, data = [], [], []
    for bi, inf in enumerate(infospheres):
        if not inf.elements:
            continue
        weights = np.array([score + 1.0 for _, score in inf.elements])
        total = weights.sum()
        for (ref, _), w in zip(inf.elements, weights):
            rows.append(bi)
            cols.append(px.node_pos(ref))
            data.append(w / total)
    return sp.csr_matrix((data, (rows, cols)), shape=(n_rows, px.n_nodes))


class BatchForward:
    """One forward pass for a batch of focal authors; caches everything
    the hand-written backward pass needs."""

    def __init__(self, px: PropagationIndex, params: ParamStore, config: ModelConfig,
                 batch_authors, infospheres):
        self.px = px
        self.params = params
        self.config = config
        self.authors = list(batch_authors)
        self.b = len(self.authors)
        self.g = np.array([px.author_pos[a] for a in self.authors], dtype=int)
        K = config.mp_layers

        # Whole-graph propagation (infosphere-free), layers 0..K-1.
        H0 = np.concatenate([
            params["emb_author"],
            params["emb_paper"][px.paper_rows],
            params["emb_topic"],
        ])
        self.H = [H0]
        self.Ms = {}
        for k in range(1, K + 1):
            self.Ms[k] = {cls: px.mean_ops[cls] @ self.H[k - 1] for cls in EDGE_CLASSES}
            if k <= K - 1:
                pre = self.H[k - 1] @ params[f"mp{k}_self"] + params[f"mp{k}_bias"]
                for cls in EDGE_CLASSES:
                    pre += self.Ms[k][cls] @ params[f"mp{k}_{cls}"]
                self.H.append(np.tanh(pre))

        # Focal chains with infosphere injection.
        self.S = _infosphere_matrix(px, infospheres, self.b)
        self.h = [self.H[0][self.g]]
        self.i_agg = []
        for k in range(1, K + 1):
            i_k = self.S @ self.H[k - 1]
            self.i_agg.append(i_k)
            pre = self.h[k - 1] @ params[f"mp{k}_self"] + params[f"mp{k}_bias"]
            for cls in EDGE_CLASSES:
                pre += self.Ms[k][cls][self.g] @ params[f"mp{k}_{cls}"]
            pre += i_k @ params[f"mp{k}_inf"]
            self.h.append(np.tanh(pre))
        self.hK = self.h[K]

        # Lazy head caches.
        self._pair = None
        self._count = None

    # -- heads ----------------------------------------------------------

    def pair_logits(self, ia, ib):
        """Pre-sigmoid pair scores for batch-index pairs (ia[i], ib[i])."""
        ia = np.asarray(ia, dtype=int)
        ib = np.asarray(ib, dtype=int)
        prod = self.hK[ia] * self.hK[ib]
        logits = prod @ self.params["pair_w"] + self.params["pair_b"][0]
        self._pair = (ia, ib, prod)
        return logits

    def count_heads(self, ic):
        """(mu, r) for batch indices `ic`."""
        ic = np.asarray(ic, dtype=int)
        z_pre = self.hK[ic] @ self.params["count_hidden_w"] + self.params["count_hidden_b"]
        z = np.tanh(z_pre)
        mu_pre = z @ self.params["count_mu_w"] + self.params["count_mu_b"][0]
        r_pre = z @ self.params["count_r_w"] + self.params["count_r_b"][0]
        mu = softplus(mu_pre) + HEAD_FLOOR
        r = softplus(r_pre) + HEAD_FLOOR
        self._count = (ic, z, mu_pre, r_pre)
        return mu, r

    # -- backward ---------------------------------------------------------

    def backward(self, d_logits=None, d_mu=None, d_r=None):
        """Accumulate gradients into the parameter store's buffers."""
        params = self.params
        K = self.config.mp_layers
        dhK = np.zeros_like(self.hK)

        if d_logits is not None:
            ia, ib, prod = self._pair
            d_logits = np.asarray(d_logits, dtype=float)
            params.grad("pair_w")[...] += prod.T @ d_logits
            params.grad("pair_b")[0] += d_logits.sum()
            w = params["pair_w"]
            np.add.at(dhK, ia, d_logits[:, None] * (w * self.hK[ib]))
            np.add.at(dhK, ib, d_logits[:, None] * (w * self.hK[ia]))

        if d_mu is not None:
            ic, z, mu_pre, r_pre = self._count
            d_mu_pre = np.asarray(d_mu) * sigmoid(mu_pre)
            d_r_pre = np.asarray(d_r) * sigmoid(r_pre)
            params.grad("count_mu_w")[...] += z.T @ d_mu_pre
            params.grad("count_mu_b")[0] += d_mu_pre.sum()
            params.grad("count_r_w")[...] += z.T @ d_r_pre
            params.grad("count_r_b")[0] += d_r_pre.sum()
            dz = d_mu_pre[:, None] * params["count_mu_w"] + d_r_pre[:, None] * params["count_r_w"]
            dz_pre = dz * (1.0 - z * z)
            params.grad("count_hidden_w")[...] += self.hK[ic].T @ dz_pre
            params.grad("count_hidden_b")[...] += dz_pre.sum(axis=0)
            np.add.at(dhK, ic, dz_pre @ params["count_hidden_w"].T)

        # Focal chains.
        dH = [np.zeros_like(h) for h in self.H]
        dh = dhK
        for k in range(K, 0, -1):
            dpre = dh * (1.0 - self.h[k] * self.h[k])
            params.grad(f"mp{k}_self")[...] += self.h[k - 1].T @ dpre
            params.grad(f"mp{k}_bias")[...] += dpre.sum(axis=0)
            for cls in EDGE_CLASSES:
                m_rows = self.Ms[k][cls][self.g]
                params.grad(f"mp{k}_{cls}")[...] += m_rows.T @ dpre
                back = dpre @ params[f"mp{k}_{cls}"].T
                a_rows = self.px.mean_ops[cls][self.g]
                dH[k - 1] += a_rows.T @ back
            params.grad(f"mp{k}_inf")[...] += self.i_agg[k - 1].T @ dpre
            dH[k - 1] += self.S.T @ (dpre @ params[f"mp{k}_inf"].T)
            dh = dpre @ params[f"mp{k}_self"].T
        np.add.at(dH[0], self.g, dh)

        # Whole-graph propagation.
        for k in range(K - 1, 0, -1):
            dpre = dH[k] * (1.0 - self.H[k] * self.H[k])
            params.grad(f"mp{k}_self")[...] += self.H[k - 1].T @ dpre
            params.grad(f"mp{k}_bias")[...] += dpre.sum(axis=0)
            dprev = dpre @ params[f"mp{k}_self"].T
            for cls in EDGE_CLASSES:
                params.grad(f"mp{k}_{cls}")[...] += self.Ms[k][cls].T @ dpre
                dprev += self.px.mean_ops[cls].T @ (dpre @ params[f"mp{k}_{cls}"].T)
            dH[k - 1] += dprev

        px = self.px
        d0 = dH[0]
        params.grad("emb_author")[...] += d0[: px.n_authors]
        # paper_rows are unique, so fancy-index accumulation is exact
        params.grad("emb_paper")[px.paper_rows] += d0[px.n_authors : px.n_authors + px.n_papers]
        params.grad("emb_topic")[...] += d0[px.n_authors + px.n_papers :]


# ----------------------------------------------------------------------
# Public single-author operations
# ----------------------------------------------------------------------

def embed_author(view: GraphView, infosphere: Infosphere, author: int,
                 params: ParamStore, config: ModelConfig,
                 px: PropagationIndex | None = None) -> np.ndarray:
    """Final-layer representation of `author` under its infosphere."""
    view._check_author(author)
    if px is None:
        px = PropagationIndex(view)
    fwd = BatchForward(px, params, config, [author], [infosphere])
    return fwd.hK[0].copy()


def pair_probability(params: ParamStore, config: ModelConfig, view: GraphView,
                     inf_u: Infosphere, inf_v: Infosphere, u: int, v: int,
                     px: PropagationIndex | None = None) -> float:
    """sigma(pair score) of two authors; exactly symmetric under swap."""
    if u == v:
        raise DomainError("pair endpoints must differ")
    if px is None:
        px = PropagationIndex(view)
    fwd = BatchForward(px, params, config, [u, v], [inf_u, inf_v])
    h_u, h_v = fwd.hK[0], fwd.hK[1]
    logit = float(np.dot(params["pair_w"], h_u * h_v) + params["pair_b"][0])
    return float(sigmoid(np.array([logit]))[0])


def count_prediction(params: ParamStore, config: ModelConfig, view: GraphView,
                     inf_u: Infosphere, u: int,
                     px: PropagationIndex | None = None) -> CountPrediction:
    """Negative binomial (mu, dispersion) for an author's next-year
    new-coauthor count."""
    if px is None:
        px = PropagationIndex(view)
    fwd = BatchForward(px, params, config, [u], [inf_u])
    mu, r = fwd.count_heads([0])
    return CountPrediction(mu=float(mu[0]), dispersion=float(r[0]))


# ----------------------------------------------------------------------
# Vectorized NB pieces (scalar API lives in numerics)
# ----------------------------------------------------------------------

def _nb_ll_vec(k, mu, r):
    k = np.asarray(k, dtype=float)
    total = mu + r
    return (
        _gammaln_vec(k + r) - _gammaln_vec(r) - _gammaln_vec(k + 1.0)
        + r * (np.log(r) - np.log(total))
        + k * (np.log(mu) - np.log(total))
    )


def _nb_ll_grad_vec(k, mu, r):
    k = np.asarray(k, dtype=float)
    total = mu + r
    d_mu = k / mu - (k + r) / total
    d_r = _digamma_vec(k + r) - _digamma_vec(r) + np.log(r) - np.log(total) + 1.0 - (k + r) / total
    return d_mu, d_r


# ----------------------------------------------------------------------
# Datasets from the real graph
# ----------------------------------------------------------------------

def extract_real_dataset(graph: TemporalAcademicGraph, year: int) -> InteractionDataset:
    """Positives = new co-authorship pairs of year+1; count targets = new
    co-author counts of authors active in year+1."""
    if graph.year_max is None or year + 1 > graph.year_max:
        raise HindsightUnavailableError(
            f"real dataset for year {year + 1} needs year {year + 1} data in the graph"
        )
    now = snapshot(graph, year)
    future = snapshot(graph, year + 1)
    actives = sorted(active_authors(graph, year + 1))
    positives = []
    seen = set()
    counts = {}
    for a in actives:
        new = future.coauthors(a) - now.coauthors(a)
        counts[a] = len(new)
        for b in new:
            key = (min(a, b), max(a, b))
            if key not in seen:
                seen.add(key)
                positives.append(InteractionExample(u=key[0], v=key[1], label=1, year=year + 1))
    return InteractionDataset(
        positives=tuple(positives), count_targets=counts, year=year + 1, provenance=("real",)
    )


# ----------------------------------------------------------------------
# Training / evaluation
# ----------------------------------------------------------------------

def _eligible_partner(u, w, coauth, positive_pairs):
    return w != u and w not in coauth[u] and (min(u, w), max(u, w)) not in positive_pairs


def _sample_partner(u, actives, coauth, positive_pairs, rng):
    for _ in range(64):
        w = actives[int(rng.integers(len(actives)))]
        if _eligible_partner(u, w, coauth, positive_pairs):
            return w
    pool = [w for w in actives if _eligible_partner(u, w, coauth, positive_pairs)]
    if not pool:
        return None
    return pool[int(rng.integers(len(pool)))]


def _partner_context(graph, view, dataset):
    """Shared negative-sampling context: active partner pool, per-author
    in-view coauthor sets, and the dataset's positive pair set."""
    actives = sorted(active_authors(graph, dataset.year))
    involved = {e.u for e in dataset.positives} | {e.v for e in dataset.positives}
    involved |= set(dataset.count_targets) | set(actives)
    coauth = {a: view.coauthors(a) for a in sorted(involved)}
    return actives, coauth, dataset.positive_pairs()


def _batched_loss(fwd: BatchForward, pairs, labels, counts_k, count_rows, lam,
                  want_grad: bool):
    """Batch objective: mean BCE over pairs + lam * mean NB NLL over counts.

    Returns (batch_loss, pair_loss_sum, n_pairs, count_nll_sum, n_counts)
    so callers can accumulate exact epoch-level means.
    """
    total = 0.0
    pair_sum = count_sum = 0.0
    d_logits = d_mu = d_r = None
    if len(pairs[0]):
        logits = fwd.pair_logits(pairs[0], pairs[1])
        y = np.asarray(labels, dtype=float)
        pair_sum = float(np.sum(np.logaddexp(0.0, logits) - y * logits))
        total += pair_sum / len(logits)
        if want_grad:
            d_logits = (sigmoid(logits) - y) / len(logits)
    if len(count_rows):
        mu, r = fwd.count_heads(count_rows)
        count_sum = float(np.sum(-_nb_ll_vec(counts_k, mu, r)))
        total += lam * count_sum / len(count_rows)
        if want_grad:
            g_mu, g_r = _nb_ll_grad_vec(counts_k, mu, r)
            d_mu = -lam * g_mu / len(counts_k)
            d_r = -lam * g_r / len(counts_k)
    if want_grad and (d_logits is not None or d_mu is not None):
        fwd.backward(d_logits=d_logits, d_mu=d_mu, d_r=d_r)
    return total, pair_sum, len(pairs[0]), count_sum, len(count_rows)


def _training_run(graph, dataset, builders, pick_builder, config: ModelConfig,
                  params: ParamStore | None = None):
    """Shared epoch loop for the plain and marginalized trainers.

    `builders` maps recommender keys to InfosphereBuilder; `pick_builder`
    chooses one per (epoch, batch) -- the marginalized trainer draws it
    from a dedicated stream, the plain trainer returns the only one.
    """
    config.validate()
    if not dataset.positives and not dataset.count_targets:
        raise TrainingError("dataset has neither positives nor count targets")
    horizon = dataset.year - 1
    view = snapshot(graph, horizon)
    px = PropagationIndex(view)
    actives, coauth, positive_pairs = _partner_context(graph, view, dataset)
    if params is None:
        params = init_params(graph, config, derive_rng(config.rng_seed, "init"))
    state = make_optimizer_state(params, learning_rate=config.learning_rate)
    shuffle_rng = derive_rng(config.rng_seed, "shuffle")
    neg_rng = derive_rng(config.rng_seed, "negatives")
    lam = config.count_loss_weight

    positives = [(e.u, e.v) for e in dataset.positives]
    count_items = sorted(dataset.count_targets.items())
    history = []
    for epoch in range(config.epochs):
        examples = [(u, v, 1) for u, v in positives]
        for u, v in positives:
            for _ in range(config.negatives_per_positive):
                w = _sample_partner(u, actives, coauth, positive_pairs, neg_rng)
                if w is not None:
                    examples.append((u, w, 0))
        order = shuffle_rng.permutation(len(examples))
        examples = [examples[i] for i in order]
        n_batches = max(1, math.ceil(len(examples) / config.batch_size))
        count_order = shuffle_rng.permutation(len(count_items))
        count_chunks = np.array_split(count_order, n_batches)

        pair_loss_sum, pair_n = 0.0, 0
        count_ll_sum, count_n = 0.0, 0
        for bi in range(n_batches):
            chunk = examples[bi * config.batch_size : (bi + 1) * config.batch_size]
            counts_chunk = [count_items[i] for i in count_chunks[bi]]
            builder = builders[pick_builder(epoch, bi)]
            authors = sorted({u for u, _, _ in chunk} | {v for _, v, _ in chunk}
                             | {a for a, _ in counts_chunk})
            if not authors:
                continue
            index = {a: i for i, a in enumerate(authors)}
            infs = [builder.infosphere(a) for a in authors]
            fwd = BatchForward(px, params, config, authors, infs)
            ia = np.array([index[u] for u, _, _ in chunk], dtype=int)
            ib = np.array([index[v] for _, v, _ in chunk], dtype=int)
            labels = np.array([y for _, _, y in chunk], dtype=float)
            c_rows = np.array([index[a] for a, _ in counts_chunk], dtype=int)
            c_k = np.array([k for _, k in counts_chunk], dtype=float)
            loss, p_sum, p_n, c_sum, c_n = _batched_loss(
                fwd, (ia, ib), labels, c_k, c_rows, lam, want_grad=True
            )
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            optimizer_step(params, state)
            pair_loss_sum += p_sum
            pair_n += p_n
            count_ll_sum += c_sum
            count_n += c_n
        epoch_loss = 0.0
        if pair_n:
            epoch_loss += pair_loss_sum / pair_n
        if count_n:
            epoch_loss += lam * count_ll_sum / count_n
        history.append(epoch_loss)
    params.check_finite()
    return params, history


def train_user_model(graph: TemporalAcademicGraph, dataset: InteractionDataset,
                     recommender: RecommenderConfig, config: ModelConfig) -> TrainedUserModel:
    """Train the behavior model on `dataset` under one recommender
    hypothesis; deterministic for fixed seeds."""
    builder = InfosphereBuilder(recommender, graph, dataset.year - 1)
    params, history = _training_run(
        graph, dataset, {0: builder}, lambda e, b: 0, config
    )
    return TrainedUserModel(
        params=params,
        config=config,
        recommender_used=recommender,
        history=history,
        graph_signature=graph_signature(graph),
    )


def train_rnu(graph: TemporalAcademicGraph, year: int, config: ModelConfig,
              recommender: RecommenderConfig | None = None) -> TrainedUserModel:
    """Recommender-neutral model: the real year+1 dataset, trained with
    the hindsight predictive infosphere."""
    if recommender is None:
        recommender = RecommenderConfig(kind="predictive", rng_seed=config.rng_seed)
    elif recommender.kind != "predictive":
        raise ConfigError("train_rnu requires the predictive recommender")
    dataset = extract_real_dataset(graph, year)
    return train_user_model(graph, dataset, recommender, config)


def train_rnu_marginalized(graph: TemporalAcademicGraph, year: int, pool,
                           config: ModelConfig) -> TrainedUserModel:
    """Monte-Carlo marginalization over a recommender pool: each batch is
    forwarded under one pool member drawn uniformly from a dedicated
    stream (so a singleton pool reproduces train_user_model exactly)."""
    pool = list(pool)
    if not pool:
        raise ConfigError("recommender pool must be non-empty")
    dataset = extract_real_dataset(graph, year)
    builders = {i: InfosphereBuilder(rc, graph, dataset.year - 1) for i, rc in enumerate(pool)}
    pool_rng = derive_rng(config.rng_seed, "pool")
    params, history = _training_run(
        graph, dataset, builders, lambda e, b: int(pool_rng.integers(len(pool))), config
    )
    return TrainedUserModel(
        params=params,
        config=config,
        recommender_used=pool[0],
        history=history,
        graph_signature=graph_signature(graph),
    )


def build_eval_set(graph: TemporalAcademicGraph, dataset: InteractionDataset,
                   negatives_per_positive: int):
    """Deterministic evaluation examples for a dataset.

    Negatives are drawn from a stream seeded by the dataset's content
    digest, so every model evaluated on this dataset sees the identical
    example list.  Returns (examples, checksum).
    """
    view = snapshot(graph, dataset.year - 1)
    actives, coauth, positive_pairs = _partner_context(graph, view, dataset)
    rng = derive_rng(digest_to_seed(dataset.content_digest()), "eval")
    examples = []
    for e in dataset.positives:
        examples.append((e.u, e.v, 1))
        for _ in range(negatives_per_positive):
            w = _sample_partner(e.u, actives, coauth, positive_pairs, rng)
            if w is not None:
                examples.append((e.u, w, 0))
    checksum = content_digest(tuple(examples), tuple(dataset.count_targets.items()))
    return examples, checksum


def evaluate_nll(model: TrainedUserModel, graph: TemporalAcademicGraph,
                 dataset: InteractionDataset, recommender: RecommenderConfig) -> float:
    """Mean held-out negative log-likelihood of `dataset` under `model`
    with infospheres built by `recommender`."""
    config = model.config
    if graph_signature(graph) != tuple(model.graph_signature):
        raise IntegrityError("model was trained on a different graph")
    view = snapshot(graph, dataset.year - 1)
    px = PropagationIndex(view)
    builder = InfosphereBuilder(recommender, graph, dataset.year - 1)
    examples, _ = build_eval_set(graph, dataset, config.negatives_per_positive)
    count_items = sorted(dataset.count_targets.items())

    authors = sorted({u for u, _, _ in examples} | {v for _, v, _ in examples}
                     | {a for a, _ in count_items})
    if not authors:
        raise TrainingError("evaluation dataset is empty")
    index = {a: i for i, a in enumerate(authors)}
    infs = [builder.infosphere(a) for a in authors]
    fwd = BatchForward(px, model.params, config, authors, infs)
    total = 0.0
    if examples:
        ia = np.array([index[u] for u, _, _ in examples], dtype=int)
        ib = np.array([index[v] for _, v, _ in examples], dtype=int)
        y = np.array([lbl for _, _, lbl in examples], dtype=float)
        logits = fwd.pair_logits(ia, ib)
        total += float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    if count_items:
        rows = np.array([index[a] for a, _ in count_items], dtype=int)
        ks = np.array([k for _, k in count_items], dtype=float)
        mu, r = fwd.count_heads(rows)
        total += config.count_loss_weight * float(np.mean(-_nb_ll_vec(ks, mu, r)))
    return total
