"""Collaborative filtering on the author-paper bipartite graph.

Embeddings live on both node classes; propagation multiplies the stack
by the symmetrically normalized bipartite adjacency, the final
embedding is the layer-wise mean, and training minimizes the pairwise
ranking loss over (author, written paper, sampled unwritten paper)
triples with the shared Adam optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NodeLookupError, TrainingError
from .graph import PAPER, GraphView
from .numerics import ParamStore, make_optimizer_state, optimizer_step, sigmoid


@dataclass(frozen=True)
class LightGcnConfig:
    embedding_dim: int = 32
    layers: int = 2
    epochs: int = 150
    learning_rate: float = 0.05
    negatives_per_positive: int = 1

    def validate(self):
        if self.embedding_dim < 1:
            raise ConfigError("lightgcn embedding_dim must be >= 1")
        if self.layers < 1:
            raise ConfigError("lightgcn layers must be >= 1")
        if self.epochs < 0:
            raise ConfigError("lightgcn epochs must be >= 0")
        if self.negatives_per_positive < 1:
            raise ConfigError("lightgcn negatives_per_positive must be >= 1")

    def to_dict(self):
        return {
            "embedding_dim": self.embedding_dim,
            "layers": self.layers,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "negatives_per_positive": self.negatives_per_positive,
        }


@dataclass
class CfEmbeddings:
    """Final author/paper embeddings plus training metadata."""

    author_ids: tuple
    paper_ids: tuple
    author_emb: np.ndarray
    paper_emb: np.ndarray
    final_loss: float
    epochs_run: int
    loss_history: list

    def author_row(self, author: int) -> np.ndarray:
        try:
            return self.author_emb[self.author_ids.index(author)]
        except ValueError:
            raise NodeLookupError(f"author {author} has no embedding row")


def build_normalized_adjacency(view: GraphView):
    """D^-1/2 A D^-1/2 over the (authors | in-view papers) node set.

    Returns (adjacency, author_ids, paper_ids); isolated nodes get zero
    rows/columns.
    """
    authors = tuple(sorted(view.authors))
    papers = tuple(view.papers)
    a_index = {a: i for i, a in enumerate(authors)}
    p_index = {p: len(authors) + i for i, p in enumerate(papers)}
    n = len(authors) + len(papers)

    rows, cols = [], []
    for a, p in sorted(view.writes):
        i, j = a_index[a], p_index[p]
        rows += [i, j]
        cols += [j, i]
    data = np.ones(len(rows))
    adj = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    d = sp.diags(inv_sqrt)
    return (d @ adj @ d).tocsr(), authors, papers


def propagate(adjacency, emb0: np.ndarray, layers: int) -> np.ndarray:
    """Layer-wise mean of emb0, A emb0, ..., A^layers emb0."""
    acc = emb0.copy()
    e = emb0
    for _ in range(layers):
        e = adjacency @ e
        acc += e
    return acc / (layers + 1)


def _propagate_backward(adjacency, d_final: np.ndarray, layers: int) -> np.ndarray:
    g = d_final / (layers + 1)
    out = g.copy()
    for _ in range(layers):
        g = adjacency.T @ g
        out += g
    return out


def lightgcn_train(view: GraphView, config: LightGcnConfig, rng) -> CfEmbeddings:
    """Train embeddings with BPR over the view's writes edges."""
    config.validate()
    if not view.writes:
        raise TrainingError("lightgcn needs at least one writes edge to train on")

    adj, authors, papers = build_normalized_adjacency(view)
    a_index = {a: i for i, a in enumerate(authors)}
    p_pos = {p: i for i, p in enumerate(papers)}
    n_a, n_p = len(authors), len(papers)

    params = ParamStore()
    emb0 = params.add("emb", rng.normal(0.0, 0.1, size=(n_a + n_p, config.embedding_dim)))
    state = make_optimizer_state(params, learning_rate=config.learning_rate)

    edges = sorted(view.writes)
    written = {a: set() for a in authors}
    for a, p in edges:
        written[a].add(p_pos[p])
    u_idx = np.array([a_index[a] for a, _ in edges])
    p_idx = np.array([n_a + p_pos[p] for _, p in edges])

    def sample_negatives():
        negs = np.empty(len(edges) * config.negatives_per_positive, dtype=int)
        k = 0
        for a, _ in edges:
            taken = written[a]
            for _ in range(config.negatives_per_positive):
                if len(taken) >= n_p:
                    negs[k] = n_a + int(rng.integers(n_p))  # degenerate: author wrote everything
                    k += 1
                    continue
                while True:
                    cand = int(rng.integers(n_p))
                    if cand not in taken:
                        negs[k] = n_a + cand
                        k += 1
                        break
        return negs

    def mean_bpr(final, neg):
        rep = config.negatives_per_positive
        s = np.sum(final[np.repeat(u_idx, rep)] * (final[np.repeat(p_idx, rep)] - final[neg]), axis=1)
        return float(np.mean(np.logaddexp(0.0, -s)))

    history = []
    neg0 = sample_negatives()
    history.append(mean_bpr(propagate(adj, emb0, config.layers), neg0))

    for _ in range(config.epochs):
        neg = sample_negatives()
        final = propagate(adj, emb0, config.layers)
        rep = config.negatives_per_positive
        uu = np.repeat(u_idx, rep)
        pp = np.repeat(p_idx, rep)
        diff = final[pp] - final[neg]
        s = np.sum(final[uu] * diff, axis=1)
        history.append(float(np.mean(np.logaddexp(0.0, -s))))
        coef = (-sigmoid(-s) / len(s))[:, None]
        d_final = np.zeros_like(final)
        np.add.at(d_final, uu, coef * diff)
        np.add.at(d_final, pp, coef * final[uu])
        np.add.at(d_final, neg, -coef * final[uu])
        params.grad("emb")[...] = _propagate_backward(adj, d_final, config.layers)
        optimizer_step(params, state)

    final = propagate(adj, params["emb"], config.layers)
    final_loss = mean_bpr(final, sample_negatives())
    return CfEmbeddings(
        author_ids=authors,
        paper_ids=papers,
        author_emb=final[:n_a].copy(),
        paper_emb=final[n_a:].copy(),
        final_loss=final_loss,
        epochs_run=config.epochs,
        loss_history=history,
    )


def lightgcn_recommend(emb: CfEmbeddings, view: GraphView, author: int, top_n: int):
    """Top unwritten papers by embedding dot product, ties by ascending id."""
    row = emb.author_row(author)
    already = set(view.author_papers.get(author, ()))
    scores = emb.paper_emb @ row
    index = {p: i for i, p in enumerate(emb.paper_ids)}
    ranked = sorted(
        (p for p in emb.paper_ids if p not in already),
        key=lambda p: (-scores[index[p]], p),
    )
    return tuple(((PAPER, p), float(scores[index[p]])) for p in ranked[:top_n])
