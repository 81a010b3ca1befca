"""The five recommender ("infosphere") definitions behind one interface.

Given a year-bounded graph view and an author, each recommender emits an
`Infosphere`: a scored, deterministically ordered list of graph elements
(authors, papers, topics) the author is exposed to.  Kinds:

* ``null``            -- nothing is recommended.
* ``top_paper``       -- globally most-cited papers, same for everyone.
* ``top_paper_topic`` -- popularity reweighted by the author's topic use.
* ``predictive``      -- hindsight shortest paths toward the author's
                         actual next-year history, plus noise branches.
* ``lightgcn``        -- collaborative filtering on the writes bipartite
                         graph (see lightgcn module).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .errors import ConfigError, HindsightUnavailableError, NodeLookupError
from .graph import AUTHOR, PAPER, TOPIC, GraphView, TemporalAcademicGraph, node_sort_key, snapshot
from .lightgcn import CfEmbeddings, LightGcnConfig, lightgcn_recommend, lightgcn_train
from .seeding import derive_rng

RECOMMENDER_KINDS = ("null", "top_paper", "top_paper_topic", "predictive", "lightgcn")


@dataclass(frozen=True)
class RecommenderConfig:
    """A hypothesis about the platform recommender."""

    kind: str
    top_n: int = 15
    noise_branch_prob: float = 0.25
    noise_branch_max: int = 3
    lightgcn: LightGcnConfig = field(default_factory=LightGcnConfig)
    rng_seed: int = 0

    def validate(self):
        if self.kind not in RECOMMENDER_KINDS:
            raise ConfigError(f"unknown recommender kind {self.kind!r}")
        if self.top_n < 0:
            raise ConfigError("top_n must be >= 0")
        if not 0.0 <= self.noise_branch_prob <= 1.0:
            raise ConfigError("noise_branch_prob must be in [0, 1]")
        if self.noise_branch_max < 0:
            raise ConfigError("noise_branch_max must be >= 0")
        self.lightgcn.validate()

    def to_dict(self):
        return {
            "kind": self.kind,
            "top_n": self.top_n,
            "noise_branch_prob": self.noise_branch_prob,
            "noise_branch_max": self.noise_branch_max,
            "lightgcn": self.lightgcn.to_dict(),
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["lightgcn"] = LightGcnConfig(**d.get("lightgcn", {}))
        return cls(**d)


@dataclass(frozen=True)
class Infosphere:
    """Per-author recommendation set at a horizon year.

    `elements` is a tuple of ((class, id), score) pairs ordered by
    descending score with (class, id) as the tie-break; every element
    exists in the corresponding view and appears at most once.
    """

    author: int
    year: int
    elements: tuple

    def __post_init__(self):
        refs = [ref for ref, _ in self.elements]
        if len(set(refs)) != len(refs):
            raise ConfigError(f"duplicate element in infosphere of author {self.author}")


def sort_elements(pairs):
    """(ref, score) pairs ordered by descending score, ties by (class, id)."""
    return tuple(sorted(pairs, key=lambda e: (-e[1], node_sort_key(e[0]))))


def infosphere_to_lines(inf: Infosphere):
    """Dump format: `<author> <year> <element-class> <element-id> <score>`."""
    return [
        f"{inf.author} {inf.year} {kind} {ident} {score!r}"
        for (kind, ident), score in inf.elements
    ]


def write_infosphere(inf: Infosphere, path):
    with open(path, "w", encoding="utf-8") as fh:
        for line in infosphere_to_lines(inf):
            fh.write(line + "\n")


def top_paper_infosphere(view: GraphView, top_n: int):
    """The `top_n` most-cited in-view papers; identical for every author."""
    ranked = sorted(view.papers, key=lambda p: (-view.paper_popularity(p), p))
    return tuple(((PAPER, p), float(view.paper_popularity(p))) for p in ranked[:top_n])


def top_paper_topic_infosphere(view: GraphView, author: int, top_n: int):
    """Popularity reweighted by the author's topic affinity.

    score(paper) = (1 + popularity) * affinity(author, paper's topic),
    where affinity is the fraction of the author's in-view papers using
    that topic.  Authors with no papers fall back to plain popularity.
    """
    view._check_author(author)
    own = view.author_papers[author]
    if not own:
        return top_paper_infosphere(view, top_n)
    topic_use = {}
    for p in own:
        for t in view.paper_topics[p]:
            topic_use[t] = topic_use.get(t, 0) + 1
    total = float(len(own))
    scored = []
    for p in view.papers:
        affinity = sum(topic_use.get(t, 0) for t in view.paper_topics[p]) / total
        scored.append(((PAPER, p), (1.0 + view.paper_popularity(p)) * affinity))
    return sort_elements(scored)[:top_n]


def _hindsight_targets(graph, year, author):
    """Nodes of the author's year+1 history that already exist at `year`:
    new coauthors, papers cited by the year+1 output, and its topics."""
    now = snapshot(graph, year)
    future = snapshot(graph, year + 1)
    targets = set()
    for b in future.coauthors(author) - now.coauthors(author):
        targets.add((AUTHOR, b))
    for p in future.author_papers[author]:
        if future.paper_year[p] != year + 1:
            continue
        for cited in future.paper_cites[p]:
            if cited in now.paper_year:
                targets.add((PAPER, cited))
        for t in future.paper_topics[p]:
            targets.add((TOPIC, t))
    return targets


def predictive_infosphere(graph: TemporalAcademicGraph, year: int, author: int,
                          noise_branch_prob: float, noise_branch_max: int, rng):
    """Hindsight infosphere: one BFS shortest path (undirected edges,
    neighbors expanded in ascending (class, id) order) from the author to
    every reachable year+1 target, scored 1/(1 + node distance); then
    noise branches (score 0) are attached to path nodes at random.
    """
    if graph.year_max is None or year + 1 > graph.year_max:
        raise HindsightUnavailableError(
            f"predictive infosphere at year {year} needs year {year + 1} data"
        )
    view = snapshot(graph, year)
    view._check_author(author)
    targets = _hindsight_targets(graph, year, author)

    start = (AUTHOR, author)
    targets.discard(start)
    dist = {start: 0}
    parent = {}
    pending = set(targets)
    queue = deque([start])
    while queue and pending:
        node = queue.popleft()
        for nb in view.neighbors(node):
            if nb not in dist:
                dist[nb] = dist[node] + 1
                parent[nb] = node
                pending.discard(nb)
                queue.append(nb)

    elements = {}
    for t in sorted(targets, key=node_sort_key):
        if t not in dist:
            continue
        node = t
        while node != start:
            elements[node] = 1.0 / (1.0 + dist[node])
            node = parent[node]

    path_nodes = sorted(elements, key=node_sort_key)
    for node in path_nodes:
        if noise_branch_max < 1 or rng.random() >= noise_branch_prob:
            continue
        budget = int(rng.integers(1, noise_branch_max + 1))
        candidates = [nb for nb in view.neighbors(node) if nb not in elements and nb != start]
        take = min(budget, len(candidates))
        if take == 0:
            continue
        picked = rng.choice(len(candidates), size=take, replace=False)
        for idx in sorted(int(i) for i in picked):
            elements[candidates[idx]] = 0.0

    return sort_elements(elements.items())


class InfosphereBuilder:
    """Builds per-author infospheres for one (config, graph, year) triple.

    Author-independent work (the top-paper ranking, the LightGCN
    embedding training) happens once and is reused; per-author results
    are cached.  Per-author randomness comes from streams derived as
    (config.rng_seed, author), so build order never matters.
    """

    def __init__(self, config: RecommenderConfig, graph: TemporalAcademicGraph, year: int):
        config.validate()
        if config.kind == "predictive" and (graph.year_max is None or year + 1 > graph.year_max):
            raise HindsightUnavailableError(
                f"predictive recommender at year {year} needs year {year + 1} data"
            )
        self.config = config
        self.graph = graph
        self.year = int(year)
        self.view = snapshot(graph, year)
        self._cache = {}
        self._shared_elements = None
        self._cf = None

    def _lightgcn_embeddings(self) -> CfEmbeddings:
        if self._cf is None:
            rng = derive_rng(self.config.rng_seed, "lightgcn")
            self._cf = lightgcn_train(self.view, self.config.lightgcn, rng)
        return self._cf

    def infosphere(self, author: int) -> Infosphere:
        if author in self._cache:
            return self._cache[author]
        self.view._check_author(author)
        kind = self.config.kind
        if kind == "null":
            elements = ()
        elif kind == "top_paper":
            if self._shared_elements is None:
                self._shared_elements = top_paper_infosphere(self.view, self.config.top_n)
            elements = self._shared_elements
        elif kind == "top_paper_topic":
            elements = top_paper_topic_infosphere(self.view, author, self.config.top_n)
        elif kind == "predictive":
            rng = derive_rng(self.config.rng_seed, "author", author)
            elements = predictive_infosphere(
                self.graph, self.year, author,
                self.config.noise_branch_prob, self.config.noise_branch_max, rng,
            )
        elif kind == "lightgcn":
            emb = self._lightgcn_embeddings()
            elements = lightgcn_recommend(emb, self.view, author, self.config.top_n)
        else:  # pragma: no cover - validate() already rejects
            raise ConfigError(f"unknown recommender kind {kind!r}")
        inf = Infosphere(author=author, year=self.year, elements=tuple(elements))
        self._cache[author] = inf
        return inf


def recommend(config: RecommenderConfig, graph: TemporalAcademicGraph, year: int,
              author: int) -> Infosphere:
    """One-shot dispatch over the recommender kinds."""
    if author not in graph.authors:
        raise NodeLookupError(f"unknown author {author}")
    return InfosphereBuilder(config, graph, year).infosphere(author)
