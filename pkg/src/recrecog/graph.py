"""Temporal heterogeneous academic graph: storage, year-bounded views,
synthetic generation, and the on-disk text format.

The graph holds three node classes (authors, papers, topics) and three
edge classes (writes: author-paper, cites: paper-paper, about:
paper-topic).  Only papers carry years; authors and topics are timeless.
A `GraphView` is the immutable <=-year subgraph used everywhere
downstream as "the world as of year y".
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, IntegrityError, NodeLookupError, ParseError, RangeError
from .seeding import derive_rng

AUTHOR = "author"
PAPER = "paper"
TOPIC = "topic"

# Global ordering of node classes, used for deterministic tie-breaking
# whenever nodes of different classes are compared.
CLASS_RANK = {AUTHOR: 0, PAPER: 1, TOPIC: 2}


def node_sort_key(ref):
    """Total order on (class, id) node references."""
    kind, ident = ref
    return (CLASS_RANK[kind], ident)


class TemporalAcademicGraph:
    """Immutable temporal academic graph.

    Parameters are arbitrary iterables; they are canonicalized to sorted
    tuples / frozensets and every structural invariant is checked:
    unique nonnegative ids, declared edge endpoints, no duplicate edges,
    and citation time consistency (a citing paper's year must be >= the
    cited paper's year).
    """

    def __init__(self, authors, papers, topics, writes, cites, about):
        self.authors = frozenset(int(a) for a in authors)
        self.topics = frozenset(int(t) for t in topics)

        papers = [(int(p), int(y)) for p, y in papers]
        if len({p for p, _ in papers}) != len(papers):
            raise IntegrityError("duplicate paper id")
        self.papers = tuple(sorted(papers))
        self.paper_year = dict(self.papers)

        self.writes = self._edge_set(writes, "writes")
        self.cites = self._edge_set(cites, "cites")
        self.about = self._edge_set(about, "about")
        self._validate()

    @staticmethod
    def _edge_set(edges, label):
        edges = [(int(a), int(b)) for a, b in edges]
        dedup = frozenset(edges)
        if len(dedup) != len(edges):
            raise IntegrityError(f"duplicate {label} edge")
        return dedup

    def _validate(self):
        for ids, label in ((self.authors, "author"), (self.topics, "topic")):
            for i in ids:
                if i < 0:
                    raise IntegrityError(f"negative {label} id {i}")
        for p, y in self.papers:
            if p < 0:
                raise IntegrityError(f"negative paper id {p}")
        for a, p in self.writes:
            if a not in self.authors:
                raise IntegrityError(f"writes edge references undeclared author {a}")
            if p not in self.paper_year:
                raise IntegrityError(f"writes edge references undeclared paper {p}")
        for c, d in self.cites:
            for p in (c, d):
                if p not in self.paper_year:
                    raise IntegrityError(f"cites edge references undeclared paper {p}")
            if self.paper_year[c] < self.paper_year[d]:
                raise IntegrityError(
                    f"paper {c} (year {self.paper_year[c]}) cites later paper "
                    f"{d} (year {self.paper_year[d]})"
                )
        for p, t in self.about:
            if p not in self.paper_year:
                raise IntegrityError(f"about edge references undeclared paper {p}")
            if t not in self.topics:
                raise IntegrityError(f"about edge references undeclared topic {t}")

    @property
    def year_min(self):
        return min(self.paper_year.values()) if self.papers else None

    @property
    def year_max(self):
        return max(self.paper_year.values()) if self.papers else None

    @cached_property
    def _papers_by_year(self):
        by_year = {}
        for p, y in self.papers:
            by_year.setdefault(y, []).append(p)
        return {y: tuple(sorted(ps)) for y, ps in by_year.items()}

    @cached_property
    def _paper_authors(self):
        adj = {p: [] for p, _ in self.papers}
        for a, p in sorted(self.writes):
            adj[p].append(a)
        return {p: tuple(sorted(v)) for p, v in adj.items()}

    def __eq__(self, other):
        if not isinstance(other, TemporalAcademicGraph):
            return NotImplemented
        return (
            self.authors == other.authors
            and self.papers == other.papers
            and self.topics == other.topics
            and self.writes == other.writes
            and self.cites == other.cites
            and self.about == other.about
        )

    def __hash__(self):
        return hash((self.authors, self.papers, self.topics))

    def __repr__(self):
        return (
            f"TemporalAcademicGraph(authors={len(self.authors)}, "
            f"papers={len(self.papers)}, topics={len(self.topics)}, "
            f"writes={len(self.writes)}, cites={len(self.cites)}, "
            f"about={len(self.about)})"
        )


class GraphView:
    """Immutable <=`horizon_year` subgraph of a TemporalAcademicGraph.

    Authors and topics are timeless and always present; a paper is in
    view iff its year <= horizon_year, and an edge is in view iff all
    its endpoints are (writes/about edges inherit their paper's year).
    Adjacency is precomputed once; all accessors are read-only.
    """

    def __init__(self, base: TemporalAcademicGraph, horizon_year: int):
        if base.year_min is None:
            raise RangeError("graph declares no year range (it has no papers)")
        if not (base.year_min <= horizon_year <= base.year_max):
            raise RangeError(
                f"snapshot year {horizon_year} outside declared range "
                f"[{base.year_min}, {base.year_max}]"
            )
        self.base = base
        self.horizon_year = int(horizon_year)

        self.paper_year = {p: y for p, y in base.papers if y <= horizon_year}
        self.papers = tuple(sorted(self.paper_year))
        self.authors = base.authors
        self.topics = base.topics
        self.writes = frozenset((a, p) for a, p in base.writes if p in self.paper_year)
        self.cites = frozenset(
            (c, d) for c, d in base.cites if c in self.paper_year and d in self.paper_year
        )
        self.about = frozenset((p, t) for p, t in base.about if p in self.paper_year)

        ap = {a: [] for a in self.authors}
        pa = {p: [] for p in self.papers}
        for a, p in sorted(self.writes):
            ap[a].append(p)
            pa[p].append(a)
        self.author_papers = {a: tuple(v) for a, v in ap.items()}
        self.paper_authors = {p: tuple(v) for p, v in pa.items()}

        out_c = {p: [] for p in self.papers}
        in_c = {p: [] for p in self.papers}
        for c, d in sorted(self.cites):
            out_c[c].append(d)
            in_c[d].append(c)
        self.paper_cites = {p: tuple(v) for p, v in out_c.items()}
        self.paper_cited_by = {p: tuple(v) for p, v in in_c.items()}

        pt = {p: [] for p in self.papers}
        tp = {t: [] for t in self.topics}
        for p, t in sorted(self.about):
            pt[p].append(t)
            tp[t].append(p)
        self.paper_topics = {p: tuple(v) for p, v in pt.items()}
        self.topic_papers = {t: tuple(v) for t, v in tp.items()}

    def has_node(self, ref) -> bool:
        kind, ident = ref
        if kind == AUTHOR:
            return ident in self.authors
        if kind == PAPER:
            return ident in self.paper_year
        if kind == TOPIC:
            return ident in self.topics
        return False

    def neighbors(self, ref):
        """Undirected neighbors of a node, sorted by (class, id)."""
        kind, ident = ref
        if kind == AUTHOR:
            self._check_author(ident)
            return tuple((PAPER, p) for p in self.author_papers[ident])
        if kind == PAPER:
            if ident not in self.paper_year:
                raise NodeLookupError(f"unknown paper {ident}")
            out = [(AUTHOR, a) for a in self.paper_authors[ident]]
            cited = sorted(set(self.paper_cites[ident]) | set(self.paper_cited_by[ident]))
            out += [(PAPER, p) for p in cited]
            out += [(TOPIC, t) for t in self.paper_topics[ident]]
            return tuple(out)
        if kind == TOPIC:
            if ident not in self.topics:
                raise NodeLookupError(f"unknown topic {ident}")
            return tuple((PAPER, p) for p in self.topic_papers[ident])
        raise NodeLookupError(f"unknown node class {kind!r}")

    def _check_author(self, author: int):
        if author not in self.authors:
            raise NodeLookupError(f"unknown author {author}")

    def coauthors(self, author: int) -> frozenset:
        """Authors sharing at least one in-view paper with `author`."""
        self._check_author(author)
        out = set()
        for p in self.author_papers[author]:
            out.update(self.paper_authors[p])
        out.discard(author)
        return frozenset(out)

    def paper_popularity(self, paper: int) -> int:
        """Number of in-view citations pointing at `paper`."""
        if paper not in self.paper_year:
            raise NodeLookupError(f"unknown paper {paper}")
        return len(self.paper_cited_by[paper])

    def __repr__(self):
        return f"GraphView(horizon_year={self.horizon_year}, papers={len(self.papers)})"


def snapshot(graph: TemporalAcademicGraph, year: int) -> GraphView:
    """The immutable <=`year` view of `graph`."""
    return GraphView(graph, year)


def coauthors(view: GraphView, author: int) -> frozenset:
    return view.coauthors(author)


def paper_popularity(view: GraphView, paper: int) -> int:
    return view.paper_popularity(paper)


def active_authors(graph: TemporalAcademicGraph, year: int) -> frozenset:
    """Authors with at least one paper published exactly in `year`."""
    out = set()
    for p in graph._papers_by_year.get(year, ()):
        out.update(graph._paper_authors[p])
    return frozenset(out)


@dataclass(frozen=True)
class SynthGraphConfig:
    """Knobs for the synthetic temporal graph generator."""

    years: int = 6
    authors_per_year: int = 50
    papers_per_year: int = 130
    team_size_mean: float = 2.8
    topic_count: int = 10
    citation_preferential_exponent: float = 1.0
    rng_seed: int = 0
    # Secondary shape knobs (kept out of the positional surface):
    collaborator_reuse_prob: float = 0.5
    preferred_topic_prob: float = 0.7
    citations_per_paper_mean: float = 3.0

    def validate(self):
        for name in ("years", "authors_per_year", "papers_per_year", "topic_count"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ConfigError(f"{name} must be a nonnegative integer, got {v!r}")
        if self.team_size_mean <= 0:
            raise ConfigError(f"team_size_mean must be > 0, got {self.team_size_mean!r}")
        if self.citation_preferential_exponent < 0:
            raise ConfigError("citation_preferential_exponent must be >= 0")
        if self.years > 0 and self.papers_per_year > 0:
            if self.topic_count < 1:
                raise ConfigError("topic_count must be >= 1 when papers are generated")
            if self.authors_per_year < 1:
                raise ConfigError("authors_per_year must be >= 1 when papers are generated")


def generate_synthetic_graph(config: SynthGraphConfig) -> TemporalAcademicGraph:
    """Grow a temporal academic graph year by year.

    Each year `authors_per_year` new authors arrive and `papers_per_year`
    papers are published.  A paper's team mixes prior collaborators of
    already-chosen members with uniformly drawn arrived authors; its
    single topic follows the lead author's preferred topic most of the
    time; and it cites strictly earlier papers with probability
    proportional to (1 + citation count) ** citation_preferential_exponent.
    Deterministic for a fixed `rng_seed`.
    """
    config.validate()
    rng = derive_rng(config.rng_seed, "graphgen")

    topics = list(range(config.topic_count))
    authors = []
    pref_topic = {}
    papers = []
    writes = []
    cites = []
    about = []
    coauthor_sets = {}
    cite_counts = {}
    papers_by_year = []

    next_author = 0
    next_paper = 0
    for year in range(config.years):
        for _ in range(config.authors_per_year):
            authors.append(next_author)
            if topics:
                pref_topic[next_author] = int(rng.integers(len(topics)))
            coauthor_sets[next_author] = set()
            next_author += 1

        prior_papers = [p for ps in papers_by_year for p in ps]
        this_year = []
        for _ in range(config.papers_per_year):
            pid = next_paper
            next_paper += 1
            papers.append((pid, year))
            this_year.append(pid)

            team = _draw_team(rng, config, authors, coauthor_sets)
            for a in team:
                writes.append((a, pid))
            for a in team:
                coauthor_sets[a].update(t for t in team if t != a)

            lead = team[0]
            if rng.random() < config.preferred_topic_prob:
                topic = pref_topic[lead]
            else:
                topic = int(rng.integers(len(topics)))
            about.append((pid, topic))

            if prior_papers:
                n_cites = min(int(rng.poisson(config.citations_per_paper_mean)), len(prior_papers))
                if n_cites > 0:
                    weights = np.array(
                        [(1.0 + cite_counts.get(p, 0)) ** config.citation_preferential_exponent
                         for p in prior_papers],
                        dtype=float,
                    )
                    weights /= weights.sum()
                    chosen = rng.choice(len(prior_papers), size=n_cites, replace=False, p=weights)
                    for idx in sorted(int(i) for i in chosen):
                        target = prior_papers[idx]
                        cites.append((pid, target))
                        cite_counts[target] = cite_counts.get(target, 0) + 1
        papers_by_year.append(this_year)

    return TemporalAcademicGraph(authors, papers, topics, writes, cites, about)


def _draw_team(rng, config, authors, coauthor_sets):
    """One paper's author team: a uniform lead, then a mix of the team's
    prior collaborators and uniform newcomers."""
    size = 1 + int(rng.poisson(max(config.team_size_mean - 1.0, 0.0)))
    size = min(size, len(authors))
    lead = authors[int(rng.integers(len(authors)))]
    team = [lead]
    chosen = {lead}
    while len(team) < size:
        pool = sorted({c for m in team for c in coauthor_sets[m]} - chosen)
        if pool and rng.random() < config.collaborator_reuse_prob:
            member = pool[int(rng.integers(len(pool)))]
        else:
            member = authors[int(rng.integers(len(authors)))]
            if member in chosen:
                continue
        team.append(member)
        chosen.add(member)
    return team


# ----------------------------------------------------------------------
# On-disk format: UTF-8 text, one record per line, '#' comments.
#   A <id>              author
#   P <id> <year>       paper
#   T <id>              topic
#   W <author> <paper>  writes edge
#   C <citing> <cited>  cites edge
#   B <paper> <topic>   about edge
# Node records must precede edge records referencing them.
# ----------------------------------------------------------------------

_RECORD_ARITY = {"A": 1, "P": 2, "T": 1, "W": 2, "C": 2, "B": 2}


def save_graph(graph: TemporalAcademicGraph, path):
    """Write `graph` in the line-oriented text format (atomic replace)."""
    lines = []
    for a in sorted(graph.authors):
        lines.append(f"A {a}")
    for t in sorted(graph.topics):
        lines.append(f"T {t}")
    for p, y in graph.papers:
        lines.append(f"P {p} {y}")
    for a, p in sorted(graph.writes):
        lines.append(f"W {a} {p}")
    for c, d in sorted(graph.cites):
        lines.append(f"C {c} {d}")
    for p, t in sorted(graph.about):
        lines.append(f"B {p} {t}")
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")
    os.replace(tmp, path)


def load_graph(path) -> TemporalAcademicGraph:
    """Parse a graph file, validating ids, ordering, and all invariants."""
    authors, topics = set(), set()
    papers, writes, cites, about = [], [], [], []
    declared_papers = set()

    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            tag, args = fields[0], fields[1:]
            if tag not in _RECORD_ARITY:
                raise ParseError(f"unknown record tag {tag!r}", line_no, path)
            if len(args) != _RECORD_ARITY[tag]:
                raise ParseError(
                    f"record {tag!r} expects {_RECORD_ARITY[tag]} fields, got {len(args)}",
                    line_no,
                    path,
                )
            try:
                vals = [int(x) for x in args]
            except ValueError:
                raise ParseError(f"non-integer field in record {line!r}", line_no, path)

            if tag == "A":
                if vals[0] in authors:
                    raise IntegrityError(f"line {line_no}: duplicate author {vals[0]}")
                authors.add(vals[0])
            elif tag == "T":
                if vals[0] in topics:
                    raise IntegrityError(f"line {line_no}: duplicate topic {vals[0]}")
                topics.add(vals[0])
            elif tag == "P":
                if vals[0] in declared_papers:
                    raise IntegrityError(f"line {line_no}: duplicate paper {vals[0]}")
                declared_papers.add(vals[0])
                papers.append((vals[0], vals[1]))
            elif tag == "W":
                a, p = vals
                if a not in authors:
                    raise IntegrityError(f"line {line_no}: writes edge references undeclared author {a}")
                if p not in declared_papers:
                    raise IntegrityError(f"line {line_no}: writes edge references undeclared paper {p}")
                writes.append((a, p))
            elif tag == "C":
                c, d = vals
                for q in (c, d):
                    if q not in declared_papers:
                        raise IntegrityError(f"line {line_no}: cites edge references undeclared paper {q}")
                cites.append((c, d))
            elif tag == "B":
                p, t = vals
                if p not in declared_papers:
                    raise IntegrityError(f"line {line_no}: about edge references undeclared paper {p}")
                if t not in topics:
                    raise IntegrityError(f"line {line_no}: about edge references undeclared topic {t}")
                about.append((p, t))

    return TemporalAcademicGraph(authors, papers, topics, writes, cites, about)
