"""Deterministic seed derivation.

All randomness in the package flows from integer seeds through
``numpy.random.SeedSequence``.  Derived streams are obtained by spawning
with a *spawn key* built from a short domain label plus integer ids, so
any consumer (a grid cell, a per-author noise stream, ...) can be
reproduced in isolation without replaying the run that created it.
Python's builtin ``hash`` is never used: it is randomized per process.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Domain labels -> small fixed ints so spawn keys stay purely numeric.
_DOMAINS = {
    "init": 0,
    "shuffle": 1,
    "negatives": 2,
    "pool": 3,
    "author": 4,
    "rhsd": 5,
    "cell": 6,
    "graphgen": 7,
    "select": 8,
    "lightgcn": 9,
    "eval": 10,
}


def derive_seed_sequence(seed: int, domain: str, *ids: int) -> np.random.SeedSequence:
    """SeedSequence for `domain` (+ ids) rooted at `seed`."""
    if domain not in _DOMAINS:
        raise KeyError(f"unknown seed domain {domain!r}")
    return np.random.SeedSequence(int(seed), spawn_key=(_DOMAINS[domain], *map(int, ids)))


def derive_rng(seed: int, domain: str, *ids: int) -> np.random.Generator:
    """Fresh Generator for `domain` (+ ids) rooted at `seed`."""
    return np.random.default_rng(derive_seed_sequence(seed, domain, *ids))


def derive_seed(seed: int, domain: str, *ids: int) -> int:
    """Collapse a derived stream to a single integer seed (for manifests)."""
    return int(derive_seed_sequence(seed, domain, *ids).generate_state(1, np.uint64)[0])


def content_digest(*parts) -> str:
    """Stable hex digest of a nested structure of ints/floats/strings/tuples.

    Used to key datasets (evaluation seeds, holdout splits) to their
    content so the derived randomness is a function of the data alone.
    """
    h = hashlib.sha256()
    _feed(h, parts)
    return h.hexdigest()


def digest_to_seed(digest: str) -> int:
    """First 8 bytes of a hex digest as a nonnegative int."""
    return int(digest[:16], 16)


def _feed(h, obj):
    if isinstance(obj, (tuple, list)):
        h.update(b"(")
        for item in obj:
            _feed(h, item)
        h.update(b")")
    elif isinstance(obj, bool):
        h.update(b"b1" if obj else b"b0")
    elif isinstance(obj, int):
        h.update(b"i" + str(obj).encode())
    elif isinstance(obj, float):
        h.update(b"f" + repr(obj).encode())
    elif isinstance(obj, str):
        h.update(b"s" + obj.encode("utf-8"))
    elif obj is None:
        h.update(b"n")
    else:
        raise TypeError(f"cannot digest object of type {type(obj).__name__}")
    h.update(b";")
