"""Identity database, nearest-neighbour identification and space export."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, InputError, MetricError


@dataclass(frozen=True)
class Entry:
    individual_id: str
    embedding: np.ndarray
    split: str = "train"
    source: str = ""


@dataclass
class IdentityDb:
    entries: list[Entry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> int | None:
        return len(self.entries[0].embedding) if self.entries else None

    def matrix(self) -> np.ndarray:
        return np.array([e.embedding for e in self.entries])

    def ids(self) -> list[str]:
        return [e.individual_id for e in self.entries]


def enroll(db: IdentityDb, individual_id: str, embedding, source: str = "", split: str = "train") -> IdentityDb:
    """Return a new db with one more exemplar; several per id are allowed."""
    if not individual_id:
        raise InputError("individual id must be non-empty")
    emb = np.asarray(embedding, float).reshape(-1)
    if db.dim is not None and len(emb) != db.dim:
        raise DimensionError(f"embedding has dimension {len(emb)}, database holds {db.dim}")
    return IdentityDb(db.entries + [Entry(individual_id, emb.copy(), split, source)])


@dataclass(frozen=True)
class Match:
    predicted: str
    neighbours: tuple[str, ...]
    distances: tuple[float, ...]


def knn_classify(db: IdentityDb, query, k: int = 1) -> Match:
    """Majority vote among the k nearest exemplars.

    Distance ties keep enrollment order; vote ties go to the smaller mean
    neighbour distance, then to the lexicographically smaller id.
    """
    if len(db) == 0:
        raise MetricError("identity database is empty")
    if not 1 <= k <= len(db):
        raise InputError(f"k={k} must lie in [1, {len(db)}]")
    q = np.asarray(query, float).reshape(-1)
    if len(q) != db.dim:
        raise DimensionError(f"query has dimension {len(q)}, database holds {db.dim}")
    d = np.sqrt(((db.matrix() - q) ** 2).sum(axis=1))
    order = np.argsort(d, kind="stable")[:k]
    ids = [db.entries[i].individual_id for i in order]
    votes = Counter(ids)
    best = min(votes, key=lambda c: (-votes[c], float(np.mean([d[i] for i in order
                                                              if db.entries[i].individual_id == c])), c))
    return Match(best, tuple(ids), tuple(float(d[i]) for i in order))


def top1_accuracy(db: IdentityDb, queries, labels, k: int = 1) -> float:
    queries = list(queries)
    labels = list(labels)
    if not queries:
        raise MetricError("no queries to evaluate")
    if len(queries) != len(labels):
        raise InputError("queries and labels differ in length")
    hits = sum(knn_classify(db, q, k).predicted == lab for q, lab in zip(queries, labels))
    return hits / len(queries)


def project2d(embeddings) -> np.ndarray:
    """Centre, then project onto the two leading principal directions."""
    x = np.asarray(embeddings, float)
    if x.ndim != 2 or len(x) < 2:
        raise InputError("need at least two embeddings to project")
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    basis = vt[:2]
    if len(basis) < 2:
        basis = np.vstack([basis, np.zeros((2 - len(basis), x.shape[1]))])
    # fix the sign of each direction so the output is reproducible
    big = np.argmax(np.abs(basis), axis=1)
    basis = basis * np.sign(basis[np.arange(2), big])[:, None]
    basis[~np.isfinite(basis)] = 0.0
    out = xc @ basis.T
    return out - out.mean(axis=0)


# --------------------------------------------------------------------------
# csv export


def write_embeddings_csv(path, ids, splits, sources, embeddings) -> None:
    emb = np.asarray(embeddings, float)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "split", "source"] + [f"e{i}" for i in range(emb.shape[1])])
        for row in zip(ids, splits, sources, emb):
            wr.writerow(list(row[:3]) + [repr(float(v)) for v in row[3]])


def read_embeddings_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = [r[0] for r in body]
    splits = [r[1] for r in body]
    sources = [r[2] for r in body]
    emb = np.array([[float(v) for v in r[3:]] for r in body]).reshape(len(body), -1)
    return ids, splits, sources, emb


def write_space_csv(path, ids, splits, xy) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "split", "x", "y"])
        for i, s, (x, y) in zip(ids, splits, np.asarray(xy, float)):
            wr.writerow([i, s, repr(float(x)), repr(float(y))])


def db_from_rows(ids, splits, sources, emb) -> IdentityDb:
    db = IdentityDb()
    for i, s, src, e in zip(ids, splits, sources, emb):
        db = enroll(db, i, e, src, s)
    return db


def load_db(path) -> IdentityDb:
    return db_from_rows(*read_embeddings_csv(Path(path)))
