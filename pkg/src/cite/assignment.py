"""Concept-weight assignment: coarse dictionaries, k-means clusters, and
persistent random assignment. The learned alternative (concept weight
branch) lives in :mod:`cite.network`."""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DataError, DimensionError, ValidationError

COARSE_CATEGORIES = (
    "people",
    "clothing",
    "body parts",
    "animals",
    "vehicles",
    "instruments",
    "scene",
    "other",
)

_STOP_WORDS = frozenset(
    "a an the of in on at by with and or to for from is are was were be "
    "his her its their this that these those some".split()
)

_TOKEN_RE = re.compile(r"[a-z0-9']+")


def normalize_phrase(text: str) -> str:
    """Lowercase, strip punctuation, and drop stop words."""
    tokens = [t for t in _TOKEN_RE.findall(text.lower()) if t not in _STOP_WORDS]
    return " ".join(tokens)


@dataclass
class ConceptWeights:
    """Per-phrase mixing weights over the K conditional embeddings."""

    u: np.ndarray
    source: str  # coarse | kmeans | random | learned

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 1 or self.u.size < 1:
            raise ValidationError("concept weights must be a non-empty vector")
        if np.any(self.u < 0.0):
            raise ValidationError("concept weights must be non-negative")
        if self.source in ("kmeans", "random"):
            if not (np.sum(self.u == 1.0) == 1 and np.sum(self.u == 0.0) == self.u.size - 1):
                raise ValidationError(f"{self.source} weights must be one-hot")
        elif self.source == "coarse":
            if not np.all((self.u == 0.0) | (self.u == 1.0)) or not np.any(self.u == 1.0):
                raise ValidationError("coarse weights must be binary with at least one hit")
        elif self.source == "learned":
            if abs(float(self.u.sum()) - 1.0) > 1e-6:
                raise ValidationError("learned weights must sum to 1")
        else:
            raise ValidationError(f"unknown concept weight source {self.source!r}")


def one_hot(index: int, k: int, source: str) -> ConceptWeights:
    u = np.zeros(k, dtype=np.float64)
    u[index] = 1.0
    return ConceptWeights(u, source)


# ---------------------------------------------------------------------------
# coarse categories
# ---------------------------------------------------------------------------

class CoarseDictionary:
    """Maps phrases to the eight coarse categories.

    Lookup normalizes the phrase, tries an exact match, then falls back to
    matching individual tokens (union of their categories), then to 'other'.
    """

    def __init__(self, entries: dict[str, list[str]]):
        if set(entries) != set(COARSE_CATEGORIES):
            missing = set(COARSE_CATEGORIES) - set(entries)
            extra = set(entries) - set(COARSE_CATEGORIES)
            raise DataError(
                f"coarse dictionary must define exactly the 8 categories; "
                f"missing={sorted(missing)}, unexpected={sorted(extra)}"
            )
        self._index: dict[str, set[int]] = {}
        for cat_idx, cat in enumerate(COARSE_CATEGORIES):
            for phrase in entries[cat]:
                key = normalize_phrase(phrase)
                if not key:
                    continue
                self._index.setdefault(key, set()).add(cat_idx)

    @classmethod
    def from_json(cls, path) -> "CoarseDictionary":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read coarse dictionary {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"coarse dictionary {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict) or not all(
            isinstance(v, list) and all(isinstance(s, str) for s in v) for v in raw.values()
        ):
            raise DataError(f"coarse dictionary {path} must map category -> list of phrases")
        return cls(raw)

    def categories_of(self, phrase_key: str) -> set[int]:
        key = normalize_phrase(phrase_key)
        if key in self._index:
            return set(self._index[key])
        hits: set[int] = set()
        for token in key.split():
            if token in self._index:
                hits |= self._index[token]
        if hits:
            return hits
        return {COARSE_CATEGORIES.index("other")}


def coarse_assign(phrase_key: str, dictionary: CoarseDictionary) -> ConceptWeights:
    """Binary 8-vector of the phrase's categories; unknown phrases -> other."""
    u = np.zeros(len(COARSE_CATEGORIES), dtype=np.float64)
    for idx in dictionary.categories_of(phrase_key):
        u[idx] = 1.0
    return ConceptWeights(u, "coarse")


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass
class KMeansModel:
    """Fitted Lloyd clustering: centers plus fit provenance."""

    centers: np.ndarray
    seed: int
    iterations_run: int
    inertia_history: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "seed": self.seed,
            "iterations_run": self.iterations_run,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "KMeansModel":
        return cls(
            centers=np.asarray(obj["centers"], dtype=np.float64),
            seed=int(obj["seed"]),
            iterations_run=int(obj["iterations_run"]),
        )


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = x[first]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = float(closest.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[c] = x[idx]
        closest = np.minimum(closest, np.sum((x - centers[c]) ** 2, axis=1))
    return centers


def kmeans_fit(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> KMeansModel:
    """Lloyd iterations from k-means++ init until the assignment fixpoint or
    max_iter. Empty clusters are reseeded with the point farthest from its
    assigned center. Deterministic given (x, k, seed)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("kmeans_fit expects an (n, d) matrix")
    n = x.shape[0]
    if k < 1 or n < k:
        raise ValidationError(f"kmeans_fit needs n >= K >= 1, got n={n}, K={k}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(x, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    iterations = 0
    for _ in range(max_iter):
        new_labels, dists = kernels.sqdist_argmin(x, centers)
        history.append(float(dists.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        iterations += 1
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        for c in range(k):
            if counts[c] > 0:
                centers[c] = sums[c] / counts[c]
            else:
                # Keep K live clusters: reseed with the worst-fit point.
                far = int(np.argmax(dists))
                centers[c] = x[far]
                dists[far] = 0.0
    return KMeansModel(centers=centers, seed=seed, iterations_run=iterations,
                       inertia_history=history)


def kmeans_assign(x: np.ndarray, model: KMeansModel) -> ConceptWeights:
    """One-hot weight at the nearest center; ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.centers.shape[1]:
        raise DimensionError(
            f"kmeans_assign: point has dim {x.shape} but centers are "
            f"{model.centers.shape[1]}-d"
        )
    labels, _ = kernels.sqdist_argmin(np.ascontiguousarray(x[None, :]), model.centers)
    return one_hot(int(labels[0]), model.centers.shape[0], "kmeans")


def kmeans_assign_matrix(x: np.ndarray, model: KMeansModel) -> np.ndarray:
    """Bulk one-hot assignment: (n, d) -> (n, K)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.centers.shape[1]:
        raise DimensionError("kmeans_assign_matrix: dimension mismatch with centers")
    labels, _ = kernels.sqdist_argmin(x, model.centers)
    k = model.centers.shape[0]
    out = np.zeros((x.shape[0], k), dtype=np.float64)
    out[np.arange(x.shape[0]), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# persistent random assignment
# ---------------------------------------------------------------------------

def random_assign(phrase_id, k: int, seed: int, table: dict) -> ConceptWeights:
    """Uniform one-hot draw, persisted per phrase id.

    The first call for a phrase draws from a generator seeded by
    (seed, crc32(phrase_id)) and records the index in `table`; later calls
    return the recorded index. Unseen phrases at test time draw the same way,
    so the table is independent of call order.
    """
    if k < 1:
        raise ValidationError("random_assign needs K >= 1")
    if phrase_id in table:
        idx = table[phrase_id]
    else:
        digest = zlib.crc32(str(phrase_id).encode("utf-8"))
        rng = np.random.default_rng([seed, digest])
        idx = int(rng.integers(k))
        table[phrase_id] = idx
    return one_hot(idx, k, "random")
