"""Per-item doubling-dimension estimation from a binarized ratings corpus.

Pipeline: pairwise noisy disagreement fractions over co-rating users,
noise-corrected to true-distance estimates, per-item ball-count profiles
over a radius grid, and finally the per-item exponent d_i = max_r
log2(N_{i,2r} / N_{i,r}).  Pairs with too few co-raters are excluded
rather than imputed.

The observed matrix is modeled as the latent one with every entry flipped
independently with probability Delta, so an observed disagreement
fraction relates to the true distance by
d_hat = (1-d) * 2*Delta*(1-Delta) + d * (Delta^2 + (1-Delta)^2),
which is inverted in closed form (the prefactor collapses to (1-2*Delta)^2).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .itemspace import ParameterError


class CorpusFormatError(ValueError):
    """The ratings file does not match the documented schema."""


@dataclass
class RatingsCorpus:
    """Binarized user-item ratings with index maps back to raw ids."""

    user_ids: list
    item_ids: list
    matrix: np.ndarray  # items x users, int8 in {-1, 0, +1}; 0 = missing
    binarize_threshold: float

    @property
    def n_items(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_users(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def from_triples(
        cls,
        triples,
        binarize_threshold: float,
    ) -> "RatingsCorpus":
        """Build from (user_id, item_id, raw_rating); ratings > threshold map to +1."""
        users: dict = {}
        items: dict = {}
        seen: set = set()
        rows = []
        for user_id, item_id, rating in triples:
            if (user_id, item_id) in seen:
                raise CorpusFormatError(
                    f"duplicate rating for user {user_id!r}, item {item_id!r}"
                )
            seen.add((user_id, item_id))
            u = users.setdefault(user_id, len(users))
            i = items.setdefault(item_id, len(items))
            rows.append((i, u, 1 if rating > binarize_threshold else -1))
        if not rows:
            raise CorpusFormatError("empty corpus")
        matrix = np.zeros((len(items), len(users)), dtype=np.int8)
        for i, u, v in rows:
            matrix[i, u] = v
        return cls(
            user_ids=list(users), item_ids=list(items),
            matrix=matrix, binarize_threshold=binarize_threshold,
        )

    @classmethod
    def from_csv(cls, path, binarize_threshold: float) -> "RatingsCorpus":
        """Read `user_id,item_id,rating` rows (header required)."""
        triples = []
        bad_lines = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header[:3]] != [
                "user_id", "item_id", "rating",
            ]:
                raise CorpusFormatError(
                    f"{path}: expected header 'user_id,item_id,rating', got {header}"
                )
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    triples.append((row[0], row[1], float(row[2])))
                except (IndexError, ValueError):
                    bad_lines.append(lineno)
        if bad_lines:
            shown = ", ".join(map(str, bad_lines[:10]))
            raise CorpusFormatError(
                f"{path}: malformed rows at lines {shown}"
                + ("..." if len(bad_lines) > 10 else "")
            )
        return cls.from_triples(triples, binarize_threshold)


def noisy_distance(i: int, j: int, corpus: RatingsCorpus, min_co: int = 20) -> Optional[float]:
    """Disagreement fraction among users who rated both items.

    Returns None (the skip signal) when fewer than min_co users co-rated.
    """
    ri = corpus.matrix[i]
    rj = corpus.matrix[j]
    both = (ri != 0) & (rj != 0)
    co = int(both.sum())
    if co < min_co:
        return None
    return float(np.count_nonzero(ri[both] != rj[both]) / co)


def denoise_distance(dhat: float, delta: float) -> tuple[float, bool]:
    """Invert the entry-flip noise model; returns (distance, clamped flag).

    Exact inverse of d -> (1-d)*2*Delta*(1-Delta) + d*(Delta^2+(1-Delta)^2);
    estimates outside [0, 1] are clamped and flagged.
    """
    if not (0 <= delta < 0.5):
        raise ParameterError("noise probability must lie in [0, 1/2)")
    if delta == 0.0:
        return float(dhat), False
    raw = (dhat - 2.0 * delta * (1.0 - delta)) / (1.0 - 2.0 * delta) ** 2
    clamped = raw < 0.0 or raw > 1.0
    return min(1.0, max(0.0, raw)), clamped


def forward_noise(d: float, delta: float) -> float:
    """Observed disagreement fraction for a true distance d under flip noise."""
    return (1.0 - d) * 2.0 * delta * (1.0 - delta) + d * (
        delta ** 2 + (1.0 - delta) ** 2
    )


def pairwise_distances(
    corpus: RatingsCorpus, delta: float, min_co: int = 20
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All-pairs denoised distances.

    Returns (distances, retained mask, clamped mask), each items x items;
    entries failing the co-rating minimum are masked out.  The diagonal is
    retained at distance zero.
    """
    if not (0 <= delta < 0.5):
        raise ParameterError("noise probability must lie in [0, 1/2)")
    r = corpus.matrix.astype(np.float32)
    present = (corpus.matrix != 0).astype(np.float32)
    co = present @ present.T
    agree_minus_disagree = r @ r.T
    with np.errstate(invalid="ignore", divide="ignore"):
        dhat = (co - agree_minus_disagree) / (2.0 * co)
    retained = co >= min_co
    np.fill_diagonal(retained, True)
    if delta == 0.0:
        raw = dhat
    else:
        raw = (dhat - 2.0 * delta * (1.0 - delta)) / (1.0 - 2.0 * delta) ** 2
    np.fill_diagonal(raw, 0.0)
    clamped = retained & ((raw < 0.0) | (raw > 1.0))
    distances = np.clip(raw, 0.0, 1.0)
    distances[~retained] = np.nan
    return distances, retained, clamped


def default_radius_grid(points: int = 101) -> np.ndarray:
    """Uniform grid on [0, 1]; 101 points make every 2r land back on the grid."""
    if points < 3 or (points - 1) % 2:
        raise ParameterError("need an odd point count so 2r stays on the grid")
    return np.linspace(0.0, 1.0, points)


def inverse_n_grid(n_users: int) -> np.ndarray:
    """The {0, 1/N, ..., 1} grid for small dense corpora."""
    return np.arange(n_users + 1) / n_users


def ball_counts(i: int, radii: np.ndarray, distances: np.ndarray) -> np.ndarray:
    """N_{i,r}: number of items within distance r of item i (self included)."""
    row = distances[i]
    finite = row[~np.isnan(row)]
    return np.count_nonzero(finite[None, :] <= radii[:, None] + 1e-12, axis=1)


def item_dd(profile: np.ndarray, radii: np.ndarray) -> float:
    """Least exponent with N_{i,2r} <= 2^d * N_{i,r} on the grid up to 1/2.

    Radii are paired with their exact doubles on the grid; cells where the
    inner ball holds only the item itself use count 1.
    """
    best = 0.0
    n = len(radii)
    for a in range(1, n):
        r = radii[a]
        if r > 0.5 + 1e-12:
            break
        b = 2 * a if len(radii) > 2 * a else None
        if b is None or abs(radii[b] - 2 * r) > 1e-9:
            continue
        inner = max(int(profile[a]), 1)
        outer = int(profile[b])
        if outer > 0:
            best = max(best, math.log2(outer / inner))
    return best


@dataclass
class DDResult:
    """Per-item doubling-dimension estimates plus summary statistics."""

    item_ids: list
    d_values: np.ndarray
    n_neighbors: np.ndarray
    clamp_rates: np.ndarray
    radii: np.ndarray
    delta: float
    min_co: int
    bin_width: float = 0.25
    histogram: dict = field(default_factory=dict)

    def mode(self) -> float:
        return self.histogram["mode"]

    def to_item_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item_id", "d_i", "n_neighbors", "clamp_rate"])
            for k, item_id in enumerate(self.item_ids):
                w.writerow([
                    item_id, repr(float(self.d_values[k])),
                    int(self.n_neighbors[k]), repr(float(self.clamp_rates[k])),
                ])

    def to_histogram_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.histogram, fh, indent=2)


def estimate_item_dds(
    corpus: RatingsCorpus,
    delta: float,
    min_co: int = 20,
    radii: Optional[np.ndarray] = None,
    bin_width: float = 0.25,
) -> DDResult:
    """Run the full estimation pipeline and summarize the d_i histogram."""
    radii = default_radius_grid() if radii is None else np.asarray(radii, dtype=float)
    distances, retained, clamped = pairwise_distances(corpus, delta, min_co)
    n_items = corpus.n_items
    d_values = np.zeros(n_items)
    n_neighbors = np.zeros(n_items, dtype=np.int64)
    clamp_rates = np.zeros(n_items)
    for i in range(n_items):
        profile = ball_counts(i, radii, distances)
        d_values[i] = item_dd(profile, radii)
        pairs = retained[i].sum() - 1
        n_neighbors[i] = pairs
        clamp_rates[i] = clamped[i].sum() / pairs if pairs > 0 else 0.0
    edges = np.arange(0.0, d_values.max() + 2 * bin_width, bin_width)
    counts, edges = np.histogram(d_values, bins=edges)
    mode_bin = int(np.argmax(counts))
    histogram = {
        "bin_edges": [float(e) for e in edges],
        "counts": [int(c) for c in counts],
        "mode": float((edges[mode_bin] + edges[mode_bin + 1]) / 2),
        "bin_width": bin_width,
        "n_items": n_items,
        "delta": delta,
        "min_co": min_co,
        "mean_clamp_rate": float(clamp_rates.mean()),
    }
    return DDResult(
        item_ids=list(corpus.item_ids),
        d_values=d_values,
        n_neighbors=n_neighbors,
        clamp_rates=clamp_rates,
        radii=radii,
        delta=delta,
        min_co=min_co,
        bin_width=bin_width,
        histogram=histogram,
    )


def make_planted_corpus(
    k_clusters: int,
    n_items: int,
    n_users: int,
    delta: float,
    density: float = 0.6,
    seed: int = 0,
) -> RatingsCorpus:
    """Synthetic corpus with K planted item clusters and entry-flip noise.

    Latent types are K independent uniform sign vectors (pairwise distance
    concentrates at 1/2), items split evenly across them; every entry is
    observed with the given density and flipped with probability delta.
    The latent measure's doubling dimension is log2(K) with overwhelming
    probability, which end-to-end checks compare the histogram mode to.
    """
    if k_clusters < 1 or n_items < k_clusters:
        raise ParameterError("need at least one item per cluster")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDD]))
    centers = rng.integers(0, 2, size=(k_clusters, n_users), dtype=np.int8) * 2 - 1
    latent = centers[np.arange(n_items) % k_clusters]
    flips = rng.random(size=latent.shape) < delta
    observed = np.where(flips, -latent, latent)
    present = rng.random(size=latent.shape) < density
    matrix = np.where(present, observed, 0).astype(np.int8)
    return RatingsCorpus(
        user_ids=[f"u{u}" for u in range(n_users)],
        item_ids=[f"i{i}" for i in range(n_items)],
        matrix=matrix,
        binarize_threshold=0.0,
    )


def corpus_to_csv(corpus: RatingsCorpus, path) -> None:
    """Write the corpus back out in the documented triple schema."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "rating"])
        items, users = np.nonzero(corpus.matrix)
        for i, u in zip(items, users):
            w.writerow([
                corpus.user_ids[u], corpus.item_ids[i],
                int(corpus.matrix[i, u]),
            ])
