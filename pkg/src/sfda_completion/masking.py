"""Masking augmentations that produce partial views of a partial input.

Two strategies:

* partition: remove one whole octant of the bounding-box centroid partition,
  chosen uniformly among octants whose removal keeps at least a quarter of
  the points alive.
* view: remove the floor(fraction * N) points nearest to a randomly chosen
  anchor point, anchor included.

Both are seeded and deterministic; a ``MaskedSet`` bundles the original cloud
with K independently masked views for consistency training.
"""

from dataclasses import dataclass
from math import floor

import numpy as np

from .geometry import as_cloud

PARTITION_FALLBACK = -1  # sentinel octant id when no octant can be removed


def octant_of(point, center):
    """Octant index of a point relative to a center, ties to the positive side.

    The index packs the per-axis sign bits as (x << 2) | (y << 1) | z, where
    a bit is 1 when the coordinate is >= the center's. A point equal to the
    center lands in octant 7.
    """
    p = np.asarray(point, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    if p.shape != (3,) or c.shape != (3,):
        raise ValueError("octant_of expects a single 3-vector point and center")
    bits = p >= c
    return int(bits[0]) * 4 + int(bits[1]) * 2 + int(bits[2])


def octants_of(P, center):
    """Vectorized octant_of: (N, 3) cloud -> (N,) int octant indices."""
    P = as_cloud(P)
    c = np.asarray(center, dtype=np.float64)
    return (P >= c) @ np.array([4, 2, 1], dtype=np.int64)


@dataclass
class MaskResult:
    """One masked view plus how it was produced."""

    points: np.ndarray
    octant: int | None = None
    anchor: np.ndarray | None = None
    warning: bool = False


def partition_mask(P, seed, min_keep_fraction=0.25):
    """Remove one octant of the bbox-centroid partition.

    Only octants that are non-empty and whose removal leaves at least
    ``min_keep_fraction`` of the points are eligible; the choice among them
    is uniform under the seed. If no octant qualifies (degenerate clouds),
    the cloud is returned unmasked with the sentinel octant id and a warning
    flag instead of raising.
    """
    P = as_cloud(P)
    n = P.shape[0]
    center = (P.min(axis=0) + P.max(axis=0)) / 2.0
    occ = octants_of(P, center)
    counts = np.bincount(occ, minlength=8)
    admissible = [
        o
        for o in range(8)
        if counts[o] > 0 and (n - counts[o]) >= min_keep_fraction * n
    ]
    if not admissible:
        return MaskResult(points=P.copy(), octant=PARTITION_FALLBACK, warning=True)
    rng = np.random.default_rng(seed)
    chosen = admissible[int(rng.integers(len(admissible)))]
    return MaskResult(points=P[occ != chosen], octant=chosen)


def view_mask(P, seed, fraction=1.0 / 8.0):
    """Remove exactly floor(fraction * N) points nearest to a seeded anchor.

    The anchor is one of the cloud's own points and is always among the
    removed set (when the removal count is nonzero). Distance ties resolve
    by lowest index.
    """
    P = as_cloud(P)
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    n = P.shape[0]
    m = floor(fraction * n)
    rng = np.random.default_rng(seed)
    anchor_idx = int(rng.integers(n))
    diff = P - P[anchor_idx]
    d = (diff[:, 0] ** 2 + diff[:, 1] ** 2) + diff[:, 2] ** 2
    d[anchor_idx] = -1.0  # the anchor itself always sorts first
    order = np.argsort(d, kind="stable")
    keep = np.ones(n, dtype=bool)
    keep[order[:m]] = False
    return MaskResult(points=P[keep], anchor=P[anchor_idx].copy())


@dataclass
class MaskedSet:
    """Original cloud at index 0 plus K masked views."""

    clouds: list
    results: list  # MaskResult per view; None at index 0

    def __post_init__(self):
        if not self.clouds:
            raise ValueError("MaskedSet needs at least the original cloud")
        n = self.clouds[0].shape[0]
        for i, c in enumerate(self.clouds[1:], start=1):
            r = self.results[i]
            if c.shape[0] == 0:
                raise ValueError(f"masked view {i} is empty")
            if c.shape[0] >= n and not (r is not None and r.warning):
                raise ValueError(f"masked view {i} is not a strict subset")

    @property
    def k(self):
        return len(self.clouds) - 1


_STRATEGIES = {"partition": partition_mask, "view": view_mask}


def strategy_names():
    """Masking strategies usable with build_masked_set, sorted."""
    return tuple(sorted(_STRATEGIES))


def build_masked_set(P, k, strategy, seed):
    """Build the original plus K seeded masked views.

    View i (1-based) uses a child seed derived from (seed, i), so each view
    is independent and the whole set is reproducible from one integer.

    Args:
        P: (N, 3) partial input cloud.
        k: number of masked views, k >= 0.
        strategy: "partition" or "view".
        seed: integer seed.

    Returns:
        MaskedSet with clouds[0] == P (copied) and k masked views.
    """
    P = as_cloud(P)
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if strategy not in _STRATEGIES:
        raise ValueError(
            f"unknown masking strategy {strategy!r}; expected one of {sorted(_STRATEGIES)}"
        )
    if int(seed) < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    mask_fn = _STRATEGIES[strategy]
    clouds = [P.copy()]
    results = [None]
    for i in range(1, k + 1):
        res = mask_fn(P, np.random.SeedSequence([int(seed), i]))
        clouds.append(res.points)
        results.append(res)
    return MaskedSet(clouds=clouds, results=results)
