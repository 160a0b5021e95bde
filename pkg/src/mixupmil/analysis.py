"""Sampled cosine distances between patch descriptors and box-plot summaries.

Pair categories:

    a  different bags, different classes
    b  different bags, any classes
    c  different bags, both of class 0
    d  different bags, both of class 1
    e  two distinct patches of the same bag

Each draw selects the bag(s) first, then a patch uniformly within each bag.
Quartiles use linear interpolation between order statistics (type 7).
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass

import numpy as np

from mixupmil.bagstore import BagDataset
from mixupmil.rng import RngStream

CATEGORIES = ("a", "b", "c", "d", "e")
CATEGORY_LABELS = {
    "a": "inter-WSI different classes",
    "b": "inter-WSI any classes",
    "c": "inter-WSI both class 0",
    "d": "inter-WSI both class 1",
    "e": "intra-WSI",
}


class UnsatisfiableCategory(ValueError):
    pass


def cosine_distance(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"vectors differ in length: {x.shape} vs {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("cosine distance undefined for a zero vector")
    return float(np.clip(1.0 - np.dot(x, y) / (nx * ny), 0.0, 2.0))


def _row_cosine_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    if np.any(nx == 0) or np.any(ny == 0):
        raise ValueError("cosine distance undefined for a zero vector")
    return np.clip(1.0 - np.einsum("ij,ij->i", x, y) / (nx * ny), 0.0, 2.0)


def _distinct_pairs(pool: np.ndarray, n: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """n ordered pairs of distinct pool members, uniform over such pairs."""
    m = len(pool)
    i = rng.integers(m, size=n)
    j = rng.integers(m - 1, size=n)
    j = j + (j >= i)
    return pool[i], pool[j]


def _pick_bags(ds: BagDataset, cat: str, n: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    classes = ds.class_indices()
    all_idx = np.arange(len(ds))
    if cat == "b":
        if len(ds) < 2:
            raise UnsatisfiableCategory("category b needs at least 2 bags")
        return _distinct_pairs(all_idx, n, rng)
    if cat in ("c", "d"):
        c = 0 if cat == "c" else 1
        pool = all_idx[classes == c]
        if len(pool) < 2:
            raise UnsatisfiableCategory(f"category {cat} needs at least 2 bags of class {c}")
        return _distinct_pairs(pool, n, rng)
    if cat == "a":
        if len(np.unique(classes)) < 2:
            raise UnsatisfiableCategory("category a needs bags from at least 2 classes")
        # rejection over ordered bag pairs keeps the draw uniform over valid pairs
        first, second = [], []
        have = 0
        while have < n:
            i = rng.integers(len(ds), size=n)
            j = rng.integers(len(ds), size=n)
            ok = classes[i] != classes[j]
            first.append(i[ok])
            second.append(j[ok])
            have += int(ok.sum())
        return np.concatenate(first)[:n], np.concatenate(second)[:n]
    raise ValueError(f"unknown pair category {cat!r}")


def sample_pair_distances(ds: BagDataset, cat: str, n: int, rng: RngStream) -> np.ndarray:
    if cat not in CATEGORIES:
        raise ValueError(f"unknown pair category {cat!r}; expected one of {', '.join(CATEGORIES)}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    sizes = np.array([b.n_patches for b in ds.bags], dtype=np.int64)
    if cat == "e":
        eligible = np.flatnonzero(sizes >= 2)
        if len(eligible) == 0:
            raise UnsatisfiableCategory("category e needs a bag with at least 2 patches")
        bags = eligible[rng.integers(len(eligible), size=n)]
        pi = rng.integers(sizes[bags])
        pj = rng.integers(sizes[bags] - 1)
        pj = pj + (pj >= pi)
        first, second = bags, bags
    else:
        first, second = _pick_bags(ds, cat, n, rng)
        pi = rng.integers(sizes[first])
        pj = rng.integers(sizes[second])
    x = np.stack([ds.bags[b].features[p] for b, p in zip(first, pi)]).astype(np.float64)
    y = np.stack([ds.bags[b].features[p] for b, p in zip(second, pj)]).astype(np.float64)
    return _row_cosine_distances(x, y)


@dataclass(frozen=True)
class DistanceSummary:
    count: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    whisker_low: float
    whisker_high: float
    outlier_count: int

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def summarize_distances(values) -> DistanceSummary:
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("cannot summarize an empty list")
    q1, median, q3 = np.percentile(v, [25, 50, 75], method="linear")
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return DistanceSummary(
        count=int(v.size),
        min=float(v[0]),
        q1=float(q1),
        median=float(median),
        q3=float(q3),
        max=float(v[-1]),
        whisker_low=float(inside[0]),
        whisker_high=float(inside[-1]),
        outlier_count=int(v.size - inside.size),
    )


def distance_study(ds: BagDataset, n: int, rng: RngStream, categories=CATEGORIES) -> dict[str, np.ndarray]:
    """Distances for every satisfiable category; unsatisfiable ones are skipped."""
    out = {}
    for cat in categories:
        try:
            out[cat] = sample_pair_distances(ds, cat, n, rng)
        except UnsatisfiableCategory:
            continue
    return out


def summary_csv(summaries: dict[str, DistanceSummary]) -> str:
    buf = io.StringIO()
    buf.write("# quartiles: linear interpolation (type 7); whiskers: extreme points within 1.5 IQR of the quartiles\n")
    names = list(DistanceSummary.__dataclass_fields__)
    buf.write(",".join(["category", "description"] + names) + "\n")
    for cat, s in summaries.items():
        row = asdict(s)
        vals = [repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in names]
        buf.write(",".join([cat, CATEGORY_LABELS[cat]] + vals) + "\n")
    return buf.getvalue()
