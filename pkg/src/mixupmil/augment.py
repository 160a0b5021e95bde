"""Instance shuffling, Intra-MixUp and Inter-MixUp on feature bags.

Mixed rows are computed in float64, clipped to the per-coordinate range of
their two parents and stored as float32, so every output coordinate lies in
the closed interval spanned by its parents even after rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mixupmil.bagstore import BagDataset, DatasetError, FeatureBag
from mixupmil.rng import RngStream

MODES = ("none", "intra-linear", "intra-multilinear", "inter-v1", "inter-v2")
INTRA_MODES = ("intra-linear", "intra-multilinear")
INTER_MODES = ("inter-v1", "inter-v2")
DEFAULT_BETA = 0.5


class AugmentUsageError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    mode: str = "none"
    beta: float = DEFAULT_BETA

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown augment mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")

    @property
    def is_intra(self) -> bool:
        return self.mode in INTRA_MODES

    @property
    def is_inter(self) -> bool:
        return self.mode in INTER_MODES


def interpolate(a: np.ndarray, b: np.ndarray, alpha) -> np.ndarray:
    """``alpha * a + (1 - alpha) * b`` as float32, clipped to the parents' range."""
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    out = alpha * a64 + (1.0 - alpha) * b64
    np.clip(out, np.minimum(a64, b64), np.maximum(a64, b64), out=out)
    return out.astype(np.float32)


def shuffle_instances(bag: FeatureBag, rng: RngStream) -> FeatureBag:
    perm = rng.permutation(bag.n_patches)
    return bag.with_features(bag.features[perm])


def mix_rows(features: np.ndarray, i: np.ndarray, j: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Row k of the result is ``alpha[k] * features[i[k]] + (1 - alpha[k]) * features[j[k]]``.

    ``alpha`` has shape (K,) for linear or (K, D) for multilinear mixing.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    return interpolate(features[i], features[j], alpha)


def intra_mixup(bag: FeatureBag, multilinear: bool, rng: RngStream) -> FeatureBag:
    # draw order: i (P ints), j (P ints), alpha (P or P x D uniforms)
    p = bag.n_patches
    i = rng.integers(p, size=p)
    j = rng.integers(p, size=p)
    alpha = rng.uniform((p, bag.dim) if multilinear else p)
    return bag.with_features(mix_rows(bag.features, i, j, alpha), origin="intra-mix")


def apply_selective(bag: FeatureBag, cfg: AugmentConfig, rng: RngStream) -> FeatureBag:
    """Intra-MixUp with probability ``cfg.beta``; the original bag otherwise."""
    if not cfg.is_intra:
        raise AugmentUsageError(f"selective augmentation needs an intra mode, got {cfg.mode!r}")
    if rng.uniform() < cfg.beta:
        return intra_mixup(bag, cfg.mode == "intra-multilinear", rng)
    return bag


def inter_mixup(bag_w: FeatureBag, bag_v: FeatureBag, alpha: float, mix_labels: bool) -> FeatureBag:
    """Position-wise mix of two bags, truncated to the shorter one."""
    if bag_w.dim != bag_v.dim:
        raise ShapeError(f"descriptor dims differ: {bag_w.dim} vs {bag_v.dim}")
    if bag_w.n_classes != bag_v.n_classes:
        raise ShapeError(f"class counts differ: {bag_w.n_classes} vs {bag_v.n_classes}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    p = min(bag_w.n_patches, bag_v.n_patches)
    features = interpolate(bag_w.features[:p], bag_v.features[:p], alpha)
    if mix_labels:
        label = interpolate(bag_w.label, bag_v.label, alpha)
    else:
        label = bag_w.label
    ident = bag_w.id if bag_w.id == bag_v.id else f"{bag_w.id}+{bag_v.id}"
    return FeatureBag(ident, label, features, "inter-mix")


def build_epoch_bags(train: BagDataset, cfg: AugmentConfig, rng: RngStream) -> list[FeatureBag]:
    """Materialize one epoch of training bags; always ``len(train)`` of them."""
    n = len(train)
    if n == 0:
        raise DatasetError("empty training set")
    if cfg.mode == "none":
        return [shuffle_instances(b, rng) for b in train.bags]
    if cfg.is_intra:
        return [apply_selective(shuffle_instances(b, rng), cfg, rng) for b in train.bags]

    by_class = train.indices_by_class(one_hot_only=False)
    classes = train.class_indices()
    out = []
    for _ in range(n):
        # draw order per slot: w, v, alpha, shuffle(w), shuffle(v)
        w = rng.integers(n)
        if cfg.mode == "inter-v1":
            pool = by_class[classes[w]]
            v = pool[rng.integers(len(pool))]
        else:
            v = rng.integers(n)
        alpha = rng.uniform()
        bag_w = shuffle_instances(train.bags[w], rng)
        bag_v = shuffle_instances(train.bags[v], rng)
        out.append(inter_mixup(bag_w, bag_v, alpha, mix_labels=cfg.mode == "inter-v2"))
    return out
