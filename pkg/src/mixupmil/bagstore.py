"""Bag data model, MBAG binary codec, dataset I/O, subsampling and synthetic bags.

MBAG layout (little-endian)::

    "MBAG" | version u32 = 1 | id_len u32 | id utf-8 | C u32 | P u32 | D u32
    | label C x f32 | features P x D x f32 (row-major)

A dataset on disk is a directory of ``*.mbag`` files plus ``manifest.txt``:
class names one per line, then the literal line ``id,class_index,filename``
followed by one row per bag (class_index is -1 for soft-labelled bags).
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import InitVar, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from mixupmil.rng import RngStream

MAGIC = b"MBAG"
VERSION = 1
MANIFEST = "manifest.txt"
MANIFEST_HEADER = "id,class_index,filename"
ORIGINS = ("real", "intra-mix", "inter-mix")
LABEL_TOL = 1e-6


class BagValidationError(ValueError):
    """A bag or dataset violates one of its invariants."""


class BagFormatError(ValueError):
    """Bytes are not a well-formed MBAG payload."""


class BagTruncatedError(BagFormatError):
    """Payload ends before the declared content."""


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureBag:
    """One slide: a P x D matrix of patch descriptors plus a soft label of length C.

    Arrays are stored as read-only float32. Pass ``check=False`` to skip
    validation (used to build deliberately invalid bags in tests).
    """

    id: str
    label: np.ndarray
    features: np.ndarray
    origin: str = "real"
    check: InitVar[bool] = True

    def __post_init__(self, check: bool) -> None:
        label = np.array(self.label, dtype=np.float32, copy=True).reshape(-1)
        features = np.array(self.features, dtype=np.float32, copy=True)
        if features.ndim == 1:
            features = features.reshape(1, -1)
        label.flags.writeable = False
        features.flags.writeable = False
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "features", features)
        if check:
            self.validate()

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.label.shape[0]

    @property
    def class_index(self) -> int:
        return int(np.argmax(self.label))

    @property
    def is_one_hot(self) -> bool:
        return bool(np.count_nonzero(self.label == 1.0) == 1 and np.count_nonzero(self.label) == 1)

    def validate(self) -> None:
        if self.features.ndim != 2:
            raise BagValidationError(f"bag {self.id!r}: features must be a P x D matrix")
        if self.n_patches < 1:
            raise BagValidationError(f"bag {self.id!r}: P must be >= 1")
        if self.dim < 1:
            raise BagValidationError(f"bag {self.id!r}: D must be >= 1")
        if self.n_classes < 2:
            raise BagValidationError(f"bag {self.id!r}: C must be >= 2")
        if self.origin not in ORIGINS:
            raise BagValidationError(f"bag {self.id!r}: unknown origin {self.origin!r}")
        if not np.all(np.isfinite(self.features)):
            raise BagValidationError(f"bag {self.id!r}: features contain non-finite values")
        if not np.all(np.isfinite(self.label)):
            raise BagValidationError(f"bag {self.id!r}: label contains non-finite values")
        if np.any(self.label < 0):
            raise BagValidationError(f"bag {self.id!r}: label has negative entries")
        if abs(float(np.sum(self.label, dtype=np.float64)) - 1.0) > LABEL_TOL:
            raise BagValidationError(f"bag {self.id!r}: label does not sum to 1")
        if self.origin == "real" and np.count_nonzero(self.label == 1.0) != 1:
            raise BagValidationError(f"bag {self.id!r}: real bag label is not one-hot")

    def with_features(self, features: np.ndarray, origin: str | None = None) -> "FeatureBag":
        return FeatureBag(self.id, self.label, features, origin or self.origin)


def one_hot(index: int, n_classes: int) -> np.ndarray:
    y = np.zeros(n_classes, dtype=np.float32)
    y[index] = 1.0
    return y


def bags_equal(a: FeatureBag, b: FeatureBag) -> bool:
    """Bit-exact equality of id, label and features."""
    return (
        a.id == b.id
        and a.label.shape == b.label.shape
        and a.features.shape == b.features.shape
        and a.label.tobytes() == b.label.tobytes()
        and a.features.tobytes() == b.features.tobytes()
    )


@dataclass(frozen=True, eq=False)
class BagDataset:
    bags: tuple[FeatureBag, ...]
    class_names: tuple[str, ...]
    descriptor_dim: int = field(default=-1)

    def __post_init__(self) -> None:
        object.__setattr__(self, "bags", tuple(self.bags))
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))
        if self.descriptor_dim < 0:
            if not self.bags:
                raise DatasetError("descriptor_dim required for an empty dataset")
            object.__setattr__(self, "descriptor_dim", self.bags[0].dim)
        c = len(self.class_names)
        if c < 2:
            raise BagValidationError("dataset needs at least 2 classes")
        seen = set()
        for bag in self.bags:
            if bag.dim != self.descriptor_dim:
                raise BagValidationError(
                    f"bag {bag.id!r} has D={bag.dim}, dataset expects {self.descriptor_dim}"
                )
            if bag.n_classes != c:
                raise BagValidationError(f"bag {bag.id!r} has C={bag.n_classes}, dataset expects {c}")
            if bag.id in seen:
                raise BagValidationError(f"duplicate bag id {bag.id!r}")
            seen.add(bag.id)

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)

    def __getitem__(self, i: int) -> FeatureBag:
        return self.bags[i]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_indices(self) -> np.ndarray:
        return np.array([b.class_index for b in self.bags], dtype=np.int64)

    def indices_by_class(self, one_hot_only: bool = True) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.class_names]
        for i, bag in enumerate(self.bags):
            if one_hot_only and not bag.is_one_hot:
                continue
            out[bag.class_index].append(i)
        return out

    def subset(self, indices: Iterable[int]) -> "BagDataset":
        return BagDataset(tuple(self.bags[i] for i in indices), self.class_names, self.descriptor_dim)

    def replace_bags(self, bags: Sequence[FeatureBag]) -> "BagDataset":
        return BagDataset(tuple(bags), self.class_names, self.descriptor_dim)


# ---------------------------------------------------------------- codec


def encode_bag(bag: FeatureBag) -> bytes:
    bag.validate()
    ident = bag.id.encode("utf-8")
    head = MAGIC + struct.pack("<II", VERSION, len(ident)) + ident
    head += struct.pack("<III", bag.n_classes, bag.n_patches, bag.dim)
    return head + bag.label.astype("<f4").tobytes() + bag.features.astype("<f4").tobytes()


def decode_bag(data: bytes, origin: str | None = None) -> FeatureBag:
    """Inverse of :func:`encode_bag`.

    MBAG does not carry the origin tag; unless given, it is ``real`` for
    one-hot labels and ``inter-mix`` otherwise.
    """
    mv = memoryview(data)
    if len(mv) < 4 or bytes(mv[:4]) != MAGIC:
        raise BagFormatError("bad magic: expected b'MBAG'")
    pos = 4

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(mv):
            raise BagTruncatedError(f"truncated payload while reading {what}: need {n} bytes, have {len(mv) - pos}")
        chunk = mv[pos : pos + n]
        pos += n
        return chunk

    version, id_len = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise BagFormatError(f"unsupported MBAG version {version}")
    try:
        ident = bytes(take(id_len, "id")).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BagFormatError(f"id is not valid utf-8: {exc}") from None
    c, p, d = struct.unpack("<III", take(12, "shape"))
    if c < 2 or p < 1 or d < 1:
        raise BagFormatError(f"invalid shape header C={c} P={p} D={d}")
    label = np.frombuffer(take(4 * c, "label"), dtype="<f4")
    features = np.frombuffer(take(4 * p * d, "features"), dtype="<f4").reshape(p, d)
    if pos != len(mv):
        raise BagFormatError(f"mis-sized payload: {len(mv) - pos} trailing bytes")
    if origin is None:
        is_one_hot = np.count_nonzero(label == 1.0) == 1 and np.count_nonzero(label) == 1
        origin = "real" if is_one_hot else "inter-mix"
    return FeatureBag(ident, label, features, origin)


def write_bag(bag: FeatureBag, path: str | Path) -> None:
    Path(path).write_bytes(encode_bag(bag))


def read_bag(path: str | Path) -> FeatureBag:
    return decode_bag(Path(path).read_bytes())


def save_dataset(ds: BagDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = list(ds.class_names) + [MANIFEST_HEADER]
    for i, bag in enumerate(ds.bags):
        name = f"bag_{i:05d}.mbag"
        write_bag(bag, directory / name)
        cls = bag.class_index if bag.is_one_hot else -1
        lines.append(f"{bag.id},{cls},{name}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return directory


def load_dataset(directory: str | Path) -> BagDataset:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise DatasetError(f"no {MANIFEST} in {directory}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    try:
        split = lines.index(MANIFEST_HEADER)
    except ValueError:
        raise DatasetError(f"{manifest}: missing '{MANIFEST_HEADER}' line") from None
    class_names = [ln for ln in lines[:split] if ln.strip()]
    bags = []
    for row in csv.reader(lines[split + 1 :]):
        if not row:
            continue
        ident, cls, filename = row[0], int(row[1]), row[2]
        bag = read_bag(directory / filename)
        if bag.id != ident:
            raise DatasetError(f"{filename}: id {bag.id!r} does not match manifest {ident!r}")
        if cls >= 0 and bag.class_index != cls:
            raise DatasetError(f"{filename}: label class {bag.class_index} != manifest class {cls}")
        bags.append(bag)
    return BagDataset(tuple(bags), tuple(class_names))


def import_csv(path: str | Path, class_names: Sequence[str] | None = None) -> BagDataset:
    """Read one-row-per-patch CSV: ``bag_id, label, f_0 .. f_{D-1}``.

    ``label`` is a class name or integer index. A header row is detected and
    skipped. Values are parsed as float64 and stored as float32.
    """
    rows: dict[str, list[list[float]]] = {}
    labels: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            if len(row) < 3:
                raise DatasetError(f"{path}:{lineno + 1}: expected bag_id,label,features...")
            try:
                values = [float(v) for v in row[2:]]
            except ValueError:
                if lineno == 0:
                    continue
                raise DatasetError(f"{path}:{lineno + 1}: non-numeric feature value") from None
            bag_id, lab = row[0], row[1].strip()
            if bag_id in labels and labels[bag_id] != lab:
                raise DatasetError(f"bag {bag_id!r} has conflicting labels")
            labels[bag_id] = lab
            rows.setdefault(bag_id, []).append(values)
    if class_names is None:
        uniq = sorted(set(labels.values()))
        if all(u.isdigit() for u in uniq):
            class_names = [str(i) for i in range(max(int(u) for u in uniq) + 1)]
        else:
            class_names = uniq
    class_names = list(class_names)
    if len(class_names) < 2:
        class_names = class_names + [f"class_{i}" for i in range(len(class_names), 2)]
    bags = []
    for bag_id, feats in rows.items():
        lab = labels[bag_id]
        idx = class_names.index(lab) if lab in class_names else int(lab)
        arr = np.asarray(feats, dtype=np.float64)
        bags.append(FeatureBag(bag_id, one_hot(idx, len(class_names)), arr))
    return BagDataset(tuple(bags), tuple(class_names))


# ---------------------------------------------------------------- sampling


def subsample_dataset(ds: BagDataset, per_class: int, rng: RngStream) -> BagDataset:
    """Keep ``per_class`` uniformly chosen one-hot bags of every class, in original order."""
    if per_class < 1:
        raise DatasetError(f"per_class must be >= 1, got {per_class}")
    keep: list[int] = []
    for c, idx in enumerate(ds.indices_by_class()):
        if len(idx) < per_class:
            raise DatasetError(
                f"class {ds.class_names[c]!r} has {len(idx)} bags, {per_class} requested"
            )
        perm = rng.permutation(len(idx))
        keep.extend(idx[k] for k in perm[:per_class])
    return ds.subset(sorted(keep))


def subsample_patches(bag: FeatureBag, p: int, rng: RngStream) -> FeatureBag:
    """Keep ``p`` rows chosen uniformly without replacement (original row order kept)."""
    if not 1 <= p <= bag.n_patches:
        raise ValueError(f"patch count must be in [1, {bag.n_patches}], got {p}")
    rows = np.sort(rng.permutation(bag.n_patches)[:p])
    return bag.with_features(bag.features[rows])


# ---------------------------------------------------------------- synthetic data


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian bag generator parameters.

    Signal patches of class c are centred on ``(separation/2) * (+-e_c)``, the
    axis taken modulo ``dim`` and the sign alternating with c. Every patch of a
    bag is shifted by a shared offset of scale ``bag_offset_scale``.
    """

    bags_per_class: int = 50
    patches_per_bag: int = 64
    dim: int = 16
    signal_fraction: float = 1.0
    class_separation: float = 8.0
    patch_noise: float = 1.0
    bag_offset_scale: float = 0.0
    classes: int = 2

    def __post_init__(self) -> None:
        if self.bags_per_class < 0 or self.patches_per_bag < 1 or self.dim < 1:
            raise ValueError("bags_per_class >= 0, patches_per_bag >= 1 and dim >= 1 required")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if not 0.0 <= self.signal_fraction <= 1.0:
            raise ValueError("signal_fraction must lie in [0, 1]")
        if self.class_separation < 0 or self.bag_offset_scale < 0:
            raise ValueError("class_separation and bag_offset_scale must be >= 0")
        if not self.patch_noise > 0:
            raise ValueError("patch_noise must be > 0")

    @property
    def signal_patches(self) -> int:
        return round_half_up(self.signal_fraction * self.patches_per_bag)

    def class_mean(self, c: int) -> np.ndarray:
        mu = np.zeros(self.dim)
        mu[c % self.dim] = (self.class_separation / 2.0) * (1.0 if c % 2 == 0 else -1.0)
        return mu


def generate_synthetic(spec: SyntheticSpec, rng: RngStream) -> BagDataset:
    """Draw ``classes * bags_per_class`` one-hot bags, class-major.

    Per bag the draws are: offset (D normals), noise (P x D normals), then a
    permutation choosing which rows carry the class signal.
    """
    n_total = spec.classes * spec.bags_per_class
    if n_total == 0:
        raise DatasetError("synthetic spec yields no bags")
    n_signal = spec.signal_patches
    if n_signal == 0 and spec.class_separation > 0:
        warnings.warn("signal_fraction * patches_per_bag rounds to 0: bags carry no class signal", stacklevel=2)
    p, d = spec.patches_per_bag, spec.dim
    bags = []
    for c in range(spec.classes):
        mu = spec.class_mean(c)
        for b in range(spec.bags_per_class):
            offset = spec.bag_offset_scale * rng.normal(d)
            x = spec.patch_noise * rng.normal((p, d)) + offset
            signal_rows = rng.permutation(p)[:n_signal]
            x[signal_rows] += mu
            bags.append(FeatureBag(f"syn_c{c}_b{b:04d}", one_hot(c, spec.classes), x))
    return BagDataset(tuple(bags), tuple(f"class_{c}" for c in range(spec.classes)), d)
