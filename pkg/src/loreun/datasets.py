"""Datasets and forget/retain/test partitions.

A dataset is one array of features plus labels, with a boolean mask telling
which rows belong to the training pool. Row numbers are the example indices,
so train and test indices never collide.
"""
import hashlib
import json
import os
import pickle
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLIT_MODES = ("random", "classwise", "difficulty-easy", "difficulty-hard")


class EmptyForgetSetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    index: int
    features: np.ndarray
    label: int


class ArrayDataset:
    """Features in [0, 1], channel-major, with integer labels in [0, num_classes)."""

    def __init__(self, features, labels, train_mask, num_classes=None, name="dataset"):
        features = np.ascontiguousarray(features, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        train_mask = np.asarray(train_mask, dtype=bool)
        if features.ndim < 2:
            raise ValueError("features must be (N, ...)")
        if not (len(features) == len(labels) == len(train_mask)):
            raise ValueError("features, labels and train_mask lengths differ")
        if len(labels) == 0:
            raise ValueError("empty dataset")
        if num_classes is None:
            num_classes = int(labels.max()) + 1
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ValueError("labels outside [0, num_classes)")
        self.features = features
        self.labels = labels
        self.train_mask = train_mask
        self.num_classes = int(num_classes)
        self.name = name
        self._digest = None

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, index):
        return LabeledExample(int(index), self.features[index], int(self.labels[index]))

    @property
    def shape(self):
        return self.features.shape[1:]

    @property
    def train_indices(self):
        return np.flatnonzero(self.train_mask)

    @property
    def test_indices(self):
        return np.flatnonzero(~self.train_mask)

    @property
    def digest(self):
        if self._digest is None:
            h = hashlib.sha256()
            h.update(self.features.tobytes())
            h.update(self.labels.tobytes())
            h.update(self.train_mask.tobytes())
            self._digest = h.hexdigest()[:16]
        return self._digest

    def view(self, indices):
        """Return (features, labels) for the given row indices."""
        indices = np.asarray(indices, dtype=np.int64)
        return self.features[indices], self.labels[indices]

    def subset(self, n_train=None, n_test=None, seed=0):
        """Deterministic class-stratified subsample of the train and test pools."""
        rng = np.random.default_rng(seed)
        keep = []
        for pool, n in ((self.train_indices, n_train), (self.test_indices, n_test)):
            if n is None or n >= len(pool):
                keep.append(pool)
                continue
            per_class = []
            labels = self.labels[pool]
            for c in range(self.num_classes):
                members = pool[labels == c]
                take = int(round(n * len(members) / len(pool)))
                per_class.append(rng.permutation(members)[:take])
            keep.append(np.sort(np.concatenate(per_class)))
        rows = np.concatenate(keep)
        return ArrayDataset(
            self.features[rows], self.labels[rows], self.train_mask[rows],
            num_classes=self.num_classes, name=f"{self.name}-subset",
        )


# ---------------------------------------------------------------- loaders

def save_dataset_dir(dataset, path):
    """Write a dataset as ``features.npy``, ``labels.npy``, ``train_mask.npy`` plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.save(path / "features.npy", dataset.features)
    np.save(path / "labels.npy", dataset.labels)
    np.save(path / "train_mask.npy", dataset.train_mask)
    manifest = {
        "name": dataset.name,
        "num_classes": dataset.num_classes,
        "shape": list(dataset.shape),
        "num_examples": len(dataset),
        "files": {"features": "features.npy", "labels": "labels.npy", "train_mask": "train_mask.npy"},
        "digest": dataset.digest,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset_dir(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    files = manifest["files"]
    ds = ArrayDataset(
        np.load(path / files["features"]),
        np.load(path / files["labels"]),
        np.load(path / files["train_mask"]),
        num_classes=manifest["num_classes"],
        name=manifest.get("name", path.name),
    )
    if tuple(ds.shape) != tuple(manifest["shape"]):
        raise ValueError(f"manifest shape {manifest['shape']} != stored {ds.shape}")
    return ds


def data_root():
    return Path(os.environ.get("UNLEARN_DATA_DIR", "data"))


def load_cifar10(root=None, n_train=5000, n_test=1000, seed=0):
    """Load CIFAR-10 from the standard python pickle batches.

    Expects ``<root>/cifar-10-batches-py``; nothing is downloaded.
    """
    root = Path(root) if root is not None else data_root()
    batch_dir = root / "cifar-10-batches-py"
    if not batch_dir.is_dir():
        raise FileNotFoundError(f"CIFAR-10 batches not found under {batch_dir}")

    def read(name):
        with open(batch_dir / name, "rb") as f:
            d = pickle.load(f, encoding="bytes")
        x = np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
        return x, np.asarray(d[b"labels"], dtype=np.int64)

    parts = [read(f"data_batch_{i}") for i in range(1, 6)]
    xtr = np.concatenate([p[0] for p in parts])
    ytr = np.concatenate([p[1] for p in parts])
    xte, yte = read("test_batch")
    features = np.concatenate([xtr, xte]).astype(np.float32) / 255.0
    labels = np.concatenate([ytr, yte])
    mask = np.r_[np.ones(len(ytr), bool), np.zeros(len(yte), bool)]
    ds = ArrayDataset(features, labels, mask, num_classes=10, name="cifar10")
    return ds.subset(n_train, n_test, seed=seed)


def _smooth_field(rng, channels, size, blobs):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    out = np.zeros((channels, size, size), np.float32)
    for _ in range(blobs):
        cy, cx = rng.uniform(0, size, 2)
        sy, sx = rng.uniform(size / 10, size / 4, 2)
        color = rng.uniform(-1, 1, channels).astype(np.float32)
        g = np.exp(-((yy - cy) ** 2 / (2 * sy**2) + (xx - cx) ** 2 / (2 * sx**2)))
        out += color[:, None, None] * g
    out -= out.min()
    return out / max(out.max(), 1e-6)


def make_synthetic_images(n_train=5000, n_test=1000, num_classes=10, size=16, channels=3,
                          modes=4, noise=0.35, blend_prob=0.5, label_noise=0.04, seed=0):
    """CIFAR-shaped synthetic classification data with a real generalisation gap.

    Each class owns a few smooth colour templates. Examples are shifted,
    rescaled templates with pixel noise; some are blended with a template
    of another class and a small fraction of training labels is flipped, so
    a small CNN memorises part of the training set.
    """
    rng = np.random.default_rng(seed)
    templates = np.stack([
        np.stack([_smooth_field(rng, channels, size, blobs=4) for _ in range(modes)])
        for _ in range(num_classes)
    ])
    n = n_train + n_test
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    mode = rng.integers(0, modes, n)
    x = templates[labels, mode].copy()
    blend = rng.random(n) < blend_prob
    other = (labels + rng.integers(1, num_classes, n)) % num_classes
    lam = rng.uniform(0.25, 0.5, n).astype(np.float32)[:, None, None, None]
    mixed = (1 - lam) * x + lam * templates[other, rng.integers(0, modes, n)]
    x = np.where(blend[:, None, None, None], mixed, x)
    shifts = rng.integers(-2, 3, (n, 2))
    for i in range(n):
        x[i] = np.roll(x[i], tuple(shifts[i]), axis=(1, 2))
    x *= rng.uniform(0.7, 1.3, n).astype(np.float32)[:, None, None, None]
    x += noise * rng.standard_normal(x.shape).astype(np.float32)
    x = np.clip(x, 0.0, 1.0)
    train_mask = np.r_[np.ones(n_train, bool), np.zeros(n_test, bool)]
    flip = (rng.random(n) < label_noise) & train_mask
    labels = np.where(flip, (labels + rng.integers(1, num_classes, n)) % num_classes, labels)
    return ArrayDataset(x, labels, train_mask, num_classes=num_classes, name="synthetic-images")


def load_digits_dataset(test_fraction=0.2, seed=0):
    """The 8x8 handwritten digits bundled with scikit-learn, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = (d.images / 16.0).astype(np.float32)[:, None]
    y = d.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    test = np.zeros(len(y), bool)
    test[rng.permutation(len(y))[: int(round(test_fraction * len(y)))]] = True
    return ArrayDataset(x, y, ~test, num_classes=10, name="digits")


def make_separable_toy(n=200, seed=0, margin=0.5):
    """Two Gaussian blobs in 2-D with a guaranteed linear margin."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.standard_normal((n, 2)).astype(np.float32)
    x[:, 0] = np.abs(x[:, 0]) + margin
    x[y == 0, 0] *= -1
    return ArrayDataset(x, y, np.ones(n, bool), num_classes=2, name="separable-toy")


def load_dataset(spec):
    """Build a dataset from a plan-style dict ``{"kind": ..., **params}``."""
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "synthetic":
        return make_synthetic_images(**spec)
    if kind == "digits":
        return load_digits_dataset(**spec)
    if kind == "cifar10":
        return load_cifar10(**spec)
    if kind == "dir":
        return load_dataset_dir(spec["path"])
    if kind == "toy":
        return make_separable_toy(**spec)
    raise ValueError(f"unknown dataset kind {kind!r}")


# ----------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    forget_indices: tuple
    retain_indices: tuple
    test_indices: tuple
    seed: int
    mode: str
    dataset_digest: str = ""
    fraction: float = None
    class_id: int = None

    def __post_init__(self):
        for name in ("forget_indices", "retain_indices", "test_indices"):
            object.__setattr__(self, name, tuple(sorted(int(i) for i in getattr(self, name))))
        if self.mode not in SPLIT_MODES:
            raise ValueError(f"unknown split mode {self.mode!r}")
        if set(self.forget_indices) & set(self.retain_indices):
            raise ValueError("forget and retain overlap")

    @property
    def forget(self):
        return np.asarray(self.forget_indices, dtype=np.int64)

    @property
    def retain(self):
        return np.asarray(self.retain_indices, dtype=np.int64)

    @property
    def test(self):
        return np.asarray(self.test_indices, dtype=np.int64)

    def to_dict(self):
        d = {
            "mode": self.mode,
            "seed": self.seed,
            "forget": list(self.forget_indices),
            "retain": list(self.retain_indices),
            "test": list(self.test_indices),
            "dataset_digest": self.dataset_digest,
        }
        if self.fraction is not None:
            d["fraction"] = self.fraction
        if self.class_id is not None:
            d["class_id"] = self.class_id
        return d

    @property
    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d):
        return cls(
            forget_indices=d["forget"], retain_indices=d["retain"], test_indices=d["test"],
            seed=d.get("seed", 0), mode=d["mode"], dataset_digest=d.get("dataset_digest", ""),
            fraction=d.get("fraction"), class_id=d.get("class_id"),
        )

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _split(dataset, forget, mode, seed=0, **extra):
    train = dataset.train_indices
    forget = np.sort(np.asarray(forget, dtype=np.int64))
    retain = np.setdiff1d(train, forget)
    return SplitSpec(forget, retain, dataset.test_indices, seed=seed, mode=mode,
                     dataset_digest=dataset.digest, **extra)


def make_random_forget_split(dataset, fraction, seed):
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    train = dataset.train_indices
    if len(train) == 0:
        raise ValueError("dataset has no training examples")
    k = int(round(fraction * len(train)))
    rng = np.random.default_rng(seed)
    forget = rng.choice(train, size=k, replace=False)
    return _split(dataset, forget, "random", seed=seed, fraction=fraction)


def make_classwise_forget_split(dataset, class_id):
    if not 0 <= class_id < dataset.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {dataset.num_classes})")
    train = dataset.train_indices
    forget = train[dataset.labels[train] == class_id]
    if len(forget) == 0:
        raise EmptyForgetSetError(f"class {class_id} has no training examples")
    return _split(dataset, forget, "classwise", class_id=class_id)


def make_difficulty_split(loss_table, fraction, mode, dataset=None):
    """Forget the ``fraction`` of training examples with the largest (easy) or smallest (hard) loss.

    ``loss_table`` maps training index to the original model's loss. Ties
    go to the smaller index. With no ``dataset`` the retain set is the rest
    of the table and the test set is empty.
    """
    if mode not in ("easy", "hard"):
        raise ValueError("mode must be 'easy' or 'hard'")
    idx = np.asarray(sorted(loss_table), dtype=np.int64)
    if dataset is not None:
        missing = set(dataset.train_indices.tolist()) - set(idx.tolist())
        if missing:
            raise ValueError(f"loss_table misses {len(missing)} training indices")
    k = int(round(fraction * len(idx)))
    if fraction * len(idx) < 1 or k < 1:
        raise ValueError("fraction selects no examples")
    if k > len(idx):
        raise ValueError("fraction > 1")
    loss = np.array([loss_table[int(i)] for i in idx], dtype=np.float64)
    key = -loss if mode == "easy" else loss
    order = np.lexsort((idx, key))
    forget = idx[order[:k]]
    split_mode = f"difficulty-{mode}"
    if dataset is not None:
        return _split(dataset, forget, split_mode, fraction=fraction)
    return SplitSpec(forget, np.setdiff1d(idx, forget), (), seed=0, mode=split_mode,
                     fraction=fraction)


def clamp_batch_size(batch_size, n, what="view"):
    if batch_size > n:
        warnings.warn(f"batch_size {batch_size} > |{what}|={n}; clamping", stacklevel=3)
        return n
    return batch_size
