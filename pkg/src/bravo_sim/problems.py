"""Cost-function oracles, dataset ingestion, and sample partitioning.

Two problem families are supported:

* least-squares: per-sample cost 0.5 * ||x - d_j||^2 with targets d_j
  (scalar p = 1 in the toy setup; vector targets are allowed),
* multiclass softmax regression: the model x of length p = M * f is
  read as M blocks of f coefficients, one per class.

Every regular agent holds a shard of exactly J samples so that a sample
index addresses one fixed sample for the lifetime of an experiment.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import DataError, InvalidInputError, rng_stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# ---------------------------------------------------------------- cost math


def least_squares_grad(targets: np.ndarray, j: int, x: np.ndarray) -> np.ndarray:
    """Gradient of the j-th sample cost 0.5*||x - d_j||^2, i.e. x - d_j."""
    if not 0 <= j < targets.shape[0]:
        raise InvalidInputError(f"sample index {j} out of range [0, {targets.shape[0]})")
    return x - targets[j]


def softmax_probs(x: np.ndarray, features: np.ndarray, n_classes: int) -> np.ndarray:
    """Class probabilities for rows of ``features`` under model ``x``.

    ``x`` has length n_classes * f and is read as one block of f
    coefficients per class.
    """
    f = features.shape[-1]
    if x.shape[0] != n_classes * f:
        raise InvalidInputError(
            f"model length {x.shape[0]} != n_classes*features = {n_classes * f}"
        )
    logits = features @ x.reshape(n_classes, f).T  # (n, M)
    logits = logits - logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits


def softmax_loss_and_grad(
    x: np.ndarray, feature: np.ndarray, label: int, n_classes: int
) -> tuple[float, np.ndarray]:
    """Cross-entropy loss and gradient for one sample.

    Gradient block m is (softmax_m - 1{label == m}) * feature; blocks sum
    to zero over m because the probabilities sum to one.
    """
    if not 0 <= label < n_classes:
        raise InvalidInputError(f"label {label} out of range [0, {n_classes})")
    probs = softmax_probs(x, feature[None, :], n_classes)[0]
    loss = -np.log(max(probs[label], 1e-300))
    coeff = probs.copy()
    coeff[label] -= 1.0
    return float(loss), np.outer(coeff, feature).ravel()


# -------------------------------------------------------------- problems


@dataclass(frozen=True)
class LeastSquaresProblem:
    """Per-agent least-squares shards; targets[w] has shape (J, p)."""

    targets: Mapping[int, np.ndarray]

    kind = "least_squares"
    n_classes = 1

    def __post_init__(self):
        shapes = {arr.shape for arr in self.targets.values()}
        if len(shapes) != 1:
            raise InvalidInputError("all shards must have the same (J, p) shape")

    @classmethod
    def from_samples(cls, samples: Mapping[int, "np.ndarray | list"]) -> "LeastSquaresProblem":
        """Build from per-agent sample lists; scalars become p = 1 targets."""
        targets = {}
        for w, vals in samples.items():
            arr = np.asarray(vals, dtype=np.float64)
            if arr.ndim == 1:
                arr = arr[:, None]
            targets[int(w)] = arr
        return cls(targets)

    @property
    def p(self) -> int:
        return next(iter(self.targets.values())).shape[1]

    @property
    def n_samples(self) -> int:
        return next(iter(self.targets.values())).shape[0]

    @property
    def agent_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.targets))

    def sample_grads(self, w: int, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        d = self.targets[w]
        if np.any(idx < 0) or np.any(idx >= d.shape[0]):
            raise InvalidInputError("sample index out of range")
        return x[None, :] - d[idx]

    def full_grad(self, w: int, x: np.ndarray) -> np.ndarray:
        return x - self.targets[w].mean(axis=0)

    def full_loss(self, w: int, x: np.ndarray) -> float:
        diff = x[None, :] - self.targets[w]
        return float(0.5 * np.mean(np.sum(diff * diff, axis=1)))


@dataclass(frozen=True)
class SoftmaxProblem:
    """Per-agent softmax-regression shards plus an optional test set."""

    features: Mapping[int, np.ndarray]  # (J, f) per agent
    labels: Mapping[int, np.ndarray]  # (J,) per agent
    n_classes: int
    test_features: np.ndarray | None = None
    test_labels: np.ndarray | None = None

    kind = "softmax"

    def __post_init__(self):
        lengths = {self.features[w].shape[0] for w in self.features}
        lengths |= {self.labels[w].shape[0] for w in self.labels}
        if len(lengths) != 1:
            raise InvalidInputError("all shards must hold the same number of samples")

    @property
    def feature_dim(self) -> int:
        return next(iter(self.features.values())).shape[1]

    @property
    def p(self) -> int:
        return self.n_classes * self.feature_dim

    @property
    def n_samples(self) -> int:
        return next(iter(self.features.values())).shape[0]

    @property
    def agent_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.features))

    def sample_grads(self, w: int, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        feats = self.features[w][idx]  # (b, f)
        labs = self.labels[w][idx]
        probs = softmax_probs(x, feats, self.n_classes)  # (b, M)
        probs[np.arange(len(labs)), labs] -= 1.0
        return np.einsum("bm,bf->bmf", probs, feats).reshape(len(labs), -1)

    def full_grad(self, w: int, x: np.ndarray) -> np.ndarray:
        return self.sample_grads(w, np.arange(self.n_samples), x).mean(axis=0)

    def full_loss(self, w: int, x: np.ndarray) -> float:
        probs = softmax_probs(x, self.features[w], self.n_classes)
        picked = probs[np.arange(self.n_samples), self.labels[w]]
        return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


# ------------------------------------------------------------ IDX format


def _read_idx(path, expected_magic: int) -> tuple[np.ndarray, tuple[int, ...]]:
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: cannot read: {exc}") from None
    if raw[:2] == b"\x1f\x8b":  # gzip payload without .gz suffix
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated file (no magic)")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise DataError(
            f"{path}: magic mismatch: got 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated file (incomplete dimensions)")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - header < count:
        raise DataError(f"{path}: truncated file ({len(raw) - header} of {count} payload bytes)")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header)
    return data, dims


def load_idx_dataset(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Load an IDX image/label pair; features scaled to [0, 1] by /255.

    Returns (features, labels) with features of shape (n, rows*cols).
    Gzip-compressed files are handled transparently.
    """
    images, idims = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels, ldims = _read_idx(labels_path, IDX_LABELS_MAGIC)
    n = idims[0]
    if ldims[0] != n:
        raise DataError(
            f"count mismatch: {images_path} has {n} images, {labels_path} has {ldims[0]} labels"
        )
    per_image = int(np.prod(idims[1:])) if len(idims) > 1 else 0
    features = images.reshape(n, per_image).astype(np.float64) / 255.0
    return features, labels.astype(np.int64)


def save_idx_dataset(images_u8: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images of shape (n, rows, cols) and labels as IDX files."""
    if images_u8.ndim != 3 or images_u8.dtype != np.uint8:
        raise InvalidInputError("images must be uint8 with shape (n, rows, cols)")
    n, rows, cols = images_u8.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------- partitioning


def subsample(features: np.ndarray, labels: np.ndarray, k: int, rng: np.random.Generator):
    """First k samples after a seeded shuffle (k = 0 keeps everything)."""
    if k <= 0 or k >= features.shape[0]:
        return features, labels
    order = rng.permutation(features.shape[0])[:k]
    return features[order], labels[order]


def partition_iid(
    features: np.ndarray,
    labels: np.ndarray,
    n_agents: int,
    n_classes: int,
    rng: np.random.Generator,
) -> SoftmaxProblem:
    """Random even split: J = floor(n/N) samples per agent, excess dropped."""
    if n_agents <= 0:
        raise InvalidInputError("need at least one agent")
    n = features.shape[0]
    per = n // n_agents
    if per == 0:
        raise DataError(f"only {n} samples for {n_agents} agents")
    order = rng.permutation(n)
    feats, labs = {}, {}
    for w in range(n_agents):
        block = order[w * per : (w + 1) * per]
        feats[w] = features[block]
        labs[w] = labels[block]
    return SoftmaxProblem(feats, labs, n_classes)


def partition_noniid(
    features: np.ndarray,
    labels: np.ndarray,
    n_agents: int,
    n_classes: int,
    rng: np.random.Generator,
) -> SoftmaxProblem:
    """Single-class shards: agents are grouped N/M per class, group g
    randomly and evenly partitions the samples of class g.

    Shards are truncated to the smallest per-agent allocation so every
    agent holds the same number of samples.
    """
    if n_agents % n_classes != 0:
        raise InvalidInputError(f"N={n_agents} must be divisible by M={n_classes}")
    group = n_agents // n_classes
    class_idx = [np.flatnonzero(labels == m) for m in range(n_classes)]
    per = min(len(ix) // group for ix in class_idx)
    if per == 0:
        raise DataError("some class has fewer samples than agents in its group")
    feats, labs = {}, {}
    for m in range(n_classes):
        order = class_idx[m][rng.permutation(len(class_idx[m]))]
        for g in range(group):
            w = m * group + g
            block = order[g * per : (g + 1) * per]
            feats[w] = features[block]
            labs[w] = labels[block]
    return SoftmaxProblem(feats, labs, n_classes)


def synth_least_squares(n_agents: int, n_samples: int, seed: int) -> LeastSquaresProblem:
    """Scalar standard-normal shards, one independent stream per agent."""
    targets = {
        w: rng_stream(seed, agent=w, purpose="synth").standard_normal((n_samples, 1))
        for w in range(n_agents)
    }
    return LeastSquaresProblem(targets)
