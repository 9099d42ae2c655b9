"""Synthetic corpora: Gaussian class blobs (NLU) and Markov token streams (NLG), plus corruption."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from balora.errors import ConfigInvalid


@dataclass
class Dataset:
    """Inputs ``x`` with targets ``y``; ``clean_y`` keeps the uncorrupted targets."""

    x: np.ndarray
    y: np.ndarray
    clean_y: np.ndarray | None = None

    def __post_init__(self) -> None:
        if len(self.x) != len(self.y):
            raise ConfigInvalid(f"{len(self.x)} inputs but {len(self.y)} targets")
        if self.clean_y is None:
            self.clean_y = self.y.copy()

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.clean_y[idx])


@dataclass(frozen=True)
class CorruptionSpec:
    label_noise_rate: float = 0.0
    imbalance_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise ConfigInvalid(f"label_noise_rate must lie in [0, 1), got {self.label_noise_rate}")
        if self.imbalance_ratio < 1.0:
            raise ConfigInvalid(f"imbalance_ratio must be >= 1, got {self.imbalance_ratio}")

    @property
    def label(self) -> str:
        return f"noise={self.label_noise_rate:g},imbalance={self.imbalance_ratio:g}"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def imbalance_counts(n_per_class: int, n_classes: int, ratio: float) -> list[int]:
    """Geometric long tail: class 0 keeps ``n_per_class``, the last keeps ``n_per_class / ratio``."""
    if n_classes == 1:
        return [n_per_class]
    return [
        max(1, _round_half_up(n_per_class * ratio ** (-c / (n_classes - 1)))) for c in range(n_classes)
    ]


def flip_labels(y: np.ndarray, n_classes: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Flip exactly ``round(rate * n)`` entries, each to a uniformly chosen different class."""
    flat = y.reshape(-1).copy()
    n_flip = _round_half_up(rate * flat.size)
    if n_flip == 0:
        return flat.reshape(y.shape)
    idx = rng.choice(flat.size, size=n_flip, replace=False)
    shift = rng.integers(1, n_classes, size=n_flip)
    flat[idx] = (flat[idx] + shift) % n_classes
    return flat.reshape(y.shape)


def make_corrupted_dataset(base: Dataset, corruption: CorruptionSpec, n_classes: int, *, tokens: bool = False) -> Dataset:
    """Apply class imbalance (subsampling) then label noise; the clean targets ride along.

    For token datasets (``tokens=True``) every target position is a label and
    imbalance is not defined.
    """
    rng = np.random.default_rng(corruption.seed)
    data = Dataset(base.x.copy(), base.y.copy(), base.clean_y.copy())
    if corruption.imbalance_ratio != 1.0:
        if tokens:
            raise ConfigInvalid("class imbalance is only defined for classification datasets")
        counts = np.bincount(data.y, minlength=n_classes)
        keep_n = imbalance_counts(int(counts.min()), n_classes, corruption.imbalance_ratio)
        keep = []
        for c in range(n_classes):
            members = np.flatnonzero(data.y == c)
            keep.append(np.sort(rng.permutation(members)[: keep_n[c]]))
        data = data.subset(np.sort(np.concatenate(keep)))
    if corruption.label_noise_rate > 0.0:
        data = replace(data, y=flip_labels(data.y, n_classes, corruption.label_noise_rate, rng))
    return data


# --- NLU: Gaussian blobs -------------------------------------------------------


@dataclass(frozen=True)
class BlobTask:
    """Class-conditional Gaussians; the fine-tuning target drifts every class mean.

    ``source`` draws use ``means``; ``target`` draws add ``drift``; the OOD set
    additionally shifts all features by ``ood_offset`` and scales the noise by ``ood_scale``.
    """

    means: np.ndarray
    drift: np.ndarray
    noise: float
    ood_offset: np.ndarray
    ood_scale: float

    @classmethod
    def make(
        cls,
        n_features: int,
        n_classes: int,
        seed: int,
        *,
        separation: float = 1.0,
        drift: float = 0.6,
        noise: float = 1.0,
        ood_shift: float = 0.5,
        ood_scale: float = 1.5,
    ) -> "BlobTask":
        rng = np.random.default_rng(seed)
        means = rng.normal(0.0, separation, size=(n_classes, n_features))
        d = rng.normal(0.0, drift, size=(n_classes, n_features))
        offset = rng.normal(0.0, 1.0, size=n_features)
        offset *= ood_shift * math.sqrt(n_features) / np.linalg.norm(offset)
        return cls(means, d, noise, offset, ood_scale)

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    def sample(self, n_per_class: int, rng: np.random.Generator, *, domain: str = "source") -> Dataset:
        if domain not in ("source", "target", "ood"):
            raise ConfigInvalid(f"unknown domain {domain!r}")
        means = self.means if domain == "source" else self.means + self.drift
        scale = self.noise * (self.ood_scale if domain == "ood" else 1.0)
        k, d = means.shape
        y = np.repeat(np.arange(k), n_per_class)
        x = means[y] + rng.normal(0.0, scale, size=(y.size, d))
        if domain == "ood":
            x = x + self.ood_offset
        return Dataset(x, y)


# --- NLG: Markov token streams -------------------------------------------------


@dataclass(frozen=True)
class MarkovTask:
    """First-order Markov chain over ``vocab`` tokens with sparse, peaked transitions.

    The target domain mixes in a second transition matrix; the OOD domain
    mixes in more of it.
    """

    source: np.ndarray
    target: np.ndarray
    ood: np.ndarray

    @classmethod
    def make(cls, vocab: int, seed: int, *, fanout: int = 3, target_mix: float = 0.3, ood_mix: float = 0.6) -> "MarkovTask":
        rng = np.random.default_rng(seed)

        def chain() -> np.ndarray:
            t = np.zeros((vocab, vocab))
            for i in range(vocab):
                nxt = rng.choice(vocab, size=fanout, replace=False)
                t[i, nxt] = rng.dirichlet(np.ones(fanout))
            return t

        base, other = chain(), chain()
        mix = lambda w: (1.0 - w) * base + w * other  # noqa: E731
        return cls(base, mix(target_mix), mix(ood_mix))

    @property
    def vocab(self) -> int:
        return self.source.shape[0]

    def sample(self, n_seqs: int, context_len: int, rng: np.random.Generator, *, domain: str = "source") -> Dataset:
        trans = {"source": self.source, "target": self.target, "ood": self.ood}.get(domain)
        if trans is None:
            raise ConfigInvalid(f"unknown domain {domain!r}")
        cdf = np.cumsum(trans, axis=1)
        seq = np.empty((n_seqs, context_len + 1), dtype=np.int64)
        seq[:, 0] = rng.integers(0, self.vocab, size=n_seqs)
        for t in range(1, context_len + 1):
            u = rng.random(n_seqs)
            nxt = (u[:, None] > cdf[seq[:, t - 1]]).sum(axis=1)
            seq[:, t] = np.minimum(nxt, self.vocab - 1)
        return Dataset(seq[:, :-1], seq[:, 1:])
