"""Gaussian-mixture toy data, label randomization and augmentation families.

Samples live in R^d. The first d1 coordinates carry the class signal (a
Gaussian around one of C cluster means), the remaining d-d1 coordinates are
pure noise. Augmentations re-draw noise-block coordinates only, mix sample
pairs, or swap in held-out same-cluster samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .errors import ConfigError, DataError

SUBSPACE_NOISE = "subspace_noise"
MIXUP = "mixup"
IID_RESAMPLE = "iid_resample"
MATERIALIZED = "materialized"

PRESERVE = "preserve"
RANDOMIZE = "randomize"


def one_hot(ids: np.ndarray, num_classes: int) -> np.ndarray:
    """One-hot encode integer class ids into an (n, num_classes) float array."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros((ids.shape[0], num_classes))
    out[np.arange(ids.shape[0]), ids] = 1.0
    return out


@dataclass
class ToyDataConfig:
    """Generative description of the toy mixture dataset.

    sigma is the base noise scale: the noise block has per-coordinate variance
    sigma^2 and the signal block sigma^2 * signal_variance_ratio around its
    cluster mean (ratio 1/10 by default, i.e. noise covariance ten times the
    signal covariance). Augmentation noise defaults to the same sigma.
    """

    n: int
    d: int
    d1: int
    num_clusters: int
    sigma: float = 1.0
    signal_variance_ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.d1 < self.d):
            raise ConfigError(f"need 0 < d1 < d, got d1={self.d1}, d={self.d}")
        if self.num_clusters < 1:
            raise ConfigError("num_clusters must be >= 1")
        if self.n < self.num_clusters:
            raise ConfigError("need n >= num_clusters")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.signal_variance_ratio <= 0:
            raise ConfigError("signal_variance_ratio must be positive")


@dataclass
class LabeledDataset:
    """Inputs plus clean, randomized and true-cluster labelings.

    Label arrays are one-hot rows; clean labels live in R^C, randomized labels
    in R^{C'} where C' may differ from C.
    """

    inputs: np.ndarray          # (n, d)
    clean_labels: np.ndarray    # (n, C) one-hot
    random_labels: np.ndarray   # (n, C') one-hot
    true_cluster: np.ndarray    # (n,) int
    cluster_means: np.ndarray   # (C, d1)
    seed: int = 0

    def __post_init__(self):
        n = self.inputs.shape[0]
        for name in ("clean_labels", "random_labels", "true_cluster"):
            if getattr(self, name).shape[0] != n:
                raise DataError(f"{name} length does not match inputs ({n})")
        for name in ("clean_labels", "random_labels"):
            lab = getattr(self, name)
            ok = (lab >= 0).all() and np.array_equal((lab == 1.0).sum(axis=1),
                                                     np.ones(n)) \
                and np.allclose(lab.sum(axis=1), 1.0)
            if not ok:
                raise DataError(f"{name} rows must be one-hot")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @property
    def d1(self) -> int:
        return self.cluster_means.shape[1]

    @property
    def num_clusters(self) -> int:
        return self.clean_labels.shape[1]

    @property
    def num_classes(self) -> int:
        """Number of classes of the randomized labeling (C')."""
        return self.random_labels.shape[1]

    @property
    def clean_label_ids(self) -> np.ndarray:
        return self.clean_labels.argmax(axis=1)

    @property
    def random_label_ids(self) -> np.ndarray:
        return self.random_labels.argmax(axis=1)

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        """Dataset restricted to the given sample indices (same means)."""
        return LabeledDataset(
            inputs=self.inputs[indices].copy(),
            clean_labels=self.clean_labels[indices].copy(),
            random_labels=self.random_labels[indices].copy(),
            true_cluster=self.true_cluster[indices].copy(),
            cluster_means=self.cluster_means,
            seed=self.seed,
        )


@dataclass
class AugmentationSpec:
    """One member of the transformation-family zoo.

    kind selects the family; only the fields relevant to that kind are used.
    For materialized specs, views holds B frozen draws per sample and
    view_labels their training labels (base labels under the preserve policy,
    fresh uniform draws under randomize). include_base adds the original
    sample as an extra training pattern next to its views, which is how the
    i.i.d. resampling family materializes.
    """

    kind: str
    strength: float = 0.0        # subspace noise scale (absolute std)
    signal_dim: int = 0          # d1; subspace noise leaves coords [0, d1) alone
    alpha_dist: str = "uniform"  # mixup weight distribution
    subset_size: int = 0         # iid resampling
    views_per_sample: int = 0    # iid resampling / materialized B
    views: np.ndarray | None = None        # (n, B, d)
    view_labels: np.ndarray | None = None  # (n, B) int
    label_policy: str = PRESERVE
    include_base: bool = False

    @classmethod
    def subspace_noise(cls, strength: float, signal_dim: int) -> "AugmentationSpec":
        return cls(kind=SUBSPACE_NOISE, strength=float(strength),
                   signal_dim=int(signal_dim))

    @classmethod
    def mixup(cls, alpha_dist: str = "uniform") -> "AugmentationSpec":
        return cls(kind=MIXUP, alpha_dist=alpha_dist)

    @classmethod
    def iid_resample(cls, subset_size: int, views_per_sample: int) -> "AugmentationSpec":
        return cls(kind=IID_RESAMPLE, subset_size=int(subset_size),
                   views_per_sample=int(views_per_sample))

    @property
    def num_views(self) -> int:
        return 0 if self.views is None else self.views.shape[1]


def generate_toy_data(cfg: ToyDataConfig) -> LabeledDataset:
    """Draw the toy mixture dataset described by cfg.

    Cluster means are standard Gaussian in the signal subspace; each sample's
    signal block is Gaussian around its cluster mean with variance
    sigma^2 * signal_variance_ratio per coordinate, its noise block zero-mean
    Gaussian with variance sigma^2. Deterministic given cfg.seed.
    """
    C, d, d1, n = cfg.num_clusters, cfg.d, cfg.d1, cfg.n
    means = rng.stream(cfg.seed, rng.DATA, 0).standard_normal((C, d1))
    clusters = rng.stream(cfg.seed, rng.DATA, 1).integers(0, C, size=n)
    signal_sd = cfg.sigma * np.sqrt(cfg.signal_variance_ratio)
    signal = means[clusters] + signal_sd * rng.stream(cfg.seed, rng.DATA, 2).standard_normal((n, d1))
    noise = cfg.sigma * rng.stream(cfg.seed, rng.DATA, 3).standard_normal((n, d - d1))
    inputs = np.concatenate([signal, noise], axis=1)
    clean = one_hot(clusters, C)
    return LabeledDataset(inputs=inputs, clean_labels=clean,
                          random_labels=clean.copy(), true_cluster=clusters,
                          cluster_means=means, seed=cfg.seed)


def randomize_labels(ds: LabeledDataset, num_classes: int, noise_fraction: float,
                     per_sample: bool = False, seed: int = 0) -> LabeledDataset:
    """Replace a noise_fraction portion of labels with uniform random one-hots.

    Relabeled samples are chosen uniformly without replacement and get a fresh
    uniform label over C' = num_classes classes (which may coincide with the
    clean one); the rest keep their clean label re-embedded in R^{C'}. With
    per_sample=True every sample gets its own class (C' = n), which requires
    noise_fraction = 1.
    """
    n = ds.n
    if per_sample:
        if noise_fraction != 1.0:
            raise ConfigError("per_sample labeling is all-or-nothing: "
                              "noise_fraction must be 1")
        labels = one_hot(np.arange(n), n)
        return replace(ds, random_labels=labels)
    if num_classes < 1:
        raise ConfigError("num_classes must be >= 1")
    if not 0.0 <= noise_fraction <= 1.0:
        raise ConfigError("noise_fraction must lie in [0, 1]")
    if noise_fraction < 1.0 and num_classes < ds.num_clusters:
        raise ConfigError("cannot re-embed clean labels: num_classes "
                          f"{num_classes} < {ds.num_clusters} clusters")
    gen = rng.stream(seed, rng.LABELS)
    ids = ds.clean_label_ids.copy()
    k = int(round(noise_fraction * n))
    chosen = gen.choice(n, size=k, replace=False)
    ids[chosen] = gen.integers(0, num_classes, size=k)
    return replace(ds, random_labels=one_hot(ids, num_classes))


def subspace_augment(x: np.ndarray, spec: AugmentationSpec,
                     gen: np.random.Generator) -> np.ndarray:
    """Add Gaussian noise of scale spec.strength to the noise block of x.

    The signal block (first spec.signal_dim coordinates) is returned
    bit-identical.
    """
    if spec.kind != SUBSPACE_NOISE:
        raise ConfigError(f"subspace_augment needs a {SUBSPACE_NOISE} spec")
    out = np.array(x, dtype=float, copy=True)
    out[spec.signal_dim:] += spec.strength * gen.standard_normal(out.shape[0] - spec.signal_dim)
    return out


def subspace_augment_batch(X: np.ndarray, signal_dim: int, strength: float,
                           gen: np.random.Generator) -> np.ndarray:
    """Batch form of subspace_augment over the rows of X."""
    out = X.copy()
    out[:, signal_dim:] += strength * gen.standard_normal(
        (X.shape[0], X.shape[1] - signal_dim))
    return out


def mixup_pair(x1: np.ndarray, y1: np.ndarray, x2: np.ndarray, y2: np.ndarray,
               alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of two samples and their label vectors."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
    y1, y2 = np.asarray(y1, dtype=float), np.asarray(y2, dtype=float)
    if x1.shape != x2.shape or y1.shape != y2.shape:
        raise ValueError("mixup operands must have matching shapes")
    return alpha * x1 + (1.0 - alpha) * x2, alpha * y1 + (1.0 - alpha) * y2


def materialize_augmentations(ds: LabeledDataset, spec: AugmentationSpec, B: int,
                              label_policy: str = PRESERVE,
                              seed: int = 0) -> AugmentationSpec:
    """Draw and freeze B views per sample from a generative spec.

    The preserve policy copies each sample's randomized label onto its views;
    randomize draws a fresh uniform label per view. Total view count is B*n.
    """
    if spec.kind != SUBSPACE_NOISE:
        raise ConfigError("only subspace-noise specs can be materialized")
    if B < 1:
        raise ConfigError("need B >= 1 views per sample")
    if label_policy not in (PRESERVE, RANDOMIZE):
        raise ConfigError(f"unknown label policy {label_policy!r}")
    gen = rng.stream(seed, rng.AUGMENT)
    n, d = ds.inputs.shape
    views = np.repeat(ds.inputs[:, None, :], B, axis=1)
    views[:, :, spec.signal_dim:] += spec.strength * gen.standard_normal(
        (n, B, d - spec.signal_dim))
    if label_policy == PRESERVE:
        view_labels = np.repeat(ds.random_label_ids[:, None], B, axis=1)
    else:
        view_labels = gen.integers(0, ds.num_classes, size=(n, B))
    return AugmentationSpec(kind=MATERIALIZED, strength=spec.strength,
                            signal_dim=spec.signal_dim, views_per_sample=B,
                            views=views, view_labels=view_labels,
                            label_policy=label_policy, include_base=False)


def iid_augment(ds: LabeledDataset, subset_size: int, B: int,
                seed: int = 0) -> tuple[LabeledDataset, AugmentationSpec]:
    """Keep subset_size base samples and attach B held-out same-cluster
    samples to each as frozen views sharing the base's randomized label.

    The returned spec includes the base sample among the training patterns, so
    the effective training set has subset_size * (B + 1) points. Raises
    DataError when some cluster's reserve pool cannot supply B views per base.
    """
    n = ds.n
    if subset_size < 1:
        raise ConfigError("subset_size must be >= 1")
    if subset_size * (B + 1) > n:
        raise DataError(f"need subset_size*(B+1) <= n, got "
                        f"{subset_size}*({B}+1) > {n}")
    gen = rng.stream(seed, rng.AUGMENT)
    subset = np.sort(gen.choice(n, size=subset_size, replace=False))
    in_subset = np.zeros(n, dtype=bool)
    in_subset[subset] = True
    pools: dict[int, list[int]] = {}
    for c in range(ds.num_clusters):
        members = np.flatnonzero((ds.true_cluster == c) & ~in_subset)
        pools[c] = list(gen.permutation(members))
    d = ds.d
    views = np.empty((subset_size, B, d))
    for j, i in enumerate(subset):
        pool = pools[int(ds.true_cluster[i])]
        if len(pool) < B:
            raise DataError(f"cluster {int(ds.true_cluster[i])} pool exhausted: "
                            f"{len(pool)} left, {B} needed")
        for b in range(B):
            views[j, b] = ds.inputs[pool.pop()]
    sub = ds.subset(subset)
    view_labels = np.repeat(sub.random_label_ids[:, None], B, axis=1)
    spec = AugmentationSpec(kind=MATERIALIZED, signal_dim=ds.d1,
                            views_per_sample=B, views=views,
                            view_labels=view_labels, label_policy=PRESERVE,
                            include_base=True)
    return sub, spec


def effective_training_set(ds: LabeledDataset,
                           spec: AugmentationSpec | None) -> tuple[np.ndarray, np.ndarray]:
    """Flatten the patterns a run actually fits: (inputs, label ids).

    For materialized specs this is every frozen view (plus the base samples
    when the spec includes them); otherwise it is the base samples with the
    dataset's randomized labels.
    """
    if spec is not None and spec.kind == MATERIALIZED and spec.num_views > 0:
        X = spec.views.reshape(-1, ds.d)
        y = spec.view_labels.reshape(-1).astype(np.int64)
        if spec.include_base:
            X = np.concatenate([ds.inputs, X], axis=0)
            y = np.concatenate([ds.random_label_ids, y])
        return np.ascontiguousarray(X), y
    return ds.inputs, ds.random_label_ids


def save_dataset_csv(ds: LabeledDataset, path) -> None:
    """Write the dataset as CSV: a header line (n, d, d1, C, C', seed), the
    cluster means, then one row per sample (coords, clean id, random id,
    cluster id). Floats are written in shortest round-trip form.
    """
    with open(path, "w") as fh:
        fh.write(f"{ds.n},{ds.d},{ds.d1},{ds.num_clusters},{ds.num_classes},{ds.seed}\n")
        for row in ds.cluster_means:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
        clean = ds.clean_label_ids
        rand = ds.random_label_ids
        for i in range(ds.n):
            coords = ",".join(repr(float(v)) for v in ds.inputs[i])
            fh.write(f"{coords},{clean[i]},{rand[i]},{int(ds.true_cluster[i])}\n")


def load_dataset_csv(path) -> LabeledDataset:
    """Inverse of save_dataset_csv."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        n, d, d1, C, C_prime, seed = (int(v) for v in header)
        means = np.array([[float(v) for v in fh.readline().strip().split(",")]
                          for _ in range(C)])
        inputs = np.empty((n, d))
        clean = np.empty(n, dtype=np.int64)
        rand = np.empty(n, dtype=np.int64)
        cluster = np.empty(n, dtype=np.int64)
        for i in range(n):
            parts = fh.readline().strip().split(",")
            inputs[i] = [float(v) for v in parts[:d]]
            clean[i], rand[i], cluster[i] = int(parts[d]), int(parts[d + 1]), int(parts[d + 2])
    return LabeledDataset(inputs=inputs, clean_labels=one_hot(clean, C),
                          random_labels=one_hot(rand, C_prime),
                          true_cluster=cluster, cluster_means=means, seed=seed)
