"""K-NN probing of frozen embeddings, the normalized-invariance estimator and
the benign/malign memorization verdict.

Probing always embeds unaugmented inputs. Clean probing fits the clean train
labels and scores against clean test labels; random probing fits the
randomized train labels and scores on the training points themselves (a
train-accuracy style measurement of how much a layer has absorbed the noise).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels, models, rng, synthdata
from .errors import EstimationError
from .models import Model
from .synthdata import AugmentationSpec, LabeledDataset

CLEAN = "clean"
RANDOM = "random"

NOT_MEMORIZED = "not_memorized"
BENIGN = "benign"
MALIGN = "malign"

_SMALL_FIT = 100
_DENOM_FLOOR = 1e-12


@dataclass
class ProbeResult:
    accuracy: float
    correct: int
    n_fit: int
    n_eval: int
    k: int
    layer: str
    label_source: str


@dataclass
class InvarianceEstimate:
    mean_I: float
    per_sample: np.ndarray
    num_aug_pairs: int
    num_cross_pairs: int
    num_excluded: int


@dataclass
class MemorizationVerdict:
    verdict: str
    train_acc: float
    probe_init: float
    probe_final: float
    margin: float


def effective_k(k: int, n_fit: int) -> int:
    """Clamp the neighbor count on tiny fit sets (below 100 points) to a fifth
    of the set, warning once per call site; never below 1."""
    if n_fit < _SMALL_FIT:
        clamped = max(1, min(k, n_fit // 5))
        if clamped != k:
            warnings.warn(f"fit set of {n_fit} points: clamping k from {k} "
                          f"to {clamped}", stacklevel=3)
        return clamped
    if k > n_fit:
        raise ValueError(f"k={k} exceeds fit set size {n_fit}")
    return k


def knn_predict(fit_points: np.ndarray, fit_labels: np.ndarray,
                query: np.ndarray, k: int) -> int:
    """Majority vote among the k nearest fit points (Euclidean distance).

    Distance ties break toward the lower fit index, vote ties toward the
    lower class index.
    """
    fit_points = np.ascontiguousarray(np.atleast_2d(fit_points), dtype=float)
    fit_labels = np.asarray(fit_labels, dtype=np.int64)
    if fit_points.shape[0] == 0:
        raise ValueError("empty fit set")
    if not 1 <= k <= fit_points.shape[0]:
        raise ValueError(f"k={k} out of range for {fit_points.shape[0]} fit points")
    q = np.ascontiguousarray(np.atleast_2d(query), dtype=float)
    num_classes = int(fit_labels.max()) + 1
    return int(kernels.knn_predict_batch(fit_points, fit_labels, q, k,
                                         num_classes)[0])


def _predict_many(fit: np.ndarray, labels: np.ndarray, queries: np.ndarray,
                  k: int, num_classes: int) -> np.ndarray:
    return kernels.knn_predict_batch(
        np.ascontiguousarray(fit, dtype=float),
        np.asarray(labels, dtype=np.int64),
        np.ascontiguousarray(queries, dtype=float), k, num_classes)


def knn_probe(model: Model, fit_set: LabeledDataset, eval_set: LabeledDataset,
              k: int = 20, label_source: str = CLEAN,
              layer: str = "embedding") -> ProbeResult:
    """Probe one layer of the model with a K-NN classifier.

    Clean probing fits (layer(fit), clean labels) and scores on the eval set's
    clean labels. Random probing fits the randomized labels and scores on the
    fit set itself.
    """
    fit_emb = models.embed_batch(model, fit_set.inputs, layer)
    k_eff = effective_k(k, fit_set.n)
    if label_source == CLEAN:
        labels = fit_set.clean_label_ids
        queries = models.embed_batch(model, eval_set.inputs, layer)
        truth = eval_set.clean_label_ids
        num_classes = fit_set.num_clusters
    elif label_source == RANDOM:
        labels = fit_set.random_label_ids
        queries = fit_emb
        truth = labels
        num_classes = fit_set.num_classes
    else:
        raise ValueError(f"unknown label source {label_source!r}")
    preds = _predict_many(fit_emb, labels, queries, k_eff, num_classes)
    correct = int((preds == truth).sum())
    return ProbeResult(accuracy=correct / len(truth), correct=correct,
                       n_fit=fit_set.n, n_eval=len(truth), k=k_eff,
                       layer=layer, label_source=label_source)


def probe_layers(model: Model, fit_set: LabeledDataset, eval_set: LabeledDataset,
                 k: int = 20) -> list[tuple[ProbeResult, ProbeResult]]:
    """Clean and random probes at every layer boundary, input to output."""
    out = []
    for name in models.layer_names(model):
        out.append((knn_probe(model, fit_set, eval_set, k, CLEAN, name),
                    knn_probe(model, fit_set, eval_set, k, RANDOM, name)))
    return out


def _family_views(spec: AugmentationSpec, X: np.ndarray, count: int,
                  gen: np.random.Generator) -> np.ndarray:
    """Draw `count` transformed copies of each row of X: (n, count, d)."""
    n, d = X.shape
    if spec.kind == synthdata.SUBSPACE_NOISE:
        views = np.repeat(X[:, None, :], count, axis=1)
        views[:, :, spec.signal_dim:] += spec.strength * gen.standard_normal(
            (n, count, d - spec.signal_dim))
        return views
    if spec.kind == synthdata.MATERIALIZED:
        pool = spec.views
        if spec.include_base:
            pool = np.concatenate([X[:, None, :], pool], axis=1)
        if pool.shape[0] != n:
            raise ValueError("materialized views do not align with eval points")
        picks = gen.integers(0, pool.shape[1], size=(n, count))
        return pool[np.arange(n)[:, None], picks]
    raise ValueError(f"cannot sample augmentations of kind {spec.kind!r}")


def normalized_invariance(model: Model, eval_points: np.ndarray,
                          aug_spec: AugmentationSpec, num_aug_pairs: int = 32,
                          num_cross_pairs: int = 128,
                          seed: int = 0) -> InvarianceEstimate:
    """Monte Carlo estimate of the normalized invariance per evaluation point.

    For each point x the numerator averages ||f(T1 x) - f(T2 x)|| over
    independently drawn transformation pairs, the denominator averages
    ||f(x) - f(x')|| over points x' != x drawn uniformly from eval_points.
    Unsquared norms throughout; points whose denominator collapses below
    1e-12 are excluded and counted.
    """
    if num_aug_pairs < 1 or num_cross_pairs < 1:
        raise ValueError("pair counts must be >= 1")
    X = np.atleast_2d(np.asarray(eval_points, dtype=float))
    n = X.shape[0]
    gen = rng.stream(seed, rng.INVARIANCE)

    views = _family_views(aug_spec, X, 2 * num_aug_pairs, gen)
    F = models.forward_batch(model, views.reshape(n * 2 * num_aug_pairs, -1))
    F = F.reshape(n, 2 * num_aug_pairs, -1)
    diff = F[:, :num_aug_pairs, :] - F[:, num_aug_pairs:, :]
    numer = np.sqrt(np.einsum("npc,npc->np", diff, diff)).mean(axis=1)

    if n < 2:
        raise EstimationError("need at least two eval points for the "
                              "cross-point denominator")
    F0 = models.forward_batch(model, X)
    idx = gen.integers(0, n - 1, size=(n, num_cross_pairs))
    idx[idx >= np.arange(n)[:, None]] += 1
    cd = F0[:, None, :] - F0[idx]
    denom = np.sqrt(np.einsum("npc,npc->np", cd, cd)).mean(axis=1)

    live = denom > _DENOM_FLOOR
    if not live.any():
        raise EstimationError("all cross-point denominators are degenerate")
    per_sample = numer[live] / denom[live]
    return InvarianceEstimate(mean_I=float(per_sample.mean()),
                              per_sample=per_sample,
                              num_aug_pairs=num_aug_pairs,
                              num_cross_pairs=num_cross_pairs,
                              num_excluded=int(n - live.sum()))


def classify_memorization(train_acc: float, probe_init: float,
                          probe_final: float, margin: float = 0.02
                          ) -> MemorizationVerdict:
    """Benign/malign verdict: memorization requires perfect train accuracy;
    benign additionally requires the final probe to beat the initialization
    probe by more than the margin."""
    if train_acc >= 1.0:
        verdict = BENIGN if probe_final > probe_init + margin else MALIGN
    else:
        verdict = NOT_MEMORIZED
    return MemorizationVerdict(verdict=verdict, train_acc=float(train_acc),
                               probe_init=float(probe_init),
                               probe_final=float(probe_final), margin=margin)
