"""MSE training with Adam, online/materialized augmentation sampling, and the
augmented-loss decomposition identities.

The linear-encoder + inverse-distance-projector combination trains through a
fused kernel (numba by default, numpy fallback); every other model variant
takes the generic per-step path built on model_backward. Both paths consume
identical pre-generated random streams, so a run is deterministic given
(config, seed) for a fixed backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, models, rng, synthdata
from .errors import ConfigError, TrainingError
from .models import InverseDistanceProjector, LinearEncoder, Model
from .synthdata import AugmentationSpec

# Train-accuracy sweeps over materialized view sets far larger than the
# per-epoch training work are throttled so they cost at most ~20% of the
# training itself; small sets are swept every epoch, the final epoch always.
_EVAL_EVERY_THRESHOLD = 512


@dataclass
class OptimizerConfig:
    learning_rate: float = 4e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 256
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class TrainBudget:
    """Stop after max_epochs or max_steps, whichever comes first; optionally
    stop early once the unaugmented train loss falls below loss_target."""

    max_epochs: int | None = None
    max_steps: int | None = None
    loss_target: float | None = None

    def __post_init__(self):
        if self.max_epochs is None and self.max_steps is None:
            raise ConfigError("at least one of max_epochs/max_steps must be set")


@dataclass
class TrainHistory:
    """Per-epoch training trace. train_acc / eval_loss are NaN on epochs where
    the (possibly throttled) full evaluation did not run."""

    epochs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    train_loss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    train_acc: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eval_loss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    probe_acc: np.ndarray = field(default_factory=lambda: np.zeros(0))
    invariance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    steps: int = 0
    diverged: bool = False

    @property
    def num_epochs(self) -> int:
        return len(self.epochs)

    def final_acc(self) -> float:
        """Train accuracy at the last evaluated epoch (NaN if never measured)."""
        measured = self.train_acc[~np.isnan(self.train_acc)]
        return float(measured[-1]) if len(measured) else float("nan")

    def best_acc(self) -> float:
        """Best train accuracy observed within the budget (NaN if never measured)."""
        if len(self.train_acc) == 0 or np.isnan(self.train_acc).all():
            return float("nan")
        return float(np.nanmax(self.train_acc))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,train_acc_unaug,probe_acc,invariance\n")
            for i in range(self.num_epochs):
                fh.write(f"{self.epochs[i]},{self.train_loss[i]!r},"
                         f"{self.train_acc[i]!r},{self.probe_acc[i]!r},"
                         f"{self.invariance[i]!r}\n")


def mse_loss(predictions, targets) -> float:
    """Mean over samples of the squared Euclidean prediction-target distance."""
    P = np.atleast_2d(np.asarray(predictions, dtype=float))
    T = np.atleast_2d(np.asarray(targets, dtype=float))
    if P.shape[0] == 0:
        raise ValueError("mse_loss needs at least one sample")
    if P.shape != T.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {T.shape}")
    R = P - T
    return float(np.einsum("ij,ij->", R, R)) / P.shape[0]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[tuple[str, np.ndarray]]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params},
                   v={k: np.zeros_like(p) for k, p in params}, t=0)


def adam_step(params: list[tuple[str, np.ndarray]], grads: dict[str, np.ndarray],
              state: AdamState, cfg: OptimizerConfig):
    """One bias-corrected Adam step over every parameter block, in place.

    Weight decay enters as a plain L2 gradient addition. Raises TrainingError
    on non-finite gradients.
    """
    state.t += 1
    for name, p in params:
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name}")
        kernels.adam_update(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                            state.m[name].reshape(-1), state.v[name].reshape(-1),
                            state.t, cfg.learning_rate, cfg.beta1, cfg.beta2,
                            cfg.adam_epsilon, cfg.weight_decay)
    return params, state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def evaluate_model(model: Model, X: np.ndarray, y_ids: np.ndarray) -> tuple[float, float]:
    """(argmax accuracy, MSE against one-hot targets) of the model on (X, y)."""
    out = models.forward_batch(model, X)
    acc = float(np.mean(out.argmax(axis=1) == y_ids))
    Y = synthdata.one_hot(y_ids, out.shape[1])
    return acc, mse_loss(out, Y)


def _epoch_batches(ds: synthdata.LabeledDataset, aug: AugmentationSpec | None,
                   epoch: int, seed: int, batch: int):
    """Minibatch inputs and targets for one epoch, drawn from the epoch's own
    random stream (fresh uniform shuffle, fresh augmentation draws).

    Targets are int class ids except under mixup, where they are soft label
    vectors.
    """
    gen = rng.stream(seed, rng.TRAIN, epoch)
    n, d = ds.inputs.shape
    perm = gen.permutation(n)
    X = ds.inputs[perm]
    targets = ds.random_label_ids[perm]
    if aug is None:
        pass
    elif aug.kind == synthdata.SUBSPACE_NOISE:
        X = X.copy()
        X[:, aug.signal_dim:] += aug.strength * gen.standard_normal(
            (n, d - aug.signal_dim))
    elif aug.kind == synthdata.MATERIALIZED:
        B = aug.num_views
        if B > 0:
            lo = -1 if aug.include_base else 0
            choice = gen.integers(lo, B, size=n)
            base = choice < 0
            picked = np.maximum(choice, 0)
            X = np.where(base[:, None], X, aug.views[perm, picked])
            targets = np.where(base, targets, aug.view_labels[perm, picked])
    elif aug.kind == synthdata.MIXUP:
        partner = gen.integers(0, ds.n, size=n)
        alpha = gen.uniform(0.0, 1.0, size=n)
        X = alpha[:, None] * X + (1.0 - alpha)[:, None] * ds.inputs[partner]
        targets = alpha[:, None] * ds.random_labels[perm] \
            + (1.0 - alpha)[:, None] * ds.random_labels[partner]
    else:
        raise ConfigError(f"cannot train with augmentation kind {aug.kind!r}")
    steps = math.ceil(n / batch)
    return [(X[s * batch:(s + 1) * batch], targets[s * batch:(s + 1) * batch])
            for s in range(steps)]


def _fused_applicable(model: Model, aug: AugmentationSpec | None) -> bool:
    return (isinstance(model.encoder, LinearEncoder)
            and isinstance(model.projector, InverseDistanceProjector)
            and (aug is None or aug.kind in (synthdata.SUBSPACE_NOISE,
                                             synthdata.MATERIALIZED)))


def train_run(model: Model, dataset: synthdata.LabeledDataset,
              aug: AugmentationSpec | None, opt: OptimizerConfig,
              budget: TrainBudget, callbacks=(), seed: int = 0
              ) -> tuple[Model, TrainHistory]:
    """Minimize the MSE against the dataset's randomized labels.

    Generative augmentations draw one fresh view per sample per step;
    materialized specs sample uniformly among each sample's frozen views.
    After each epoch the history records the mean step loss, plus argmax
    accuracy and MSE on the unaugmented training patterns (every view for
    materialized specs; throttled for view sets beyond a few thousand points,
    with the final epoch always measured). Callbacks are (every_epochs, fn)
    pairs; fn(epoch, model) may return a dict with probe_acc / invariance
    entries that land in the history row of that epoch.

    A non-finite loss aborts the run: the partial history is returned with
    its diverged flag set. The model is updated in place and returned.
    """
    n = dataset.n
    batch = min(opt.batch_size, n)
    steps_per_epoch = math.ceil(n / batch)

    # per-epoch step counts; only the very last epoch can be cut short
    epoch_steps: list[int] = []
    acc = 0
    while budget.max_epochs is None or len(epoch_steps) < budget.max_epochs:
        if budget.max_steps is not None and acc >= budget.max_steps:
            break
        s = steps_per_epoch
        if budget.max_steps is not None:
            s = min(s, budget.max_steps - acc)
        epoch_steps.append(s)
        acc += s
    n_epochs_total = len(epoch_steps)

    eval_X, eval_y = synthdata.effective_training_set(dataset, aug)
    eval_X = np.ascontiguousarray(eval_X, dtype=float)
    eval_y = np.ascontiguousarray(eval_y, dtype=np.int64)
    ne = eval_X.shape[0]
    if ne <= _EVAL_EVERY_THRESHOLD or budget.loss_target is not None:
        eval_every = 1
    else:
        eval_every = max(1, math.ceil(2 * ne / (steps_per_epoch * batch)))

    fused = _fused_applicable(model, aug)
    if fused:
        proj = model.projector
        mW, vW = np.zeros_like(model.encoder.W), np.zeros_like(model.encoder.W)
        mV, vV = np.zeros_like(proj.patterns), np.zeros_like(proj.patterns)
        adam_t = 0
    else:
        params = models.named_params(model)
        adam_state = AdamState.for_params(params)

    rows: list[dict] = []
    steps_done = 0
    diverged = False
    stop = False
    chunk_target = max(1, math.ceil(512 / steps_per_epoch))
    if budget.loss_target is not None:
        chunk_target = 1

    epoch = 0
    while epoch < n_epochs_total and not diverged and not stop:
        chunk = min(chunk_target, n_epochs_total - epoch)
        for every, _fn in callbacks:
            chunk = min(chunk, every - epoch % every)
        # keep step counts uniform inside a chunk (short final epoch runs alone)
        k = 1
        while k < chunk and epoch_steps[epoch + k] == epoch_steps[epoch]:
            k += 1
        chunk = k

        batches = [_epoch_batches(dataset, aug, epoch + off, seed, batch)
                   [:epoch_steps[epoch + off]] for off in range(chunk)]
        do_eval = np.zeros(chunk, dtype=np.uint8)
        for off in range(chunk):
            e = epoch + off
            if (e + 1) % eval_every == 0 or e == n_epochs_total - 1:
                do_eval[off] = 1

        chunk_rows: list[dict] = []
        if fused:
            adam_t, status, chunk_rows = _run_fused_chunk(
                model, batches, epoch_steps[epoch], eval_X, eval_y, do_eval,
                opt, adam_t, mW, vW, mV, vV)
            steps_done = adam_t
            diverged = status == 1
        else:
            for off, eb in enumerate(batches):
                loss_sum = 0.0
                ok = True
                for Xb, tgt in eb:
                    Yb = synthdata.one_hot(tgt, dataset.num_classes) \
                        if tgt.ndim == 1 else tgt
                    loss, grads = models.model_backward(model, Xb, Yb)
                    if not np.isfinite(loss):
                        ok = False
                        break
                    loss_sum += loss
                    try:
                        adam_step(params, grads, adam_state, opt)
                    except TrainingError:
                        ok = False
                        break
                    steps_done += 1
                if not ok:
                    diverged = True
                    break
                row = {"train_loss": loss_sum / len(eb),
                       "train_acc": np.nan, "eval_loss": np.nan}
                if do_eval[off]:
                    row["train_acc"], row["eval_loss"] = \
                        evaluate_model(model, eval_X, eval_y)
                chunk_rows.append(row)

        for off, row in enumerate(chunk_rows):
            e = epoch + off
            row["epoch"] = e
            row["probe_acc"] = np.nan
            row["invariance"] = np.nan
            for every, fn in callbacks:
                if (e + 1) % every == 0:
                    row.update(fn(e, model) or {})
            rows.append(row)
            if budget.loss_target is not None \
                    and not np.isnan(row["eval_loss"]) \
                    and row["eval_loss"] < budget.loss_target:
                stop = True
                break
        epoch += len(chunk_rows)

    history = TrainHistory(
        epochs=np.array([r["epoch"] for r in rows], dtype=np.int64),
        train_loss=np.array([r["train_loss"] for r in rows]),
        train_acc=np.array([r["train_acc"] for r in rows]),
        eval_loss=np.array([r["eval_loss"] for r in rows]),
        probe_acc=np.array([r["probe_acc"] for r in rows]),
        invariance=np.array([r["invariance"] for r in rows]),
        steps=steps_done, diverged=diverged)
    return model, history


def _run_fused_chunk(model, batches, steps_per_epoch, eval_X, eval_y, do_eval,
                     opt, adam_t, mW, vW, mV, vV):
    enc: LinearEncoder = model.encoder
    proj: InverseDistanceProjector = model.projector
    n_steps = sum(len(eb) for eb in batches)
    mb_max = max(len(Xb) for eb in batches for Xb, _ in eb)
    d = enc.W.shape[1]
    inputs = np.zeros((n_steps, mb_max, d))
    targets = np.zeros((n_steps, mb_max), dtype=np.int64)
    blen = np.zeros(n_steps, dtype=np.int64)
    s = 0
    for eb in batches:
        for Xb, yb in eb:
            inputs[s, :len(Xb)] = Xb
            targets[s, :len(yb)] = yb
            blen[s] = len(Xb)
            s += 1
    n_epochs = len(batches)
    epoch_loss = np.zeros(n_epochs)
    epoch_acc = np.zeros(n_epochs)
    epoch_eval_loss = np.zeros(n_epochs)
    t_new, status = kernels.train_linear_idp_chunk(
        enc.W, proj.patterns, proj.pattern_labels, mW, vW, mV, vV, adam_t,
        inputs, targets, blen, steps_per_epoch, eval_X, eval_y, do_eval,
        proj.num_classes, opt.learning_rate, opt.beta1, opt.beta2,
        opt.adam_epsilon, opt.weight_decay, proj.epsilon, proj.train_patterns,
        epoch_loss, epoch_acc, epoch_eval_loss)
    done = n_epochs if status == 0 else (t_new - adam_t) // steps_per_epoch
    rows = [{"train_loss": epoch_loss[e], "train_acc": epoch_acc[e],
             "eval_loss": epoch_eval_loss[e]} for e in range(done)]
    return t_new, status, rows


# ---------------------------------------------------------------------------
# loss decomposition
# ---------------------------------------------------------------------------

@dataclass
class DecompositionReport:
    """The augmented MSE loss split into its view-dispersion and label-bias
    parts, with the numerical residual of the identity."""

    l_super: float
    inv_term: float
    bias_term: float
    residual: float
    per_class_bias: dict[int, float]


def loss_decompose(model: Model, dataset: synthdata.LabeledDataset,
                   views: np.ndarray) -> DecompositionReport:
    """Evaluate the three sums of the augmented-loss identity directly.

    views has shape (n, B, d). l_super averages ||f(view) - y||^2 over all
    n*B views; inv_term averages pairwise view-output distances within each
    sample (1/(2 n B^2) normalization); bias_term measures the distance of
    each sample's view-averaged prediction from its label. The residual
    l_super - (inv_term + bias_term) is reported, not assumed zero.
    """
    n, B, d = views.shape
    if B < 1:
        raise ValueError("need at least one view per sample")
    Y = dataset.random_labels
    C = Y.shape[1]
    F = models.forward_batch(model, views.reshape(n * B, d)).reshape(n, B, C)

    R = F - Y[:, None, :]
    l_super = float(np.einsum("ibc,ibc->", R, R)) / (n * B)

    inv = 0.0
    for i in range(n):
        diff = F[i][:, None, :] - F[i][None, :, :]
        inv += float(np.einsum("abc,abc->", diff, diff))
    inv /= 2.0 * n * B * B

    fbar = F.mean(axis=1)
    Rb = Y - fbar
    bias_vec = np.einsum("ic,ic->i", Rb, Rb)
    bias = float(bias_vec.sum()) / n

    ids = dataset.random_label_ids
    per_class = {c: float(bias_vec[ids == c].sum()) / n for c in range(C)}
    return DecompositionReport(l_super=l_super, inv_term=inv, bias_term=bias,
                               residual=l_super - (inv + bias),
                               per_class_bias=per_class)


def mean_deviation_identity(xs: np.ndarray, a: np.ndarray) -> tuple[float, float, float]:
    """Both sides of the mean-deviation identity and their residual.

    lhs = mean_i ||x_i - a||^2; rhs = pairwise spread + ||a - mean(x)||^2.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    a = np.asarray(a, dtype=float)
    B = xs.shape[0]
    if B < 1:
        raise ValueError("need at least one vector")
    R = xs - a
    lhs = float(np.einsum("ij,ij->", R, R)) / B
    diff = xs[:, None, :] - xs[None, :, :]
    pair = float(np.einsum("abc,abc->", diff, diff)) / (2.0 * B * B)
    dm = a - xs.mean(axis=0)
    rhs = pair + float(dm @ dm)
    return lhs, rhs, lhs - rhs


@dataclass
class BiasLimitReport:
    bias: float
    max_deviation: float
    num_pairs: int
    tol: float
    applicable: bool
    passed: bool


def pairwise_mean_prediction_check(fbar: np.ndarray, tol: float) -> tuple[float, int]:
    """Max deviation of ||fbar_i - fbar_j||^2 from 2 over all i != j pairs."""
    n = fbar.shape[0]
    sq = kernels.pairwise_sq_dists(np.ascontiguousarray(fbar),
                                   np.ascontiguousarray(fbar))
    off = ~np.eye(n, dtype=bool)
    return float(np.abs(sq[off] - 2.0).max()), int(off.sum())


def bias_limit_check(model: Model, dataset: synthdata.LabeledDataset,
                     views: np.ndarray, tol: float = 1e-4) -> BiasLimitReport:
    """With per-sample unique labels, a vanishing bias term forces all pairs
    of view-averaged predictions to squared distance exactly 2; checks that
    within 10*sqrt(tol) whenever bias <= tol.
    """
    if dataset.num_classes != dataset.n:
        raise ConfigError("bias_limit_check needs per-sample labels (C' = n)")
    n, B, d = views.shape
    F = models.forward_batch(model, views.reshape(n * B, d)).reshape(n, B, -1)
    fbar = F.mean(axis=1)
    Rb = dataset.random_labels - fbar
    bias = float(np.einsum("ic,ic->", Rb, Rb)) / n
    max_dev, pairs = pairwise_mean_prediction_check(fbar, tol)
    applicable = bias <= tol
    passed = (not applicable) or max_dev <= 10.0 * math.sqrt(tol)
    return BiasLimitReport(bias=bias, max_deviation=max_dev, num_pairs=pairs,
                           tol=tol, applicable=applicable, passed=passed)
