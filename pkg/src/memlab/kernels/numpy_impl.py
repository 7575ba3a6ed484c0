"""Pure numpy kernel implementations (fallback backend).

These are the reference implementations of the hot inner loops. The numba
backend in ``numba_impl`` mirrors each function with identical semantics;
equivalence is covered by tests/test_kernels.py.

Distances inside the batched projector path use the Gram-matrix expansion
``|z|^2 + |v|^2 - 2 z.v`` for speed. Near-zero distances therefore carry a
relative error of order 1e-13 * |z|^2, which only matters within the distance
floor; the numba path computes differences explicitly and is exact there.
"""

from __future__ import annotations

import numpy as np

_KNN_QUERY_CHUNK = 32


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of a (n,d) and b (m,d)."""
    out = np.empty((a.shape[0], b.shape[0]))
    for start in range(0, a.shape[0], _KNN_QUERY_CHUNK):
        chunk = a[start:start + _KNN_QUERY_CHUNK]
        diff = chunk[:, None, :] - b[None, :, :]
        out[start:start + _KNN_QUERY_CHUNK] = np.einsum("qfd,qfd->qf", diff, diff)
    return out


def knn_predict_batch(fit: np.ndarray, fit_labels: np.ndarray, queries: np.ndarray,
                      k: int, num_classes: int) -> np.ndarray:
    """Majority-vote K-NN predictions for each query row.

    Distance ties resolve to the lower fit index (stable sort), vote ties to
    the lower class index.
    """
    d2 = pairwise_sq_dists(queries, fit)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    votes = fit_labels[order]
    nq = queries.shape[0]
    counts = np.zeros((nq, num_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(nq), k), votes.ravel()), 1)
    return counts.argmax(axis=1)


def idp_forward_batch(Z: np.ndarray, V: np.ndarray, label_ids: np.ndarray,
                      num_classes: int, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-distance projector outputs for a batch of embeddings.

    Returns (P, U): P the (m, C) simplex outputs, U the (m, K) distances.
    """
    zn = np.einsum("ij,ij->i", Z, Z)
    vn = np.einsum("ij,ij->i", V, V)
    u2 = zn[:, None] + vn[None, :] - 2.0 * (Z @ V.T)
    np.maximum(u2, 0.0, out=u2)
    U = np.sqrt(u2)
    W = 1.0 / np.maximum(U, eps)
    S = W.sum(axis=1)
    Pw = W / S[:, None]
    L = np.zeros((V.shape[0], num_classes))
    L[np.arange(V.shape[0]), label_ids] = 1.0
    return Pw @ L, U


def idp_backward_batch(Z: np.ndarray, V: np.ndarray, G_out: np.ndarray,
                       U: np.ndarray, label_ids: np.ndarray,
                       eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the projector w.r.t. embeddings and patterns.

    G_out is dLoss/dP from downstream; U the distances returned by the
    forward pass. Pattern label vectors are fixed and receive no gradient.
    """
    W = 1.0 / np.maximum(U, eps)
    S = W.sum(axis=1)
    Pw = W / S[:, None]
    G_p = G_out[:, label_ids]
    dot = np.einsum("ij,ij->i", Pw, G_p)
    G_w = (G_p - dot[:, None]) / S[:, None]
    live = U > eps
    G_u = np.where(live, -(W * W) * G_w, 0.0)
    C = np.where(live, G_u / np.maximum(U, eps), 0.0)
    row = C.sum(axis=1)
    col = C.sum(axis=0)
    G_Z = row[:, None] * Z - C @ V
    G_V = col[:, None] * V - C.T @ Z
    return G_Z, G_V


def adam_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, lr: float, beta1: float, beta2: float,
                eps: float, weight_decay: float) -> None:
    """One bias-corrected Adam step, in place on flat arrays."""
    if weight_decay != 0.0:
        g = g + weight_decay * p
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mh = m / (1.0 - beta1 ** t)
    vh = v / (1.0 - beta2 ** t)
    p -= lr * mh / (np.sqrt(vh) + eps)


def train_linear_idp_chunk(W, V, label_ids, mW, vW, mV, vV, t0,
                           inputs, targets, blen, steps_per_epoch,
                           eval_X, eval_y, do_eval, num_classes,
                           lr, beta1, beta2, adam_eps, weight_decay, idp_eps,
                           train_patterns,
                           epoch_loss, epoch_acc, epoch_eval_loss):
    """Run a chunk of whole training epochs for the linear encoder + inverse-
    distance projector model.

    inputs/targets hold pre-gathered (and pre-augmented) minibatches for every
    step of the chunk; blen gives the live rows of each. After each epoch the
    mean step loss is recorded, and on epochs flagged in do_eval the model is
    evaluated on (eval_X, eval_y): argmax accuracy plus MSE against one-hot
    targets. Returns (t, status) with status 1 when a non-finite loss aborted
    the chunk.
    """
    n_steps = inputs.shape[0]
    n_epochs = n_steps // steps_per_epoch
    t = t0
    step = 0
    for e in range(n_epochs):
        loss_sum = 0.0
        for _ in range(steps_per_epoch):
            mb = int(blen[step])
            X = inputs[step, :mb]
            y = targets[step, :mb]
            Z = X @ W.T
            P, U = idp_forward_batch(Z, V, label_ids, num_classes, idp_eps)
            R = P.copy()
            R[np.arange(mb), y] -= 1.0
            loss = float(np.einsum("ij,ij->", R, R)) / mb
            if not np.isfinite(loss):
                return t, 1
            loss_sum += loss
            G_out = (2.0 / mb) * R
            G_Z, G_V = idp_backward_batch(Z, V, G_out, U, label_ids, idp_eps)
            G_W = G_Z.T @ X
            t += 1
            adam_update(W.ravel(), G_W.ravel(), mW.ravel(), vW.ravel(), t,
                        lr, beta1, beta2, adam_eps, weight_decay)
            if train_patterns:
                adam_update(V.ravel(), G_V.ravel(), mV.ravel(), vV.ravel(), t,
                            lr, beta1, beta2, adam_eps, weight_decay)
            step += 1
        epoch_loss[e] = loss_sum / steps_per_epoch
        if do_eval[e]:
            Ze = eval_X @ W.T
            Pe, _ = idp_forward_batch(Ze, V, label_ids, num_classes, idp_eps)
            epoch_acc[e] = float(np.mean(Pe.argmax(axis=1) == eval_y))
            Re = Pe
            Re[np.arange(eval_X.shape[0]), eval_y] -= 1.0
            epoch_eval_loss[e] = float(np.einsum("ij,ij->", Re, Re)) / eval_X.shape[0]
        else:
            epoch_acc[e] = np.nan
            epoch_eval_loss[e] = np.nan
    return t, 0
