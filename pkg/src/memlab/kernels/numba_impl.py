"""Numba-compiled kernel implementations (default backend).

Each function mirrors its twin in ``numpy_impl``; distances are accumulated
with explicit difference loops, so near-zero pattern distances are computed
without the cancellation the Gram expansion suffers from. All kernels are
compiled nogil so independent runs can share threads.

fastmath is restricted to reassociation and FMA contraction: that lets LLVM
vectorize the reduction loops (4-5x on the training kernel) while keeping
NaN/Inf propagation exact, which the divergence checks rely on. Results stay
bit-deterministic run to run; they differ from the numpy twin in the last
couple of ulps.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True, fastmath={"reassoc", "contract", "arcp"})


@njit(**_JIT)
def pairwise_sq_dists(a, b):
    na, d = a.shape
    nb = b.shape[0]
    out = np.empty((na, nb))
    for i in range(na):
        for j in range(nb):
            acc = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                acc += diff * diff
            out[i, j] = acc
    return out


@njit(**_JIT)
def knn_predict_batch(fit, fit_labels, queries, k, num_classes):
    nf, d = fit.shape
    nq = queries.shape[0]
    preds = np.empty(nq, dtype=np.int64)
    dist = np.empty(nf)
    used = np.empty(nf, dtype=np.bool_)
    counts = np.empty(num_classes, dtype=np.int64)
    for q in range(nq):
        for i in range(nf):
            acc = 0.0
            for kk in range(d):
                diff = queries[q, kk] - fit[i, kk]
                acc += diff * diff
            dist[i] = acc
            used[i] = False
        for c in range(num_classes):
            counts[c] = 0
        for _ in range(k):
            best = np.inf
            best_i = -1
            for i in range(nf):
                if not used[i] and dist[i] < best:
                    best = dist[i]
                    best_i = i
            used[best_i] = True
            counts[fit_labels[best_i]] += 1
        best_c = 0
        best_n = counts[0]
        for c in range(1, num_classes):
            if counts[c] > best_n:
                best_n = counts[c]
                best_c = c
        preds[q] = best_c
    return preds


@njit(**_JIT)
def idp_forward_batch(Z, V, label_ids, num_classes, eps):
    m, d = Z.shape
    K = V.shape[0]
    P = np.zeros((m, num_classes))
    U = np.empty((m, K))
    for s in range(m):
        ssum = 0.0
        for i in range(K):
            acc = 0.0
            for kk in range(d):
                diff = Z[s, kk] - V[i, kk]
                acc += diff * diff
            u = np.sqrt(acc)
            U[s, i] = u
            ssum += 1.0 / max(u, eps)
        for i in range(K):
            P[s, label_ids[i]] += (1.0 / max(U[s, i], eps)) / ssum
    return P, U


@njit(**_JIT)
def idp_backward_batch(Z, V, G_out, U, label_ids, eps):
    m, d = Z.shape
    K = V.shape[0]
    G_Z = np.zeros((m, d))
    G_V = np.zeros((K, d))
    w = np.empty(K)
    c = np.empty(K)
    for s in range(m):
        ssum = 0.0
        for i in range(K):
            w[i] = 1.0 / max(U[s, i], eps)
            ssum += w[i]
        dot = 0.0
        for i in range(K):
            dot += (w[i] / ssum) * G_out[s, label_ids[i]]
        for i in range(K):
            g_w = (G_out[s, label_ids[i]] - dot) / ssum
            if U[s, i] > eps:
                g_u = -(w[i] * w[i]) * g_w
                c[i] = g_u / U[s, i]
            else:
                c[i] = 0.0
        csum = 0.0
        for i in range(K):
            ci = c[i]
            csum += ci
            for kk in range(d):
                G_V[i, kk] += ci * (V[i, kk] - Z[s, kk])
                G_Z[s, kk] -= ci * V[i, kk]
        for kk in range(d):
            G_Z[s, kk] += csum * Z[s, kk]
    return G_Z, G_V


@njit(**_JIT)
def adam_update(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i in range(p.shape[0]):
        gi = g[i] + weight_decay * p[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
        mh = m[i] / bc1
        vh = v[i] / bc2
        p[i] -= lr * mh / (np.sqrt(vh) + eps)


@njit(**_JIT)
def _embed_tile(W, X, lo, hi, Z):
    """Z[0:hi-lo] = X[lo:hi] @ W.T"""
    d_emb, d_in = W.shape
    for s in range(hi - lo):
        for a in range(d_emb):
            acc = 0.0
            for b in range(d_in):
                acc += W[a, b] * X[lo + s, b]
            Z[s, a] = acc


@njit(**_JIT)
def _eval_linear_idp(W, V, label_ids, eval_X, eval_y, num_classes, idp_eps):
    ne = eval_X.shape[0]
    d_emb = W.shape[0]
    K = V.shape[0]
    tile = 256
    Z = np.empty((tile, d_emb))
    out = np.empty((tile, num_classes))
    ssum = np.empty(tile)
    correct = 0
    loss = 0.0
    dist2 = np.empty(tile)
    ZT = np.empty((d_emb, tile))
    for lo in range(0, ne, tile):
        hi = min(lo + tile, ne)
        mb = hi - lo
        _embed_tile(W, eval_X, lo, hi, Z)
        for s in range(mb):
            ssum[s] = 0.0
            for cc in range(num_classes):
                out[s, cc] = 0.0
            for kk in range(d_emb):
                ZT[kk, s] = Z[s, kk]
        for i in range(K):
            lab = label_ids[i]
            for s in range(mb):
                dist2[s] = 0.0
            for kk in range(d_emb):
                v = V[i, kk]
                for s in range(mb):
                    diff = ZT[kk, s] - v
                    dist2[s] += diff * diff
            for s in range(mb):
                w = 1.0 / max(np.sqrt(dist2[s]), idp_eps)
                ssum[s] += w
                out[s, lab] += w
        for s in range(mb):
            best = 0
            for cc in range(1, num_classes):
                if out[s, cc] > out[s, best]:
                    best = cc
            if best == eval_y[lo + s]:
                correct += 1
            for cc in range(num_classes):
                r = out[s, cc] / ssum[s] - (1.0 if cc == eval_y[lo + s] else 0.0)
                loss += r * r
    return correct / ne, loss / ne


@njit(**_JIT)
def train_linear_idp_chunk(W, V, label_ids, mW, vW, mV, vV, t0,
                           inputs, targets, blen, steps_per_epoch,
                           eval_X, eval_y, do_eval, num_classes,
                           lr, beta1, beta2, adam_eps, weight_decay, idp_eps,
                           train_patterns,
                           epoch_loss, epoch_acc, epoch_eval_loss):
    n_steps = inputs.shape[0]
    n_epochs = n_steps // steps_per_epoch
    d_in = inputs.shape[2]
    d_emb = W.shape[0]
    K = V.shape[0]
    mb_max = inputs.shape[1]

    # all loops over patterns run pattern-major so that the batch-sized tiles
    # (Z, out, ...) stay cache resident and V / G_V rows stream exactly once
    Z = np.empty((mb_max, d_emb))
    ZT = np.empty((d_emb, mb_max))
    gZT = np.empty((d_emb, mb_max))
    U = np.empty((K, mb_max))
    Wm = np.empty((K, mb_max))
    out = np.empty((mb_max, num_classes))
    gout = np.empty((mb_max, num_classes))
    ssum = np.empty(mb_max)
    invS = np.empty(mb_max)
    dot = np.empty(mb_max)
    csum = np.empty(mb_max)
    cbuf = np.empty(mb_max)
    G_W = np.empty((d_emb, d_in))
    G_V = np.empty((K, d_emb))

    t = t0
    step = 0
    for e in range(n_epochs):
        loss_sum = 0.0
        for _ in range(steps_per_epoch):
            mb = int(blen[step])
            X = inputs[step]
            _embed_tile(W, X, 0, mb, Z)

            # distances, inverse-distance weights, per-class weight sums;
            # samples run innermost over the transposed tile so the squared
            # distances accumulate without a reduction dependency chain
            for s in range(mb):
                ssum[s] = 0.0
                for cc in range(num_classes):
                    out[s, cc] = 0.0
                for kk in range(d_emb):
                    ZT[kk, s] = Z[s, kk]
            for i in range(K):
                lab = label_ids[i]
                for s in range(mb):
                    U[i, s] = 0.0
                for kk in range(d_emb):
                    v = V[i, kk]
                    for s in range(mb):
                        diff = ZT[kk, s] - v
                        U[i, s] += diff * diff
                for s in range(mb):
                    u = np.sqrt(U[i, s])
                    U[i, s] = u
                    Wm[i, s] = 1.0 / max(u, idp_eps)
                for s in range(mb):
                    w = Wm[i, s]
                    ssum[s] += w
                    out[s, lab] += w

            # loss and output gradient; invS caches 1/ssum for the sweeps below
            step_loss = 0.0
            for s in range(mb):
                invS[s] = 1.0 / ssum[s]
                y = targets[step, s]
                for cc in range(num_classes):
                    r = out[s, cc] * invS[s] - (1.0 if cc == y else 0.0)
                    step_loss += r * r
                    gout[s, cc] = (2.0 / mb) * r
            step_loss /= mb
            if not np.isfinite(step_loss):
                return t, 1
            loss_sum += step_loss

            # dot_s = sum_i p_si gp_si
            for s in range(mb):
                dot[s] = 0.0
            for i in range(K):
                lab = label_ids[i]
                for s in range(mb):
                    dot[s] += (Wm[i, s] * invS[s]) * gout[s, lab]

            # pattern and embedding gradients, pattern-major with samples
            # innermost; 1/u equals the weight whenever u is above the floor,
            # so the coefficient needs no division
            for s in range(mb):
                csum[s] = 0.0
            for kk in range(d_emb):
                for s in range(mb):
                    gZT[kk, s] = 0.0
            for i in range(K):
                lab = label_ids[i]
                cti = 0.0
                for s in range(mb):
                    w = Wm[i, s]
                    g_w = (gout[s, lab] - dot[s]) * invS[s]
                    ci = -(w * w * w) * g_w if U[i, s] > idp_eps else 0.0
                    cbuf[s] = ci
                    csum[s] += ci
                    cti += ci
                for kk in range(d_emb):
                    v = V[i, kk]
                    acc = 0.0
                    for s in range(mb):
                        ci = cbuf[s]
                        acc += ci * ZT[kk, s]
                        gZT[kk, s] -= ci * v
                    G_V[i, kk] = v * cti - acc
            for kk in range(d_emb):
                for s in range(mb):
                    gZT[kk, s] += csum[s] * ZT[kk, s]

            # encoder gradient G_W = gZ^T X
            for a in range(d_emb):
                for b in range(d_in):
                    G_W[a, b] = 0.0
                for s in range(mb):
                    ga = gZT[a, s]
                    for b in range(d_in):
                        G_W[a, b] += ga * X[s, b]

            t += 1
            adam_update(W.reshape(-1), G_W.reshape(-1),
                        mW.reshape(-1), vW.reshape(-1), t,
                        lr, beta1, beta2, adam_eps, weight_decay)
            if train_patterns:
                adam_update(V.reshape(-1), G_V.reshape(-1),
                            mV.reshape(-1), vV.reshape(-1), t,
                            lr, beta1, beta2, adam_eps, weight_decay)
            step += 1
        epoch_loss[e] = loss_sum / steps_per_epoch
        if do_eval[e] != 0:
            acc, eloss = _eval_linear_idp(W, V, label_ids, eval_X, eval_y,
                                          num_classes, idp_eps)
            epoch_acc[e] = acc
            epoch_eval_loss[e] = eloss
        else:
            epoch_acc[e] = np.nan
            epoch_eval_loss[e] = np.nan
    return t, 0
