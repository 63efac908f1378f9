"""Numba kernels for CART regression trees and tuned forests.

Trees predict a 0/1 label from a feature matrix by recursive binary
splitting on squared-error reduction. Thresholds sit at midpoints
between sorted distinct feature values; ties are broken toward the
lowest feature index, then the smallest threshold, so fits are
bit-reproducible. The per-feature sort order of the full matrix is
computed once and maintained through partitions, which keeps a tree fit
at O(k * n * depth) after the initial argsort; fold subsets reuse the
full-matrix order by filtering instead of re-sorting.

Each kernel seeds numba's MT19937 once and consumes it in a fixed
order (folds ascending, grid points in order, trees in order), so a
fit is a pure function of (X, y, params, seed).
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _fit_one_tree(
    X, y, order_full, counts,
    min_node, mtry,
    feat, thr, left, right, value, cnt, ysum, ysq,
    orig, y_slot, ordf, buf, stack, feats, slot_start,
):
    n, k = X.shape
    # slots: one entry per bootstrap draw, pointing at an original row
    m = 0
    for i in range(n):
        slot_start[i] = m
        for _ in range(counts[i]):
            orig[m] = i
            y_slot[m] = y[i]
            m += 1
    # walk rows in feature order, emitting each row's slots in order
    for f in range(k):
        pos = 0
        for r in range(n):
            i = order_full[f, r]
            for j in range(counts[i]):
                ordf[f, pos] = slot_start[i] + j
                pos += 1

    n_nodes = 1
    top = 0
    stack[top, 0] = 0
    stack[top, 1] = 0
    stack[top, 2] = m
    top += 1

    while top > 0:
        top -= 1
        node = stack[top, 0]
        a = stack[top, 1]
        b = stack[top, 2]
        sz = b - a

        s = 0.0
        sq = 0.0
        ymin = np.inf
        ymax = -np.inf
        for p in range(a, b):
            v = y_slot[ordf[0, p]]
            s += v
            sq += v * v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        cnt[node] = sz
        ysum[node] = s
        ysq[node] = sq

        if sz < 2 * min_node or sz < 2 or ymin == ymax:
            feat[node] = -1
            value[node] = s / sz
            continue

        # feature subset: all features when mtry >= k, else partial
        # Fisher-Yates then ascending sort (tie-break determinism)
        if mtry >= k:
            n_try = k
            for ii in range(k):
                feats[ii] = ii
        else:
            n_try = mtry
            for ii in range(k):
                feats[ii] = ii
            for j in range(mtry):
                r = j + np.random.randint(0, k - j)
                tmp = feats[j]
                feats[j] = feats[r]
                feats[r] = tmp
            for j in range(1, mtry):
                key = feats[j]
                i2 = j - 1
                while i2 >= 0 and feats[i2] > key:
                    feats[i2 + 1] = feats[i2]
                    i2 -= 1
                feats[i2 + 1] = key

        parent_score = s * s / sz
        best_score = -np.inf
        best_f = -1
        best_thr = 0.0
        best_nl = 0
        for fi in range(n_try):
            f = feats[fi]
            cs = 0.0
            for p in range(a, b - 1):
                slot = ordf[f, p]
                cs += y_slot[slot]
                x_cur = X[orig[slot], f]
                x_next = X[orig[ordf[f, p + 1]], f]
                if x_next > x_cur:
                    nl = p - a + 1
                    nr = sz - nl
                    if nl >= min_node and nr >= min_node:
                        score = cs * cs / nl + (s - cs) * (s - cs) / nr
                        if score > best_score:
                            best_score = score
                            best_f = f
                            t_mid = 0.5 * (x_cur + x_next)
                            # midpoint can round up to x_next for adjacent
                            # doubles; pin to the left value so `<= thr`
                            # keeps exactly nl slots on the left
                            if t_mid >= x_next:
                                t_mid = x_cur
                            best_thr = t_mid
                            best_nl = nl

        if best_f < 0 or best_score <= parent_score:
            feat[node] = -1
            value[node] = s / sz
            continue

        # stable partition of every feature's segment by the chosen split
        for g in range(k):
            lpos = a
            nb = 0
            for p in range(a, b):
                slot = ordf[g, p]
                if X[orig[slot], best_f] <= best_thr:
                    ordf[g, lpos] = slot
                    lpos += 1
                else:
                    buf[nb] = slot
                    nb += 1
            for j in range(nb):
                ordf[g, lpos + j] = buf[j]

        feat[node] = best_f
        thr[node] = best_thr
        value[node] = s / sz
        lchild = n_nodes
        rchild = n_nodes + 1
        n_nodes += 2
        left[node] = lchild
        right[node] = rchild
        stack[top, 0] = rchild
        stack[top, 1] = a + best_nl
        stack[top, 2] = b
        top += 1
        stack[top, 0] = lchild
        stack[top, 1] = a
        stack[top, 2] = a + best_nl
        top += 1

    return n_nodes


@njit(cache=True)
def _fit_forest_into(
    X, y, order_full, n_trees, min_node, mtry, bootstrap,
    feat, thr, left, right, value, cnt, ysum, ysq, n_nodes,
):
    """Fit n_trees trees into preallocated arrays; stream already seeded."""
    n, k = X.shape
    m = n
    counts = np.empty(n, dtype=np.int64)
    orig = np.empty(m, dtype=np.int32)
    y_slot = np.empty(m, dtype=np.float64)
    ordf = np.empty((k, m), dtype=np.int32)
    buf = np.empty(m, dtype=np.int32)
    stack = np.empty((2 * m + 2, 3), dtype=np.int64)
    feats = np.empty(k, dtype=np.int64)
    slot_start = np.empty(n, dtype=np.int64)

    for t in range(n_trees):
        if bootstrap:
            counts[:] = 0
            for _ in range(n):
                counts[np.random.randint(0, n)] += 1
        else:
            counts[:] = 1
        n_nodes[t] = _fit_one_tree(
            X, y, order_full, counts, min_node, mtry,
            feat[t], thr[t], left[t], right[t], value[t], cnt[t],
            ysum[t], ysq[t],
            orig, y_slot, ordf, buf, stack, feats, slot_start,
        )


@njit(cache=True)
def fit_forest(
    X, y, order_full, n_trees, min_node, mtry, bootstrap, seed,
    feat, thr, left, right, value, cnt, ysum, ysq,
):
    """Seed once, then fit n_trees trees sequentially. Returns node counts."""
    np.random.seed(seed)
    n_nodes = np.empty(n_trees, dtype=np.int64)
    _fit_forest_into(X, y, order_full, n_trees, min_node, mtry, bootstrap,
                     feat, thr, left, right, value, cnt, ysum, ysq, n_nodes)
    return n_nodes


@njit(cache=True)
def _predict_into(feat, thr, left, right, value, n_trees, Xq, out):
    q = Xq.shape[0]
    for i in range(q):
        acc = 0.0
        for t in range(n_trees):
            node = 0
            while feat[t, node] >= 0:
                if Xq[i, feat[t, node]] <= thr[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            acc += value[t, node]
        out[i] = acc / n_trees


@njit(cache=True)
def predict_forest(feat, thr, left, right, value, n_trees, Xq, out):
    """Average the trees' leaf values for each query row into ``out``."""
    _predict_into(feat, thr, left, right, value, n_trees, Xq, out)


@njit(cache=True)
def tune_fit_forest(
    X, y, order_full, fold_of_unit, K,
    mtry_arr, min_node_arr, tune_trees, n_trees, oof_trees,
    bootstrap, seed,
    feat, thr, left, right, value, cnt, ysum, ysq,
    oof_out, want_oof,
):
    """Grid-tuned forest fit with one seeded stream.

    Scores every (mtry, min_node) pair by K-fold out-of-fold squared
    error using ``tune_trees``-tree forests, selects the winner (ties:
    smaller mtry, then larger min_node), and fits the final
    ``n_trees`` forest into the output arrays. When ``want_oof``,
    out-of-fold predictions of the selected configuration are written
    to ``oof_out`` — refit per fold with ``oof_trees`` trees, or reused
    from the tuning pass when ``oof_trees == 0``.

    Returns (n_nodes, best_index, cv_loss).
    """
    np.random.seed(seed)
    n, k = X.shape
    G = len(mtry_arr)
    cv_sqerr = np.zeros(G)
    tune_oof = np.zeros((G, n))
    run_tuning = G > 1 or (want_oof and oof_trees == 0)

    if run_tuning:
        max_tt = tune_trees
        for j in range(1, K + 1):
            n_te = 0
            for i in range(n):
                if fold_of_unit[i] == j:
                    n_te += 1
            n_tr = n - n_te
            X_tr = np.empty((n_tr, k))
            y_tr = np.empty(n_tr)
            X_te = np.empty((n_te, k))
            te_idx = np.empty(n_te, dtype=np.int64)
            tr_pos = np.full(n, -1, dtype=np.int32)
            a = 0
            b = 0
            for i in range(n):
                if fold_of_unit[i] == j:
                    for f in range(k):
                        X_te[b, f] = X[i, f]
                    te_idx[b] = i
                    b += 1
                else:
                    for f in range(k):
                        X_tr[a, f] = X[i, f]
                    y_tr[a] = y[i]
                    tr_pos[i] = a
                    a += 1
            # training-subset sort order = filtered full order
            order_tr = np.empty((k, n_tr), dtype=np.int32)
            for f in range(k):
                pos = 0
                for r in range(n):
                    i = order_full[f, r]
                    if tr_pos[i] >= 0:
                        order_tr[f, pos] = tr_pos[i]
                        pos += 1
            max_nodes = 2 * n_tr + 1
            feat_w = np.empty((max_tt, max_nodes), dtype=np.int32)
            thr_w = np.empty((max_tt, max_nodes), dtype=np.float64)
            left_w = np.empty((max_tt, max_nodes), dtype=np.int32)
            right_w = np.empty((max_tt, max_nodes), dtype=np.int32)
            value_w = np.empty((max_tt, max_nodes), dtype=np.float64)
            cnt_w = np.empty((max_tt, max_nodes), dtype=np.int64)
            ysum_w = np.empty((max_tt, max_nodes), dtype=np.float64)
            ysq_w = np.empty((max_tt, max_nodes), dtype=np.float64)
            nn_w = np.empty(max_tt, dtype=np.int64)
            pred = np.empty(n_te)
            for gi in range(G):
                _fit_forest_into(
                    X_tr, y_tr, order_tr, tune_trees,
                    min_node_arr[gi], mtry_arr[gi], bootstrap,
                    feat_w, thr_w, left_w, right_w, value_w, cnt_w,
                    ysum_w, ysq_w, nn_w,
                )
                _predict_into(feat_w, thr_w, left_w, right_w, value_w,
                              tune_trees, X_te, pred)
                for bb in range(n_te):
                    d = pred[bb] - y[te_idx[bb]]
                    cv_sqerr[gi] += d * d
                    tune_oof[gi, te_idx[bb]] = pred[bb]

    cv_loss = cv_sqerr / n
    best = 0
    if G > 1:
        for gi in range(1, G):
            better = False
            if cv_loss[gi] < cv_loss[best]:
                better = True
            elif cv_loss[gi] == cv_loss[best]:
                if mtry_arr[gi] < mtry_arr[best]:
                    better = True
                elif (mtry_arr[gi] == mtry_arr[best]
                      and min_node_arr[gi] > min_node_arr[best]):
                    better = True
            if better:
                best = gi

    if want_oof:
        if oof_trees == 0:
            for i in range(n):
                oof_out[i] = tune_oof[best, i]
        else:
            for j in range(1, K + 1):
                n_te = 0
                for i in range(n):
                    if fold_of_unit[i] == j:
                        n_te += 1
                n_tr = n - n_te
                X_tr = np.empty((n_tr, k))
                y_tr = np.empty(n_tr)
                X_te = np.empty((n_te, k))
                te_idx = np.empty(n_te, dtype=np.int64)
                tr_pos = np.full(n, -1, dtype=np.int32)
                a = 0
                b = 0
                for i in range(n):
                    if fold_of_unit[i] == j:
                        for f in range(k):
                            X_te[b, f] = X[i, f]
                        te_idx[b] = i
                        b += 1
                    else:
                        for f in range(k):
                            X_tr[a, f] = X[i, f]
                        y_tr[a] = y[i]
                        tr_pos[i] = a
                        a += 1
                order_tr = np.empty((k, n_tr), dtype=np.int32)
                for f in range(k):
                    pos = 0
                    for r in range(n):
                        i = order_full[f, r]
                        if tr_pos[i] >= 0:
                            order_tr[f, pos] = tr_pos[i]
                            pos += 1
                max_nodes = 2 * n_tr + 1
                feat_w = np.empty((oof_trees, max_nodes), dtype=np.int32)
                thr_w = np.empty((oof_trees, max_nodes), dtype=np.float64)
                left_w = np.empty((oof_trees, max_nodes), dtype=np.int32)
                right_w = np.empty((oof_trees, max_nodes), dtype=np.int32)
                value_w = np.empty((oof_trees, max_nodes), dtype=np.float64)
                cnt_w = np.empty((oof_trees, max_nodes), dtype=np.int64)
                ysum_w = np.empty((oof_trees, max_nodes), dtype=np.float64)
                ysq_w = np.empty((oof_trees, max_nodes), dtype=np.float64)
                nn_w = np.empty(oof_trees, dtype=np.int64)
                pred = np.empty(n_te)
                _fit_forest_into(
                    X_tr, y_tr, order_tr, oof_trees,
                    min_node_arr[best], mtry_arr[best], bootstrap,
                    feat_w, thr_w, left_w, right_w, value_w, cnt_w,
                    ysum_w, ysq_w, nn_w,
                )
                _predict_into(feat_w, thr_w, left_w, right_w, value_w,
                              oof_trees, X_te, pred)
                for bb in range(n_te):
                    oof_out[te_idx[bb]] = pred[bb]

    n_nodes = np.empty(n_trees, dtype=np.int64)
    _fit_forest_into(X, y, order_full, n_trees, min_node_arr[best],
                     mtry_arr[best], bootstrap,
                     feat, thr, left, right, value, cnt, ysum, ysq, n_nodes)
    return n_nodes, best, cv_loss
