"""Numba kernels for weighted CART building and prediction.

The builder keeps one presorted row-index list per feature and maintains them
through stable partitions, so split search never re-sorts. Feature subsets are
drawn per node from a SplitMix64 stream seeded per tree, which makes tree
structure independent of scheduling and worker count.
"""

import numpy as np
from numba import njit

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_M2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, nogil=True, inline="always")
def _splitmix64(state):
    state = state + _SM_GAMMA
    z = state
    z = (z ^ (z >> np.uint64(30))) * _SM_M1
    z = (z ^ (z >> np.uint64(27))) * _SM_M2
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True, nogil=True)
def build_tree(X, y, w, n_classes, order, max_features, min_samples_split,
               max_depth, seed):
    """Grow a weighted Gini CART over the active rows listed in ``order``.

    order : (d, n_active) int32, row ids sorted ascending per feature;
            mutated in place during partitioning.
    Returns (feature, threshold, left, right, leaf_class, counts, n_nodes);
    feature[v] == -1 marks node v as a leaf.
    """
    d = X.shape[1]
    n_active = order.shape[1]
    cap = 2 * n_active + 1

    feature = np.full(cap, -1, dtype=np.int32)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    leaf_class = np.full(cap, -1, dtype=np.int32)
    counts = np.zeros((cap, n_classes), dtype=np.float64)

    stack_node = np.empty(cap, dtype=np.int64)
    stack_start = np.empty(cap, dtype=np.int64)
    stack_end = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)

    cls_counts = np.zeros(n_classes, dtype=np.float64)
    left_counts = np.zeros(n_classes, dtype=np.float64)
    goes_left = np.zeros(X.shape[0], dtype=np.uint8)
    tmp = np.empty(n_active, dtype=np.int32)
    feat_buf = np.empty(d, dtype=np.int64)
    chosen = np.empty(max_features, dtype=np.int64)

    state = seed
    node_count = 1
    sp = 0
    stack_node[sp] = 0
    stack_start[sp] = 0
    stack_end[sp] = n_active
    stack_depth[sp] = 0
    sp += 1

    while sp > 0:
        sp -= 1
        nid = stack_node[sp]
        s = stack_start[sp]
        e = stack_end[sp]
        depth = stack_depth[sp]

        for c in range(n_classes):
            cls_counts[c] = 0.0
        total_w = 0.0
        for t in range(s, e):
            r = order[0, t]
            cls_counts[y[r]] += w[r]
            total_w += w[r]

        best_c = 0
        for c in range(1, n_classes):
            if cls_counts[c] > cls_counts[best_c]:
                best_c = c

        make_leaf = (
            total_w < min_samples_split
            or cls_counts[best_c] == total_w
            or depth >= max_depth
        )

        best_f = -1
        best_thr = 0.0
        if not make_leaf:
            h_parent = 0.0
            for c in range(n_classes):
                h_parent += cls_counts[c] * cls_counts[c]
            h_parent /= total_w
            best_h = h_parent

            for i in range(d):
                feat_buf[i] = i
            for t in range(max_features):
                state, z = _splitmix64(state)
                j = t + np.int64(z % np.uint64(d - t))
                feat_buf[t], feat_buf[j] = feat_buf[j], feat_buf[t]
                chosen[t] = feat_buf[t]
            # ascending feature order so equal-quality ties go to the
            # smallest feature index
            for i in range(1, max_features):
                key = chosen[i]
                j = i - 1
                while j >= 0 and chosen[j] > key:
                    chosen[j + 1] = chosen[j]
                    j -= 1
                chosen[j + 1] = key

            for fi in range(max_features):
                f = chosen[fi]
                for c in range(n_classes):
                    left_counts[c] = 0.0
                wl = 0.0
                for t in range(s, e - 1):
                    r = order[f, t]
                    left_counts[y[r]] += w[r]
                    wl += w[r]
                    v = X[r, f]
                    vn = X[order[f, t + 1], f]
                    if vn > v:
                        wr = total_w - wl
                        sl = 0.0
                        sr = 0.0
                        for c in range(n_classes):
                            lc = left_counts[c]
                            rc = cls_counts[c] - lc
                            sl += lc * lc
                            sr += rc * rc
                        h = sl / wl + sr / wr
                        if h > best_h:
                            best_h = h
                            best_f = f
                            thr = 0.5 * (v + vn)
                            if thr >= vn:  # midpoint rounded up to vn
                                thr = v
                            best_thr = thr
            if best_f < 0:
                make_leaf = True

        if make_leaf:
            leaf_class[nid] = best_c
            for c in range(n_classes):
                counts[nid, c] = cls_counts[c]
            continue

        for c in range(n_classes):
            counts[nid, c] = cls_counts[c]
        n_left = 0
        for t in range(s, e):
            r = order[0, t]
            if X[r, best_f] <= best_thr:
                goes_left[r] = 1
                n_left += 1
            else:
                goes_left[r] = 0
        for f in range(d):
            k = 0
            k2 = n_left
            for t in range(s, e):
                r = order[f, t]
                if goes_left[r]:
                    tmp[k] = r
                    k += 1
                else:
                    tmp[k2] = r
                    k2 += 1
            for t in range(s, e):
                order[f, t] = tmp[t - s]

        lid = node_count
        rid = node_count + 1
        node_count += 2
        feature[nid] = best_f
        threshold[nid] = best_thr
        left[nid] = lid
        right[nid] = rid

        stack_node[sp] = rid
        stack_start[sp] = s + n_left
        stack_end[sp] = e
        stack_depth[sp] = depth + 1
        sp += 1
        stack_node[sp] = lid
        stack_start[sp] = s
        stack_end[sp] = s + n_left
        stack_depth[sp] = depth + 1
        sp += 1

    return (
        feature[:node_count].copy(),
        threshold[:node_count].copy(),
        left[:node_count].copy(),
        right[:node_count].copy(),
        leaf_class[:node_count].copy(),
        counts[:node_count].copy(),
        node_count,
    )


@njit(cache=True, nogil=True)
def predict_rows(feature, threshold, left, right, leaf_class, X):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        nid = 0
        while feature[nid] >= 0:
            if X[i, feature[nid]] <= threshold[nid]:
                nid = left[nid]
            else:
                nid = right[nid]
        out[i] = leaf_class[nid]
    return out
