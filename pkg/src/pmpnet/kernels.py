"""Hot inner loops: sampling, neighbour search and auction bidding.

Every kernel has a numba version (``*_nb``) and a numpy version (``*_np``)
with identical semantics, including tie-breaking (smallest index wins).  The
public names dispatch on :data:`pmpnet._accel.USE_NUMBA`.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

_CHUNK = 2048


# ---------------------------------------------------------------- FPS


@njit
def fps_nb(points, s):
    n = points.shape[0]
    out = np.empty(s, dtype=np.int64)
    mind = np.full(n, np.inf)
    last = 0
    out[0] = 0
    for t in range(1, s):
        best = -1.0
        arg = 0
        for j in range(n):
            dx = points[j, 0] - points[last, 0]
            dy = points[j, 1] - points[last, 1]
            dz = points[j, 2] - points[last, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
            if mind[j] > best:
                best = mind[j]
                arg = j
        out[t] = arg
        last = arg
    return out


def fps_np(points, s):
    n = points.shape[0]
    out = np.empty(s, dtype=np.int64)
    mind = np.full(n, np.inf)
    last = 0
    out[0] = 0
    for t in range(1, s):
        diff = points - points[last]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        np.minimum(mind, d, out=mind)
        last = int(np.argmax(mind))
        out[t] = last
    return out


# ---------------------------------------------------------------- ball query


@njit
def ball_query_nb(points, centers, r2, m):
    s = centers.shape[0]
    n = points.shape[0]
    idx = np.zeros((s, m), dtype=np.int64)
    count = np.zeros(s, dtype=np.int64)
    for c in range(s):
        k = 0
        for j in range(n):
            dx = points[j, 0] - centers[c, 0]
            dy = points[j, 1] - centers[c, 1]
            dz = points[j, 2] - centers[c, 2]
            if dx * dx + dy * dy + dz * dz < r2:
                idx[c, k] = j
                k += 1
                if k == m:
                    break
        count[c] = k
        for t in range(k, m):
            idx[c, t] = idx[c, 0]
    return idx, count


def ball_query_np(points, centers, r2, m):
    s = centers.shape[0]
    idx = np.zeros((s, m), dtype=np.int64)
    count = np.zeros(s, dtype=np.int64)
    for lo in range(0, s, _CHUNK):
        c = centers[lo:lo + _CHUNK]
        diff = c[:, None, :] - points[None, :, :]
        d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        inside = d2 < r2
        order = np.argsort(~inside, axis=1, kind="stable")
        k = np.minimum(inside.sum(axis=1), m)
        width = min(m, points.shape[0])
        block = np.zeros((c.shape[0], m), dtype=np.int64)
        block[:, :width] = order[:, :width]
        pad = np.arange(m)[None, :] >= k[:, None]
        block[pad] = np.broadcast_to(block[:, :1], block.shape)[pad]
        idx[lo:lo + _CHUNK] = block
        count[lo:lo + _CHUNK] = k
    return idx, count


# ---------------------------------------------------------------- k nearest


@njit
def knn_nb(query, ref, k):
    q = query.shape[0]
    n = ref.shape[0]
    idx = np.zeros((q, k), dtype=np.int64)
    dist = np.full((q, k), np.inf)
    for i in range(q):
        for j in range(n):
            dx = query[i, 0] - ref[j, 0]
            dy = query[i, 1] - ref[j, 1]
            dz = query[i, 2] - ref[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < dist[i, k - 1]:
                t = k - 1
                while t > 0 and d < dist[i, t - 1]:
                    dist[i, t] = dist[i, t - 1]
                    idx[i, t] = idx[i, t - 1]
                    t -= 1
                dist[i, t] = d
                idx[i, t] = j
    return idx


def knn_np(query, ref, k):
    out = np.empty((query.shape[0], k), dtype=np.int64)
    for lo in range(0, query.shape[0], _CHUNK):
        q = query[lo:lo + _CHUNK]
        diff = q[:, None, :] - ref[None, :, :]
        d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        out[lo:lo + _CHUNK] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


# ---------------------------------------------------------------- auction


@njit
def auction_nb(cost, eps_schedule, max_sweeps):
    n = cost.shape[0]
    prices = np.zeros(n)
    owner = np.full(n, -1, dtype=np.int64)
    assign = np.full(n, -1, dtype=np.int64)
    for eps in eps_schedule:
        owner[:] = -1
        assign[:] = -1
        for _ in range(max_sweeps):
            pending = False
            for i in range(n):
                if assign[i] != -1:
                    continue
                pending = True
                best = -np.inf
                second = -np.inf
                jbest = 0
                for j in range(n):
                    v = -cost[i, j] - prices[j]
                    if v > best:
                        second = best
                        best = v
                        jbest = j
                    elif v > second:
                        second = v
                if second == -np.inf:
                    prices[jbest] += eps
                else:
                    prices[jbest] += best - second + eps
                prev = owner[jbest]
                if prev != -1:
                    assign[prev] = -1
                owner[jbest] = i
                assign[i] = jbest
            if not pending:
                break
    for i in range(n):
        if assign[i] != -1:
            continue
        jbest = -1
        for j in range(n):
            if owner[j] == -1 and (jbest == -1 or cost[i, j] < cost[i, jbest]):
                jbest = j
        owner[jbest] = i
        assign[i] = jbest
    return assign


def auction_np(cost, eps_schedule, max_sweeps):
    n = cost.shape[0]
    prices = np.zeros(n)
    owner = np.full(n, -1, dtype=np.int64)
    assign = np.full(n, -1, dtype=np.int64)
    for eps in eps_schedule:
        owner[:] = -1
        assign[:] = -1
        for _ in range(max_sweeps):
            pending = False
            for i in range(n):
                if assign[i] != -1:
                    continue
                pending = True
                v = -cost[i] - prices
                jbest = int(np.argmax(v))
                best = v[jbest]
                v[jbest] = -np.inf
                second = v.max() if n > 1 else -np.inf
                if second == -np.inf:
                    prices[jbest] += eps
                else:
                    prices[jbest] += best - second + eps
                prev = owner[jbest]
                if prev != -1:
                    assign[prev] = -1
                owner[jbest] = i
                assign[i] = jbest
            if not pending:
                break
    for i in np.flatnonzero(assign == -1):
        free = np.flatnonzero(owner == -1)
        j = free[int(np.argmin(cost[i, free]))]
        owner[j] = i
        assign[i] = j
    return assign


if USE_NUMBA:
    fps, ball_query, knn, auction = fps_nb, ball_query_nb, knn_nb, auction_nb
else:
    fps, ball_query, knn, auction = fps_np, ball_query_np, knn_np, auction_np
