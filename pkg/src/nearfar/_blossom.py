"""Exact minimum-weight perfect matching on complete graphs.

Primal-dual weighted blossom algorithm (Edmonds, O(n^3) dense variant) on
integer edge weights, compiled with numba. Inside the kernel vertices are
numbered 1..n, 0 is the null vertex and n+1..2n hold contracted blossoms.
Labels are kept at twice the usual dual scale so every update stays integral
and the optimum is exact.

Most near-far strata are solved faster through the assignment relaxation:
an optimal assignment on the bipartite double cover whose permutation has
only even cycles splits into a perfect matching of half its cost, which meets
the relaxation bound and is therefore optimal. Odd cycles fall back to the
blossom algorithm.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_INF = np.int64(1) << np.int64(62)


@njit(cache=True)
def _dist(lab, gu, gv, gw, a, b):
    return lab[gu[a, b]] + lab[gv[a, b]] - 2 * gw[a, b]


@njit(cache=True)
def _update_slack(lab, gu, gv, gw, slack, u, x):
    if slack[x] == 0 or _dist(lab, gu, gv, gw, u, x) < _dist(lab, gu, gv, gw, slack[x], x):
        slack[x] = u


@njit(cache=True)
def _set_slack(n, lab, gu, gv, gw, slack, st, S, x):
    slack[x] = 0
    for u in range(1, n + 1):
        if gw[u, x] > 0 and st[u] != x and S[st[u]] == 0:
            _update_slack(lab, gu, gv, gw, slack, u, x)


@njit(cache=True)
def _q_push(n, flo, flo_len, queue, stack, x):
    # queue[0] is the tail index; a vertex enters at most once per phase
    if x <= n:
        queue[0] += 1
        queue[queue[0]] = x
        return
    top = 0
    stack[0] = x
    while top >= 0:
        y = stack[top]
        top -= 1
        if y <= n:
            queue[0] += 1
            queue[queue[0]] = y
        else:
            for i in range(flo_len[y] - 1, -1, -1):
                top += 1
                stack[top] = flo[y, i]


@njit(cache=True)
def _set_st(n, flo, flo_len, st, stack, x, b):
    top = 0
    stack[0] = x
    while top >= 0:
        y = stack[top]
        top -= 1
        st[y] = b
        if y > n:
            for i in range(flo_len[y]):
                top += 1
                stack[top] = flo[y, i]


@njit(cache=True)
def _reverse_tail(flo, b, m):
    lo = 1
    hi = m - 1
    while lo < hi:
        tmp = flo[b, lo]
        flo[b, lo] = flo[b, hi]
        flo[b, hi] = tmp
        lo += 1
        hi -= 1


@njit(cache=True)
def _get_pr(flo, flo_len, b, xr):
    m = flo_len[b]
    pr = 0
    while flo[b, pr] != xr:
        pr += 1
    if pr % 2 == 1:
        _reverse_tail(flo, b, m)
        return m - pr
    return pr


@njit(cache=True)
def _set_match(n, gu, gv, match, flo, flo_len, flo_from, u, v):
    match[u] = gv[u, v]
    if u > n:
        xr = flo_from[u, gu[u, v]]
        pr = _get_pr(flo, flo_len, u, xr)
        for i in range(pr):
            _set_match(n, gu, gv, match, flo, flo_len, flo_from, flo[u, i], flo[u, i ^ 1])
        _set_match(n, gu, gv, match, flo, flo_len, flo_from, xr, v)
        # rotate left by pr; the row is twice as wide as any blossom
        m = flo_len[u]
        for i in range(pr):
            flo[u, m + i] = flo[u, i]
        for i in range(m):
            flo[u, i] = flo[u, i + pr]


@njit(cache=True)
def _augment(n, gu, gv, match, st, pa, flo, flo_len, flo_from, u, v):
    while True:
        xnv = st[match[u]]
        _set_match(n, gu, gv, match, flo, flo_len, flo_from, u, v)
        if xnv == 0:
            return
        _set_match(n, gu, gv, match, flo, flo_len, flo_from, xnv, st[pa[xnv]])
        u = st[pa[xnv]]
        v = xnv


@njit(cache=True)
def _get_lca(match, st, pa, vis, stamp, u, v):
    stamp[0] += 1
    t = stamp[0]
    while u != 0 or v != 0:
        if u != 0:
            if vis[u] == t:
                return u
            vis[u] = t
            u = st[match[u]]
            if u != 0:
                u = st[pa[u]]
        u, v = v, u
    return 0


@njit(cache=True)
def _add_blossom(n, n_x, lab, gu, gv, gw, match, slack, st, pa, S, flo, flo_len,
                 flo_from, queue, stack, u, lca, v):
    b = n + 1
    while b <= n_x[0] and st[b] != 0:
        b += 1
    if b > n_x[0]:
        n_x[0] += 1
    lab[b] = 0
    S[b] = 0
    match[b] = match[lca]
    flo[b, 0] = lca
    m = 1
    x = u
    while x != lca:
        flo[b, m] = x
        y = st[match[x]]
        flo[b, m + 1] = y
        m += 2
        flo_len[b] = m
        _q_push(n, flo, flo_len, queue, stack, y)
        x = st[pa[y]]
    _reverse_tail(flo, b, m)
    x = v
    while x != lca:
        flo[b, m] = x
        y = st[match[x]]
        flo[b, m + 1] = y
        m += 2
        flo_len[b] = m
        _q_push(n, flo, flo_len, queue, stack, y)
        x = st[pa[y]]
    flo_len[b] = m
    _set_st(n, flo, flo_len, st, stack, b, b)
    for x in range(1, n_x[0] + 1):
        gw[b, x] = 0
        gw[x, b] = 0
    for x in range(1, n + 1):
        flo_from[b, x] = 0
    for i in range(m):
        xs = flo[b, i]
        for x in range(1, n_x[0] + 1):
            if gw[b, x] == 0 or _dist(lab, gu, gv, gw, xs, x) < _dist(lab, gu, gv, gw, b, x):
                gu[b, x] = gu[xs, x]
                gv[b, x] = gv[xs, x]
                gw[b, x] = gw[xs, x]
                gu[x, b] = gu[x, xs]
                gv[x, b] = gv[x, xs]
                gw[x, b] = gw[x, xs]
        for x in range(1, n + 1):
            if flo_from[xs, x] != 0:
                flo_from[b, x] = xs
    _set_slack(n, lab, gu, gv, gw, slack, st, S, b)


@njit(cache=True)
def _expand_blossom(n, lab, gu, gv, gw, slack, st, pa, S, flo, flo_len, flo_from,
                    queue, stack, b):
    for i in range(flo_len[b]):
        _set_st(n, flo, flo_len, st, stack, flo[b, i], flo[b, i])
    xr = flo_from[b, gu[b, pa[b]]]
    pr = _get_pr(flo, flo_len, b, xr)
    for i in range(0, pr, 2):
        xs = flo[b, i]
        xns = flo[b, i + 1]
        pa[xs] = gu[xns, xs]
        S[xs] = 1
        S[xns] = 0
        slack[xs] = 0
        _set_slack(n, lab, gu, gv, gw, slack, st, S, xns)
        _q_push(n, flo, flo_len, queue, stack, xns)
    S[xr] = 1
    pa[xr] = pa[b]
    for i in range(pr + 1, flo_len[b]):
        xs = flo[b, i]
        S[xs] = -1
        _set_slack(n, lab, gu, gv, gw, slack, st, S, xs)
    st[b] = 0


@njit(cache=True)
def _on_found_edge(n, n_x, lab, gu, gv, gw, match, slack, st, pa, S, vis, stamp,
                   flo, flo_len, flo_from, queue, stack, eu, ev):
    u = st[eu]
    v = st[ev]
    if S[v] == -1:
        pa[v] = eu
        S[v] = 1
        nu = st[match[v]]
        slack[v] = 0
        slack[nu] = 0
        S[nu] = 0
        _q_push(n, flo, flo_len, queue, stack, nu)
    elif S[v] == 0:
        lca = _get_lca(match, st, pa, vis, stamp, u, v)
        if lca == 0:
            _augment(n, gu, gv, match, st, pa, flo, flo_len, flo_from, u, v)
            _augment(n, gu, gv, match, st, pa, flo, flo_len, flo_from, v, u)
            return True
        _add_blossom(n, n_x, lab, gu, gv, gw, match, slack, st, pa, S, flo, flo_len,
                     flo_from, queue, stack, u, lca, v)
    return False


@njit(cache=True)
def _phase(n, n_x, lab, gu, gv, gw, match, slack, st, pa, S, vis, stamp, flo,
           flo_len, flo_from, queue, stack):
    """Grow alternating trees until one augmentation succeeds."""
    for x in range(1, n_x[0] + 1):
        S[x] = -1
        slack[x] = 0
    queue[0] = 0
    for x in range(1, n_x[0] + 1):
        if st[x] == x and match[x] == 0:
            pa[x] = 0
            S[x] = 0
            _q_push(n, flo, flo_len, queue, stack, x)
    if queue[0] == 0:
        return False
    head = 1
    while True:
        while head <= queue[0]:
            u = queue[head]
            head += 1
            if S[st[u]] == 1:
                continue
            for v in range(1, n + 1):
                if gw[u, v] > 0 and st[u] != st[v]:
                    if _dist(lab, gu, gv, gw, u, v) == 0:
                        if _on_found_edge(n, n_x, lab, gu, gv, gw, match, slack, st, pa,
                                          S, vis, stamp, flo, flo_len, flo_from, queue,
                                          stack, gu[u, v], gv[u, v]):
                            return True
                    else:
                        _update_slack(lab, gu, gv, gw, slack, u, st[v])
        d = _INF
        for b in range(n + 1, n_x[0] + 1):
            if st[b] == b and S[b] == 1:
                d = min(d, lab[b] // 2)
        for x in range(1, n_x[0] + 1):
            if st[x] == x and slack[x] != 0:
                if S[x] == -1:
                    d = min(d, _dist(lab, gu, gv, gw, slack[x], x))
                elif S[x] == 0:
                    d = min(d, _dist(lab, gu, gv, gw, slack[x], x) // 2)
        # perfect matching: vertex duals are unrestricted in sign
        for u in range(1, n + 1):
            if S[st[u]] == 0:
                lab[u] -= d
            elif S[st[u]] == 1:
                lab[u] += d
        for b in range(n + 1, n_x[0] + 1):
            if st[b] == b:
                if S[st[b]] == 0:
                    lab[b] += d * 2
                elif S[st[b]] == 1:
                    lab[b] -= d * 2
        head = queue[0] + 1
        for x in range(1, n_x[0] + 1):
            if (st[x] == x and slack[x] != 0 and st[slack[x]] != x
                    and _dist(lab, gu, gv, gw, slack[x], x) == 0):
                if _on_found_edge(n, n_x, lab, gu, gv, gw, match, slack, st, pa, S, vis,
                                  stamp, flo, flo_len, flo_from, queue, stack,
                                  gu[slack[x], x], gv[slack[x], x]):
                    return True
        for b in range(n + 1, n_x[0] + 1):
            if st[b] == b and S[b] == 1 and lab[b] == 0:
                _expand_blossom(n, lab, gu, gv, gw, slack, st, pa, S, flo, flo_len,
                                flo_from, queue, stack, b)


@njit(cache=True)
def _max_weight_perfect(weights, lab0, mate0):
    """Maximum-weight perfect matching of positive integer ``weights``.

    ``lab0``/``mate0`` optionally give starting labels (at the internal scale)
    and a starting matching; pass empty arrays for the default start. The
    caller must keep the labels dual feasible, even, and tight on ``mate0``.
    """
    n = weights.shape[0]
    nx = 2 * n + 1
    gu = np.zeros((nx, nx), dtype=np.int64)
    gv = np.zeros((nx, nx), dtype=np.int64)
    gw = np.zeros((nx, nx), dtype=np.int64)
    lab = np.zeros(nx, dtype=np.int64)
    for u in range(1, n + 1):
        for v in range(1, n + 1):
            gu[u, v] = u
            gv[u, v] = v
            if u != v:
                # doubled so every starting label is even: all free vertices
                # then share label parity and S-S slacks halve exactly
                gw[u, v] = 2 * weights[u - 1, v - 1]
                if gw[u, v] > lab[u]:
                    lab[u] = gw[u, v]
    match = np.zeros(nx, dtype=np.int64)
    slack = np.zeros(nx, dtype=np.int64)
    st = np.zeros(nx, dtype=np.int64)
    pa = np.zeros(nx, dtype=np.int64)
    S = np.zeros(nx, dtype=np.int64)
    vis = np.zeros(nx, dtype=np.int64)
    stamp = np.zeros(1, dtype=np.int64)
    flo = np.zeros((nx, 2 * nx), dtype=np.int64)
    flo_len = np.zeros(nx, dtype=np.int64)
    flo_from = np.zeros((nx, n + 1), dtype=np.int64)
    queue = np.zeros(nx + 1, dtype=np.int64)
    stack = np.zeros(2 * nx + 1, dtype=np.int64)
    n_x = np.zeros(1, dtype=np.int64)
    n_x[0] = n
    for u in range(1, n + 1):
        st[u] = u
        flo_from[u, u] = u
    if lab0.shape[0] == n:
        for u in range(1, n + 1):
            lab[u] = lab0[u - 1]
        for u in range(1, n + 1):
            if mate0[u - 1] >= 0:
                match[u] = mate0[u - 1] + 1
    else:
        # lab[u] = max incident weight is dual feasible, so any edge tight at
        # both ends may be matched greedily
        for u in range(1, n + 1):
            if match[u] != 0:
                continue
            for v in range(u + 1, n + 1):
                if match[v] == 0 and 2 * gw[u, v] == lab[u] + lab[v]:
                    match[u] = v
                    match[v] = u
                    break
    while _phase(n, n_x, lab, gu, gv, gw, match, slack, st, pa, S, vis, stamp, flo,
                 flo_len, flo_from, queue, stack):
        pass
    mate = np.full(n, -1, dtype=np.int64)
    for u in range(1, n + 1):
        if match[u] != 0:
            mate[u - 1] = match[u] - 1
    return mate


@njit(cache=True)
def _assignment(cost):
    """Hungarian shortest-augmenting-path assignment with the diagonal forbidden."""
    n = cost.shape[0]
    forbid = np.int64(1) << np.int64(60)
    u = np.zeros(n + 1, dtype=np.int64)
    v = np.zeros(n + 1, dtype=np.int64)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1, dtype=np.int64)
    used = np.empty(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = _INF
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = _INF
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    c = forbid if i0 == j else cost[i0 - 1, j - 1]
                    cur = c - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    sigma = np.empty(n, dtype=np.int64)
    col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        sigma[p[j] - 1] = j - 1
        col[j - 1] = v[j]
    return sigma, u[1:].copy(), col


@njit(cache=True)
def _split_cycles(sigma):
    """Match alternate edges around each cycle of ``sigma``.

    Even cycles are covered exactly; each odd cycle leaves its start vertex
    free (-1). Returns the mates and the number of free vertices.
    """
    n = sigma.shape[0]
    mate = np.full(n, -1, dtype=np.int64)
    seen = np.zeros(n, dtype=np.bool_)
    free = 0
    for s in range(n):
        if seen[s]:
            continue
        length = 1
        seen[s] = True
        x = sigma[s]
        while x != s:
            seen[x] = True
            length += 1
            x = sigma[x]
        if length % 2 == 1:
            free += 1
            x = sigma[s]
        else:
            x = s
        for _ in range(length // 2):
            y = sigma[x]
            mate[x] = y
            mate[y] = x
            x = sigma[y]
    return mate, free


@njit(cache=True)
def _min_weight_perfect(cost):
    sigma, u, v = _assignment(cost)
    mate, free = _split_cycles(sigma)
    if free == 0:
        return mate
    # Symmetrized assignment duals are optimal for the fractional matching
    # relaxation, and every cycle edge is tight, so the partial matching
    # above is a valid blossom start with one free vertex per odd cycle.
    n = cost.shape[0]
    hi = _max_entry(cost)
    lab0 = np.empty(n, dtype=np.int64)
    for i in range(n):
        lab0[i] = 2 * (hi + 1) - 2 * (u[i] + v[i])
    return _max_weight_perfect(_flip(cost, hi), lab0, mate)


@njit(cache=True)
def _max_entry(cost):
    hi = np.int64(0)
    for i in range(cost.shape[0]):
        for j in range(cost.shape[1]):
            if cost[i, j] > hi:
                hi = cost[i, j]
    return hi


@njit(cache=True)
def _flip(cost, hi):
    n = cost.shape[0]
    flipped = np.empty((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(n):
            flipped[i, j] = 0 if i == j else hi + 1 - cost[i, j]
    return flipped


@njit(cache=True)
def _blossom_min_weight_perfect(cost):
    """Blossom algorithm alone from its default start; kept for cross-checks."""
    empty = np.empty(0, dtype=np.int64)
    return _max_weight_perfect(_flip(cost, _max_entry(cost)), empty, empty)


def min_weight_perfect_matching(cost: np.ndarray) -> np.ndarray:
    """Return ``mate`` with ``mate[i] == j`` for a minimum-weight perfect matching.

    ``cost`` must be a symmetric, non-negative integer matrix of even order.
    The result is deterministic for a given matrix.
    """
    cost = np.ascontiguousarray(cost, dtype=np.int64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("cost must be a square matrix")
    n = cost.shape[0]
    if n % 2:
        raise ValueError(f"perfect matching needs an even vertex count, got {n}")
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if (cost < 0).any():
        raise ValueError("cost entries must be non-negative")
    if not np.array_equal(cost, cost.T):
        raise ValueError("cost must be symmetric")
    mate = _min_weight_perfect(cost)
    assert (mate >= 0).all(), "complete graph of even order always has a perfect matching"
    return mate


@njit(cache=True, nogil=True)
def solve_batch(dist, gap, offsets, sizes, penalty, sink_weight, delta, sinks):
    """Solve every stratum of one near-far configuration in a single call.

    ``dist`` and ``gap`` hold each stratum's flattened n x n integer distance
    and float IV-gap matrices starting at ``offsets[s]``. Stratum s gets
    ``sinks[s]`` phantom vertices appended after its real ones. Returns the
    concatenated mate arrays, stratum s occupying ``sizes[s] + sinks[s]``
    entries.
    """
    total = 0
    for s in range(sizes.shape[0]):
        total += sizes[s] + sinks[s]
    mates = np.empty(total, dtype=np.int64)
    pos = 0
    for s in range(sizes.shape[0]):
        n = sizes[s]
        m = n + sinks[s]
        if m == 0:
            continue
        cost = np.zeros((m, m), dtype=np.int64)
        base = offsets[s]
        for i in range(n):
            for j in range(n):
                if i != j:
                    w = dist[base + i * n + j]
                    if gap[base + i * n + j] < delta:
                        w += penalty[s]
                    cost[i, j] = w
        for i in range(n, m):
            for j in range(n, m):
                if i != j:
                    cost[i, j] = sink_weight[s]
        mate = _min_weight_perfect(cost)
        for i in range(m):
            mates[pos + i] = mate[i]
        pos += m
    return mates
