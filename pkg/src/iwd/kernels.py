"""Hot numeric kernels: L1 cost matrices, assignment, transport flow, Sinkhorn.

Every kernel exists twice: a loop version compiled with numba ``@njit`` and a
vectorized pure-numpy version. The public wrappers pick one at call time:

    IWD_DISABLE_NUMBA=1   force the numpy path
    (unset)               numba path when numba is importable

Both paths implement the same algorithm with the same tie-breaking, so they
agree to floating-point rounding (not necessarily bitwise).
"""

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def _env_disabled():
    return os.environ.get("IWD_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = NUMBA_AVAILABLE and not _env_disabled()


def backend():
    """Name of the backend the public wrappers currently dispatch to."""
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# L1 ground cost
# ---------------------------------------------------------------------------


@njit(cache=True)
def _l1_cost_nb(P, Q):
    n, d = P.shape
    m = Q.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                s += abs(P[i, k] - Q[j, k])
            out[i, j] = s
    return out


def _l1_cost_np(P, Q):
    return np.abs(P[:, None, :] - Q[None, :, :]).sum(axis=2)


def l1_cost(P, Q):
    P = np.ascontiguousarray(P, dtype=np.float64)
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    return _l1_cost_nb(P, Q) if USE_NUMBA else _l1_cost_np(P, Q)


# ---------------------------------------------------------------------------
# Square assignment (Hungarian method, shortest augmenting path form)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _assignment_nb(C):
    n = C.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = C[i0 - 1, j - 1] - u[i0] - v[j]
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
    cols = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        cols[p[j] - 1] = j - 1
    return cols


def _assignment_np(C):
    n = C.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    cols[p[1:] - 1] = np.arange(n)
    return cols


def assignment(C):
    """Column index assigned to each row in a minimum-cost perfect matching."""
    C = np.ascontiguousarray(C, dtype=np.float64)
    if C.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return _assignment_nb(C) if USE_NUMBA else _assignment_np(C)


# ---------------------------------------------------------------------------
# Transportation problem via successive shortest paths (dense bipartite graph)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _transport_flow_nb(C, a, b, tol):
    n, m = C.shape
    V = n + m
    flow = np.zeros((n, m))
    sup = a.copy()
    dem = b.copy()
    pot = np.zeros(V)
    inf = np.inf
    max_aug = 4 * V * V + 16
    n_aug = 0
    while True:
        remaining = 0.0
        for i in range(n):
            remaining += sup[i]
        if remaining <= tol:
            break
        dist = np.full(V, inf)
        prev = np.full(V, -1, dtype=np.int64)
        done = np.zeros(V, dtype=np.bool_)
        for i in range(n):
            if sup[i] > tol:
                dist[i] = max(0.0, -pot[i])
                prev[i] = -2
        for _ in range(V):
            x = -1
            best = inf
            for w in range(V):
                if not done[w] and dist[w] < best:
                    best = dist[w]
                    x = w
            if x < 0:
                break
            done[x] = True
            if x < n:
                for j in range(m):
                    y = n + j
                    if done[y]:
                        continue
                    rc = C[x, j] + pot[x] - pot[y]
                    if rc < 0.0:
                        rc = 0.0
                    nd = best + rc
                    if nd < dist[y]:
                        dist[y] = nd
                        prev[y] = x
            else:
                j = x - n
                for i in range(n):
                    if done[i] or flow[i, j] <= tol:
                        continue
                    rc = -C[i, j] + pot[x] - pot[i]
                    if rc < 0.0:
                        rc = 0.0
                    nd = best + rc
                    if nd < dist[i]:
                        dist[i] = nd
                        prev[i] = x
        jstar = -1
        best = inf
        for j in range(m):
            if dem[j] > tol and dist[n + j] < inf:
                t = dist[n + j] + pot[n + j]
                if t < best:
                    best = t
                    jstar = j
        if jstar < 0:
            return flow, -1
        maxd = 0.0
        for w in range(V):
            if dist[w] < inf and dist[w] > maxd:
                maxd = dist[w]
        for w in range(V):
            pot[w] += dist[w] if dist[w] < inf else maxd
        # bottleneck along the path
        amt = dem[jstar]
        x = n + jstar
        while prev[x] != -2:
            y = prev[x]
            if x < n:
                cap = flow[x, y - n]
                if cap < amt:
                    amt = cap
            x = y
        if sup[x] < amt:
            amt = sup[x]
        src = x
        x = n + jstar
        while prev[x] != -2:
            y = prev[x]
            if x >= n:
                flow[y, x - n] += amt
            else:
                flow[x, y - n] -= amt
                if flow[x, y - n] <= tol:
                    flow[x, y - n] = 0.0
            x = y
        sup[src] -= amt
        dem[jstar] -= amt
        if sup[src] <= tol:
            sup[src] = 0.0
        if dem[jstar] <= tol:
            dem[jstar] = 0.0
        n_aug += 1
        if n_aug > max_aug:
            return flow, -1
    return flow, n_aug


def _transport_flow_np(C, a, b, tol):
    n, m = C.shape
    V = n + m
    flow = np.zeros((n, m))
    sup = a.copy()
    dem = b.copy()
    pot = np.zeros(V)
    max_aug = 4 * V * V + 16
    n_aug = 0
    while sup.sum() > tol:
        dist = np.full(V, np.inf)
        prev = np.full(V, -1, dtype=np.int64)
        done = np.zeros(V, dtype=bool)
        active = sup > tol
        dist[:n][active] = np.maximum(0.0, -pot[:n][active])
        prev[:n][active] = -2
        for _ in range(V):
            masked = np.where(done, np.inf, dist)
            x = int(np.argmin(masked))
            best = masked[x]
            if not np.isfinite(best):
                break
            done[x] = True
            if x < n:
                rc = np.maximum(C[x] + pot[x] - pot[n:], 0.0)
                nd = best + rc
                upd = ~done[n:] & (nd < dist[n:])
                dist[n:][upd] = nd[upd]
                prev[n:][upd] = x
            else:
                j = x - n
                rc = np.maximum(-C[:, j] + pot[x] - pot[:n], 0.0)
                nd = best + rc
                upd = ~done[:n] & (flow[:, j] > tol) & (nd < dist[:n])
                dist[:n][upd] = nd[upd]
                prev[:n][upd] = x
        reach = np.isfinite(dist[n:]) & (dem > tol)
        if not reach.any():
            return flow, -1
        true_d = np.where(reach, dist[n:] + pot[n:], np.inf)
        jstar = int(np.argmin(true_d))
        finite = np.isfinite(dist)
        maxd = max(0.0, dist[finite].max()) if finite.any() else 0.0
        pot += np.where(finite, dist, maxd)
        amt = dem[jstar]
        x = n + jstar
        while prev[x] != -2:
            y = prev[x]
            if x < n:
                amt = min(amt, flow[x, y - n])
            x = y
        amt = min(amt, sup[x])
        src = x
        x = n + jstar
        while prev[x] != -2:
            y = prev[x]
            if x >= n:
                flow[y, x - n] += amt
            else:
                flow[x, y - n] -= amt
                if flow[x, y - n] <= tol:
                    flow[x, y - n] = 0.0
            x = y
        sup[src] -= amt
        dem[jstar] -= amt
        if sup[src] <= tol:
            sup[src] = 0.0
        if dem[jstar] <= tol:
            dem[jstar] = 0.0
        n_aug += 1
        if n_aug > max_aug:
            return flow, -1
    return flow, n_aug


def transport_flow(C, a, b, tol=1e-13):
    """Optimal coupling for general marginals. Returns (plan, augmentations);
    augmentations is -1 when the solver failed to route all mass."""
    C = np.ascontiguousarray(C, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    fn = _transport_flow_nb if USE_NUMBA else _transport_flow_np
    return fn(C, a, b, float(tol))


# ---------------------------------------------------------------------------
# Log-domain Sinkhorn
# ---------------------------------------------------------------------------


@njit(cache=True)
def _sinkhorn_log_nb(C, log_a, log_b, eps, f, g, max_iter, tol, check_every):
    n, m = C.shape
    a = np.exp(log_a)
    err = np.inf
    it = 0
    while it < max_iter:
        for i in range(n):
            mx = -np.inf
            for j in range(m):
                t = (g[j] - C[i, j]) / eps
                if t > mx:
                    mx = t
            s = 0.0
            for j in range(m):
                s += np.exp((g[j] - C[i, j]) / eps - mx)
            f[i] = eps * log_a[i] - eps * (mx + np.log(s))
        for j in range(m):
            mx = -np.inf
            for i in range(n):
                t = (f[i] - C[i, j]) / eps
                if t > mx:
                    mx = t
            s = 0.0
            for i in range(n):
                s += np.exp((f[i] - C[i, j]) / eps - mx)
            g[j] = eps * log_b[j] - eps * (mx + np.log(s))
        it += 1
        if it % check_every == 0 or it == max_iter:
            err = 0.0
            for i in range(n):
                r = 0.0
                for j in range(m):
                    r += np.exp((f[i] + g[j] - C[i, j]) / eps)
                err += abs(r - a[i])
            if err <= tol:
                break
    return f, g, it, err


def _lse(M, axis):
    mx = M.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(M - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def _sinkhorn_log_np(C, log_a, log_b, eps, f, g, max_iter, tol, check_every):
    a = np.exp(log_a)
    err = np.inf
    it = 0
    while it < max_iter:
        f = eps * log_a - eps * _lse((g[None, :] - C) / eps, 1)
        g = eps * log_b - eps * _lse((f[:, None] - C) / eps, 0)
        it += 1
        if it % check_every == 0 or it == max_iter:
            P = np.exp((f[:, None] + g[None, :] - C) / eps)
            err = float(np.abs(P.sum(1) - a).sum())
            if err <= tol:
                break
    return f, g, it, err


def sinkhorn_log(C, log_a, log_b, eps, f0=None, g0=None, max_iter=10_000, tol=1e-6, check_every=10):
    """Run log-domain Sinkhorn. Returns (f, g, iterations, row-marginal L1 error).

    Columns are exactly balanced after every sweep, so the row error is the
    only one that needs checking.
    """
    C = np.ascontiguousarray(C, dtype=np.float64)
    n, m = C.shape
    f = np.zeros(n) if f0 is None else np.array(f0, dtype=np.float64)
    g = np.zeros(m) if g0 is None else np.array(g0, dtype=np.float64)
    log_a = np.ascontiguousarray(log_a, dtype=np.float64)
    log_b = np.ascontiguousarray(log_b, dtype=np.float64)
    fn = _sinkhorn_log_nb if USE_NUMBA else _sinkhorn_log_np
    f, g, it, err = fn(C, log_a, log_b, float(eps), f, g, int(max_iter), float(tol), int(check_every))
    return f, g, int(it), float(err)


def warmup():
    """Compile every numba kernel once on tiny inputs."""
    if not USE_NUMBA:
        return
    P = np.random.default_rng(0).random((3, 2))
    C = l1_cost(P, P)
    assignment(C)
    w = np.full(3, 1 / 3)
    transport_flow(C, w, w)
    sinkhorn_log(C + 0.1, np.log(w), np.log(w), 0.1, max_iter=5)
