"""Minimum-cost bipartite assignment with a deterministic tie rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError


@dataclass
class Assignment:
    pairs: list                      # (prediction, gt), ascending prediction index
    unmatched: list = field(default_factory=list)

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.intp)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.intp)

    def total(self, cost: np.ndarray) -> float:
        s = 0.0
        for p, g in self.pairs:
            s += cost[p, g]
        return s


def _solve(a: np.ndarray):
    """Shortest-augmenting-path Hungarian for rows <= cols.

    Returns (col_of_row, u, v) where u, v are optimal dual potentials:
    a[i, j] - u[i] - v[j] >= 0 everywhere, with equality on the assignment.
    """
    n, m = a.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.intp)      # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:] = np.where(better, cur, minv[1:])
            way[1:] = np.where(better, j0, way[1:])
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:] = np.where(free, minv[1:] - delta, minv[1:])
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.full(n, -1, dtype=np.intp)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _optimum(a: np.ndarray) -> float:
    if a.shape[0] == 0:
        return 0.0
    cols, _, _ = _solve(a)
    return float(a[np.arange(a.shape[0]), cols].sum())


def hungarian_match(cost: np.ndarray) -> Assignment:
    """Minimum total cost assignment of gts (columns) to predictions (rows).

    Among co-optimal assignments the pair list sorted by prediction index is
    lexicographically smallest.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    if not np.all(np.isfinite(cost)):
        raise NumericError("non-finite matching cost")
    k, g = cost.shape
    if g == 0 or k == 0:
        return Assignment([], list(range(k)))
    transposed = g <= k
    a = cost.T if transposed else cost            # rows <= cols
    cols, u, v = _solve(a)
    if transposed:
        pred_of_gt = {int(i): int(cols[i]) for i in range(g)}
        reduced = a - u[:, None] - v[None, :]     # (g, k)
    else:
        pred_of_gt = {int(cols[i]): int(i) for i in range(k)}
        reduced = (a - u[:, None] - v[None, :]).T  # (g, k)
    best = _optimum(a)
    tol = 1e-9 * (1.0 + abs(best))

    pairs = _lexicographic(cost, pred_of_gt, reduced, best, tol)
    matched = {p for p, _ in pairs}
    return Assignment(pairs, [p for p in range(k) if p not in matched])


def _lexicographic(cost, pred_of_gt, reduced, best, tol):
    k, g = cost.shape
    current = {p: gt for gt, p in pred_of_gt.items()}      # pred -> gt
    fixed, banned = {}, set()                              # pred -> gt, preds forced unmatched

    def feasible(extra_pair=None, extra_ban=None):
        pairs = dict(fixed)
        bans = set(banned)
        if extra_pair is not None:
            pairs[extra_pair[0]] = extra_pair[1]
        if extra_ban is not None:
            bans.add(extra_ban)
        used_gts = set(pairs.values())
        rows = [p for p in range(k) if p not in pairs and p not in bans]
        gts = [x for x in range(g) if x not in used_gts]
        if len(gts) > len(rows):
            return None
        base = sum(cost[p, x] for p, x in pairs.items())
        if not gts:
            return base, {}
        cols, _, _ = _solve(cost[np.ix_(rows, gts)].T)
        sol = {rows[int(cols[i])]: gts[i] for i in range(len(gts))}
        return base + sum(cost[p, x] for p, x in sol.items()), sol

    for p in range(k):
        if len(set(fixed.values())) == g:
            break
        used = set(fixed.values())
        options = [x for x in range(g) if x not in used and reduced[x, p] <= tol]
        chosen = None
        for x in options:
            if current.get(p) == x:
                chosen = ("pair", x, None)
                break
            res = feasible(extra_pair=(p, x))
            if res is not None and res[0] <= best + tol:
                chosen = ("pair", x, res[1])
                break
        if chosen is None:
            if p not in current:
                banned.add(p)
                continue
            res = feasible(extra_ban=p)
            if res is not None and res[0] <= best + tol:
                banned.add(p)
                current = dict(fixed)
                current.update(res[1])
                continue
            chosen = ("pair", current[p], None)
        _, x, sol = chosen
        fixed[p] = x
        if sol is not None:
            current = dict(fixed)
            current.update(sol)
    final = dict(current)
    final.update(fixed)
    return sorted(final.items())
