"""Minimum-cost bipartite assignment between queries and ground-truth slots.

The cost couples a classification term (one minus the probability assigned
to the target's category) with a weighted L1 box distance; padding targets
carry the classification term against the "none" category only. The solver
is the O(n^3) shortest-augmenting-path algorithm with potentials. Ties are
real here (padding targets are exact duplicates of one another), so the
result is canonicalised to the lexicographically smallest optimal
assignment by rewiring inside the tight-edge subgraph: every optimal
assignment uses only edges of zero reduced cost, and every perfect matching
on those edges is optimal.
"""

from __future__ import annotations

import math

import numpy as np

from .core import BOX_SLOTS, CAT_SLOTS, Category
from .errors import NonFiniteError, ShapeError

LAMBDA_CLS = 1.0
LAMBDA_BOX = 5.0


def build_cost(
    probs: np.ndarray,
    boxes: np.ndarray,
    gt_flat: np.ndarray,
    lam_cls: float = LAMBDA_CLS,
    lam_box: float = LAMBDA_BOX,
) -> np.ndarray:
    """Q x Q cost between predictions and a padded flat ground truth."""
    probs = np.asarray(probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    gt_flat = np.asarray(gt_flat, dtype=np.float64)
    q = probs.shape[0]
    if probs.shape != (q, 5) or boxes.shape != (q, 4) or gt_flat.shape != (q, 9):
        raise ShapeError(
            f"expected probs (q,5), boxes (q,4), gt (q,9); got "
            f"{probs.shape}, {boxes.shape}, {gt_flat.shape}"
        )
    t_cat = np.argmax(gt_flat[:, CAT_SLOTS], axis=1)
    cost = lam_cls * (1.0 - probs[:, t_cat])
    real = t_cat != Category.NONE
    if real.any():
        l1 = np.abs(boxes[:, None, :] - gt_flat[None, real, BOX_SLOTS]).sum(axis=2)
        cost[:, real] += lam_box * l1
    return cost


def _solve_potentials(cost: list[list[float]], n: int):
    """Shortest augmenting path with potentials; returns (col_to_row, u, v)."""
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    col_row = [-1] * (n + 1)  # row matched to each column; index n is virtual
    way = [0] * n
    for i in range(n):
        col_row[n] = i
        j0 = n
        minv = [inf] * n
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            delta = inf
            j1 = -1
            row = cost[i0]
            base = u[i0]
            for j in range(n):
                if not used[j]:
                    cur = row[j] - base - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n):
                if used[j]:
                    u[col_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            u[col_row[n]] += delta
            v[n] -= delta
            j0 = j1
            if col_row[j0] == -1:
                break
        while j0 != n:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1
    return col_row[:n], u, v


def _augment(
    r: int,
    tight: list[list[int]],
    match: list[int],
    owner: list[int],
    blocked: list[bool],
    seen: list[bool],
) -> bool:
    for c in tight[r]:
        if blocked[c] or seen[c]:
            continue
        seen[c] = True
        other = owner[c]
        if other == -1 or _augment(other, tight, match, owner, blocked, seen):
            match[r] = c
            owner[c] = r
            return True
    return False


def _lex_canonical(tight: list[list[int]], match: list[int], n: int) -> list[int]:
    """Rewire a perfect matching of the tight graph to the lexicographically
    smallest one, fixing queries in index order."""
    owner = [-1] * n
    for r, c in enumerate(match):
        owner[c] = r
    blocked = [False] * n  # columns already fixed to earlier queries
    for i in range(n):
        for c in tight[i]:
            if blocked[c]:
                continue
            if match[i] == c:
                break
            displaced = owner[c]
            old = match[i]
            match[i] = c
            owner[c] = i
            owner[old] = -1
            match[displaced] = -1
            seen = [False] * n
            seen[c] = True
            if _augment(displaced, tight, match, owner, blocked, seen):
                break
            match[displaced] = c
            owner[c] = displaced
            match[i] = old
            owner[old] = i
        blocked[match[i]] = True
    return match


def hungarian(cost: np.ndarray) -> list[int]:
    """Minimum-total-cost bijection queries -> target slots.

    Deterministic: among cost-optimal assignments the lexicographically
    smallest one (by target index per query, in query order) is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteError("cost matrix contains non-finite entries")
    n = cost.shape[0]
    if n == 0:
        return []
    rows = cost.tolist()
    col_row, u, v = _solve_potentials(rows, n)
    match = [-1] * n
    for c, r in enumerate(col_row):
        match[r] = c
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = [
        [j for j in range(n) if rows[i][j] - u[i] - v[j] <= tol]
        for i in range(n)
    ]
    return _lex_canonical(tight, match, n)
