"""Exact rectangular linear assignment.

Shortest augmenting path method in the Jonker-Volgenant family: rows are
inserted one at a time and each is connected to a free column through a
Dijkstra search over reduced costs, keeping dual potentials feasible. The
inner relaxation over columns is vectorized with numpy, giving O(n^2 m)
worst case with small constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: Cost placed in forbidden cells of an augmented matrix.
FORBIDDEN = 1e9


@dataclass
class Assignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


def _solve_wide(cost: np.ndarray) -> np.ndarray:
    """Solve for n <= m; returns the column assigned to each row."""
    n, m = cost.shape
    u = np.zeros(n)
    v = np.zeros(m)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(m, -1, dtype=np.int64)

    for cur_row in range(n):
        shortest = np.full(m, np.inf)
        path = np.full(m, -1, dtype=np.int64)
        # scanned columns are masked out of argmin by `pending`
        pending = np.full(m, np.inf)
        scanned = np.zeros(m, dtype=bool)
        visited_rows = [cur_row]
        min_val = 0.0
        i = cur_row
        while True:
            reduced = min_val + cost[i] - u[i] - v
            better = (reduced < shortest) & ~scanned
            shortest[better] = reduced[better]
            path[better] = i
            pending[better] = reduced[better]
            j = int(np.argmin(pending))
            min_val = pending[j]
            if not np.isfinite(min_val):
                raise RuntimeError("assignment infeasible")
            if row4col[j] != -1:
                # among tied minima prefer a free column: ends the search early
                free_ties = np.flatnonzero((pending == min_val) & (row4col == -1))
                if free_ties.size:
                    j = int(free_ties[0])
            scanned[j] = True
            pending[j] = np.inf
            if row4col[j] == -1:
                sink = j
                break
            i = int(row4col[j])
            visited_rows.append(i)

        # dual update keeps reduced costs non-negative and tight on the tree
        u[cur_row] += min_val
        others = np.asarray(visited_rows[1:], dtype=np.int64)
        if others.size:
            u[others] += min_val - shortest[col4row[others]]
        v[scanned] -= min_val - shortest[scanned]

        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            j, col4row[i] = int(col4row[i]), j
            if i == cur_row:
                break
    return col4row


def solve(costs) -> Assignment:
    """Minimum-cost matching of all min(n, m) rows/columns of `costs`.

    Tall matrices are transposed internally; pairs are always (row, col) of
    the input and sorted by row.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        if c.size == 0:
            return Assignment()
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    n, m = c.shape
    if n == 0 or m == 0:
        return Assignment()

    if n <= m:
        rows = np.arange(n)
        cols = _solve_wide(c)
    else:
        cols = np.arange(m)
        rows = _solve_wide(c.T)
        order = np.argsort(rows)
        rows, cols = rows[order], cols[order]
    pairs = [(int(r), int(k)) for r, k in zip(rows, cols)]
    total = float(c[rows, cols].sum())
    return Assignment(pairs, total)


def augment(costs, new_instance_cost: float) -> np.ndarray:
    """Append one private "new instance" column per row.

    Dummy column j costs `new_instance_cost` in row j and FORBIDDEN elsewhere.
    """
    if not np.isfinite(new_instance_cost):
        raise ValueError("new_instance_cost must be finite")
    c = np.asarray(costs, dtype=np.float64)
    n = c.shape[0]
    c = c.reshape(n, -1)
    dummy = np.full((n, n), FORBIDDEN)
    np.fill_diagonal(dummy, new_instance_cost)
    return np.hstack([c, dummy])
