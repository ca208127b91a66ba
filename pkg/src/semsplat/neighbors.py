"""Exact nearest-neighbor queries with reproducible distances and tie-breaks.

A k-d tree finds each query's nearest distance. Every target within that
radius (plus a hair of slack) is then re-scored with the same axis-by-axis
arithmetic as ``squared_distances``, so results match a brute-force scan
exactly, with ties going to the lowest target index. Duplicate targets
are indexed once, under their first occurrence, since copies can only tie.
"""

import numpy as np
from scipy.spatial import cKDTree

_RADIUS_SLACK = 1e-7


def squared_distances(queries, targets):
    """Dense ``(q, m)`` matrix of squared distances, summed axis by axis."""
    d = queries[:, None, 0] - targets[None, :, 0]
    out = d * d
    d = queries[:, None, 1] - targets[None, :, 1]
    out = out + d * d
    d = queries[:, None, 2] - targets[None, :, 2]
    return out + d * d


class NearestNeighborIndex:
    """Nearest-neighbor index over a fixed ``(m, 3)`` target set."""

    def __init__(self, points):
        P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if P.shape[0] == 0:
            raise ValueError("cannot index an empty point set")
        if not np.all(np.isfinite(P)):
            raise ValueError("target points must be finite")
        _, first = np.unique(P, axis=0, return_index=True)
        self.source_index = np.sort(first)
        self.points = P
        self.tree = cKDTree(P[self.source_index])

    def query(self, queries):
        """Return ``(index, squared_distance)`` of each query's nearest target."""
        X = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        q = X.shape[0]
        if q == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        dist, _ = self.tree.query(X, k=1)
        radius = dist * (1.0 + _RADIUS_SLACK) + 1e-300
        cands = self.tree.query_ball_point(X, radius, return_sorted=False)
        counts = np.fromiter((len(c) for c in cands), dtype=np.int64, count=q)
        row = np.repeat(np.arange(q), counts)
        cand = self.source_index[np.concatenate([np.asarray(c, dtype=np.int64) for c in cands])]
        diff = X[row] - self.points[cand]
        d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        order = np.lexsort((cand, d2, row))
        row, cand, d2 = row[order], cand[order], d2[order]
        lead = np.ones(row.size, dtype=bool)
        lead[1:] = row[1:] != row[:-1]
        return cand[lead], d2[lead]
