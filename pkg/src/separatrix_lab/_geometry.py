"""Point-to-polyline distances and Hausdorff distance between polylines."""
from __future__ import annotations

import numpy as np

_CHUNK = 4_000_000  # points x segments handled per block

# power-form coefficients of the cubic through nodes at -k, 1-k, 2-k, 3-k
_STENCILS = np.stack([np.linalg.inv(np.vander(np.arange(4.0) - k, 4, increasing=True))
                      for k in range(3)])


def as_polyline(pts) -> np.ndarray:
    arr = np.asarray(pts, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) == 0:
        raise ValueError("polyline must be a non-empty (n, 2) array")
    return arr


def distance_to_polyline(points, polyline) -> np.ndarray:
    """Exact Euclidean distance from each point to the union of segments."""
    pts = as_polyline(points)
    line = as_polyline(polyline)
    if len(line) == 1:
        return np.hypot(*(pts - line[0]).T)
    a = line[:-1]
    d = line[1:] - a
    dd = np.einsum("ij,ij->i", d, d)
    dd = np.where(dd > 0, dd, 1.0)
    out = np.empty(len(pts))
    rows = max(1, _CHUNK // len(a))
    for start in range(0, len(pts), rows):
        p = pts[start:start + rows, None, :]
        rel = p - a[None]
        s = np.clip(np.einsum("ijk,jk->ij", rel, d) / dd, 0.0, 1.0)
        diff = rel - s[..., None] * d[None]
        out[start:start + rows] = np.sqrt(np.min(np.einsum("ijk,ijk->ij", diff, diff), axis=1))
    return out


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance of two polylines, vertices against segments."""
    a = as_polyline(a)
    b = as_polyline(b)
    return float(max(distance_to_polyline(a, b).max(), distance_to_polyline(b, a).max()))


def enclosed_area(polyline) -> float:
    p = as_polyline(polyline)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def self_intersections(polyline, skip: int = 1) -> int:
    """Number of crossing pairs among non-adjacent segments (sweep by x-extent)."""
    p = as_polyline(polyline)
    a, b = p[:-1], p[1:]
    lo = np.minimum(a[:, 0], b[:, 0])
    hi = np.maximum(a[:, 0], b[:, 0])
    order = np.argsort(lo)
    count = 0
    n = len(a)
    closed = np.allclose(p[0], p[-1])
    for idx, i in enumerate(order):
        j_candidates = order[idx + 1:]
        j_candidates = j_candidates[lo[j_candidates] <= hi[i]]
        for j in j_candidates:
            if abs(int(i) - int(j)) <= skip or (closed and abs(int(i) - int(j)) >= n - skip):
                continue
            if _segments_cross(a[i], b[i], a[j], b[j]):
                count += 1
    return count


def _orient(p, q, r):
    return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])


def _segments_cross(p1, p2, p3, p4) -> bool:
    d1 = _orient(p3, p4, p1)
    d2 = _orient(p3, p4, p2)
    d3 = _orient(p1, p2, p3)
    d4 = _orient(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def nearest_segment(points, polyline):
    """(distance, segment index, segment parameter) of the closest segment per point."""
    pts = as_polyline(points)
    line = as_polyline(polyline)
    a = line[:-1]
    d = line[1:] - a
    dd = np.einsum("ij,ij->i", d, d)
    dd = np.where(dd > 0, dd, 1.0)
    dist = np.empty(len(pts))
    index = np.empty(len(pts), dtype=np.int64)
    param = np.empty(len(pts))
    rows = max(1, _CHUNK // len(a))
    for start in range(0, len(pts), rows):
        p = pts[start:start + rows, None, :]
        rel = p - a[None]
        s = np.clip(np.einsum("ijk,jk->ij", rel, d) / dd, 0.0, 1.0)
        diff = rel - s[..., None] * d[None]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        k = np.argmin(d2, axis=1)
        rr = np.arange(len(k))
        dist[start:start + rows] = np.sqrt(d2[rr, k])
        index[start:start + rows] = k
        param[start:start + rows] = s[rr, k]
    return dist, index, param


def distance_to_curve(points, polyline, iters: int = 6) -> np.ndarray:
    """Distance to the smooth curve through the vertices (local cubic interpolation).

    The vertices must be samples at uniform steps of a smooth parameter; each
    segment is replaced by the cubic through its four neighbouring vertices, so
    the result is accurate to fourth order in the spacing instead of second.
    """
    pts = as_polyline(points)
    line = as_polyline(polyline)
    n = len(line)
    if n < 4:
        return distance_to_polyline(pts, line)
    _, idx, s = nearest_segment(pts, line)
    best = np.full(len(pts), np.inf)
    for shift in (-1, 0, 1):
        i = np.clip(idx + shift, 0, n - 2)
        # four-node stencil, one-sided on the first and last segments
        j = np.clip(i - 1, 0, n - 4)
        case = i - j                     # 0, 1 or 2: offset of node i in the stencil
        nodes = line[j[:, None] + np.arange(4)]          # (npts, 4, 2)
        coef = np.einsum("pkm,pmd->pkd", _STENCILS[case], nodes)
        c0, c1, c2, c3 = coef[:, 0], coef[:, 1], coef[:, 2], coef[:, 3]
        u = s.copy() if shift == 0 else np.full(len(pts), 0.5)
        for _ in range(iters):
            c = c0 + u[:, None] * (c1 + u[:, None] * (c2 + u[:, None] * c3))
            dc = c1 + u[:, None] * (2 * c2 + 3 * u[:, None] * c3)
            ddc = 2 * c2 + 6 * u[:, None] * c3
            r = c - pts
            g = np.einsum("ij,ij->i", r, dc)
            h = np.einsum("ij,ij->i", dc, dc) + np.einsum("ij,ij->i", r, ddc)
            u = np.clip(u - g / np.where(h > 0, h, 1.0), 0.0, 1.0)
        c = c0 + u[:, None] * (c1 + u[:, None] * (c2 + u[:, None] * c3))
        best = np.minimum(best, np.hypot(*(c - pts).T))
    return best
