"""Distances to polylines and the real line."""

import numpy as np


def dist_to_segments(pts, a, b):
    """Distance from each point to the nearest segment ``[a_k, b_k]``.

    ``pts`` has shape ``(m,)``, ``a`` and ``b`` shape ``(K,)`` (complex).
    Memory is ``O(m K)``; callers chunk large inputs.
    """
    pts = np.asarray(pts, dtype=complex)[:, None]
    a = np.asarray(a, dtype=complex)[None, :]
    d = np.asarray(b, dtype=complex)[None, :] - a
    L2 = np.abs(d) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(L2 > 0, ((pts - a) * d.conj()).real / L2, 0.0)
    s = np.clip(s, 0.0, 1.0)
    return np.abs(pts - (a + s * d)).min(axis=1)


def dist_to_polyline(pts, poly, chunk: int = 4096):
    """Distance from points to the polyline through ``poly`` (complex)."""
    pts = np.atleast_1d(np.asarray(pts, dtype=complex))
    poly = np.atleast_1d(np.asarray(poly, dtype=complex))
    if poly.size == 1:
        return np.abs(pts - poly[0])
    a, b = poly[:-1], poly[1:]
    out = np.empty(pts.size)
    step = max(1, chunk * 256 // max(1, a.size))
    for i in range(0, pts.size, step):
        out[i:i + step] = dist_to_segments(pts[i:i + step], a, b)
    return out


def dist_to_boundary(pts, trace_points):
    """Distance to ``R`` union the curve polyline."""
    pts = np.atleast_1d(np.asarray(pts, dtype=complex))
    return np.minimum(np.abs(pts.imag), dist_to_polyline(pts, trace_points))


def _cross(u, v):
    return (u.conj() * v).imag


def side_of_polyline(pts, poly):
    """``+1`` for points right of the directed polyline, ``-1`` for points left of it.

    The side is read off the nearest segment; at a shared vertex the
    convex wedge of the turn decides.
    """
    pts = np.atleast_1d(np.asarray(pts, dtype=complex))
    poly = np.asarray(poly, dtype=complex)
    keep = np.concatenate([[True], np.abs(np.diff(poly)) > 0])
    poly = poly[keep]
    a, d = poly[:-1], np.diff(poly)
    out = np.empty(pts.size, dtype=int)
    for i, p in enumerate(pts):
        L2 = np.abs(d) ** 2
        s = np.clip(((p - a) * d.conj()).real / L2, 0.0, 1.0)
        k = int(np.argmin(np.abs(p - (a + s * d))))
        c = _cross(d[k], p - a[k])
        if s[k] == 1.0 and k + 1 < d.size:
            k, s0 = k + 1, 0.0
        else:
            s0 = s[k]
        if s0 == 0.0 and k > 0:
            d1, d2, v = d[k - 1], d[k], a[k]
            c1, c2 = _cross(d1, p - v), _cross(d2, p - v)
            left = (c1 > 0 and c2 > 0) if _cross(d1, d2) > 0 else (c1 > 0 or c2 > 0)
            out[i] = -1 if left else 1
        else:
            out[i] = -1 if c > 0 else 1
    return out
