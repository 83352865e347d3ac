"""Planar geometry kernels shared by collision checking and ray casting.

Scenes are compiled into flat numpy arrays of two primitive kinds:

* capsules ``(K, 5)`` rows ``[px, py, qx, qy, r]`` (a circle is a capsule with p == q)
* rectangles ``(M, 4, 2)`` corner lists, counter-clockwise

Batched routines take a leading env axis ``E``; scenes with fewer primitives
are padded with far-away degenerate entries (see :func:`stack`).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FAR = 1.0e6
_EPS = 1e-12


@dataclass
class Primitives:
    caps: np.ndarray  # (K, 5)
    rects: np.ndarray  # (M, 4, 2)
    lo: np.ndarray  # (2,)
    hi: np.ndarray  # (2,)

    @classmethod
    def empty(cls, lo, hi) -> "Primitives":
        return cls(np.zeros((0, 5)), np.zeros((0, 4, 2)), np.asarray(lo, float), np.asarray(hi, float))

    def concat(self, other: "Primitives") -> "Primitives":
        return Primitives(
            np.concatenate([self.caps, other.caps]),
            np.concatenate([self.rects, other.rects]),
            self.lo,
            self.hi,
        )


@dataclass
class BatchPrimitives:
    caps: np.ndarray  # (E, K, 5)
    rects: np.ndarray  # (E, M, 4, 2)
    lo: np.ndarray  # (E, 2)
    hi: np.ndarray  # (E, 2)

    def __len__(self) -> int:
        return self.lo.shape[0]


def rect_corners(center, half_extents, heading) -> np.ndarray:
    c, s = np.cos(heading), np.sin(heading)
    hx, hy = half_extents
    local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center, float)


def _pad_caps(n: int) -> np.ndarray:
    pad = np.zeros((n, 5))
    pad[:, :4] = FAR
    return pad


def _pad_rects(n: int) -> np.ndarray:
    unit = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]]) * 1e-3
    return np.broadcast_to(unit + FAR, (n, 4, 2)).copy()


def stack(prims: list[Primitives], min_caps: int = 1, min_rects: int = 1) -> BatchPrimitives:
    """Stack per-scene primitives into padded batch arrays."""
    k = max([min_caps] + [p.caps.shape[0] for p in prims])
    m = max([min_rects] + [p.rects.shape[0] for p in prims])
    caps = np.empty((len(prims), k, 5))
    rects = np.empty((len(prims), m, 4, 2))
    for i, p in enumerate(prims):
        nk, nm = p.caps.shape[0], p.rects.shape[0]
        caps[i, :nk] = p.caps
        caps[i, nk:] = _pad_caps(k - nk)
        rects[i, :nm] = p.rects
        rects[i, nm:] = _pad_rects(m - nm)
    lo = np.stack([p.lo for p in prims])
    hi = np.stack([p.hi for p in prims])
    return BatchPrimitives(caps, rects, lo, hi)


# ---------------------------------------------------------------------------
# collision


def _to_local(points: np.ndarray, pos: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Map world points ``(E, ..., 2)`` into each robot's body frame."""
    shape = (-1,) + (1,) * (points.ndim - 2)
    dx = points[..., 0] - pos[:, 0].reshape(shape)
    dy = points[..., 1] - pos[:, 1].reshape(shape)
    c = cos.reshape(shape)
    s = sin.reshape(shape)
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def _point_box_dist(p: np.ndarray, hx, hy) -> np.ndarray:
    dx = np.maximum(np.abs(p[..., 0]) - hx, 0.0)
    dy = np.maximum(np.abs(p[..., 1]) - hy, 0.0)
    return np.hypot(dx, dy)


def _point_seg_dist(pt: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    t = np.sum((pt - a) * ab, axis=-1) / np.maximum(denom, _EPS)
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(pt - proj, axis=-1)


def _seg_hits_box(a: np.ndarray, b: np.ndarray, hx, hy) -> np.ndarray:
    """Liang-Barsky slab test: does segment a->b touch the box [-hx,hx]x[-hy,hy]."""
    d = b - a
    t0 = np.zeros(a.shape[:-1])
    t1 = np.ones(a.shape[:-1])
    ok = np.ones(a.shape[:-1], dtype=bool)
    for axis, h in ((0, hx), (1, hy)):
        da = d[..., axis]
        pa = a[..., axis]
        flat = np.abs(da) < _EPS
        ok &= ~(flat & (np.abs(pa) > h))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-h - pa) / da
            tb = (h - pa) / da
        lo = np.where(flat, -np.inf, np.minimum(ta, tb))
        hi = np.where(flat, np.inf, np.maximum(ta, tb))
        t0 = np.maximum(t0, lo)
        t1 = np.minimum(t1, hi)
    return ok & (t0 <= t1)


def collide_batch(poses: np.ndarray, prims: BatchPrimitives, half_extents, margin: float = 0.0) -> np.ndarray:
    """Footprint collision for ``E`` robots against their own scenes.

    ``poses`` is ``(E, 3)`` of ``(x, y, yaw)``; returns a boolean ``(E,)``.
    """
    poses = np.asarray(poses, float)
    hx = half_extents[0] + margin
    hy = half_extents[1] + margin
    pos = poses[:, :2]
    cos, sin = np.cos(poses[:, 2]), np.sin(poses[:, 2])

    # capsules: segment-to-box distance against radius
    caps = prims.caps
    p = _to_local(caps[..., 0:2], pos, cos, sin)
    q = _to_local(caps[..., 2:4], pos, cos, sin)
    r = caps[..., 4]
    corners = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    dist = np.minimum(_point_box_dist(p, hx, hy), _point_box_dist(q, hx, hy))
    for c in corners:
        dist = np.minimum(dist, _point_seg_dist(np.broadcast_to(c, p.shape), p, q))
    dist = np.where(_seg_hits_box(p, q, hx, hy), 0.0, dist)
    hit = np.any((dist < r) | (dist <= 0.0), axis=1)

    # rectangles: separating axis test in the robot frame
    rc = _to_local(prims.rects, pos, cos, sin)  # (E, M, 4, 2)
    overlap = (rc[..., 0].min(-1) <= hx) & (rc[..., 0].max(-1) >= -hx)
    overlap &= (rc[..., 1].min(-1) <= hy) & (rc[..., 1].max(-1) >= -hy)
    for i in (0, 1):
        edge = rc[..., i + 1, :] - rc[..., i, :]
        axis = np.stack([-edge[..., 1], edge[..., 0]], axis=-1)
        axis /= np.maximum(np.linalg.norm(axis, axis=-1, keepdims=True), _EPS)
        proj_o = np.einsum("emkj,emj->emk", rc, axis)
        # robot box projection radius on this axis
        rad = hx * np.abs(axis[..., 0]) + hy * np.abs(axis[..., 1])
        overlap &= (proj_o.min(-1) <= rad) & (proj_o.max(-1) >= -rad)
    hit |= np.any(overlap, axis=1)

    # bounds
    world = corners @ np.stack([np.stack([cos, sin], -1), np.stack([-sin, cos], -1)], axis=1) + pos[:, None, :]
    out = (world < prims.lo[:, None, :]) | (world > prims.hi[:, None, :])
    hit |= np.any(out, axis=(1, 2))
    return hit


# ---------------------------------------------------------------------------
# ray casting


def ray_segments(prims: BatchPrimitives) -> tuple[np.ndarray, np.ndarray]:
    """Decompose batch primitives into ray-castable segments and circles.

    Returns ``segs (E, S, 4)`` and ``circles (E, C, 3)``.
    """
    e = len(prims)
    rects = prims.rects
    rect_segs = np.concatenate([rects, np.roll(rects, -1, axis=2)], axis=-1).reshape(e, -1, 4)
    caps = prims.caps
    p, q, r = caps[..., 0:2], caps[..., 2:4], caps[..., 4:5]
    d = q - p
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    normal = np.stack([-d[..., 1], d[..., 0]], axis=-1) / np.maximum(n, _EPS)
    side_a = np.concatenate([p + normal * r, q + normal * r], axis=-1)
    side_b = np.concatenate([p - normal * r, q - normal * r], axis=-1)
    # zero-length capsules are circles; their side segments collapse harmlessly
    lo, hi = prims.lo, prims.hi
    bounds = np.stack(
        [
            np.concatenate([lo, np.stack([hi[:, 0], lo[:, 1]], -1)], -1),
            np.concatenate([np.stack([hi[:, 0], lo[:, 1]], -1), hi], -1),
            np.concatenate([hi, np.stack([lo[:, 0], hi[:, 1]], -1)], -1),
            np.concatenate([np.stack([lo[:, 0], hi[:, 1]], -1), lo], -1),
        ],
        axis=1,
    )
    segs = np.concatenate([rect_segs, side_a, side_b, bounds], axis=1)
    circles = np.concatenate([np.concatenate([p, r], -1), np.concatenate([q, r], -1)], axis=1)
    return segs, circles


def cast_rays(origins: np.ndarray, dirs: np.ndarray, segs: np.ndarray, circles: np.ndarray) -> np.ndarray:
    """Distance along unit rays to the first hit; ``inf`` when nothing is hit.

    ``origins`` and ``dirs`` are ``(E, Q, 2)``.
    """
    ox, oy = origins[..., 0:1], origins[..., 1:2]  # (E, Q, 1)
    dx, dy = dirs[..., 0:1], dirs[..., 1:2]
    ax, ay = segs[:, None, :, 0], segs[:, None, :, 1]  # (E, 1, S)
    ex = segs[:, None, :, 2] - ax
    ey = segs[:, None, :, 3] - ay
    wx, wy = ax - ox, ay - oy
    denom = dx * ey - dy * ex
    safe = np.where(np.abs(denom) < _EPS, np.nan, denom)
    t = (wx * ey - wy * ex) / safe
    u = (wx * dy - wy * dx) / safe
    valid = (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    best = np.min(np.where(valid, t, np.inf), axis=-1)

    cx, cy, cr = circles[:, None, :, 0], circles[:, None, :, 1], circles[:, None, :, 2]
    fx, fy = ox - cx, oy - cy
    b = dx * fx + dy * fy
    c = fx * fx + fy * fy - cr * cr
    disc = b * b - c
    root = -b - np.sqrt(np.maximum(disc, 0.0))
    tc = np.where(c <= 0.0, 0.0, root)
    ok = (disc >= 0.0) & (tc >= 0.0) & (cr > 0.0)
    best = np.minimum(best, np.min(np.where(ok, tc, np.inf), axis=-1))
    return best
