"""Independent reference computations used by the tests.

None of these reuse the library's geometry kernels: shapes are handled
through point-membership tests on densely sampled boundaries.
"""
import math

import numpy as np

from capnav.world import ROBOT_HALF_EXTENTS, Capsule, Circle, Obstacle, Rectangle, Scene

SPACING = 5e-4


def _rot(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def _rect_outline(center, half, yaw, spacing=SPACING):
    hx, hy = half
    corners = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    pts = [corners]
    for a, b in zip(corners, np.roll(corners, -1, axis=0)):
        n = max(2, int(math.ceil(np.linalg.norm(b - a) / spacing)) + 1)
        t = np.linspace(0.0, 1.0, n)[:, None]
        pts.append(a + t * (b - a))
    local = np.concatenate(pts)
    return local @ _rot(yaw).T + np.asarray(center, float)


def _circle_outline(center, r, spacing=SPACING):
    n = max(16, int(math.ceil(2 * math.pi * r / spacing)))
    th = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    return np.asarray(center, float) + r * np.stack([np.cos(th), np.sin(th)], 1)


def _capsule_outline(center, cap: Capsule, spacing=SPACING):
    a, b = cap.endpoints(center)
    d = b - a
    length = np.linalg.norm(d)
    normal = np.array([-math.sin(cap.heading), math.cos(cap.heading)])
    pts = [_circle_outline(a, cap.radius, spacing), _circle_outline(b, cap.radius, spacing)]
    if length > 0:
        n = max(2, int(math.ceil(length / spacing)) + 1)
        t = np.linspace(0.0, 1.0, n)[:, None]
        line = a + t * d
        pts += [line + cap.radius * normal, line - cap.radius * normal]
    return np.concatenate(pts)


def outline(ob: Obstacle, spacing=SPACING) -> np.ndarray:
    s = ob.shape
    if isinstance(s, Circle):
        return _circle_outline(ob.center, s.radius, spacing)
    if isinstance(s, Rectangle):
        return _rect_outline(ob.center, s.half_extents, s.heading, spacing)
    return _capsule_outline(ob.center, s, spacing)


def inside(ob: Obstacle, pts: np.ndarray) -> np.ndarray:
    """Closed point membership."""
    s = ob.shape
    d = pts - np.asarray(ob.center, float)
    if isinstance(s, Circle):
        return np.einsum("ij,ij->i", d, d) <= s.radius ** 2
    if isinstance(s, Rectangle):
        loc = d @ _rot(s.heading)
        return (np.abs(loc[:, 0]) <= s.half_extents[0]) & (np.abs(loc[:, 1]) <= s.half_extents[1])
    a, b = s.endpoints(ob.center)
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros(len(pts)) if denom == 0 else np.clip((pts - a) @ ab / denom, 0.0, 1.0)
    near = a + t[:, None] * ab
    e = pts - near
    return np.einsum("ij,ij->i", e, e) <= s.radius ** 2


def robot_obstacle(pose) -> Obstacle:
    return Obstacle(Rectangle(ROBOT_HALF_EXTENTS, float(pose[2])), (float(pose[0]), float(pose[1])))


def all_obstacles(scene: Scene) -> list[Obstacle]:
    return list(scene.statics) + [w.as_rectangle() for w in scene.walls] + [d.body for d in scene.dynamics]


def sampled_collision(pose, scene: Scene, spacing=SPACING) -> bool:
    """Collision by sampling both boundaries: robot points in obstacles,
    obstacle points in the robot, robot points out of bounds."""
    robot = robot_obstacle(pose)
    rpts = outline(robot, spacing)
    x0, y0, x1, y1 = scene.bounds
    if np.any((rpts[:, 0] < x0) | (rpts[:, 0] > x1) | (rpts[:, 1] < y0) | (rpts[:, 1] > y1)):
        return True
    reach = math.hypot(*ROBOT_HALF_EXTENTS)
    for ob in all_obstacles(scene):
        if math.dist(ob.center, pose[:2]) > reach + ob.shape.bounding_radius + 1e-9:
            continue
        if inside(ob, rpts).any() or inside(robot, outline(ob, spacing)).any():
            return True
    return False


def near_boundary(pose, scene: Scene, tol=1e-6) -> bool:
    """True when a translation or rotation of size ``tol`` flips the sampled answer."""
    base = sampled_collision(pose, scene)
    for dx, dy, dth in [(tol, 0, 0), (-tol, 0, 0), (0, tol, 0), (0, -tol, 0), (0, 0, tol), (0, 0, -tol),
                        (tol, tol, 0), (-tol, -tol, 0), (tol, -tol, 0), (-tol, tol, 0)]:
        p = np.array(pose, float) + np.array([dx, dy, dth])
        if sampled_collision(p, scene) != base:
            return True
    return False


def march_ray(origin, direction, scene: Scene, max_range=4.0, step=2e-3) -> float:
    """First-hit distance by marching with point membership and bisection refinement."""
    obs = all_obstacles(scene)
    x0, y0, x1, y1 = scene.bounds
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)

    def hit(t):
        p = (o + t * d)[None]
        if not (x0 <= p[0, 0] <= x1 and y0 <= p[0, 1] <= y1):
            return True
        return any(inside(ob, p)[0] for ob in obs)

    if hit(0.0):
        return 0.0
    ts = np.arange(step, max_range + step, step)
    pts = o + ts[:, None] * d
    blocked = (pts[:, 0] < x0) | (pts[:, 0] > x1) | (pts[:, 1] < y0) | (pts[:, 1] > y1)
    for ob in obs:
        blocked |= inside(ob, pts)
    first = np.flatnonzero(blocked)
    if first.size:
        k = first[0]
        lo, hi = (ts[k - 1] if k else 0.0), ts[k]
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            lo, hi = (lo, mid) if hit(mid) else (mid, hi)
        return hi
    return math.inf


def wall_gaps(scene: Scene, wall_y: float, thickness: float, step=1e-3) -> list[float]:
    """Widths of free intervals along a horizontal wall line, scanning the line's centre."""
    x0, _, x1, _ = scene.bounds
    xs = np.arange(x0 + step, x1 - step / 2, step)
    pts = np.stack([xs, np.full_like(xs, wall_y)], 1)
    blocked = np.zeros(len(xs), bool)
    for w in scene.walls:
        blocked |= inside(w.as_rectangle(), pts)
    gaps, start = [], None
    for i, b in enumerate(blocked):
        if not b and start is None:
            start = xs[i]
        elif b and start is not None:
            gaps.append(xs[i] - start)
            start = None
    return gaps


def random_shape_obstacle(rng: np.random.Generator, near) -> Obstacle:
    """A random circle, rectangle, capsule or wall-like slab within ~1 m of ``near``."""
    c = (float(near[0] + rng.uniform(-1.0, 1.0)), float(near[1] + rng.uniform(-1.0, 1.0)))
    kind = rng.integers(4)
    if kind == 0:
        return Obstacle(Circle(float(rng.uniform(0.05, 0.6))), c)
    if kind == 1:
        half = (float(rng.uniform(0.05, 0.6)), float(rng.uniform(0.05, 0.6)))
        return Obstacle(Rectangle(half, float(rng.uniform(-math.pi, math.pi))), c)
    if kind == 2:
        return Obstacle(Capsule(float(rng.uniform(0.0, 0.5)), float(rng.uniform(-math.pi, math.pi)),
                                float(rng.uniform(0.03, 0.3))), c)
    return Obstacle(Rectangle((float(rng.uniform(0.5, 2.0)), 0.1), float(rng.uniform(-math.pi, math.pi))), c)


def random_collision_case(rng: np.random.Generator, capability) -> tuple[np.ndarray, Scene]:
    """A pose and a small scene crowded around it; sometimes near the bounds."""
    pose = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-math.pi, math.pi)])
    obs = tuple(random_shape_obstacle(rng, pose[:2]) for _ in range(rng.integers(1, 4)))
    half = float(rng.uniform(2.2, 4.0))
    return pose, Scene((-half, -half, half, half), obs, (), (), capability, 0)


def collision_audit(n: int, seed: int, capability) -> tuple[int, int, int]:
    """Compare the library's batched collision test with the sampling oracle
    on ``n`` random cases. Returns ``(collisions, boundary_cases, mismatches)``;
    a disagreement counts as a mismatch only if it survives 1e-6 perturbations."""
    from capnav import geometry

    rng = np.random.default_rng(seed)
    cases = [random_collision_case(rng, capability) for _ in range(n)]
    poses = np.stack([p for p, _ in cases])
    batch = geometry.stack([s.primitives() for _, s in cases])
    lib = geometry.collide_batch(poses, batch, ROBOT_HALF_EXTENTS)
    hits = boundary = bad = 0
    for (pose, scene), got in zip(cases, lib):
        want = sampled_collision(pose, scene)
        hits += want
        if bool(got) != want:
            if near_boundary(pose, scene):
                boundary += 1
            else:
                bad += 1
    return hits, boundary, bad
