"""Procedural scenes for the three capabilities plus the mixed benchmark scene."""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from capnav import geometry

ROBOT_HALF_EXTENTS = (0.35, 0.175)  # 0.70 x 0.35 m cuboid footprint
ROBOT_WIDTH = 2 * ROBOT_HALF_EXTENTS[1]
MAX_ATTEMPTS = 10_000


class GenerationError(RuntimeError):
    """Scene generation or episode sampling gave up."""


class Capability(str, enum.Enum):
    REACHING = "reaching"
    SQUEEZING = "squeezing"
    AVOIDING = "avoiding"
    MIXED = "mixed"

    @property
    def code(self) -> int:
        return list(Capability).index(self)

    @classmethod
    def from_code(cls, code: int) -> "Capability":
        return list(cls)[code]


TRAINING_CAPABILITIES = (Capability.REACHING, Capability.SQUEEZING, Capability.AVOIDING)


# ---------------------------------------------------------------------------
# shapes


@dataclass(frozen=True)
class Circle:
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("circle radius must be positive")

    @property
    def bounding_radius(self) -> float:
        return self.radius


@dataclass(frozen=True)
class Rectangle:
    half_extents: tuple[float, float]
    heading: float = 0.0

    def __post_init__(self):
        if not (self.half_extents[0] > 0 and self.half_extents[1] > 0):
            raise ValueError("rectangle half-extents must be positive")

    @property
    def bounding_radius(self) -> float:
        return math.hypot(*self.half_extents)


@dataclass(frozen=True)
class Capsule:
    """A pole footprint: segment of half-length ``half_length`` swept by ``radius``."""

    half_length: float
    heading: float
    radius: float

    def __post_init__(self):
        if not (self.radius > 0 and self.half_length >= 0):
            raise ValueError("capsule radius must be positive")

    @property
    def bounding_radius(self) -> float:
        return self.half_length + self.radius

    def endpoints(self, center) -> tuple[np.ndarray, np.ndarray]:
        d = self.half_length * np.array([math.cos(self.heading), math.sin(self.heading)])
        c = np.asarray(center, float)
        return c - d, c + d


Shape = Union[Circle, Rectangle, Capsule]


@dataclass(frozen=True)
class Obstacle:
    shape: Shape
    center: tuple[float, float]

    def moved_to(self, center) -> "Obstacle":
        return Obstacle(self.shape, (float(center[0]), float(center[1])))


@dataclass(frozen=True)
class DynamicObstacle:
    body: Obstacle
    speed: float
    waypoint: tuple[float, float]
    # waypoints are drawn inside this box; keeps the body within its zone
    region: tuple[float, float, float, float]


@dataclass(frozen=True)
class WallSegment:
    start: tuple[float, float]
    end: tuple[float, float]
    thickness: float

    def __post_init__(self):
        if self.start == self.end or not self.thickness > 0:
            raise ValueError("wall segment needs distinct endpoints and positive thickness")

    def as_rectangle(self) -> Obstacle:
        (x0, y0), (x1, y1) = self.start, self.end
        length = math.hypot(x1 - x0, y1 - y0)
        heading = math.atan2(y1 - y0, x1 - x0)
        return Obstacle(Rectangle((length / 2, self.thickness / 2), heading), ((x0 + x1) / 2, (y0 + y1) / 2))


@dataclass(frozen=True)
class Scene:
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    statics: tuple[Obstacle, ...]
    dynamics: tuple[DynamicObstacle, ...]
    walls: tuple[WallSegment, ...]
    capability: Capability
    seed: int
    # gap intervals (wall index, lo, hi) along each wall's axis; informational
    gaps: tuple[tuple[int, float, float], ...] = ()

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.bounds[:2], float)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.bounds[2:], float)

    def static_primitives(self) -> geometry.Primitives:
        return _compile(list(self.statics) + [w.as_rectangle() for w in self.walls], self.lo, self.hi)

    def dynamic_primitives(self) -> geometry.Primitives:
        return _compile([d.body for d in self.dynamics], self.lo, self.hi)

    def primitives(self) -> geometry.Primitives:
        return self.static_primitives().concat(self.dynamic_primitives())

    def to_bytes(self) -> bytes:
        return encode_scene(self)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Scene":
        return decode_scene(blob)


@dataclass(frozen=True)
class EpisodeSpec:
    scene: Scene
    start: tuple[float, float, float]  # x, y, yaw
    goal: tuple[float, float]
    timeout: float
    seed: int = 0


@dataclass
class SceneParams:
    width: float = 20.0
    height: float = 20.0
    density: float = 1.0
    n_statics: int = 0
    n_walls: int = 0
    gaps_per_wall: int = 2
    gap_min: float = 0.50
    gap_max: float = 0.90
    wall_thickness: float = 0.2
    n_dynamics: int = 0
    speed_min: float = 0.5
    speed_max: float = 1.5
    max_goal_dist: float = 10.0
    min_goal_dist: float = 1.0
    clearance: float = 0.05
    dynamic_clearance: float = 0.5
    timeout: float = 90.0

    def validate(self) -> list[str]:
        bad = []
        for name in ("width", "height", "wall_thickness", "max_goal_dist", "timeout"):
            if not getattr(self, name) > 0:
                bad.append(name)
        for name in ("density", "n_statics", "n_walls", "n_dynamics", "min_goal_dist", "clearance", "dynamic_clearance"):
            if getattr(self, name) < 0:
                bad.append(name)
        if self.gaps_per_wall < 1:
            bad.append("gaps_per_wall")
        if not (ROBOT_WIDTH <= self.gap_min <= self.gap_max):
            bad.append("gap_min")
        if not (0 < self.speed_min <= self.speed_max):
            bad.append("speed_min")
        if self.min_goal_dist > self.max_goal_dist:
            bad.append("min_goal_dist")
        if min(self.width, self.height) <= 2 * ROBOT_HALF_EXTENTS[0]:
            bad.append("width")
        return bad

    def count(self, n: int) -> int:
        return int(round(n * self.density))


def default_scene_params(capability: Capability) -> SceneParams:
    cap = Capability(capability)
    if cap is Capability.REACHING:
        return SceneParams(width=40.0, height=40.0, n_statics=12, max_goal_dist=30.0)
    if cap is Capability.SQUEEZING:
        return SceneParams(n_statics=20, n_walls=2, max_goal_dist=10.0)
    if cap is Capability.AVOIDING:
        return SceneParams(n_dynamics=8, max_goal_dist=10.0)
    return SceneParams(
        width=30.0,
        height=10.0,
        n_statics=6,
        n_walls=1,
        gaps_per_wall=1,
        gap_min=0.65,
        gap_max=0.90,
        n_dynamics=4,
        max_goal_dist=30.0,
        timeout=120.0,
    )


# ---------------------------------------------------------------------------
# compilation to geometry primitives


def _compile(obstacles: list[Obstacle], lo, hi) -> geometry.Primitives:
    caps, rects = [], []
    for ob in obstacles:
        s = ob.shape
        if isinstance(s, Circle):
            caps.append([ob.center[0], ob.center[1], ob.center[0], ob.center[1], s.radius])
        elif isinstance(s, Capsule):
            p, q = s.endpoints(ob.center)
            caps.append([p[0], p[1], q[0], q[1], s.radius])
        else:
            rects.append(geometry.rect_corners(ob.center, s.half_extents, s.heading))
    return geometry.Primitives(
        np.array(caps, float).reshape(-1, 5),
        np.array(rects, float).reshape(-1, 4, 2),
        np.asarray(lo, float),
        np.asarray(hi, float),
    )


def robot_collides(pose, prims: geometry.Primitives, margin: float = 0.0) -> bool:
    batch = geometry.stack([prims])
    return bool(geometry.collide_batch(np.asarray(pose, float)[None], batch, ROBOT_HALF_EXTENTS, margin)[0])


# ---------------------------------------------------------------------------
# generation


def _random_shape(rng: np.random.Generator, scale: float = 1.0) -> Shape:
    kind = rng.choice(3, p=[0.4, 0.4, 0.2])
    if kind == 0:
        return Circle(float(rng.uniform(0.2, 0.6) * scale))
    if kind == 1:
        return Rectangle(
            (float(rng.uniform(0.2, 0.8) * scale), float(rng.uniform(0.2, 0.8) * scale)),
            float(rng.uniform(-math.pi, math.pi)),
        )
    return Capsule(float(rng.uniform(0.5, 1.5) * scale), float(rng.uniform(-math.pi, math.pi)), float(rng.uniform(0.05, 0.12)))


class _Placer:
    """Rejection sampler sharing one attempt budget per scene."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.attempts = 0
        self.placed: list[tuple[np.ndarray, float]] = []

    def place(self, radius: float, box, constraint: str, accept=None, spacing: float = 0.0) -> np.ndarray:
        x0, y0, x1, y1 = box
        if x1 - x0 < 2 * radius or y1 - y0 < 2 * radius:
            raise GenerationError(f"{constraint}: obstacle does not fit inside its placement region")
        while self.attempts < MAX_ATTEMPTS:
            self.attempts += 1
            c = np.array([self.rng.uniform(x0 + radius, x1 - radius), self.rng.uniform(y0 + radius, y1 - radius)])
            if any(np.linalg.norm(c - pc) < radius + pr + spacing for pc, pr in self.placed):
                continue
            if accept is not None and not accept(c, radius):
                continue
            self.placed.append((c, radius))
            return c
        raise GenerationError(f"{constraint}: no valid placement after {MAX_ATTEMPTS} attempts")


def _wall_with_gaps(rng, placer: _Placer, y: float, x0: float, x1: float, params: SceneParams, n_gaps: int, axis: int):
    """Full-span wall along ``axis`` (0: horizontal at y, 1: vertical at x=y) broken by gaps."""
    gaps: list[tuple[float, float]] = []
    margin = 1.0
    while len(gaps) < n_gaps:
        placer.attempts += 1
        if placer.attempts > MAX_ATTEMPTS:
            raise GenerationError(f"wall gaps: could not place {n_gaps} non-overlapping gaps")
        w = float(rng.uniform(params.gap_min, params.gap_max))
        a = float(rng.uniform(x0 + margin, x1 - margin - w))
        if any(a < hi + margin and a + w > lo - margin for lo, hi in gaps):
            continue
        gaps.append((a, a + w))
    gaps.sort()
    cuts = [x0] + [v for g in gaps for v in g] + [x1]
    segs = []
    for s, e in zip(cuts[0::2], cuts[1::2]):
        if e - s <= 1e-9:
            continue
        if axis == 0:
            segs.append(WallSegment((s, y), (e, y), params.wall_thickness))
        else:
            segs.append(WallSegment((y, s), (y, e), params.wall_thickness))
    return segs, gaps


def generate_scene(capability, seed: int, params: Optional[SceneParams] = None) -> Scene:
    """Build the scene for ``capability``; a pure function of its arguments."""
    cap = Capability(capability)
    params = params or default_scene_params(cap)
    bad = params.validate()
    if bad:
        raise ValueError(f"invalid scene params: {', '.join(bad)}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, cap.code])
    w, h = params.width, params.height
    bounds = (-w / 2, -h / 2, w / 2, h / 2)
    placer = _Placer(rng)
    statics: list[Obstacle] = []
    dynamics: list[DynamicObstacle] = []
    walls: list[WallSegment] = []
    gaps: list[tuple[int, float, float]] = []

    def add_dynamics(n: int, box):
        for _ in range(n):
            shape = _random_shape(rng, scale=0.6)
            r = shape.bounding_radius
            c = placer.place(r, box, "dynamic obstacle in bounds")
            region = (box[0] + r, box[1] + r, box[2] - r, box[3] - r)
            wp = (float(rng.uniform(region[0], region[2])), float(rng.uniform(region[1], region[3])))
            speed = float(rng.uniform(params.speed_min, params.speed_max))
            dynamics.append(DynamicObstacle(Obstacle(shape, (float(c[0]), float(c[1]))), speed, wp, region))

    if cap is Capability.REACHING:
        for _ in range(params.count(params.n_statics)):
            shape = _random_shape(rng)
            c = placer.place(shape.bounding_radius, bounds, "static obstacle non-overlap", spacing=0.2)
            statics.append(Obstacle(shape, (float(c[0]), float(c[1]))))
    elif cap is Capability.SQUEEZING:
        n_walls = max(1, params.count(params.n_walls)) if params.density > 0 else 0
        ys = [bounds[1] + h * (i + 1) / (n_walls + 1) for i in range(n_walls)]
        for i, y in enumerate(ys):
            segs, gs = _wall_with_gaps(rng, placer, y, bounds[0], bounds[2], params, params.gaps_per_wall, axis=0)
            gaps.extend((i, a, b) for a, b in gs)
            walls.extend(segs)
        keep_out = params.wall_thickness / 2 + 0.8

        def clear_of_walls(c, r):
            return all(abs(c[1] - y) >= r + keep_out for y in ys)

        for _ in range(params.count(params.n_statics)):
            shape = Circle(float(rng.uniform(0.15, 0.3)))
            c = placer.place(shape.radius, bounds, "pillar clear of wall gaps", accept=clear_of_walls, spacing=0.1)
            statics.append(Obstacle(shape, (float(c[0]), float(c[1]))))
    elif cap is Capability.AVOIDING:
        add_dynamics(params.count(params.n_dynamics), bounds)
    else:
        third = w / 3
        zone_a = (bounds[0], bounds[1], bounds[0] + third, bounds[3])
        zone_b = (bounds[0] + third, bounds[1], bounds[0] + 2 * third, bounds[3])
        zone_c = (bounds[0] + 2 * third, bounds[1], bounds[2], bounds[3])
        if params.density > 0:
            x_wall = (zone_a[0] + zone_a[2]) / 2
            segs, gs = _wall_with_gaps(rng, placer, x_wall, bounds[1], bounds[3], params, params.gaps_per_wall, axis=1)
            gaps.extend((0, a, b) for a, b in gs)
            walls.extend(segs)
        for _ in range(params.count(params.n_statics)):
            shape = _random_shape(rng, scale=0.8)
            c = placer.place(shape.bounding_radius, zone_b, "clutter obstacle non-overlap", spacing=0.5)
            statics.append(Obstacle(shape, (float(c[0]), float(c[1]))))
        add_dynamics(params.count(params.n_dynamics), zone_c)

    return Scene(bounds, tuple(statics), tuple(dynamics), tuple(walls), cap, int(seed), tuple(gaps))


# ---------------------------------------------------------------------------
# episodes


def _free(pose, static_prims, dyn_prims, params: SceneParams) -> bool:
    if robot_collides(pose, static_prims, params.clearance):
        return False
    if dyn_prims.caps.shape[0] + dyn_prims.rects.shape[0] and robot_collides(pose, dyn_prims, params.dynamic_clearance):
        return False
    return True


def sample_episode(scene: Scene, seed: int, params: Optional[SceneParams] = None) -> EpisodeSpec:
    """Draw a collision-free start pose and goal for ``scene``."""
    params = params or default_scene_params(scene.capability)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 7919])
    static_prims = scene.static_primitives()
    dyn_prims = scene.dynamic_primitives()
    x0, y0, x1, y1 = scene.bounds
    m = ROBOT_HALF_EXTENTS[0] + params.clearance
    start_box = (x0 + m, y0 + m, x1 - m, y1 - m)
    goal_box = start_box
    if scene.capability is Capability.MIXED:
        band = 0.1 * (x1 - x0)
        start_box = (x0 + m, y0 + m, x0 + band, y1 - m)
        goal_box = (x1 - band, y0 + m, x1 - m, y1 - m)
    if start_box[0] >= start_box[2] or start_box[1] >= start_box[3]:
        raise GenerationError("episode sampling: bounds smaller than the robot footprint")

    for _ in range(MAX_ATTEMPTS):
        yaw = float(rng.uniform(-math.pi, math.pi))
        sx, sy = rng.uniform(start_box[0], start_box[2]), rng.uniform(start_box[1], start_box[3])
        if scene.capability is Capability.MIXED:
            gx, gy = rng.uniform(goal_box[0], goal_box[2]), rng.uniform(goal_box[1], goal_box[3])
        else:
            r = rng.uniform(params.min_goal_dist, params.max_goal_dist)
            th = rng.uniform(-math.pi, math.pi)
            gx, gy = sx + r * math.cos(th), sy + r * math.sin(th)
            if not (goal_box[0] <= gx <= goal_box[2] and goal_box[1] <= gy <= goal_box[3]):
                continue
        if math.hypot(gx - sx, gy - sy) > params.max_goal_dist:
            continue
        if not _free((sx, sy, yaw), static_prims, dyn_prims, params):
            continue
        if robot_collides((gx, gy, yaw), static_prims, params.clearance):
            continue
        return EpisodeSpec(scene, (float(sx), float(sy), yaw), (float(gx), float(gy)), params.timeout, int(seed))
    raise GenerationError(f"episode sampling: no collision-free start/goal after {MAX_ATTEMPTS} attempts")


def step_dynamics(scene: Scene, dt: float, rng: np.random.Generator) -> Scene:
    """Advance every dynamic obstacle toward its waypoint by ``speed * dt``."""
    if not scene.dynamics:
        return scene
    moved = []
    for d in scene.dynamics:
        c = np.array(d.body.center)
        wp = np.array(d.waypoint)
        gap = float(np.linalg.norm(wp - c))
        stride = d.speed * dt
        if gap <= stride:
            x0, y0, x1, y1 = d.region
            new_wp = (float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)))
            moved.append(replace(d, body=d.body.moved_to(wp), waypoint=new_wp))
        else:
            moved.append(replace(d, body=d.body.moved_to(c + (wp - c) * (stride / gap))))
    return replace(scene, dynamics=tuple(moved))


# ---------------------------------------------------------------------------
# binary scene blob

SCENE_MAGIC = b"CAPSCN01"
SCENE_VERSION = 1
_OB = struct.Struct("<B2d3d")


def _pack_obstacle(ob: Obstacle) -> bytes:
    s = ob.shape
    if isinstance(s, Circle):
        return _OB.pack(0, *ob.center, s.radius, 0.0, 0.0)
    if isinstance(s, Rectangle):
        return _OB.pack(1, *ob.center, s.half_extents[0], s.half_extents[1], s.heading)
    return _OB.pack(2, *ob.center, s.half_length, s.heading, s.radius)


def _unpack_obstacle(buf: bytes, off: int) -> tuple[Obstacle, int]:
    kind, cx, cy, a, b, c = _OB.unpack_from(buf, off)
    if kind == 0:
        shape: Shape = Circle(a)
    elif kind == 1:
        shape = Rectangle((a, b), c)
    elif kind == 2:
        shape = Capsule(a, b, c)
    else:
        raise ValueError(f"scene blob: unknown obstacle kind {kind} at byte {off}")
    return Obstacle(shape, (cx, cy)), off + _OB.size


def encode_scene(scene: Scene) -> bytes:
    out = [SCENE_MAGIC, struct.pack("<IBq4d4I", SCENE_VERSION, scene.capability.code, scene.seed, *scene.bounds,
                                    len(scene.statics), len(scene.dynamics), len(scene.walls), len(scene.gaps))]
    out += [_pack_obstacle(o) for o in scene.statics]
    for d in scene.dynamics:
        out.append(_pack_obstacle(d.body))
        out.append(struct.pack("<d2d4d", d.speed, *d.waypoint, *d.region))
    out += [struct.pack("<5d", *w.start, *w.end, w.thickness) for w in scene.walls]
    out += [struct.pack("<I2d", *g) for g in scene.gaps]
    return b"".join(out)


def decode_scene(blob: bytes) -> Scene:
    if blob[:8] != SCENE_MAGIC:
        raise ValueError("scene blob: bad magic at byte 0")
    head = struct.Struct("<IBq4d4I")
    version, code, seed, x0, y0, x1, y1, ns, nd, nw, ng = head.unpack_from(blob, 8)
    if version != SCENE_VERSION:
        raise ValueError(f"scene blob: unsupported version {version} at byte 8")
    off = 8 + head.size
    statics = []
    for _ in range(ns):
        ob, off = _unpack_obstacle(blob, off)
        statics.append(ob)
    dyn = []
    tail = struct.Struct("<d2d4d")
    for _ in range(nd):
        ob, off = _unpack_obstacle(blob, off)
        speed, wx, wy, r0, r1, r2, r3 = tail.unpack_from(blob, off)
        off += tail.size
        dyn.append(DynamicObstacle(ob, speed, (wx, wy), (r0, r1, r2, r3)))
    walls = []
    for _ in range(nw):
        a, b, c, d, t = struct.unpack_from("<5d", blob, off)
        off += 40
        walls.append(WallSegment((a, b), (c, d), t))
    gaps = []
    for _ in range(ng):
        i, a, b = struct.unpack_from("<I2d", blob, off)
        off += 20
        gaps.append((i, a, b))
    return Scene((x0, y0, x1, y1), tuple(statics), tuple(dyn), tuple(walls), Capability.from_code(code), seed, tuple(gaps))
