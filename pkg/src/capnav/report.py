"""Benchmark report files: results CSV, per-scene SVG overlays and PNG charts."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping, Optional
from xml.sax.saxutils import escape

import numpy as np

from capnav import geometry
from capnav.evalbench import BenchmarkSuite, Metrics
from capnav.world import Capsule, Circle, Obstacle, Rectangle, Scene

CSV_COLUMNS = ("policy", "scene", "episodes", "sr", "cr", "timeout_rate", "wtt", "mean_success_time")
OUTCOME_COLORS = {"reached": "#2a9d4b", "collided": "#d1495b", "timeout": "#e0a030"}


def _num(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6g}"


def write_results_csv(path, results: Mapping[str, Mapping[str, Metrics]]) -> Path:
    """One row per (policy, scene) in insertion order."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for policy, scenes in results.items():
            for scene, m in scenes.items():
                w.writerow([policy, scene, len(m.episodes), _num(m.sr), _num(m.cr), _num(m.timeout_rate),
                            _num(m.wtt), _num(m.mean_success_time)])
    return path


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in CSV_COLUMNS[2:]:
            r[k] = float(r[k])
    return rows


def _pt(p) -> str:
    return f"{p[0]:.4f},{p[1]:.4f}"


def _shape_svg(ob: Obstacle, style: str) -> str:
    s, c = ob.shape, ob.center
    if isinstance(s, Circle):
        return f'<circle cx="{c[0]:.4f}" cy="{c[1]:.4f}" r="{s.radius:.4f}" {style}/>'
    if isinstance(s, Rectangle):
        corners = geometry.rect_corners(np.asarray(c, float), np.asarray(s.half_extents, float), s.heading)
        return f'<polygon points="{" ".join(_pt(p) for p in corners)}" {style}/>'
    if isinstance(s, Capsule):
        a, b = s.endpoints(c)
        return (f'<line x1="{a[0]:.4f}" y1="{a[1]:.4f}" x2="{b[0]:.4f}" y2="{b[1]:.4f}" '
                f'stroke-width="{2 * s.radius:.4f}" stroke-linecap="round" class="obstacle" stroke="#555"/>')
    raise TypeError(type(s).__name__)


def scene_svg(scene: Scene, metrics: Optional[Metrics] = None, title: str = "", px_per_m: float = 24.0) -> str:
    """Scene outlines with one trajectory polyline per recorded episode."""
    x0, y0, x1, y1 = scene.bounds
    w, h = x1 - x0, y1 - y0
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * px_per_m:.0f}" height="{h * px_per_m:.0f}" '
        f'viewBox="{x0:.4f} {-y1:.4f} {w:.4f} {h:.4f}">',
        f"<title>{escape(title)}</title>",
        '<g transform="scale(1,-1)">',
        f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="#fafafa" stroke="#222" stroke-width="0.08"/>',
    ]
    static = 'class="obstacle" fill="#888" stroke="#333" stroke-width="0.03"'
    moving = 'class="obstacle dynamic" fill="#9ab" stroke="#345" stroke-width="0.03" stroke-dasharray="0.1 0.06"'
    out += [_shape_svg(o, static) for o in scene.statics]
    out += [_shape_svg(w_.as_rectangle(), static) for w_ in scene.walls]
    out += [_shape_svg(d.body, moving) for d in scene.dynamics]
    if metrics is not None:
        for k, ep in enumerate(metrics.episodes):
            if ep.path is None or len(ep.path) == 0:
                continue
            color = OUTCOME_COLORS.get(ep.outcome, "#000")
            pts = " ".join(_pt(p) for p in ep.path[:, :2])
            out.append(f'<polyline class="episode" data-episode="{k}" data-outcome="{ep.outcome}" points="{pts}" '
                       f'fill="none" stroke="{color}" stroke-width="0.05" stroke-opacity="0.7"/>')
            out.append(f'<circle cx="{ep.path[0, 0]:.4f}" cy="{ep.path[0, 1]:.4f}" r="0.08" fill="#222"/>')
    out += ["</g>", "</svg>"]
    return "\n".join(out) + "\n"


def plot_metrics(path, results: Mapping[str, Mapping[str, Metrics]]) -> Path:
    """Grouped bars of SR, CR and WTT per scene and policy."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    policies = list(results)
    scenes = list(dict.fromkeys(s for p in policies for s in results[p]))
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    width = 0.8 / max(len(policies), 1)
    x = np.arange(len(scenes))
    for j, pol in enumerate(policies):
        for ax, key in zip(axes, ("sr", "cr", "wtt")):
            vals = [getattr(results[pol][s], key) if s in results[pol] else np.nan for s in scenes]
            vals = [np.nan if math.isinf(v) else v for v in vals]
            ax.bar(x + j * width, vals, width, label=pol)
    for ax, label in zip(axes, ("success rate", "collision rate", "weighted travel time [s]")):
        ax.set_xticks(x + width * (len(policies) - 1) / 2)
        ax.set_xticklabels(scenes, rotation=20)
        ax.set_title(label)
    axes[0].set_ylim(0, 1)
    axes[1].set_ylim(0, 1)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_trajectories(path, scene: Scene, metrics: Metrics, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Circle as CirclePatch, Polygon

    x0, y0, x1, y1 = scene.bounds
    fig, ax = plt.subplots(figsize=(6, 6 * (y1 - y0) / (x1 - x0) + 0.4))
    obstacles = list(scene.statics) + [w.as_rectangle() for w in scene.walls] + [d.body for d in scene.dynamics]
    for ob in obstacles:
        s = ob.shape
        if isinstance(s, Circle):
            ax.add_patch(CirclePatch(ob.center, s.radius, color="0.5"))
        elif isinstance(s, Rectangle):
            corners = geometry.rect_corners(np.asarray(ob.center, float), np.asarray(s.half_extents, float), s.heading)
            ax.add_patch(Polygon(corners, color="0.5"))
        else:
            a, b = s.endpoints(ob.center)
            ax.plot([a[0], b[0]], [a[1], b[1]], color="0.5", lw=1, solid_capstyle="round")
            for p in (a, b):
                ax.add_patch(CirclePatch(p, s.radius, color="0.5"))
    for ep in metrics.episodes:
        if ep.path is not None:
            ax.plot(ep.path[:, 0], ep.path[:, 1], color=OUTCOME_COLORS.get(ep.outcome, "k"), lw=0.8, alpha=0.7)
    ax.set_xlim(x0, x1)
    ax.set_ylim(y0, y1)
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def export_report(results: Mapping[str, Mapping[str, Metrics]], out_dir, suite: Optional[BenchmarkSuite] = None,
                  figures: bool = True) -> list[Path]:
    """Write ``results.csv`` plus, given the suite, SVG overlays and PNG figures per scene."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [write_results_csv(out / "results.csv", results)]
    if suite is not None:
        for policy, scenes in results.items():
            for name, m in scenes.items():
                entry = suite[name]
                by_scene: dict[int, list] = {}
                for (k, _), ep in zip(entry.episodes, m.episodes):
                    by_scene.setdefault(k, []).append(ep)
                for k, eps in sorted(by_scene.items()):
                    sub = Metrics.from_records(eps)
                    stem = f"{policy}_{name}" + (f"_{k}" if len(entry.scenes) > 1 else "")
                    p = out / f"{stem}.svg"
                    p.write_text(scene_svg(entry.scenes[k], sub, f"{policy} / {name}"))
                    written.append(p)
                    if figures:
                        written.append(plot_trajectories(out / f"{stem}.png", entry.scenes[k], sub, f"{policy} / {name}"))
    if figures:
        written.append(plot_metrics(out / "metrics.png", results))
    return written
