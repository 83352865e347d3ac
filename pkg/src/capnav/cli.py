"""``capnav`` command line."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from capnav import distill, evalbench, report
from capnav.config import Config, ConfigError, dump_config, load_config
from capnav.dataset import check_terminal_flags, load_dataset, save_dataset
from capnav.distill import ExpertUnusableError
from capnav.rlexpert import load_expert, save_expert, train_expert
from capnav.student import load_student, save_student
from capnav.tensornn import FormatError, load_checkpoint
from capnav.world import TRAINING_CAPABILITIES, Capability, GenerationError, generate_scene

log = logging.getLogger("capnav")

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config(args) -> Config:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = Config.for_preset(getattr(args, "preset", None) or "desk")
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _experts(directory, capabilities=TRAINING_CAPABILITIES) -> dict:
    d = Path(directory)
    out = {}
    for cap in capabilities:
        path = d / f"expert_{cap.value}.ckpt"
        if path.exists():
            out[cap] = load_expert(path)
    if not out:
        raise FileNotFoundError(f"no expert_<capability>.ckpt files in {d}")
    return out


def _load_policy(path):
    spec, _ = load_checkpoint(path)
    kind = spec.get("kind")
    if kind == "expert":
        return load_expert(path)
    if kind == "student":
        return load_student(path)
    raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")


def cmd_gen_scene(args) -> int:
    cfg = _config(args)
    cap = Capability(args.capability)
    scene = generate_scene(cap, args.seed if args.seed is not None else cfg.seed, cfg.scene[cap])
    out = Path(args.out)
    out.write_bytes(scene.to_bytes())
    if args.svg:
        Path(args.svg).write_text(report.scene_svg(scene, title=f"{cap.value} seed {scene.seed}"))
    print(json.dumps({"scene": str(out), "statics": len(scene.statics), "dynamics": len(scene.dynamics),
                      "walls": len(scene.walls), "bounds": scene.bounds}))
    return EXIT_OK


def cmd_train_expert(args) -> int:
    cfg = _config(args)
    if args.updates is not None:
        cfg.ppo.updates = args.updates
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.toml").write_text(dump_config(cfg))

    def progress(row):
        log.info("update %d  return %.3f  SR %.2f  CR %.2f", row["update"], row["mean_return"], row["sr"], row["cr"])

    train_expert(args.capability, cfg, cfg.seed, out, progress)
    print(out / f"expert_{args.capability}.ckpt")
    return EXIT_OK


def cmd_collect_offline(args) -> int:
    cfg = _config(args)
    experts = _experts(args.experts)
    data = distill.collect_offline(experts, cfg, cfg.seed, args.steps)
    save_dataset(args.out, data)
    print(json.dumps(data.summary()))
    return EXIT_OK


def cmd_pretrain_student(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg.distill.pretrain_epochs = args.epochs
    data = load_dataset(args.data, cfg.sensing.rays, cfg.sensing.window)
    student, curve = distill.pretrain_student(data, cfg, cfg.seed)
    save_student(args.out, student)
    print(json.dumps({"checkpoint": args.out, "loss": curve}))
    return EXIT_OK


def cmd_iterate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.toml").write_text(dump_config(cfg))
    caps = [Capability(c) for c in args.capabilities] if args.capabilities else list(TRAINING_CAPABILITIES)
    if args.experts:
        experts = _experts(args.experts, caps)
    else:
        experts = {}
        for cap in caps:
            experts[cap], _ = train_expert(cap, cfg, cfg.seed, out)
    if args.data:
        data = load_dataset(args.data, cfg.sensing.rays, cfg.sensing.window)
    else:
        data = distill.collect_offline(experts, cfg, cfg.seed)
        save_dataset(out / "offline.capnav", data)
    if args.student:
        student = load_student(args.student)
    else:
        student, _ = distill.pretrain_student(data, cfg, cfg.seed)
        save_student(out / "student_pretrained.ckpt", student)
    balanced = None if args.balanced is None else args.balanced == "on"
    student, reports, agg = distill.iterate(student, experts, cfg, cfg.seed, data, out, balanced)
    save_student(out / "student.ckpt", student)
    save_dataset(out / "aggregate.capnav", agg)
    print(json.dumps({"iterations": len(reports), "reports": str(out / "iterations.jsonl")}))
    return EXIT_OK


def _results(args, record_paths: bool):
    cfg = _config(args)
    if args.episodes is not None:
        cfg.bench.episodes = args.episodes
    suite = evalbench.ensure_suite(args.suite, cfg, args.regenerate)
    results = {}
    for path in args.policy:
        name = Path(path).stem
        results[name] = evalbench.run_benchmark(_load_policy(path), suite, cfg, cfg.bench.episode_seed, record_paths)
    return suite, results


def cmd_eval(args) -> int:
    _, results = _results(args, False)
    out = Path(args.out) if args.out else Path(args.suite)
    out.mkdir(parents=True, exist_ok=True)
    path = report.write_results_csv(out / "results.csv", results)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    suite, results = _results(args, True)
    files = report.export_report(results, args.out, suite, figures=not args.no_figures)
    for f in files:
        print(f)
    return EXIT_OK


def cmd_inspect_dataset(args) -> int:
    data = load_dataset(args.path, args.rays)
    info = data.summary()
    problem = check_terminal_flags(data)
    info["terminal_flags"] = problem or "consistent"
    print(json.dumps(info, indent=1))
    return EXIT_OK if problem is None else EXIT_INPUT


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="capnav", description="Capability-balanced navigation distillation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--preset", choices=("desk", "paper"), default=None)
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    caps = [c.value for c in Capability]
    train_caps = [c.value for c in TRAINING_CAPABILITIES]

    sp = sub.add_parser("gen-scene", help="generate one scene blob (and optional SVG)")
    common(sp)
    sp.add_argument("--capability", choices=caps, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--svg")
    sp.set_defaults(func=cmd_gen_scene)

    sp = sub.add_parser("train-expert", help="PPO-train one privileged expert")
    common(sp)
    sp.add_argument("--capability", choices=train_caps, required=True)
    sp.add_argument("--updates", type=int)
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_train_expert)

    sp = sub.add_parser("collect-offline", help="success-filtered expert dataset")
    common(sp)
    sp.add_argument("--experts", required=True, help="directory holding expert_<capability>.ckpt")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_collect_offline)

    sp = sub.add_parser("pretrain-student", help="behavior cloning on an offline dataset")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pretrain_student)

    sp = sub.add_parser("iterate", help="capability-balanced DAgger loop")
    common(sp)
    sp.add_argument("--experts", help="directory of expert checkpoints (trained if omitted)")
    sp.add_argument("--data", help="offline dataset (collected if omitted)")
    sp.add_argument("--student", help="pretrained student (pretrained if omitted)")
    sp.add_argument("--capabilities", nargs="+", choices=train_caps)
    sp.add_argument("--balanced", choices=("on", "off"), default=None)
    sp.add_argument("--out", default="run")
    sp.set_defaults(func=cmd_iterate)

    for name, func, helptext in (("eval", cmd_eval, "benchmark policies, write results.csv"),
                                 ("report", cmd_report, "benchmark with trajectories, CSV + SVG + PNG")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--policy", nargs="+", required=True)
        sp.add_argument("--suite", required=True, help="directory holding benchmark_manifest.json")
        sp.add_argument("--episodes", type=int, help="episodes per scene when generating the suite")
        sp.add_argument("--regenerate", action="store_true", help="overwrite an existing manifest")
        sp.add_argument("--out", required=name == "report")
        if name == "report":
            sp.add_argument("--no-figures", action="store_true", help="skip matplotlib PNGs")
        sp.set_defaults(func=func)

    sp = sub.add_parser("inspect-dataset", help="validate and summarize a dataset file")
    sp.add_argument("path")
    sp.add_argument("--rays", type=int, default=32)
    sp.set_defaults(func=cmd_inspect_dataset)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, IsADirectoryError, GenerationError,
            ExpertUnusableError, ValueError) as exc:
        print(f"capnav {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"capnav {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
