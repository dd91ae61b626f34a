"""Operator surface: generate, label, train, evaluate, or run the pipeline.

Exit codes: 0 success, 2 usage, 3 validation (bad config, unreadable or
invalid files), 4 runtime failure.  Every command is deterministic under
fixed seeds; the pipeline manifest records a sha256 for each durable
artifact (logs that contain wall-clock times are listed as volatile).
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, load_config
from .inference import LearnedScorer, NoFeasiblePath, PriorScorer, viterbi_label
from .policies import PolicyStack, init_low_level
from .rollout import evaluate
from .simworld import FAMILIES, GenerationError, check_success, make_spec, scripted_expert
from .trajectory import (
    Demonstration,
    ParseError,
    ValidationError,
    downsample,
    load_demos,
    save_demos,
)
from .training import EmSettings, em_loop, train_policies

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for flag, name in (
        ("seed", "seed"),
        ("family", "family"),
        ("episodes", "eval_episodes"),
        ("stride", "stride"),
        ("out", "out_dir"),
        ("demos", "demos_path"),
        ("checkpoint", "checkpoint_path"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "exact", False):
        overrides["infer_mode"] = "exact"
    if getattr(args, "beam", None) is not None:
        overrides["infer_mode"] = "beam"
        overrides["beam_width"] = args.beam
    cfg = apply_overrides(cfg, **overrides)
    cfg.validate()
    return cfg


def _gen_demos(cfg: RunConfig, count: int, out_path: Path) -> list:
    spec = make_spec(cfg.family, cfg.tolerances)
    demos = []
    for i in range(count):
        demo = scripted_expert(spec, seed=cfg.seed + i, config=cfg.sim)
        report = check_success(spec, demo)
        if not report.success:
            raise GenerationError(f"seed {cfg.seed + i}: expert demo failed its checker")
        demos.append(demo)
    save_demos(demos, out_path, label_field="gt")
    return demos


def cmd_gen_demos(args) -> int:
    cfg = _build_config(args)
    count = args.count if args.count is not None else cfg.demo_count
    out_path = Path(cfg.out_dir) / "demos.demo"
    demos = _gen_demos(cfg, count, out_path)
    if args.downsample:
        demos = [downsample(d, min(args.downsample, d.horizon)) for d in demos]
        save_demos(demos, out_path, label_field="gt")
    mean_h = float(np.mean([d.horizon for d in demos]))
    print(f"wrote {len(demos)} {cfg.family} demonstrations to {out_path}")
    print(f"mean horizon {mean_h:.1f}; success check all-true")
    return EXIT_OK


def _label_switches(labels) -> int:
    return sum(
        1
        for prev, cur in zip(labels[:-1], labels[1:])
        if prev.astuple() != cur.astuple()
    )


def cmd_label(args) -> int:
    cfg = _build_config(args)
    if not cfg.demos_path:
        raise ConfigError("label needs --demos (or [paths] demos in the config)")
    demos = load_demos(cfg.demos_path)
    if args.downsample:
        demos = [downsample(d, min(args.downsample, d.horizon)) for d in demos]
    horizon = max(d.horizon for d in demos)
    if cfg.checkpoint_path:
        stack = PolicyStack.load(cfg.checkpoint_path, cfg.policy)
        scorer = LearnedScorer(stack, stride=cfg.resolve_stride(horizon))
    else:
        stack = PolicyStack(demos[0].n, cfg.policy, seed=cfg.seed)
        init_low_level(stack, demos, iterations=cfg.init_iterations,
                       batch=cfg.init_batch, lr=cfg.init_lr, seed=cfg.seed)
        scorer = PriorScorer(cfg.policy, low=stack, stride=cfg.resolve_stride(horizon))
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labeled = []
    report_lines = []
    mode = cfg.resolve_mode(horizon)
    for idx, demo in enumerate(demos):
        labels, score = viterbi_label(demo, scorer, mode=mode, beam_width=cfg.beam_width)
        labeled.append(
            Demonstration(demo.frames, demo.task_id, demo.ground_truth, tuple(labels))
        )
        report_lines.append(
            f"demo={idx} log_score={score:.6f} label_switches={_label_switches(labels)}"
        )
    out_path = out_dir / "labeled.demo"
    save_demos(labeled, out_path, label_field="both")
    (out_dir / "label_report.txt").write_text("\n".join(report_lines) + "\n", encoding="utf-8")
    print(f"labeled {len(labeled)} demos -> {out_path} (scorer: "
          f"{'learned' if cfg.checkpoint_path else 'prior'}, mode {mode})")
    return EXIT_OK


def _pick_labels(demo: Demonstration, source: str):
    if source == "gt":
        labels = demo.ground_truth
    elif source == "pl":
        labels = demo.pseudo_labels
    else:
        labels = demo.pseudo_labels if demo.pseudo_labels is not None else demo.ground_truth
    if labels is None:
        raise ValidationError(f"demo '{demo.task_id}' carries no {source} labels")
    return labels


def cmd_train(args) -> int:
    cfg = _build_config(args)
    if not cfg.demos_path:
        raise ConfigError("train needs --demos (or [paths] demos in the config)")
    demos = load_demos(cfg.demos_path)
    labeled = [(d, _pick_labels(d, args.labels)) for d in demos]
    stack = (
        PolicyStack.load(cfg.checkpoint_path, cfg.policy)
        if cfg.checkpoint_path
        else PolicyStack(demos[0].n, cfg.policy, seed=cfg.seed)
    )
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_lines: list = []
    reports = train_policies(stack, labeled, cfg.train_settings(), seed=cfg.seed,
                             log_lines=log_lines)
    ckpt = out_dir / "policy.ckpt"
    stack.save(ckpt)
    (out_dir / "train.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    print(f"trained {cfg.train_iterations} iterations on {len(labeled)} demos -> {ckpt}")
    print(f"final loss {reports[-1].total:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    if not cfg.checkpoint_path:
        raise ConfigError("eval needs --checkpoint (or [paths] checkpoint in the config)")
    stack = PolicyStack.load(cfg.checkpoint_path, cfg.policy)
    spec = make_spec(cfg.family, cfg.tolerances)
    if stack.n != spec.n:
        raise ValidationError(
            f"checkpoint built for n={stack.n}, family '{cfg.family}' has n={spec.n}"
        )
    report = evaluate(stack, spec, cfg.sim, cfg.eval_episodes, cfg.eval_seeds,
                      cfg.step_cap, cfg.check_every)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "eval_report.txt"
    out_path.write_text(report.as_text(), encoding="utf-8")
    print(report.as_text().splitlines()[0])
    agg = (f"mean_success={report.mean_success:.4f} std={report.std_success:.4f}"
           f" mean_len={report.mean_length:.2f}")
    print(agg)
    print(f"report -> {out_path}")
    return EXIT_OK


def run_pipeline_once(cfg: RunConfig, demos, out_dir: Path, log_lines: list):
    """Downsample -> init+EM -> final train -> eval for one demo set."""
    train_demos = [downsample(d, min(cfg.downsample_len, d.horizon)) for d in demos]
    horizon = max(d.horizon for d in train_demos)
    result = em_loop(
        train_demos,
        cfg.policy,
        cfg.train_settings(cfg.em_inner_iterations),
        cfg.em_settings(horizon),
        seed=cfg.seed,
        log_lines=log_lines,
    )
    train_policies(
        result.stack,
        list(zip(train_demos, result.labels)),
        cfg.train_settings(),
        seed=cfg.seed + 1000,
        log_lines=log_lines,
    )
    labeled = [
        Demonstration(d.frames, d.task_id, d.ground_truth, tuple(labels))
        for d, labels in zip(train_demos, result.labels)
    ]
    save_demos(labeled, out_dir / "labeled.demo", label_field="both")
    result.stack.save(out_dir / "policy.ckpt")
    spec = make_spec(cfg.family, cfg.tolerances)
    report = evaluate(result.stack, spec, cfg.sim, cfg.eval_episodes, cfg.eval_seeds,
                      cfg.step_cap, cfg.check_every)
    (out_dir / "eval_report.txt").write_text(report.as_text(), encoding="utf-8")
    return result, report


def cmd_pipeline(args) -> int:
    cfg = _build_config(args)
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    demos_path = out_root / "demos.demo"
    if cfg.demos_path:
        demos = load_demos(cfg.demos_path)
        save_demos(demos, demos_path, label_field="gt")
    else:
        demos = _gen_demos(cfg, cfg.demo_count, demos_path)

    counts = list(cfg.sweep) if cfg.sweep else [cfg.demo_count]
    if max(counts) > len(demos):
        raise ConfigError(f"sweep needs {max(counts)} demos, only {len(demos)} available")

    curve_rows = []
    artifacts = [("demos", demos_path)]
    volatile: list = []
    for count in counts:
        sub = out_root / f"run_{count:03d}"
        sub.mkdir(parents=True, exist_ok=True)
        log_lines: list = []
        run_cfg = replace(cfg, demo_count=count)
        _, report = run_pipeline_once(run_cfg, demos[:count], sub, log_lines)
        (sub / "train.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
        curve_rows.append(
            f"{count},{report.mean_success:.4f},{report.std_success:.4f},"
            f"{report.mean_length:.2f}"
        )
        artifacts += [
            (f"labeled_{count}", sub / "labeled.demo"),
            (f"checkpoint_{count}", sub / "policy.ckpt"),
            (f"eval_report_{count}", sub / "eval_report.txt"),
        ]
        volatile.append((f"train_log_{count}", sub / "train.log"))
        print(f"demo_count={count}: {curve_rows[-1]}")

    curve_path = out_root / "curve.csv"
    curve_path.write_text(
        "demo_count,mean_success,std_success,mean_len\n" + "\n".join(curve_rows) + "\n",
        encoding="utf-8",
    )
    artifacts.append(("curve", curve_path))

    manifest = ["hierimit-manifest v1", f"family {cfg.family}", f"seed {cfg.seed}"]
    for name, path in artifacts:
        manifest.append(f"artifact {name} {path.relative_to(out_root)} {_sha256(path)}")
    for name, path in volatile:
        manifest.append(f"volatile {name} {path.relative_to(out_root)}")
    (out_root / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    print(f"manifest -> {out_root / 'manifest.txt'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hierimit",
        description="Learn hierarchical manipulation policies from pose demonstrations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="sectioned key=value file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--family", type=str, default=None, choices=FAMILIES)
        p.add_argument("--demos", type=str, default=None, help="demonstration file or dir")
        p.add_argument("--checkpoint", type=str, default=None)
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--stride", type=int, default=None, help="way-point candidate stride")
        mode = p.add_mutually_exclusive_group()
        mode.add_argument("--exact", action="store_true", help="exact forward pass")
        mode.add_argument("--beam", type=int, default=None, help="beam width")

    p = sub.add_parser("gen-demos", help="generate scripted-expert demonstrations")
    common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--downsample", type=int, default=0)
    p.set_defaults(fn=cmd_gen_demos)

    p = sub.add_parser("label", help="infer pseudo-labels for demonstrations")
    common(p)
    p.add_argument("--downsample", type=int, default=0)
    p.set_defaults(fn=cmd_label)

    p = sub.add_parser("train", help="train the policy stack on labeled demos")
    common(p)
    p.add_argument("--labels", choices=("auto", "gt", "pl"), default="auto")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    common(p)
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pipeline", help="gen -> init -> EM -> train -> eval")
    common(p)
    p.set_defaults(fn=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except (ConfigError, ParseError, ValidationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (GenerationError, NoFeasiblePath, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
