"""Command-line entry point.

Exit codes: 0 success, 1 usage error (bad flags, unknown names), 2 runtime
failure (missing files, corrupt checkpoints, ...).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import PseudorecError
from .harness import (
    CONDITIONS,
    ExperimentConfig,
    recursion_coverage,
    run_seed,
    write_summary_csv,
)
from .profiles import PROFILES, get_profile, with_overrides


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _read_config_file(path: Path) -> dict:
    """key = value lines; '#' starts a comment; later keys win."""
    out = {}
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PseudorecError(f"{path}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


_OVERRIDE_KEYS = {
    "batch_size": int, "patience": int, "max_epochs": int, "gan_epochs": int,
    "num_tasks": int, "train_per_class": int, "valid_per_class": int,
    "test_per_class": int, "pseudo_train_size": int, "pseudo_valid_size": int,
    "gan_rehearsal_size": int, "rote_buffer_size": int, "fisher_samples": int,
    "lr_first_task": float, "lr_later_tasks": float, "ewc_lambda": float,
    "ewc_c10_lambda": float,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pseudorec",
                     description="Continual-learning condition runner.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one condition for one or more seeds")
    run.add_argument("--config", type=Path, help="key = value file; flags override it")
    run.add_argument("--profile", choices=sorted(PROFILES))
    run.add_argument("--condition")
    run.add_argument("--seed", type=int, action="append",
                     help="repeatable; defaults to 1")
    run.add_argument("--out", type=Path, default=Path("out"))
    run.add_argument("--grid-every", type=int, default=5)
    run.add_argument("--task-manifest", type=Path, action="append",
                     help="repeatable; one manifest per task for real data")
    for key, cast in sorted(_OVERRIDE_KEYS.items()):
        run.add_argument(f"--{key.replace('_', '-')}", type=cast, dest=key)

    report = sub.add_parser("report", help="aggregate metrics into summary.csv")
    report.add_argument("--out", type=Path, default=Path("out"))

    grid = sub.add_parser("gen-grid", help="sample a generator checkpoint to a PNG")
    grid.add_argument("--checkpoint", type=Path, required=True)
    grid.add_argument("--profile", choices=sorted(PROFILES), default="mini")
    grid.add_argument("--count", type=int, default=64)
    grid.add_argument("--seed", type=int, default=0)
    grid.add_argument("--to", type=Path, required=True)

    check = sub.add_parser("check", help="quick gradient self-check")
    check.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_run(parser, args) -> int:
    settings = {}
    if args.config:
        if not args.config.exists():
            raise PseudorecError(f"config file not found: {args.config}")
        settings = _read_config_file(args.config)
    profile_name = args.profile or settings.get("profile")
    condition = args.condition or settings.get("condition")
    if not profile_name:
        parser.error("a profile is required (--profile or config file)")
    if not condition:
        parser.error("a condition is required (--condition or config file)")
    if condition not in CONDITIONS:
        parser.error(f"unknown condition {condition!r}; choose from {', '.join(CONDITIONS)}")

    overrides = {}
    for key, cast in _OVERRIDE_KEYS.items():
        if key in settings:
            overrides[key] = cast(settings[key])
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    profile = get_profile(profile_name)
    if overrides:
        profile = with_overrides(profile, **overrides)

    seeds = args.seed or ([int(settings["seed"])] if "seed" in settings else [1])
    out = args.out if args.out != Path("out") or "out" not in settings else Path(settings["out"])
    for seed in seeds:
        result = run_seed(ExperimentConfig(profile=profile, condition=condition,
                                           seed=seed, out_dir=out,
                                           grid_every=args.grid_every,
                                           task_manifests=args.task_manifest))
        final = [r for r in result.rows if r["train_task"] == profile.num_tasks - 1]
        avg = sum(r["accuracy"] for r in final) / len(final)
        print(f"{condition} seed={seed}: final average accuracy {avg:.4f} "
              f"-> {result.run_dir}")
    return 0


def _cmd_report(args) -> int:
    reports = write_summary_csv(args.out)
    if not reports:
        raise PseudorecError(f"no finished runs under {args.out}")
    width = max(len(r.condition) for r in reports)
    for r in reports:
        print(f"{r.condition:<{width}}  final avg {r.final_avg_mean:.4f} "
              f"(std {r.final_avg_std:.4f})  first-task {r.first_task_final_mean:.4f} "
              f"over seeds {r.seeds}")
    print(f"wrote {Path(args.out) / 'summary.csv'}")
    return 0


def _cmd_gen_grid(args) -> int:
    from .checkpoint import load_checkpoint
    from .harness import emit_image_grid
    from .layers import build_generator
    from .replay import generate_pseudo_images

    if not args.checkpoint.exists():
        raise PseudorecError(f"checkpoint not found: {args.checkpoint}")
    profile = get_profile(args.profile)
    gen = build_generator(profile).build(seed=0)
    gen.load_state_arrays(load_checkpoint(args.checkpoint).tensors)
    images = generate_pseudo_images(gen, args.count, seed=args.seed)
    emit_image_grid(images, args.to)
    print(f"wrote {args.to}")
    return 0


def _cmd_check(args) -> int:
    import numpy as np

    from .autodiff import Tensor, finite_difference_check
    from .losses import cross_entropy
    from .layers import build_classifier
    from .profiles import get_profile

    net = build_classifier(get_profile("mini")).build(seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((4, 1, 16, 16)).astype(np.float64)
    t = np.zeros((4, 15), dtype=np.float64)
    t[np.arange(4), rng.integers(0, 15, 4)] = 1.0
    params = [(name, Tensor(p.data.astype(np.float64), requires_grad=True))
              for name, p in net.parameters()]
    for name, p in params:
        net.params[name] = p

    def loss_fn():
        return cross_entropy(net.forward(Tensor(x), train=False), Tensor(t))

    # f64 copies allow a small step and a tight kink threshold
    report = finite_difference_check(loss_fn, params, eps=1e-6, kink_tol=0.01,
                                     max_per_param=20, seed=args.seed)
    print(report.summary())
    return 0 if report.passed() else 2


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(parser, args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "gen-grid":
            return _cmd_gen_grid(args)
        return _cmd_check(args)
    except PseudorecError as e:
        print(f"pseudorec: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"pseudorec: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
