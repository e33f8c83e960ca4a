"""Command-line entry point: train, eval, baseline, export-defaults.

Runs are batch jobs: each creates a run directory holding the exact
configuration snapshot it used, a per-iteration metrics CSV, checkpoints,
and a manifest. Directories are never overwritten; without --force a
timestamp suffix is appended. All failures exit nonzero with a single-line
`error[<category>]: ...` diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import os
import signal
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, dump_config, load_config
from .errors import AeiError, ConfigError, UsageError
from .evaluate import evaluate
from .networks import load_networks, save_networks
from .training import BASELINE_KINDS, train


def _resolve_run_dir(out: str | None, force: bool) -> Path:
    base = Path(out) if out else Path("run")
    if base.exists() and not force:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        candidate = Path(f"{base}-{stamp}")
        k = 1
        while candidate.exists():
            candidate = Path(f"{base}-{stamp}-{k}")
            k += 1
        base = candidate
    base.mkdir(parents=True, exist_ok=True)
    (base / "checkpoints").mkdir(exist_ok=True)
    return base


def _write_manifest(run_dir: Path, config_text: str, seed: int, started: str,
                    finished: str | None = None):
    import numpy

    digest = hashlib.sha256(config_text.encode("utf-8")).hexdigest()
    lines = [
        f"aei_version = {__version__}",
        f"numpy_version = {numpy.__version__}",
        f"python_version = {sys.version.split()[0]}",
        f"seed = {seed}",
        f"config_sha256 = {digest}",
        f"started = {started}",
    ]
    if finished:
        lines.append(f"finished = {finished}")
    (run_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _apply_common_overrides(config: RunConfig, args) -> RunConfig:
    from dataclasses import replace

    if args.seed is not None:
        config = replace(config, seed=args.seed)
    workers = args.workers
    if workers is None and os.environ.get("AEI_WORKERS"):
        try:
            workers = int(os.environ["AEI_WORKERS"])
        except ValueError:
            raise ConfigError(
                f"AEI_WORKERS must be an integer, got '{os.environ['AEI_WORKERS']}'"
            ) from None
    if workers is not None:
        config = replace(config, workers=workers)
    config.validate()
    return config


class _StopRequest:
    """Flips on SIGINT/SIGTERM; restores the previous handlers on exit."""

    def __init__(self):
        self.stop = False
        self._saved = {}

    def __enter__(self):
        for sig in (signal.SIGINT, signal.SIGTERM):
            self._saved[sig] = signal.signal(sig, self._handle)
        return lambda: self.stop

    def _handle(self, signum, frame):
        self.stop = True

    def __exit__(self, *exc):
        for sig, handler in self._saved.items():
            signal.signal(sig, handler)
        return False


def _run_training(config: RunConfig, run_dir: Path, baseline_kind: str | None):
    snapshot = dump_config(config)
    (run_dir / "config.cfg").write_text(snapshot, encoding="utf-8")
    started = _dt.datetime.now().isoformat(timespec="seconds")
    _write_manifest(run_dir, snapshot, config.seed, started)

    def checkpoint_cb(iteration, result, final=False):
        name = "ckpt_final.bin" if final else f"ckpt_{iteration:06d}.bin"
        save_networks(
            run_dir / "checkpoints" / name,
            result.id_params, result.pi_params, result.vf_params,
            result.dims, config.n_joints, iteration,
            baseline_kind=baseline_kind,
        )

    with _StopRequest() as stop_flag:
        result = train(
            config,
            csv_path=run_dir / "train.csv",
            checkpoint_cb=checkpoint_cb,
            stop_flag=stop_flag,
            baseline_kind=baseline_kind,
        )
    finished = _dt.datetime.now().isoformat(timespec="seconds")
    _write_manifest(run_dir, snapshot, config.seed, started, finished)
    return result


def cmd_train(args) -> int:
    config = load_config(args.config, args.overrides)
    config = _apply_common_overrides(config, args)
    run_dir = _resolve_run_dir(args.out, args.force)
    print(f"training -> {run_dir}")
    result = _run_training(config, run_dir, baseline_kind=None)
    if result.interrupted:
        print("interrupted; checkpoint written")
        return 130
    print(f"done: {len(result.history)} iterations, "
          f"final mean_r_id = {result.history[-1]['mean_r_id']:.4f}")
    return 0


def cmd_baseline(args) -> int:
    if args.kind not in BASELINE_KINDS:
        raise UsageError(
            f"unknown baseline kind '{args.kind}' (expected one of {', '.join(BASELINE_KINDS)})"
        )
    config = load_config(args.config, args.overrides)
    config = _apply_common_overrides(config, args)
    run_dir = _resolve_run_dir(args.out, args.force)
    print(f"baseline '{args.kind}' -> {run_dir}")
    result = _run_training(config, run_dir, baseline_kind=args.kind)
    if result.interrupted:
        print("interrupted; checkpoint written")
        return 130
    report = evaluate(
        None, result.id_params, config, args.episodes, result.dims,
        baseline_kind=args.kind,
    )
    report_path = run_dir / "eval_report.csv"
    report_path.write_text(report.to_csv_text(), encoding="utf-8")
    print(report.summary_text())
    print(f"report -> {report_path}")
    return 0


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise UsageError(f"n_episodes must be >= 1, got {args.episodes}")
    config = load_config(args.config, args.overrides)
    config = _apply_common_overrides(config, args)
    id_params, pi_params, vf_params, dims, meta = load_networks(args.checkpoint)
    if meta["n_joints"] != config.n_joints:
        raise ConfigError(
            f"checkpoint was trained with n_joints = {meta['n_joints']}, "
            f"config has {config.n_joints}"
        )
    report = evaluate(
        pi_params, id_params, config, args.episodes, dims,
        baseline_kind=meta["baseline"],
    )
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix("").parent / (
        Path(args.checkpoint).stem + "_eval.csv"
    )
    out.write_text(report.to_csv_text(), encoding="utf-8")
    print(report.summary_text())
    print(f"report -> {out}")
    return 0


def cmd_export_defaults(args) -> int:
    text = dump_config(RunConfig())
    try:
        Path(args.path).write_text(text, encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot write '{args.path}': {e.strerror}") from None
    print(f"defaults -> {args.path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aei",
        description="Active embodiment identification on randomized planar chains.",
    )
    parser.add_argument("--version", action="version", version=f"aei {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="configuration overrides")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--out", default=None, help="output directory / file")
        p.add_argument("--force", action="store_true",
                       help="reuse the output directory instead of suffixing it")
        p.add_argument("--workers", type=int, default=None,
                       help="worker hint (AEI_WORKERS fallback); the vectorized "
                            "engine gives identical results for any value")

    p_train = sub.add_parser("train", help="train policy, critic and identification nets")
    p_train.add_argument("config", help="path to run configuration file")
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on fresh embodiments")
    p_eval.add_argument("checkpoint", help="checkpoint file")
    p_eval.add_argument("config", help="path to run configuration file")
    p_eval.add_argument("episodes", type=int, help="number of evaluation episodes")
    add_common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_base = sub.add_parser("baseline",
                            help="train only the identification net under a fixed policy")
    p_base.add_argument("kind", help=f"one of {', '.join(BASELINE_KINDS)}")
    p_base.add_argument("config", help="path to run configuration file")
    p_base.add_argument("episodes", type=int, help="evaluation episodes after training")
    add_common(p_base)
    p_base.set_defaults(func=cmd_baseline)

    p_exp = sub.add_parser("export-defaults", help="write the default configuration")
    p_exp.add_argument("path", help="destination file")
    p_exp.set_defaults(func=cmd_export_defaults)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AeiError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
