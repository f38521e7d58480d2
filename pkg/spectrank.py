#!/usr/bin/env python3
"""
spectrank
CLI for rank-shrinking multi-task adapter experiments on a synthetic benchmark.

Usage:
    python spectrank.py train --config run.yaml
    python spectrank.py report --run-dir runs/abc123 --svg
"""

import argparse
import logging
import math
import sys
from typing import List, Optional

from ablation import ablate, parse_switches
from bench import DivergenceError, export_scenes
from config import Config, ConfigError, DataConfig, load_run_config
from report import MissingArtifactsError, report
from trainer import evaluate_checkpoint, fit_single_task_references, train

logger = logging.getLogger('spectrank')

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_MISSING = 3


def format_delta(value: float) -> str:
    """Format delta_m in percent, or n/a when no reference was available."""
    return "n/a" if math.isnan(value) else f"{value:+.2f}%"


def print_metrics(metrics: dict, trainable: int, adapter: int, delta: float) -> None:
    print("\n📊 Metrics")
    print("-" * 60)
    for name, value in metrics.items():
        print(f"  {name:<20} {value:.4f}")
    print(f"  {'trainable params':<20} {trainable:,}")
    print(f"  {'adapter params':<20} {adapter:,}")
    print(f"  {'delta_m':<20} {format_delta(delta)}")


def fail(e: Exception) -> int:
    """Print an error and map it to the exit code contract."""
    if isinstance(e, ConfigError):
        print(f"\n❌ Configuration Error: {str(e)}")
        return EXIT_CONFIG
    if isinstance(e, DivergenceError):
        print(f"\n❌ Training diverged: {str(e)}")
        for task, value in e.task_losses.items():
            print(f"   {task}: {value}")
        return EXIT_DIVERGED
    if isinstance(e, MissingArtifactsError):
        print("\n❌ Missing artifacts:")
        for path in e.missing:
            print(f"   - {path}")
        return EXIT_MISSING
    logger.exception("Unexpected failure")
    print(f"\n❌ Error: {str(e)}")
    return EXIT_CONFIG


def check_environment() -> bool:
    is_valid, error_msg = Config.validate()
    if not is_valid:
        print(f"\n❌ Configuration Error: {error_msg}")
        print("\nCheck the SPECTRANK_* environment variables (see .env.example)")
    return is_valid


def train_command(args: List[str]) -> int:
    """
    Train one run from a config file.

    Returns:
        Exit code (0 success, 1 config error, 2 divergence)
    """
    parser = argparse.ArgumentParser(prog='spectrank.py train')
    parser.add_argument('--config', required=True)
    parser.add_argument('--resume', action='store_true', help='continue from the run checkpoint')
    opts = parser.parse_args(args)

    print("🚂 spectrank train")
    print("=" * 60)
    if not check_environment():
        return EXIT_CONFIG

    try:
        cfg = load_run_config(opts.config)
        print(f"\n⚙️  {len(cfg.tasks)} task(s), mode={cfg.adapter_mode}, r_init={cfg.r_init}, epochs={cfg.epochs}")
        record = train(cfg, resume=opts.resume)
        final = record.final
        print_metrics(final.metrics, final.trainable_params, final.adapter_params, final.delta_m)

        print("\n" + "=" * 60)
        print(f"✅ Run complete: {record.run_dir}")
        print("=" * 60 + "\n")
        return EXIT_OK
    except Exception as e:
        return fail(e)


def eval_command(args: List[str]) -> int:
    parser = argparse.ArgumentParser(prog='spectrank.py eval')
    parser.add_argument('--checkpoint', required=True)
    opts = parser.parse_args(args)

    print("🔍 spectrank eval")
    print("=" * 60)
    if not check_environment():
        return EXIT_CONFIG

    try:
        row = evaluate_checkpoint(opts.checkpoint)
        print(f"\n📁 {opts.checkpoint} (epoch {row.epoch})")
        print_metrics(row.metrics, row.trainable_params, row.adapter_params, row.delta_m)
        print("\n✅ Evaluation complete!\n")
        return EXIT_OK
    except Exception as e:
        return fail(e)


def report_command(args: List[str]) -> int:
    parser = argparse.ArgumentParser(prog='spectrank.py report')
    parser.add_argument('--run-dir', required=True)
    parser.add_argument('--out', default=None, help='output directory (defaults to --run-dir)')
    parser.add_argument('--svg', action='store_true', help='also render SVG plots')
    opts = parser.parse_args(args)

    print("📈 spectrank report")
    print("=" * 60)
    try:
        written = report(opts.run_dir, out_dir=opts.out, svg=opts.svg)
        print()
        for name, path in written.items():
            print(f"  ✨ {name:<14} {path}")
        print("\n✅ Report written!\n")
        return EXIT_OK
    except Exception as e:
        return fail(e)


def ablate_command(args: List[str]) -> int:
    parser = argparse.ArgumentParser(prog='spectrank.py ablate')
    parser.add_argument('--config', required=True)
    parser.add_argument('--switches', default=','.join(('pdrs', 'dora', 'tspd', 'xtcons')))
    opts = parser.parse_args(args)

    print("🧪 spectrank ablate")
    print("=" * 60)
    if not check_environment():
        return EXIT_CONFIG

    try:
        cfg = load_run_config(opts.config)
        switches = parse_switches(opts.switches)
        print(f"\n⚙️  switches: {', '.join(switches) or '(none)'} -> {2 ** len(switches)} run(s)")
        table = ablate(cfg, switches)
        print()
        print(table.to_string(index=False))
        print("\n✅ Ablation complete!\n")
        return EXIT_OK
    except Exception as e:
        return fail(e)


def export_data_command(args: List[str]) -> int:
    parser = argparse.ArgumentParser(prog='spectrank.py export-data')
    parser.add_argument('--seed', type=int, required=True)
    parser.add_argument('--count', type=int, required=True)
    parser.add_argument('--out', required=True)
    parser.add_argument('--size', type=int, default=64, help='square image side')
    parser.add_argument('--classes', type=int, default=4)
    opts = parser.parse_args(args)

    print("💾 spectrank export-data")
    print("=" * 60)
    try:
        if opts.count < 1:
            raise ConfigError("--count must be at least 1")
        paths = export_scenes(opts.seed, opts.count, opts.out, (opts.size, opts.size),
                              opts.classes, DataConfig())
        print(f"\n✅ Wrote {len(paths)} file(s) for {opts.count} scene(s) to {opts.out}\n")
        return EXIT_OK
    except Exception as e:
        return fail(e)


def reference_command(args: List[str]) -> int:
    parser = argparse.ArgumentParser(prog='spectrank.py reference')
    parser.add_argument('--config', required=True)
    opts = parser.parse_args(args)

    print("🎯 spectrank reference")
    print("=" * 60)
    if not check_environment():
        return EXIT_CONFIG

    try:
        cfg = load_run_config(opts.config)
        reference = fit_single_task_references(cfg)
        print("\n📊 Single-task references")
        for task, value in reference.items():
            print(f"  {task:<20} {value:.4f}")
        print("\n✅ References written!\n")
        return EXIT_OK
    except Exception as e:
        return fail(e)


def print_usage() -> None:
    """Print usage information."""
    print("spectrank - rank-shrinking multi-task adapters")
    print("\nUsage:")
    print("  python spectrank.py train --config FILE [--resume]     Train one run")
    print("  python spectrank.py eval --checkpoint FILE             Score a checkpoint")
    print("  python spectrank.py report --run-dir DIR [--svg]       Trade-off and rank reports")
    print("  python spectrank.py ablate --config FILE --switches pdrs,dora,tspd,xtcons")
    print("  python spectrank.py export-data --seed S --count N --out DIR")
    print("  python spectrank.py reference --config FILE            Fit single-task references")
    print("  python spectrank.py help                               Show this help message")
    print("\nExit codes: 0 success, 1 config error, 2 divergence, 3 missing artifacts")
    print("\nConfiguration:")
    print("  Set environment variables (or a .env file):")
    print("    SPECTRANK_RUNS_DIR    - Where runs are written (default: runs)")
    print("    SPECTRANK_CACHE_DIR   - Frozen trunk cache (default: .trunk_cache)")
    print("    SPECTRANK_LOG_LEVEL   - Logging level (default: INFO)")


COMMANDS = {
    'train': train_command,
    'eval': eval_command,
    'report': report_command,
    'ablate': ablate_command,
    'export-data': export_data_command,
    'reference': reference_command,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        print_usage()
        return EXIT_CONFIG

    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=getattr(logging, Config.LOG_LEVEL, logging.INFO)
    )

    command = argv[0].lower()
    if command in COMMANDS:
        try:
            return COMMANDS[command](argv[1:])
        except SystemExit as e:
            # argparse usage errors
            return EXIT_CONFIG if e.code else EXIT_OK
    elif command in ['help', '--help', '-h']:
        print_usage()
        return EXIT_OK
    else:
        print(f"Unknown command: {command}")
        print_usage()
        return EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(main())
