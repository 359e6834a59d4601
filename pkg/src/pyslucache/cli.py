from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from .benchmark_ops import BenchmarkSetting, calibrate_thresholds, report_ops_budget, run_benchmark
from .cache_manager import save_threshold_mlps
from .config_utils import load_config
from .ctc_ops import CollapseMode, PosteriorSequence, brute_force_ctc, ctc_loss
from .dataset_ops import SynthSpec, load_dataset, synth_dataset, write_dataset
from .errors import Infeasible, SluCacheError
from .io_ops import dumps_json, load_json, save_json
from .latency_utils import get_time_dif
from .logger_utils import setup_logger
from .report_ops import render_ops_budget, render_report

logger = logging.getLogger(__name__)


def _overrides(args: argparse.Namespace) -> dict:
    """CLI flags beat the config file and the seed environment variable"""

    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        overrides["benchmark"] = {"workers": args.workers}
    if getattr(args, "thresholds_mlp", None) is not None:
        overrides["thresholds"] = {"mode": "mlp", "mlp_path": args.thresholds_mlp}
    if getattr(args, "no_finetune", False):
        overrides["cloud"] = {"finetune": False}
    return overrides


def cmd_synth(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    corpus = synth_dataset(SynthSpec.from_config(config.synth), config.seed)
    path = write_dataset(corpus, args.out)
    print(path)
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    corpus = load_dataset(args.manifest, args.lexicon)
    report = run_benchmark(corpus, BenchmarkSetting.parse(args.setting), config)
    if args.out:
        save_json(report, args.out)
        logger.info(f"Report written to {args.out}", extra={"category": "DATAIO"})
    else:
        sys.stdout.write(dumps_json(report))
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    """Instance JSON: {"probs": [[...], ...], "target": [...], "mode": "standard_ctc" | "repeat_merge", "blank_index": 0}"""

    instance = load_json(args.instance)
    mode = CollapseMode(instance.get("mode", "standard_ctc"))
    blank = instance.get("blank_index", 0) if mode is CollapseMode.STANDARD_CTC else None
    posts = PosteriorSequence.from_probs(np.asarray(instance["probs"], dtype=np.float64), blank)
    target = instance["target"]

    brute = brute_force_ctc(posts, target, mode)
    try:
        dp = float(np.exp(-ctc_loss(posts, target, mode)))
    except Infeasible:
        dp = 0.0
    print(dumps_json({"brute_force": brute, "dynamic_programming": dp}), end="")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    sys.stdout.write(render_report(load_json(args.report), args.format, args.decimals))
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    corpus = load_dataset(args.manifest, args.lexicon)
    result = calibrate_thresholds(corpus, config, args.max_entries)
    save_threshold_mlps(result.mlps, args.out)
    logger.info(f"Threshold MLPs written to {args.out}", extra={"category": "DATAIO"})
    sys.stdout.write(dumps_json({"static": result.static, "samples": len(result.samples)}))
    return 0


def cmd_ops(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    sys.stdout.write(render_ops_budget(report_ops_budget(config), args.format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pyslucache", description="Two-level spoken-intent cache: corpus synthesis, benchmarks and debugging tools")
    parser.add_argument("--log-folder", default=None, help="Also write logs to this folder")
    parser.add_argument("--log-mode", default="TEST", choices=["TEST", "PROD", "REGR"])
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None)
        return p

    p = with_config(sub.add_parser("synth", help="Write a synthetic corpus, manifest and lexicon"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("run", help="Run a benchmark setting and emit the JSON report"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--lexicon", default=None, help="Defaults to lexicon.txt beside the manifest")
    p.add_argument("--setting", default="1spk-100", help="e.g. 1spk-100, 1spk-70, 1spk-0, 3spk-100")
    p.add_argument("--out", default=None, help="Report path; stdout when omitted")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--thresholds-mlp", default=None, help="Use length-conditioned thresholds from this file")
    p.add_argument("--no-finetune", action="store_true", help="Freeze the extractors")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle", help="Compare brute-force and DP sequence probabilities on a small instance")
    p.add_argument("instance")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="Render a JSON report as tables")
    p.add_argument("report")
    p.add_argument("--format", default="text", choices=["text", "markdown"])
    p.add_argument("--decimals", type=int, default=3)
    p.set_defaults(func=cmd_report)

    p = with_config(sub.add_parser("calibrate", help="Fit threshold MLPs on held-out data"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--lexicon", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--max-entries", type=int, default=100)
    p.set_defaults(func=cmd_calibrate)

    p = with_config(sub.add_parser("ops", help="Analytic op counts per streaming step and per entry match"))
    p.add_argument("--format", default="text", choices=["text", "markdown"])
    p.set_defaults(func=cmd_ops)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logger(args.log_folder, args.log_mode, logging.DEBUG if args.verbose else logging.INFO)

    start_time = time.time()
    try:
        code = args.func(args)
    except (SluCacheError, ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 2
    logger.info(f"{args.command} finished in {get_time_dif(start_time)}", extra={"category": "STEP"})
    return code
