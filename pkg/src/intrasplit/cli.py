"""Command-line entry point: ``intrasplit {split,train,eval,run,sweep,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import DATASETS, MODES, PRESETS, ExperimentConfig, make_config
from .errors import ConfigError, IntraSplitError
from .harness import (emit_report, emit_sweep, evaluate_scores, load_protocol, read_results_csv,
                      render_table, run_experiment, run_ratio_sweep, splitting_autoencoder, train_model)
from .model import OneClassModel, TrainState, load_checkpoint, save_checkpoint
from .nn import save_network
from .splitting import SplitResult, split_scores

log = logging.getLogger("intrasplit")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--data-dir")
    p.add_argument("--normal-class", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--ae-iterations", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int, action="append", help="repeatable; overrides the config's seeds")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _config(args) -> ExperimentConfig:
    overrides = {
        "dataset": args.dataset,
        "data_dir": args.data_dir,
        "normal_class": args.normal_class,
        "rho": args.rho,
        "iterations": args.iterations,
        "ae_iterations": args.ae_iterations,
        "batch": args.batch,
        "seeds": args.seed,
        "mode": args.mode,
        "out": args.out,
    }
    return make_config(args.preset, args.config, overrides)


def cmd_split(args, config: ExperimentConfig) -> int:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = config.seeds[0]
    ae, scores = splitting_autoencoder(config, seed)
    result = split_scores(scores, config.rho)
    result.to_csv(out / "split.csv")
    save_network(ae, out / "autoencoder.icsp")
    print(f"{len(result.atypical_idx)} atypical / {len(result.typical_idx)} typical -> {out / 'split.csv'}")
    return 0


def cmd_train(args, config: ExperimentConfig) -> int:
    if config.mode == "recon_baseline":
        raise ConfigError("recon_baseline has no trainable classifier; use `run` or `split`")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    protocol = load_protocol(config)
    seed = config.seeds[0]
    split = None
    if config.mode != "naive_nn":
        if args.split:
            split = SplitResult.from_csv(args.split, config.rho)
        else:
            split = split_scores(splitting_autoencoder(config, seed, protocol)[1], config.rho)
    model = train_model(config, seed, protocol, split)
    state = TrainState(iteration=config.iterations)
    save_checkpoint(out / "model.icsp", model, state, config, {"mode": config.mode, "seed": seed})
    print(f"trained {config.mode} (seed {seed}) -> {out / 'model.icsp'}")
    return 0


def cmd_eval(args, config: ExperimentConfig) -> int:
    protocol = load_protocol(config)
    model = OneClassModel(protocol.train.image_shape, config.latent_dim, config.backbone_channels)
    load_checkpoint(args.checkpoint, model)
    scores = model.score(protocol.test.images)
    value = evaluate_scores(scores, protocol)
    if args.scores:
        np.savetxt(args.scores, np.column_stack([protocol.test.role_labels, scores]), delimiter=",",
                   header="role,score", comments="", fmt=["%d", "%.17g"])
    print(f"AUC {100 * value:.1f}")
    return 0


def cmd_run(args, config: ExperimentConfig) -> int:
    report = run_experiment(config)
    csv_path = emit_report(report, config.out, "csv")
    emit_report(report, config.out, "text-table")
    (Path(config.out) / "config.txt").write_text(config.to_text() + f"input_hash = {report.input_hash}\n")
    print(render_table([report]), end="")
    print(f"results -> {csv_path}")
    return 0


def cmd_sweep(args, config: ExperimentConfig) -> int:
    sweep = run_ratio_sweep(config, args.rhos)
    summary, _ = emit_sweep(sweep, config.out)
    for rho, rep in zip(sweep.rhos, sweep.reports):
        print(f"rho={rho:g}  AUC {100 * rep.mean:.1f} (±{100 * rep.std:.1f})")
    print(f"sweep -> {summary}")
    return 0


def cmd_report(args, config: ExperimentConfig) -> int:
    reports = []
    for path in args.csv:
        reports.extend(read_results_csv(path))
    text = render_table(reports)
    if args.output:
        Path(args.output).write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intrasplit", description="One-class classification via intra-class splitting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="train the splitting autoencoder and write split.csv")
    _common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one model (first seed) and write a checkpoint")
    _common(p)
    p.add_argument("--split", help="split.csv from `split`; computed if omitted")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score the test set with a checkpoint and print the AUC")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scores", help="optional CSV of (role, score) per test sample")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="full pipeline over all seeds")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the pipeline for several rho values")
    _common(p)
    p.add_argument("--rhos", type=float, nargs="+", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render results CSVs as a text table")
    _common(p)
    p.add_argument("csv", nargs="+")
    p.add_argument("--output")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = _config(args)
        return args.func(args, config)
    except IntraSplitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
