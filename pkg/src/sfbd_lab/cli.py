"""Command line: data synthesis, training and the exact-oracle checks.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 oracle
check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config, manifest, with_output_dir, write_json
from .data import dataset_paths, synth_dataset, write_dataset
from .diffusion import SolverConfig
from .errors import ConfigError, ContractViolation, NumericError
from .numerics.mlp import load_checkpoint, save_checkpoint
from .oracles.suite import format_table, run_suite, write_margins_csv
from .projections import save_pool
from .report import run_report
from .trainers import Evaluator, RunMetrics, cc_baseline, online_sfbd, pretrain_clean, sfbd

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ORACLE = 0, 2, 3, 4


def _ensure_dataset(cfg: RunConfig, root):
    """Synthesize the dataset under ``root`` unless a matching one is already there."""
    paths = dataset_paths(root)
    spec_file = Path(root) / "data" / "spec.json"
    wanted = json.loads(json.dumps(asdict(cfg.dataset)))
    if spec_file.exists():
        if json.loads(spec_file.read_text()) != wanted:
            raise ConfigError(f"{spec_file} describes a different dataset than the configuration")
        return paths
    write_dataset(synth_dataset(cfg.dataset), root)
    write_json(wanted, spec_file)
    return paths


def _evaluator(cfg: RunConfig, truth_path):
    ev = cfg.evaluation
    return Evaluator(truth_path, n_samples=ev.n_samples, solver=SolverConfig(n_steps=ev.n_steps),
                     probes=ev.probes, seed=ev.seed, T=cfg.train.schedule.T)


def _write_run(cfg: RunConfig, out, model, metrics: RunMetrics, paths):
    outputs = {
        "metrics": out / "metrics.csv",
        "timing": out / "timing.csv",
        "model": out / "model.json",
        "config": out / "config.json",
        "clean": paths["clean"],
        "noisy": paths["noisy"],
    }
    metrics.to_csv(outputs["metrics"])
    metrics.timing_csv(outputs["timing"])
    save_checkpoint(model, outputs["model"])
    pool = metrics.pool
    if pool is not None:
        outputs["pool"] = out / "pool.npz"
        save_pool(pool, outputs["pool"])
    write_json(cfg.to_dict(), outputs["config"])
    write_json(manifest(cfg, outputs), out / "manifest.json")


def _print_summary(metrics: RunMetrics):
    for name in ("sample_ed", "pool_ed", "pool_fit", "denoise_loss"):
        if metrics.series(name):
            best_step, best = metrics.best(name)
            last_step, last = metrics.final(name)
            print(f"{name}: best {best:.6g} (step {best_step}), final {last:.6g} (step {last_step})")


def cmd_synth(cfg: RunConfig, args):
    out = Path(args.out)
    paths = _ensure_dataset(cfg, out)
    write_json(manifest(cfg, paths), out / "data" / "manifest.json")
    print(f"wrote {cfg.dataset.n_clean} clean and {cfg.dataset.n_noisy} noisy points to {out / 'data'}")
    return EXIT_OK


def _train(cfg: RunConfig, args, driver):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = with_output_dir(cfg, out / "checkpoints")
    paths = _ensure_dataset(cfg, Path(args.data) if args.data else out)
    evaluator = _evaluator(cfg, paths["truth"])
    init = load_checkpoint(args.init) if getattr(args, "init", None) else None
    model, metrics = driver(cfg, paths, evaluator, init)
    _write_run(cfg, out, model, metrics, paths)
    _print_summary(metrics)
    return EXIT_OK


def cmd_pretrain(cfg, args):
    def driver(cfg, paths, evaluator, init):
        model = pretrain_clean(paths["clean"], cfg.train)
        metrics = RunMetrics()
        values = evaluator.evaluate(model)
        if model.meta.get("pretrain_final_loss") is not None:
            values["denoise_loss"] = model.meta["pretrain_final_loss"]
        metrics.log(0, values)
        return model, metrics

    return _train(cfg, args, driver)


def cmd_train_online(cfg, args):
    def driver(cfg, paths, evaluator, init):
        return online_sfbd(paths["clean"], paths["noisy"], cfg.train, evaluator, init, sync=cfg.sync)

    return _train(cfg, args, driver)


def cmd_train_sfbd(cfg, args):
    rounds = args.rounds if args.rounds is not None else cfg.sfbd_rounds

    def driver(cfg, paths, evaluator, init):
        return sfbd(paths["clean"], paths["noisy"], rounds, cfg.train, evaluator, init)

    return _train(cfg, args, driver)


def cmd_train_cc(cfg, args):
    def driver(cfg, paths, evaluator, init):
        return cc_baseline(paths["clean"], paths["noisy"], cfg.train, evaluator, init)

    return _train(cfg, args, driver)


def cmd_verify_oracle(args):
    results = run_suite()
    print(format_table(results))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_margins_csv(results, out / "oracle_margins.csv")
    return EXIT_OK if all(r.passed for r in results) else EXIT_ORACLE


def cmd_report(args):
    files = run_report(args.metrics, args.out, args.labels)
    for name, path in files.items():
        print(f"{name}: {path}")
    return EXIT_OK


def _add_run_options(p, training=True):
    p.add_argument("--config", help="INI configuration file or a run manifest.json")
    p.add_argument("--seed", type=int, help="overrides the data and training seeds")
    p.add_argument("--sigma", type=float, help="noise std of the corruption (tau = sigma^2)")
    p.add_argument("--out", required=True, help="output directory")
    if training:
        p.add_argument("--data", help="dataset directory (default: the output directory)")
        p.add_argument("--gamma", type=float, help="fraction of the pool refreshed per update")
        p.add_argument("--m", type=int, help="gradient steps between pool refreshes")
        p.add_argument("--sync", action="store_true", default=None, help="refresh the pool in the training thread")
        p.add_argument("--init", help="start from this checkpoint instead of pretraining")


def build_parser():
    parser = argparse.ArgumentParser(prog="sfbd-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_options(sub.add_parser("synth", help="write a synthetic clean/noisy dataset"), training=False)
    _add_run_options(sub.add_parser("pretrain", help="train on the clean set only"))
    _add_run_options(sub.add_parser("train-online", help="online SFBD"))
    p = sub.add_parser("train-sfbd", help="vanilla SFBD (full re-denoising each round)")
    _add_run_options(p)
    p.add_argument("--rounds", type=int, help="number of denoise/fine-tune rounds")
    _add_run_options(sub.add_parser("train-cc", help="consistency-constraint baseline"))
    p = sub.add_parser("verify-oracle", help="run the exact-oracle inequality suite")
    p.add_argument("--out", help="directory for the per-step margins CSV")
    p = sub.add_parser("report", help="merge and summarize metrics files")
    p.add_argument("metrics", nargs="+", help="metrics.csv files")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", nargs="+")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train-online": cmd_train_online,
    "train-sfbd": cmd_train_sfbd,
    "train-cc": cmd_train_cc,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify-oracle":
            return cmd_verify_oracle(args)
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(
            args.config,
            seed=args.seed,
            sigma=args.sigma,
            gamma=getattr(args, "gamma", None),
            m=getattr(args, "m", None),
            sync=getattr(args, "sync", None),
        )
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ContractViolation) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
