"""Command line entry point: ``gazestab <command> [options]``.

Every command accepts ``--config FILE`` (flat dotted keys), repeated
``--set key=value`` overrides and ``--threads N``. Failures print one JSON
line on stderr, ``{"error": <kind>, "message": ..., ["line": n]}``, and exit 1.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import torch

from . import checkpoint
from .augmentation import blend_corpus
from .config import SECTIONS, ConfigError, PipelineConfig, load_config, parse_value
from .core import GazeError, SchemaError, read_trials, write_trials
from .evaluation import evaluate_corpus, predict_trial
from .model import GazeForecaster, ModelConfig
from .plotting import histogram_svg, report_values, scatter_svg, write_svg
from .segmentation import clean_corpus, write_report
from .simulator import simulate_corpus
from .sweep import default_within, run_sweep, write_csv as write_sweep_csv
from .training import build_examples, grad_check, train, write_train_log

log = logging.getLogger("gazestab")

# config sections (or single keys) each command reads
READS = {
    "simulate": ["sim", "io.trials"],
    "segment": ["fixation", "cleaning", "io.trials", "io.segmented", "io.segment_report"],
    "augment": ["augment", "fixation.sample_rate", "io.segmented", "io.augmented"],
    "train": ["model", "train", "loss", "io.augmented", "io.checkpoint", "io.train_log"],
    "evaluate": ["eval", "io.segmented", "io.checkpoint", "io.eval_report"],
    "plot": ["eval", "io.segmented"],
    "gradcheck": ["sim", "fixation", "cleaning", "loss", "train.seed",
                  "model.n_blocks", "model.top_k_periods", "model.inception_kernels",
                  "model.alpha_init", "model.std_epsilon", "model.projection"],
    "sweep": ["sim", "fixation", "cleaning", "augment", "model", "train", "loss", "eval",
              "sweep"],
}


def keys_read(command: str) -> list[str]:
    out = []
    for item in READS[command]:
        if "." in item:
            out.append(item)
        else:
            out.extend(f"{item}.{f.name}" for f in dataclasses.fields(SECTIONS[item]))
    return out


def _help_epilog(command: str) -> str:
    defaults = PipelineConfig().flat()
    lines = ["config keys read (override with --set key=value):"]
    for key in keys_read(command):
        value = defaults[key]
        if isinstance(value, tuple):
            value = list(value)
        lines.append(f"  {key} = {value!r}")
    lines.append("environment: TIMEGAZER_SEED overrides sim.rng_seed, augment.rng_seed and train.seed")
    return "\n".join(lines)


def _overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = parse_value(value.strip())
    return out


def _path(arg: str | None, default: str) -> Path:
    return Path(arg if arg is not None else default)


# --- commands ------------------------------------------------------------------

def cmd_simulate(args, cfg: PipelineConfig) -> int:
    out = _path(args.out, cfg.io.trials)
    trials = simulate_corpus(cfg.sim)
    write_trials(out, trials)
    print(f"seed={cfg.sim.rng_seed} trials={len(trials)} out={out}")
    return 0


def cmd_segment(args, cfg: PipelineConfig) -> int:
    src = _path(args.input, cfg.io.trials)
    out = _path(args.out, cfg.io.segmented)
    report_path = _path(args.report, cfg.io.segment_report)
    kept, report = clean_corpus(read_trials(src), cfg.cleaning, cfg.fixation, threads=args.threads)
    write_trials(out, kept)
    write_report(report_path, report)
    print(f"kept={len(kept)} excluded={len(report) - len(kept)} out={out} report={report_path}")
    return 0


def cmd_augment(args, cfg: PipelineConfig) -> int:
    src = _path(args.input, cfg.io.segmented)
    out = _path(args.out, cfg.io.augmented)
    real = read_trials(src)
    blended = blend_corpus(real, cfg.augment, cfg.fixation.sample_rate)
    write_trials(out, blended)
    print(f"real={len(real)} synthetic={len(blended) - len(real)} seed={cfg.augment.rng_seed} out={out}")
    return 0


def cmd_train(args, cfg: PipelineConfig) -> int:
    src = _path(args.input, cfg.io.augmented)
    ckpt = _path(args.checkpoint, cfg.io.checkpoint)
    log_path = _path(args.log, cfg.io.train_log)
    corpus = read_trials(src)
    result = train(corpus, cfg.model, cfg.train, cfg.loss)
    meta = {"best_epoch": result.best_epoch, "best_val_loss": result.best_val,
            "epochs_run": len(result.log),
            "train": dataclasses.asdict(cfg.train), "loss": dataclasses.asdict(cfg.loss)}
    checkpoint.save(ckpt, result.model, meta)
    write_train_log(log_path, result.log)
    print(f"best_epoch={result.best_epoch} val_loss={result.best_val:.6g} "
          f"alpha={result.model.alpha:.4f} checkpoint={ckpt}")
    return 0


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    ckpt = _path(args.checkpoint, cfg.io.checkpoint)
    src = _path(args.input, cfg.io.segmented)
    out = _path(args.report, cfg.io.eval_report)
    model, _ = checkpoint.load(ckpt)
    report = evaluate_corpus(model, read_trials(src), cfg.eval)
    out.write_text(report.to_json(), encoding="utf-8")
    # wall-clock numbers live in a sidecar so the main report stays reproducible
    mean, std = report.timing()
    timing = out.with_name(out.stem + ".timing.json")
    timing.write_text(json.dumps({"mean_seconds": mean, "std_seconds": std,
                                  "per_trial": {m.trial_id: m.rollout_seconds
                                                for m in report.per_trial}},
                                 indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.csv:
        report.write_csv(args.csv)
    sys.stdout.write(report.to_text())
    return 0


def cmd_plot(args, cfg: PipelineConfig) -> int:
    if args.report is not None:
        data = json.loads(Path(args.report).read_text(encoding="utf-8"))
        svg = histogram_svg(report_values(data, args.metric), args.metric, args.bins)
    else:
        trials = read_trials(_path(args.input, cfg.io.segmented))
        if not trials:
            raise GazeError("no trials to plot")
        if args.trial_id is None:
            trial = trials[0]
        else:
            matches = [t for t in trials if t.id == args.trial_id]
            if not matches:
                raise GazeError(f"trial {args.trial_id!r} not found")
            trial = matches[0]
        if trial.fixation_onset is None:
            raise GazeError(f"trial {trial.id!r} has no fixation onset; segment it first")
        onset = trial.fixation_onset
        raw = trial.positions()[onset:onset + cfg.eval.horizon]
        pred = None
        if args.checkpoint is not None:
            model, _ = checkpoint.load(args.checkpoint)
            pred = predict_trial(model, trial, cfg.eval)
        svg = scatter_svg(raw, trial.target, pred, title=trial.id)
    write_svg(args.out, svg)
    print(f"wrote {args.out}")
    return 0


def gradcheck_inputs(cfg: PipelineConfig, hist_len: int, horizon: int, batch: int):
    """A short simulated, cleaned batch sized for a small gradient-check model."""
    sim = dataclasses.replace(cfg.sim, n_trials=max(batch, 1))
    kept, _ = clean_corpus(simulate_corpus(sim), cfg.cleaning, cfg.fixation)
    if not kept:
        raise GazeError("no simulated trial survived cleaning")
    ex = build_examples(kept[:batch], horizon, hist_len + horizon // 2, cfg.fixation.sample_rate)
    return ex.history, ex.times, ex.target


def cmd_gradcheck(args, cfg: PipelineConfig) -> int:
    m = cfg.model
    mcfg = ModelConfig(c_in=m.c_in, d_model=args.d_model, n_heads=args.heads,
                       n_blocks=m.n_blocks, top_k_periods=m.top_k_periods,
                       inception_kernels=m.inception_kernels, d_ff=args.d_model,
                       hist_len=args.hist_len, horizon=args.horizon, alpha_init=m.alpha_init,
                       std_epsilon=m.std_epsilon, projection=m.projection)
    torch.manual_seed(cfg.train.seed)
    model = GazeForecaster(mcfg)
    history, times, target = gradcheck_inputs(cfg, args.hist_len, args.horizon, args.batch)
    report = grad_check(model, history, times, target, cfg.loss, window=args.window,
                        tolerance=args.tolerance, n_coords=args.coords, seed=cfg.train.seed,
                        sample_rate=cfg.fixation.sample_rate)
    print(report.summary())
    return 0 if report.passed else 1


def _sweep_corpora(args, cfg: PipelineConfig):
    if args.train is not None:
        train_corpus = read_trials(args.train)
    else:
        kept, _ = clean_corpus(simulate_corpus(cfg.sim), cfg.cleaning, cfg.fixation,
                               threads=args.threads)
        train_corpus = blend_corpus(kept, cfg.augment, cfg.fixation.sample_rate)
    if args.test is not None:
        test_corpus = read_trials(args.test)
    else:
        sim = dataclasses.replace(cfg.sim, n_trials=cfg.sweep.eval_trials,
                                  rng_seed=cfg.sim.rng_seed + cfg.sweep.eval_seed_offset)
        test_corpus, _ = clean_corpus(simulate_corpus(sim), cfg.cleaning, cfg.fixation,
                                      threads=args.threads)
    return train_corpus, test_corpus


def cmd_sweep(args, cfg: PipelineConfig) -> int:
    train_corpus, test_corpus = _sweep_corpora(args, cfg)

    def show(row):
        print(f"{row.grid:<11}{row.cell:<13}AI={row.ai:.4f} CI={row.ci:.4f} AD={row.ad_pred:.4f}",
              flush=True)

    rows = run_sweep(train_corpus, test_corpus, cfg, on_row=show)
    write_sweep_csv(args.out, rows, include_timing=args.timing)
    defaults = {"projection": cfg.model.projection, "loss": "full",
                "window": f"lw={cfg.train.window}", "heads": f"heads={cfg.model.n_heads}"}
    for grid, ok in default_within(rows, defaults).items():
        print(f"default cell within 10% of best AI in {grid} grid: {'yes' if ok else 'no'}")
    print(f"wrote {args.out}")
    return 0


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="config file with flat dotted keys")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker cap; 1 keeps execution serial and deterministic")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="gazestab",
                                     description="Gaze fixation stabilization pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func: Callable, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           epilog=_help_epilog(name),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "Write a simulated trial corpus as JSONL.")
    p.add_argument("--out", help="output JSONL (default io.trials)")

    p = add("segment", cmd_segment, "Detect fixation onsets and drop invalid trials.")
    p.add_argument("--in", dest="input", help="input JSONL (default io.trials)")
    p.add_argument("--out", help="kept trials JSONL (default io.segmented)")
    p.add_argument("--report", help="per-trial CSV report (default io.segment_report)")

    p = add("augment", cmd_augment, "Blend real trials with target-contracted synthetic ones.")
    p.add_argument("--in", dest="input", help="segmented JSONL (default io.segmented)")
    p.add_argument("--out", help="blended JSONL (default io.augmented)")

    p = add("train", cmd_train, "Train the forecaster and write a TGZR1 checkpoint.")
    p.add_argument("--in", dest="input", help="training JSONL (default io.augmented)")
    p.add_argument("--checkpoint", help="checkpoint path (default io.checkpoint)")
    p.add_argument("--log", help="per-epoch CSV log (default io.train_log)")

    p = add("evaluate", cmd_evaluate, "Score a checkpoint on segmented trials.")
    p.add_argument("--checkpoint", help="checkpoint path (default io.checkpoint)")
    p.add_argument("--in", dest="input", help="segmented JSONL (default io.segmented)")
    p.add_argument("--report", help="JSON report (default io.eval_report)")
    p.add_argument("--csv", help="optional per-trial CSV")

    p = add("plot", cmd_plot, "Draw a trial scatter or a metric histogram as SVG.")
    p.add_argument("--out", required=True, help="SVG output path")
    p.add_argument("--in", dest="input", help="segmented JSONL for a scatter (default io.segmented)")
    p.add_argument("--trial-id", help="trial to draw (default: first)")
    p.add_argument("--checkpoint", help="add model predictions to the scatter")
    p.add_argument("--report", help="JSON evaluation report: draw a histogram instead")
    p.add_argument("--metric", default="ai", help="per-trial report field to histogram")
    p.add_argument("--bins", type=int, default=20)

    p = add("gradcheck", cmd_gradcheck, "Compare analytic and finite-difference gradients.")
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--hist-len", type=int, default=16)
    p.add_argument("--horizon", type=int, default=8)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--coords", type=int, default=240)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = add("sweep", cmd_sweep, "Run the ablation grids and write one CSV row per cell.")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--train", help="training JSONL (default: simulate, segment, augment)")
    p.add_argument("--test", help="held-out segmented JSONL (default: simulate with offset seed)")
    p.add_argument("--timing", action="store_true", help="add a train_seconds column")
    return parser


def _fail(exc: BaseException) -> int:
    record = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, SchemaError):
        record["line"] = exc.line
    sys.stderr.write(json.dumps(record) + "\n")
    return 1


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        torch.set_num_threads(args.threads)
        cfg = load_config(args.config, _overrides(args.overrides))
        return args.func(args, cfg)
    except (GazeError, OSError, ValueError, KeyError) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
