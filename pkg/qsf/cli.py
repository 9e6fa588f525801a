# /qsf/cli.py

"""Command-line entry point: ``python -m qsf <command>``.

Exit codes: 0 success, 1 a verification check missed its tolerance, 2 invalid
configuration or arguments, 3 training diverged, 4 I/O or file-format error,
5 numeric or conditioning failure.
"""

import argparse
import logging
import math
import os
import sys

from . import config as cfg
from . import database
from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import Corpus, to_text, tokenize
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    QSFError,
    RangeError,
    TrainingDivergedError,
    TransferError,
)
from .ml_models.spectral import ZetaTrace, export_spectrum_csv, export_zeta_csv, layer_spectrum
from .ml_models.verification import run_gradient_checks, run_propagator_checks, worst_cases, write_propagator_report
from .trainer import generate, train_stage
from .utils.helpers import configure_logging

logger = logging.getLogger(__name__)


def exit_code_for(error):
    if isinstance(error, TrainingDivergedError):
        return cfg.EXIT_DIVERGED
    if isinstance(error, (ConfigError, TransferError, DimensionError, RangeError)):
        return cfg.EXIT_CONFIG
    if isinstance(error, (FormatError, OSError)):
        return cfg.EXIT_IO
    return cfg.EXIT_NUMERIC


# --- train ---

def cmd_train(args):
    run_config = RunConfig.from_json(args.config) if args.config else RunConfig()
    run_config = run_config.with_overrides(
        stage=args.stage, init_from=args.init_from, seed=args.seed, corpus_path=args.corpus,
        output_dir=args.out, max_steps=args.max_steps,
        strict_deterministic=True if args.strict_deterministic else None,
    )
    run_config.validate(require_corpus=True)
    corpus = Corpus.from_path(run_config.corpus_path, train_fraction=run_config.train_fraction)
    init = None
    if run_config.init_from:
        init = load_checkpoint(run_config.init_from)
    result = train_stage(run_config, corpus, init)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"parameters: {result.checkpoint.metadata['parameter_count']}")
    print(f"val_loss: {result.final_val_loss:.4f} perplexity: {math.exp(min(result.final_val_loss, 700.0)):.2f}")
    return cfg.EXIT_OK


# --- generate ---

def cmd_generate(args):
    checkpoint = load_checkpoint(args.ckpt)
    prompt = tokenize(args.prompt)
    ids = generate(checkpoint.model(), prompt, args.max_tokens, temperature=args.temperature, seed=args.seed)
    print(to_text(ids))
    return cfg.EXIT_OK


# --- spectrum ---

def cmd_spectrum(args):
    checkpoint = load_checkpoint(args.ckpt)
    report = layer_spectrum(checkpoint, tol=args.tol)
    if args.out:
        export_spectrum_csv(report, args.out)
        logger.info("Spectrum written to %s", args.out)
    for layer in range(len(report.layers)):
        counts = report.layer_counts(layer)
        print(f"layer {layer}: decay {counts['decay']} neutral {counts['neutral']} growth {counts['growth']}")
    summary = report.summary
    print(f"total: decay {summary['decay']} neutral {summary['neutral']} growth {summary['growth']} (tol {report.tol})")
    if report.unitarity_gap is not None:
        print(f"max | |lambda| - 1 |: {report.unitarity_gap:.3e}")
    return cfg.EXIT_OK


# --- zeta ---

def read_zeta_trace(run_dir):
    """The zeta trace of a run directory: from runs.db, else from checkpoint metadata."""
    if not os.path.isdir(run_dir):
        raise FormatError(f"run directory {run_dir} does not exist")
    db_path = os.path.join(run_dir, cfg.RUN_DATABASE_FILE)
    if os.path.exists(db_path):
        session = database.create_session(db_path)
        try:
            trace = database.load_zeta_trace(session)
        finally:
            database.close_session(session)
        if len(trace):
            return trace
    for name in (cfg.CHECKPOINT_FILE, cfg.LAST_GOOD_CHECKPOINT_FILE):
        path = os.path.join(run_dir, name)
        if os.path.exists(path):
            trace = ZetaTrace.from_dict(load_checkpoint(path).metadata.get('zeta_trace', {}))
            if len(trace):
                return trace
    raise FormatError(f"no zeta trace found in {run_dir} (Stages III and IV record one)")


def cmd_zeta(args):
    trace = read_zeta_trace(args.run_dir)
    out = args.out or os.path.join(args.run_dir, cfg.ZETA_FILE)
    root, ext = os.path.splitext(out)
    summary = f"{root}_summary{ext or '.csv'}"
    export_zeta_csv(trace, out, summary)
    print(f"{len(trace)} steps, {len(trace.values[0])} layers; final mean zeta {trace.mean[-1]:.4f}")
    print(f"written: {out}, {summary}")
    return cfg.EXIT_OK


# --- checks ---

def _print_worst(results):
    failed = 0
    for name, worst in worst_cases(results).items():
        ok = all(r.passed for r in results if r.check == name)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:32s} worst delta {worst.delta:.3e} (tolerance {worst.tolerance:.1e})")
    return failed


def cmd_check_propagator(args):
    results = run_propagator_checks(args.dim, args.trials, seed=args.seed, sigma_noise=args.sigma_noise)
    failed = _print_worst(results)
    if args.out:
        header = f"propagator checks: dim={args.dim} trials={args.trials} seed={args.seed}"
        paths = write_propagator_report(results, args.out, header=header)
        logger.info("Report written to %s", ", ".join(paths))
    return cfg.EXIT_OK if failed == 0 else cfg.EXIT_CHECK_FAILED


def cmd_check_grads(args):
    results = run_gradient_checks(seeds=args.seeds, end_to_end=not args.skip_end_to_end)
    failed = 0
    for r in results:
        if not r.passed:
            failed += 1
            print(f"FAIL {r.check} seed {r.trial}: relative error {r.delta:.3e}")
    worst = max(results, key=lambda r: r.delta)
    print(f"{len(results) - failed}/{len(results)} gradient checks passed; worst {worst.check} {worst.delta:.3e}")
    return cfg.EXIT_OK if failed == 0 else cfg.EXIT_CHECK_FAILED


# --- parser ---

def build_parser():
    parser = argparse.ArgumentParser(prog='qsf', description="Progressive Koopman / linear-attention language models.")
    parser.add_argument('-v', '--verbose', action='store_true', help="debug logging")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help="train one stage")
    p.add_argument('--config', help="JSON run configuration")
    p.add_argument('--stage', type=int, choices=cfg.STAGES)
    p.add_argument('--init-from', help="checkpoint to transfer parameters from")
    p.add_argument('--seed', type=int)
    p.add_argument('--corpus', help="UTF-8 text file (overrides corpus_path)")
    p.add_argument('--out', help="run directory (overrides output_dir)")
    p.add_argument('--max-steps', type=int)
    p.add_argument('--strict-deterministic', action='store_true', help="fully serial execution")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('generate', help="sample text from a checkpoint")
    p.add_argument('--ckpt', required=True)
    p.add_argument('--prompt', required=True)
    p.add_argument('--max-tokens', type=int, default=100)
    p.add_argument('--temperature', type=float, default=0.0)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser('spectrum', help="classify Koopman eigenvalues of a checkpoint")
    p.add_argument('--ckpt', required=True)
    p.add_argument('--out', help="spectrum CSV path")
    p.add_argument('--tol', type=float, default=cfg.NEUTRAL_TOL)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser('zeta', help="export the zeta trace of a run")
    p.add_argument('--run-dir', required=True)
    p.add_argument('--out', help="zeta CSV path (summary goes next to it)")
    p.set_defaults(func=cmd_zeta)

    p = sub.add_parser('check-propagator', help="closed forms against brute-force oracles")
    p.add_argument('--dim', type=int, default=2)
    p.add_argument('--trials', type=int, default=20)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--sigma-noise', type=float)
    p.add_argument('--out', help="directory for the text and CSV report")
    p.set_defaults(func=cmd_check_propagator)

    p = sub.add_parser('check-grads', help="finite-difference checks of every op")
    p.add_argument('--seeds', type=int, default=3)
    p.add_argument('--skip-end-to-end', action='store_true')
    p.set_defaults(func=cmd_check_grads)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except QSFError as e:
        code = exit_code_for(e)
        if isinstance(e, ConfigError) and e.field:
            logger.error("Configuration error in '%s': %s", e.field, e)
        elif isinstance(e, TrainingDivergedError):
            logger.error("%s; last good checkpoint: %s", e, e.last_good)
        else:
            logger.error("%s", e)
        return code
    except OSError as e:
        logger.error("I/O error: %s", e)
        return cfg.EXIT_IO


if __name__ == '__main__':
    sys.exit(main())
