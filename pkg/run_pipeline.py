# /run_pipeline.py

"""Desk-scale progressive pipeline: Stage I -> II -> III, and Stage IV from Stage II.

Every stage uses the same seed and base configuration. Writes one run
directory per stage, a comparison table, spectra, zeta exports and sample
generations for a fixed prompt.

    python run_pipeline.py --corpus tinystories.txt --out outputs/pipeline [--config base.json]
"""

import argparse
import csv
import logging
import math
import os
import sys

from qsf import config as cfg
from qsf.checkpoint import load_checkpoint
from qsf.cli import exit_code_for
from qsf.config import RunConfig
from qsf.data import Corpus, to_text, tokenize
from qsf.errors import QSFError
from qsf.ml_models.spectral import export_spectrum_csv, export_zeta_csv, layer_spectrum
from qsf.trainer import generate, train_stage
from qsf.utils.helpers import atomic_write, configure_logging

logger = logging.getLogger("run_pipeline")

PROMPT = "Once upon a time"
SAMPLE_TOKENS = 200
# stage -> stage whose checkpoint initialises it
PROTOCOL = ((1, None), (2, 1), (3, 2), (4, 2))


class ProgressivePipeline:
    def __init__(self, base_config, corpus_path, out_dir):
        self.base_config = base_config
        self.out_dir = out_dir
        self.corpus = Corpus.from_path(corpus_path, train_fraction=base_config.train_fraction)
        self.results = {}

    def stage_dir(self, stage):
        return os.path.join(self.out_dir, f"stage{stage}")

    def run_stage(self, stage, init_stage):
        run_config = self.base_config.with_overrides(stage=stage, output_dir=self.stage_dir(stage))
        init = None
        if init_stage is not None:
            init = load_checkpoint(self.results[init_stage].checkpoint_path)
        logger.info("--- Stage %d (init from %s) ---", stage, f"Stage {init_stage}" if init_stage else "scratch")
        self.results[stage] = train_stage(run_config, self.corpus, init)

    def export_analysis(self, stage):
        result = self.results[stage]
        run_dir = self.stage_dir(stage)
        if stage >= 2:
            report = layer_spectrum(result.checkpoint, tol=self.base_config.neutral_tol)
            export_spectrum_csv(report, os.path.join(run_dir, 'spectrum.csv'))
            logger.info("Stage %d spectrum: %s", stage, report.summary)
        if stage >= 3:
            export_zeta_csv(result.zeta_trace, os.path.join(run_dir, cfg.ZETA_FILE),
                            os.path.join(run_dir, cfg.ZETA_SUMMARY_FILE))
        ids = generate(result.checkpoint.model(), tokenize(PROMPT), SAMPLE_TOKENS)
        with atomic_write(os.path.join(run_dir, 'sample.txt')) as f:
            f.write(to_text(ids) + '\n')

    def write_comparison(self):
        path = os.path.join(self.out_dir, 'comparison.csv')
        with atomic_write(path, newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['stage', 'parameters', 'val_loss', 'perplexity'])
            for stage in sorted(self.results):
                r = self.results[stage]
                writer.writerow([stage, r.checkpoint.metadata['parameter_count'], f"{r.final_val_loss:.4f}",
                                 f"{math.exp(min(r.final_val_loss, 700.0)):.2f}"])
        return path

    def run(self):
        for stage, init_stage in PROTOCOL:
            self.run_stage(stage, init_stage)
            self.export_analysis(stage)
        path = self.write_comparison()
        for stage in sorted(self.results):
            r = self.results[stage]
            print(f"Stage {stage}: {r.checkpoint.metadata['parameter_count']:>9d} params, "
                  f"val loss {r.final_val_loss:.4f}")
        logger.info("Comparison table written to %s", path)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument('--corpus', required=True)
    parser.add_argument('--out', default=os.path.join(cfg.BASE_DIR, 'outputs', 'pipeline'))
    parser.add_argument('--config', help="base JSON run configuration")
    parser.add_argument('--seed', type=int)
    parser.add_argument('-v', '--verbose', action='store_true')
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        base = RunConfig.from_json(args.config) if args.config else RunConfig()
        base = base.with_overrides(seed=args.seed, corpus_path=args.corpus)
        ProgressivePipeline(base, args.corpus, args.out).run()
    except QSFError as e:
        logger.error("%s", e)
        return exit_code_for(e)
    except OSError as e:
        logger.error("I/O error: %s", e)
        return cfg.EXIT_IO
    return cfg.EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
