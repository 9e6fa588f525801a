# /qsf/ml_models/spectral.py

"""Eigenvalue spectra of trained Koopman operators and the zeta trace exports."""

import csv
import dataclasses
import logging

import numpy as np

from ..config import NEUTRAL_TOL
from ..errors import FormatError, RangeError
from ..linalg import check_eigenvalues, eigenvalues
from ..utils.helpers import atomic_write

logger = logging.getLogger(__name__)

MODE_CLASSES = ('decay', 'neutral', 'growth')
SPECTRUM_HEADER = ['layer', 're', 'im', 'modulus', 'class']


def classify_modes(lambdas, tol=NEUTRAL_TOL):
    """'decay' below 1 - tol, 'growth' above 1 + tol, 'neutral' in between (inclusive)."""
    if not tol > 0:
        raise RangeError(f"neutral tolerance must be positive, got {tol}")
    moduli = np.abs(np.asarray(lambdas, dtype=complex))
    return ['decay' if m < 1.0 - tol else 'growth' if m > 1.0 + tol else 'neutral' for m in moduli]


@dataclasses.dataclass
class ModeEntry:
    re: float
    im: float
    modulus: float
    mode_class: str


@dataclasses.dataclass
class SpectrumReport:
    """Per-layer classified eigenvalues; ``summary`` pools every layer."""
    layers: list
    tol: float
    unitarity_gap: float | None = None

    @property
    def summary(self):
        counts = dict.fromkeys(MODE_CLASSES, 0)
        for entries in self.layers:
            for e in entries:
                counts[e.mode_class] += 1
        return counts

    def layer_counts(self, layer):
        counts = dict.fromkeys(MODE_CLASSES, 0)
        for e in self.layers[layer]:
            counts[e.mode_class] += 1
        return counts

    def pooled_eigenvalues(self):
        return np.array([complex(e.re, e.im) for entries in self.layers for e in entries])


def _sorted_by_angle(lambdas):
    lambdas = np.asarray(lambdas, dtype=complex)
    order = np.lexsort((np.abs(lambdas), np.angle(lambdas)))
    return lambdas[order]


def spectrum_from_operators(operators, tol=NEUTRAL_TOL, unitary=False):
    layers = []
    for K in operators:
        check_eigenvalues(K)
        lambdas = _sorted_by_angle(eigenvalues(K))
        classes = classify_modes(lambdas, tol)
        layers.append([ModeEntry(float(l.real), float(l.imag), float(abs(l)), c) for l, c in zip(lambdas, classes)])
    gap = None
    if unitary:
        moduli = [e.modulus for entries in layers for e in entries]
        gap = float(max((abs(m - 1.0) for m in moduli), default=0.0))
    return SpectrumReport(layers, tol, gap)


def layer_spectrum(checkpoint, tol=NEUTRAL_TOL):
    """Spectrum of every layer's Koopman operator (Stage IV: the unitary exp(W - W^T))."""
    if checkpoint.config.stage == 1:
        raise FormatError("a Stage I checkpoint has no Koopman matrices")
    operators = checkpoint.model().koopman_operators()
    report = spectrum_from_operators(operators, tol, unitary=checkpoint.config.unitary)
    logger.debug("spectrum of %d layers: %s", len(operators), report.summary)
    return report


def export_spectrum_csv(report, path):
    with atomic_write(path, newline='') as f:
        writer = csv.writer(f)
        writer.writerow(SPECTRUM_HEADER)
        for layer, entries in enumerate(report.layers):
            for e in entries:
                writer.writerow([layer, repr(e.re), repr(e.im), repr(e.modulus), e.mode_class])
    return path


def read_spectrum_csv(path, tol=NEUTRAL_TOL):
    """Parses a spectrum CSV back into a SpectrumReport."""
    layers = {}
    try:
        with open(path, newline='', encoding='utf-8') as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != SPECTRUM_HEADER:
                raise FormatError(f"{path} does not have the header {','.join(SPECTRUM_HEADER)}")
            for row in reader:
                entry = ModeEntry(float(row['re']), float(row['im']), float(row['modulus']), row['class'])
                if entry.mode_class not in MODE_CLASSES:
                    raise FormatError(f"unknown mode class {entry.mode_class!r} in {path}")
                layers.setdefault(int(row['layer']), []).append(entry)
    except ValueError as e:
        raise FormatError(f"malformed spectrum row in {path}: {e}")
    return SpectrumReport([layers[k] for k in sorted(layers)], tol)


# --- Zeta trace ---

@dataclasses.dataclass
class ZetaTrace:
    """zeta of every layer at each evaluation step."""
    steps: list = dataclasses.field(default_factory=list)
    values: list = dataclasses.field(default_factory=list)

    def append(self, step, zetas):
        zetas = [float(z) for z in zetas]
        if self.values and len(zetas) != len(self.values[0]):
            raise FormatError(f"zeta trace has {len(self.values[0])} layers, got {len(zetas)}")
        self.steps.append(int(step))
        self.values.append(zetas)

    def __len__(self):
        return len(self.steps)

    @property
    def mean(self):
        return [float(np.mean(v)) for v in self.values]

    @property
    def std(self):
        return [float(np.std(v)) for v in self.values]

    def to_dict(self):
        return {'steps': list(self.steps), 'values': [list(v) for v in self.values]}

    @classmethod
    def from_dict(cls, data):
        trace = cls()
        for step, zetas in zip(data.get('steps', []), data.get('values', [])):
            trace.append(step, zetas)
        return trace


def export_zeta_csv(trace, path, summary_path):
    """Writes ``step,layer,zeta`` rows to ``path`` and ``step,mean,std`` to ``summary_path``."""
    with atomic_write(path, newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['step', 'layer', 'zeta'])
        for step, zetas in zip(trace.steps, trace.values):
            for layer, z in enumerate(zetas):
                writer.writerow([step, layer, repr(z)])
    with atomic_write(summary_path, newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['step', 'mean', 'std'])
        for step, mean, std in zip(trace.steps, trace.mean, trace.std):
            writer.writerow([step, repr(mean), repr(std)])
    return path, summary_path
