# /qsf/utils/helpers.py

import contextlib
import logging
import os
import tempfile

import numpy as np

LOG_FORMAT = "[%(levelname)s] %(message)s"


def configure_logging(verbose=False):
    """Sets up the tagged console format used by the CLI and the run scripts."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


@contextlib.contextmanager
def atomic_write(path, mode='w', newline=None, encoding=None):
    """Writes to a temp file next to ``path`` and renames it into place on success."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp-', dir=directory)
    if 'b' not in mode and encoding is None:
        encoding = 'utf-8'
    try:
        with os.fdopen(fd, mode, newline=newline, encoding=encoding) as f:
            yield f
        os.replace(tmp_path, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.remove(tmp_path)
        raise


def spawn_rngs(seed, n):
    """Independent generators derived from one seed, stable across runs."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def relative_error(actual, expected, floor=1e-12):
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    scale = max(float(np.max(np.abs(expected), initial=0.0)), floor)
    return float(np.max(np.abs(actual - expected), initial=0.0)) / scale
