# /qsf/data.py

import dataclasses
import logging

import numpy as np

from .config import TRAIN_FRACTION
from .errors import FormatError, RangeError

logger = logging.getLogger(__name__)

BYTE_VOCAB = 256


def tokenize(data):
    """Byte-level tokens: each byte value is its own id (V = 256)."""
    if isinstance(data, str):
        data = data.encode('utf-8')
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= BYTE_VOCAB):
        raise RangeError(f"byte-level ids must lie in [0, {BYTE_VOCAB})")
    return ids.astype(np.uint8).tobytes()


def to_text(ids):
    return detokenize(ids).decode('utf-8', errors='replace')


@dataclasses.dataclass
class Corpus:
    """A tokenized text file split into a leading train part and a trailing validation part."""
    source: str
    tokens: np.ndarray
    split: int

    @classmethod
    def from_bytes(cls, data, source='<memory>', train_fraction=TRAIN_FRACTION):
        tokens = tokenize(data)
        split = int(len(tokens) * train_fraction)
        return cls(source, tokens, split)

    @classmethod
    def from_path(cls, path, train_fraction=TRAIN_FRACTION):
        with open(path, 'rb') as f:
            data = f.read()
        corpus = cls.from_bytes(data, source=str(path), train_fraction=train_fraction)
        logger.info("Loaded corpus %s: %d bytes, %d for training.", path, len(corpus.tokens), corpus.split)
        return corpus

    @property
    def train(self):
        return self.tokens[:self.split]

    @property
    def validation(self):
        return self.tokens[self.split:]

    def require_windows(self, seq_len):
        """Both splits must hold at least one window of seq_len + 1 tokens."""
        for name, part in (('train', self.train), ('validation', self.validation)):
            if len(part) < seq_len + 1:
                raise FormatError(f"{name} split of {self.source} has {len(part)} tokens, "
                                  f"needs at least {seq_len + 1} for N={seq_len}")


def sample_windows(tokens, batch_size, seq_len, rng):
    """Random (inputs, targets) pairs of shape (batch_size, seq_len) from one split."""
    tokens = np.asarray(tokens)
    span = len(tokens) - seq_len
    if span < 1:
        raise FormatError(f"split of {len(tokens)} tokens is shorter than a window of {seq_len + 1}")
    starts = rng.integers(0, span, size=batch_size)
    windows = np.stack([tokens[s:s + seq_len + 1] for s in starts])
    return windows[:, :-1], windows[:, 1:]
