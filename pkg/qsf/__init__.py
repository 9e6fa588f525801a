"""QSF: Koopman / linear-attention language models with closed-form propagators."""

__version__ = "0.1.0"
