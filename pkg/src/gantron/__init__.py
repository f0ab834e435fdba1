"""Emotion-conditioned adversarial text-to-mel synthesis."""

__version__ = "0.1.0"
