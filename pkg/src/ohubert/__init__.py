"""Other-information HuBERT: masked prediction plus an utterance-similarity token."""

__version__ = "0.1.0"
