"""Zero-shot open-set recognition with adversarial semantic embeddings."""

__version__ = "0.1.0"
