"""Toy-scale watermark robustness lab: embedding, KL certificates, RL paraphrase attacks."""
__version__ = "0.1.0"
