"""Keyed green-list watermarking: embedding transform and z-score detection.

Three variants share one hash:

* ``unigram``       green list depends on the token alone
* ``windowed``      green list keyed on the previous ``prefix_length`` tokens
* ``entropy_gated`` windowed, but only positions whose victim-model entropy
                    exceeds ``entropy_threshold`` are biased and counted

Positions whose hash window would reach before the start of the response are
neither biased nor counted.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import _rng
from .errors import NoCountablePositions, ParameterError
from .toylm import LMParams, check_tokens, entropy, make_bag, step_logits

VARIANTS = ("unigram", "windowed", "entropy_gated")

DEFAULT_KEY = 15485863
DEFAULT_GREEN_RATE = 0.5
DEFAULT_BIAS = 2.0
DEFAULT_Z_THRESHOLD = 4.0
DEFAULT_ENTROPY_THRESHOLD = 0.9


@dataclass(frozen=True)
class WatermarkScheme:
    variant: str = "windowed"
    key: int = DEFAULT_KEY
    green_rate: float = DEFAULT_GREEN_RATE
    bias: float = DEFAULT_BIAS
    prefix_length: int = 4
    entropy_threshold: Optional[float] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")
        if not 0.0 < self.green_rate < 1.0:
            raise ParameterError(f"green_rate must lie in (0, 1), got {self.green_rate}")
        if not (self.bias >= 0 and math.isfinite(self.bias)):
            raise ParameterError(f"bias must be finite and >= 0, got {self.bias}")
        if self.prefix_length < 0:
            raise ParameterError("prefix_length must be >= 0")
        if self.variant == "unigram" and self.prefix_length != 0:
            raise ParameterError("unigram scheme requires prefix_length = 0")
        if self.variant == "entropy_gated":
            if self.entropy_threshold is None or self.entropy_threshold < 0:
                raise ParameterError("entropy_gated scheme requires entropy_threshold >= 0")
        if not 0 <= self.key < 1 << 64:
            raise ParameterError("key must be a 64-bit unsigned integer")

    @classmethod
    def unigram(cls, **kw) -> "WatermarkScheme":
        return cls(variant="unigram", prefix_length=0, **kw)

    @classmethod
    def windowed(cls, prefix_length: int = 4, **kw) -> "WatermarkScheme":
        return cls(variant="windowed", prefix_length=prefix_length, **kw)

    @classmethod
    def entropy_gated(
        cls, prefix_length: int = 1, entropy_threshold: float = DEFAULT_ENTROPY_THRESHOLD, **kw
    ) -> "WatermarkScheme":
        return cls(
            variant="entropy_gated",
            prefix_length=prefix_length,
            entropy_threshold=entropy_threshold,
            **kw,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WatermarkScheme":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    def with_key(self, key: int) -> "WatermarkScheme":
        return WatermarkScheme(**{**asdict(self), "key": key})

    def embedder(self, vocab_size: int):
        """Logit transform injecting this watermark into ``sample_sequence``."""

        def transform(step: np.ndarray, generated: Sequence[int]) -> np.ndarray:
            if len(generated) < self.prefix_length:
                return step
            window = generated[len(generated) - self.prefix_length:]
            mask = green_mask(self, window, vocab_size)
            gate = self.entropy_threshold if self.variant == "entropy_gated" else None
            return bias_transform(step, mask, self.bias, gate)

        return transform


@dataclass(frozen=True)
class DetectionResult:
    counted_positions: int
    green_hits: int
    z_score: float
    threshold: float
    detected: bool

    def to_dict(self) -> dict:
        return asdict(self)


def token_hash(key: int, window: Sequence[int], token: int) -> float:
    h = key
    for w in window:
        h = _rng.fold(h, int(w))
    return _rng.unit_interval(_rng.fold(h, int(token)))


def green_mask(scheme: WatermarkScheme, window: Sequence[int], vocab_size: int) -> np.ndarray:
    """Green membership of every token id given the preceding tokens.

    Only the last ``prefix_length`` entries of ``window`` are hashed.
    """
    p = scheme.prefix_length
    h = scheme.key
    for w in (window[len(window) - p:] if p else ()):
        h = _rng.fold(h, int(w))
    values = _rng.unit_interval(_rng.fold_array(h, np.arange(vocab_size, dtype=np.uint64)))
    return values < scheme.green_rate


def bias_transform(
    logits: np.ndarray,
    mask: np.ndarray,
    bias: float,
    entropy_threshold: Optional[float] = None,
) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape:
        raise ParameterError(f"logits {logits.shape} and mask {mask.shape} differ in shape")
    if entropy_threshold is not None and entropy(logits) <= entropy_threshold:
        return logits
    return logits + bias * mask


def z_score(green_hits: int, counted: int, green_rate: float) -> float:
    if counted <= 0:
        raise NoCountablePositions("no countable positions")
    expected = green_rate * counted
    return (green_hits - expected) / math.sqrt(counted * green_rate * (1.0 - green_rate))


def countable_positions(
    sequence: np.ndarray,
    scheme: WatermarkScheme,
    victim_lm: Optional[LMParams] = None,
    prompt: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Boolean per position: does the detector count it?"""
    counted = np.arange(sequence.size) >= scheme.prefix_length
    if scheme.variant == "entropy_gated":
        if victim_lm is None or prompt is None:
            raise ParameterError("entropy_gated detection needs the victim model and prompt")
        prompt = check_tokens(prompt, victim_lm.vocab_size)
        raw = step_logits(victim_lm, prompt, make_bag(prompt, victim_lm.vocab_size), sequence)
        counted &= entropy(raw) > scheme.entropy_threshold
    return counted


def green_flags(sequence: np.ndarray, scheme: WatermarkScheme) -> np.ndarray:
    """Green membership of each token under its own reconstructed window.

    Positions before ``prefix_length`` are reported False.
    """
    p = scheme.prefix_length
    flags = np.zeros(sequence.size, dtype=bool)
    n = sequence.size - p
    if n <= 0:
        return flags
    seq = sequence.astype(np.uint64)
    h = np.full(n, scheme.key, dtype=np.uint64)
    for j in range(p):
        h = _rng.fold_array(h, seq[j:j + n])
    flags[p:] = _rng.unit_interval(_rng.fold_array(h, seq[p:])) < scheme.green_rate
    return flags


def detect(
    sequence: Sequence[int],
    scheme: WatermarkScheme,
    threshold: float = DEFAULT_Z_THRESHOLD,
    victim_lm: Optional[LMParams] = None,
    prompt: Optional[Sequence[int]] = None,
) -> DetectionResult:
    seq = np.asarray(sequence, dtype=np.int64).reshape(-1)
    if seq.size == 0:
        raise ParameterError("cannot detect on an empty sequence")
    if seq.min() < 0:
        raise ParameterError("negative token id")
    counted = countable_positions(seq, scheme, victim_lm, prompt)
    T = int(counted.sum())
    g = int((green_flags(seq, scheme) & counted).sum())
    z = z_score(g, T, scheme.green_rate)
    return DetectionResult(T, g, z, float(threshold), bool(z > threshold))
