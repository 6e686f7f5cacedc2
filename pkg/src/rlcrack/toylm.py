"""Tabular Markov language model with a document-level copy bias.

The conditional for the next token is

    logit[v] = table[state(window), v] + copy_strength * ln(1 + bag[v])

where ``state`` encodes the last ``order`` tokens (left-padded with token 0)
and ``bag`` counts token occurrences in a conditioning document.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import _rng
from .errors import ParameterError, TokenRangeError

FORMAT_VERSION = 1
MAX_ORDER = 4
MAX_TABLE_ENTRIES = 1 << 24

# (step logits, continuation generated so far) -> transformed logits
LogitTransform = Callable[[np.ndarray, Sequence[int]], np.ndarray]


@dataclass(frozen=True, eq=False)
class LMParams:
    vocab_size: int
    order: int
    copy_strength: float
    seed: int
    table: np.ndarray = field(repr=False)

    @property
    def n_states(self) -> int:
        return self.vocab_size**self.order

    @property
    def n_params(self) -> int:
        return self.table.size + 1

    def with_params(self, table: np.ndarray, copy_strength: float) -> "LMParams":
        table = np.array(table, dtype=np.float64)
        table.setflags(write=False)
        return replace(self, table=table, copy_strength=float(copy_strength))

    def same_as(self, other: "LMParams") -> bool:
        return (
            self.vocab_size == other.vocab_size
            and self.order == other.order
            and self.seed == other.seed
            and self.copy_strength == other.copy_strength
            and np.array_equal(self.table, other.table, equal_nan=True)
        )

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "vocab_size": self.vocab_size,
            "order": self.order,
            "copy_strength": self.copy_strength,
            "seed": self.seed,
            # float repr is the shortest string that round-trips exactly
            "table": self.table.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LMParams":
        if data.get("version") != FORMAT_VERSION:
            raise ParameterError(f"unsupported LM format version {data.get('version')!r}")
        v, n = int(data["vocab_size"]), int(data["order"])
        _check_shape(v, n, float(data["copy_strength"]))
        table = np.asarray(data["table"], dtype=np.float64).reshape(v**n, v)
        table.setflags(write=False)
        return cls(v, n, float(data["copy_strength"]), int(data["seed"]), table)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "LMParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_shape(vocab_size: int, order: int, copy_strength: float) -> None:
    if vocab_size < 2:
        raise ParameterError(f"vocab_size must be >= 2, got {vocab_size}")
    if not 0 <= order <= MAX_ORDER:
        raise ParameterError(f"order must be in [0, {MAX_ORDER}], got {order}")
    if not (copy_strength >= 0 and np.isfinite(copy_strength)):
        raise ParameterError(f"copy_strength must be finite and >= 0, got {copy_strength}")
    if vocab_size ** (order + 1) > MAX_TABLE_ENTRIES:
        raise ParameterError(f"table of {vocab_size}**{order + 1} entries is too large")


def build_lm(
    vocab_size: int,
    order: int,
    copy_strength: float,
    seed: int,
    logit_scale: float = 1.0,
) -> LMParams:
    """Draw a random model; base logits are ``logit_scale`` times standard normals."""
    _check_shape(vocab_size, order, copy_strength)
    rng = _rng.generator(_rng.draw_seed(seed, 0))
    table = logit_scale * rng.standard_normal((vocab_size**order, vocab_size))
    table.setflags(write=False)
    return LMParams(vocab_size, order, float(copy_strength), int(seed), table)


def check_tokens(tokens: Sequence[int] | np.ndarray, vocab_size: int) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        bad = arr[(arr < 0) | (arr >= vocab_size)][0]
        raise TokenRangeError(f"token {bad} outside vocabulary of size {vocab_size}")
    return arr


def make_bag(tokens: Sequence[int] | np.ndarray, vocab_size: int) -> np.ndarray:
    """Occurrence counts of each token id."""
    return np.bincount(check_tokens(tokens, vocab_size), minlength=vocab_size).astype(np.int64)


def window_state(lm: LMParams, window: Sequence[int] | np.ndarray) -> int:
    arr = check_tokens(window, lm.vocab_size)
    state = 0
    if lm.order == 0:
        return 0
    tail = arr[-lm.order:]
    for tok in np.concatenate([np.zeros(lm.order - tail.size, dtype=np.int64), tail]):
        state = state * lm.vocab_size + int(tok)
    return state


def bag_term(lm: LMParams, bag: Optional[np.ndarray]) -> np.ndarray:
    """Additive copy-bias vector (or scalar 0 when there is nothing to add)."""
    if bag is None or lm.copy_strength == 0.0:
        return np.zeros(lm.vocab_size)
    bag = np.asarray(bag)
    if bag.shape[-1] != lm.vocab_size:
        raise ParameterError("bag length must equal vocab_size")
    return lm.copy_strength * np.log1p(bag)


def logits(lm: LMParams, window: Sequence[int], bag: Optional[np.ndarray] = None) -> np.ndarray:
    return lm.table[window_state(lm, window)] + bag_term(lm, bag)


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(x: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(x))


def entropy(x: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of softmax(x) along the last axis."""
    lp = log_softmax(x)
    return -np.sum(np.exp(lp) * lp, axis=-1)


def _initial_state(lm: LMParams, prompt: Sequence[int]) -> int:
    return window_state(lm, prompt)


def _advance(lm: LMParams, state, token):
    if lm.order == 0:
        return state * 0
    return (state * lm.vocab_size + token) % lm.n_states


def sample_batch(
    lm: LMParams,
    prompt: Sequence[int] | Sequence[Sequence[int]],
    bags: Optional[np.ndarray],
    length: int,
    seeds: Sequence[int] | np.ndarray,
) -> np.ndarray:
    """Sample one continuation per seed, vectorized across seeds.

    ``prompt`` is one token sequence shared by all rows or a list with one
    prompt per seed.  ``bags`` is None, a single count vector shared by all
    rows, or one row per seed.  Row i equals
    ``sample_sequence(lm, prompt_i, bag_i, length, seed=seeds[i])``.
    """
    if length < 0:
        raise ParameterError("length must be >= 0")
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1)
    n = seeds.size
    if len(prompt) and isinstance(prompt[0], (list, tuple, np.ndarray)):
        if len(prompt) != n:
            raise ParameterError("need one prompt per seed")
        start = np.array([_initial_state(lm, p) for p in prompt], dtype=np.int64)
    else:
        start = np.full(n, _initial_state(lm, prompt), dtype=np.int64)
    uniforms = np.stack([_rng.generator(int(s)).random(length) for s in seeds]) if n else np.zeros((0, length))
    bias = bag_term(lm, bags)
    if bias.ndim == 1:
        bias = np.broadcast_to(bias, (n, lm.vocab_size))
    out = np.zeros((n, length), dtype=np.int64)
    state = start
    for t in range(length):
        probs = softmax(lm.table[state] + bias)
        cdf = np.cumsum(probs, axis=1)
        tok = (cdf < uniforms[:, t:t + 1] * cdf[:, -1:]).sum(axis=1)
        tok = np.minimum(tok, lm.vocab_size - 1)
        out[:, t] = tok
        state = _advance(lm, state, tok)
    return out


def sample_sequence(
    lm: LMParams,
    prompt: Sequence[int],
    bag: Optional[np.ndarray],
    length: int,
    seed: int,
    logit_transform: Optional[LogitTransform] = None,
) -> np.ndarray:
    """Sample ``length`` tokens after ``prompt``.

    The per-step uniforms come from the seed alone, so with no transform this
    matches the corresponding row of :func:`sample_batch` exactly.
    """
    if logit_transform is None:
        return sample_batch(lm, prompt, bag, length, [seed])[0]
    if length < 0:
        raise ParameterError("length must be >= 0")
    check_tokens(prompt, lm.vocab_size)
    u = _rng.generator(seed).random(length)
    bias = bag_term(lm, bag)
    state = _initial_state(lm, prompt)
    out: list[int] = []
    for t in range(length):
        step = logit_transform(lm.table[state] + bias, out)
        probs = softmax(step)
        cdf = np.cumsum(probs)
        tok = min(int(np.sum(cdf < u[t] * cdf[-1])), lm.vocab_size - 1)
        out.append(tok)
        state = _advance(lm, state, tok)
    return np.asarray(out, dtype=np.int64)


def step_logits(
    lm: LMParams,
    prompt: Sequence[int],
    bag: Optional[np.ndarray],
    continuation: Sequence[int],
) -> np.ndarray:
    """Untransformed logits at every continuation position, shape (len, V)."""
    cont = check_tokens(continuation, lm.vocab_size)
    return lm.table[step_states(lm, prompt, cont)] + bag_term(lm, bag)


def step_states(lm: LMParams, prompt: Sequence[int], continuation: np.ndarray) -> np.ndarray:
    """Window state used when predicting each continuation token."""
    check_tokens(prompt, lm.vocab_size)
    states = np.empty(len(continuation), dtype=np.int64)
    state = _initial_state(lm, prompt)
    for t, tok in enumerate(continuation):
        states[t] = state
        state = _advance(lm, state, int(tok))
    return states


def token_logprobs(
    lm: LMParams,
    prompt: Sequence[int],
    bag: Optional[np.ndarray],
    continuation: Sequence[int],
    logit_transform: Optional[LogitTransform] = None,
) -> np.ndarray:
    cont = check_tokens(continuation, lm.vocab_size)
    raw = step_logits(lm, prompt, bag, cont)
    if logit_transform is not None:
        raw = np.stack([logit_transform(raw[t], cont[:t].tolist()) for t in range(cont.size)]) if cont.size else raw
    lp = log_softmax(raw)
    return lp[np.arange(cont.size), cont]


def sequence_logprob(
    lm: LMParams,
    prompt: Sequence[int],
    bag: Optional[np.ndarray],
    continuation: Sequence[int],
    logit_transform: Optional[LogitTransform] = None,
) -> float:
    """Chain-rule log-probability of ``continuation`` given the prompt and bag."""
    return float(np.sum(token_logprobs(lm, prompt, bag, continuation, logit_transform)))


def scale_logits(scale: float) -> LogitTransform:
    """Temperature-like transform: multiply logits by ``scale``."""
    return lambda x, _generated: x * scale


def compose(*transforms: Optional[LogitTransform]) -> Optional[LogitTransform]:
    active = [t for t in transforms if t is not None]
    if not active:
        return None

    def run(x: np.ndarray, generated: Sequence[int]) -> np.ndarray:
        for t in active:
            x = t(x, generated)
        return x

    return run
