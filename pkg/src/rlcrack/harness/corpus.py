"""Watermarked (prompt, response) corpora stored as JSONL."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .. import _rng
from ..errors import NoCountablePositions, ParameterError
from ..toylm import LMParams, make_bag, sample_batch, sample_sequence
from ..watermark import WatermarkScheme, detect

CORPUS_VERSION = 1


@dataclass(frozen=True)
class CorpusRecord:
    id: int
    prompt: tuple
    response: tuple
    scheme: WatermarkScheme
    key_id: int
    z: Optional[float]  # None when the detector has no countable position
    seed: int

    @property
    def pair(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.prompt, dtype=np.int64), np.asarray(self.response, dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "version": CORPUS_VERSION,
            "id": self.id,
            "prompt": list(self.prompt),
            "response": list(self.response),
            "scheme": self.scheme.to_dict(),
            "key_id": self.key_id,
            "z": self.z,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusRecord":
        if data.get("version") != CORPUS_VERSION:
            raise ParameterError(f"unsupported corpus version {data.get('version')!r}")
        return cls(
            int(data["id"]),
            tuple(int(t) for t in data["prompt"]),
            tuple(int(t) for t in data["response"]),
            WatermarkScheme.from_dict(data["scheme"]),
            int(data["key_id"]),
            None if data["z"] is None else float(data["z"]),
            int(data["seed"]),
        )


def score(response, scheme: WatermarkScheme, victim: Optional[LMParams], prompt) -> Optional[float]:
    try:
        return detect(response, scheme, victim_lm=victim, prompt=prompt).z_score
    except NoCountablePositions:
        return None


def generate_records(
    victim: LMParams,
    scheme: WatermarkScheme,
    n: int,
    length: int,
    prompt_length: int,
    seed: int,
    keys: Optional[Sequence[int]] = None,
) -> list[CorpusRecord]:
    """Sample ``n`` prompts from the victim and a watermarked response to each.

    Record i draws from ``draw_seed(seed, i)``; with ``keys`` the hash key
    cycles round-robin and ``key_id`` indexes into ``keys``.
    """
    if n < 0:
        raise ParameterError("n must be >= 0")
    if length < 1 or prompt_length < 0:
        raise ParameterError("length must be >= 1 and prompt_length >= 0")
    if keys is not None and len(keys) == 0:
        raise ParameterError("keys must be non-empty when given")
    if n == 0:
        return []
    v = victim.vocab_size
    rec_seeds = [_rng.draw_seed(seed, i) for i in range(n)]
    prompts = sample_batch(victim, [], None, prompt_length, [_rng.draw_seed(s, 0) for s in rec_seeds])
    schemes = [scheme if keys is None else scheme.with_key(int(keys[i % len(keys)])) for i in range(n)]
    bags = np.stack([make_bag(p, v) for p in prompts])
    resp_seeds = [_rng.draw_seed(s, 1) for s in rec_seeds]
    if scheme.bias == 0.0:
        # an unbiased watermark leaves the logits untouched, so batch the rows
        responses = sample_batch(victim, list(prompts), bags, length, resp_seeds)
    else:
        responses = np.stack(
            [
                sample_sequence(victim, prompts[i], bags[i], length, resp_seeds[i], schemes[i].embedder(v))
                for i in range(n)
            ]
        )
    return [
        CorpusRecord(
            id=i,
            prompt=tuple(prompts[i].tolist()),
            response=tuple(responses[i].tolist()),
            scheme=schemes[i],
            key_id=0 if keys is None else i % len(keys),
            z=score(responses[i], schemes[i], victim, prompts[i]),
            seed=rec_seeds[i],
        )
        for i in range(n)
    ]


def write_corpus(records: Iterable[CorpusRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_corpus(path: str | Path) -> list[CorpusRecord]:
    with open(path, encoding="utf-8") as fh:
        return [CorpusRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def generate_corpus(
    victim: LMParams,
    scheme: WatermarkScheme,
    n: int,
    length: int,
    prompt_length: int,
    seed: int,
    keys: Optional[Sequence[int]] = None,
    path: Optional[str | Path] = None,
) -> list[CorpusRecord]:
    records = generate_records(victim, scheme, n, length, prompt_length, seed, keys)
    if path is not None:
        write_corpus(records, path)
    return records


def training_pairs(records: Sequence[CorpusRecord]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [rec.pair for rec in records]
