"""Attack evaluation: evasion success, removal rate and z-score populations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .. import _rng
from ..attack import paraphrase_batch, passk_attack, semantic_surrogate
from ..errors import ParameterError
from ..toylm import LMParams, make_bag, sample_batch
from ..watermark import DEFAULT_Z_THRESHOLD, WatermarkScheme
from .corpus import CorpusRecord, score

DEFAULT_SEM_THRESHOLD = 0.7
BIN_WIDTH = 0.25
POPULATIONS = ("unwatermarked", "watermarked", "attacked")


class Attacker(Protocol):
    name: str

    def attack(self, record: CorpusRecord, seed: int) -> np.ndarray: ...


class IdentityAttacker:
    name = "identity"

    def attack(self, record, seed):
        return np.asarray(record.response, dtype=np.int64)


class ParaphraseAttacker:
    """One sample from a bag-conditioned model: the untrained "resample" baseline
    when built from the victim, or a trained policy."""

    def __init__(self, params: LMParams, name: str = "policy"):
        self.params = params
        self.name = name

    def attack(self, record, seed):
        return paraphrase_batch(self.params, record.response, [seed])[0]


class UnrelatedAttacker:
    """Fresh text of the same length that ignores the input entirely."""

    name = "unrelated"

    def __init__(self, lm: LMParams):
        self.lm = lm

    def attack(self, record, seed):
        return sample_batch(self.lm, [], None, len(record.response), [seed])[0]


class PasskAttacker:
    """Detector-oracle best-of-k over a paraphrase model."""

    def __init__(self, params: LMParams, k: int, threshold: float = DEFAULT_Z_THRESHOLD, victim: Optional[LMParams] = None):
        self.params, self.k, self.threshold, self.victim = params, k, threshold, victim
        self.name = f"pass@{k}"

    def attack(self, record, seed):
        res = passk_attack(self.params, record.response, self.k, record.scheme, self.threshold, seed, self.victim, record.prompt)
        return res.best


def attacker_reference(victim: LMParams, copy_strength: float) -> LMParams:
    """Victim tables with the paraphrasing copy strength switched on."""
    return victim.with_params(victim.table, copy_strength)


@dataclass
class Histogram:
    edges: list
    counts: list

    def to_dict(self) -> dict:
        return {"edges": list(self.edges), "counts": list(self.counts)}


@dataclass
class AttackMetrics:
    esr: float
    removal_rate: float
    mean_semantic: float
    n: int
    n_evaded: int
    n_removed: int
    z_threshold: float
    sem_threshold: float
    mean_z: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)
    attacked_z: list = field(default_factory=list)
    semantic: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "esr": self.esr,
            "removal": self.removal_rate,
            "mean_semantic": self.mean_semantic,
            "n": self.n,
            "n_evaded": self.n_evaded,
            "n_removed": self.n_removed,
            "z_threshold": self.z_threshold,
            "sem_threshold": self.sem_threshold,
            "mean_z": dict(self.mean_z),
            "attacked_z": list(self.attacked_z),
            "semantic": list(self.semantic),
        }

    @classmethod
    def from_dict(cls, metrics: dict, histograms: dict) -> "AttackMetrics":
        return cls(
            esr=metrics["esr"],
            removal_rate=metrics["removal"],
            mean_semantic=metrics["mean_semantic"],
            n=metrics["n"],
            n_evaded=metrics["n_evaded"],
            n_removed=metrics["n_removed"],
            z_threshold=metrics["z_threshold"],
            sem_threshold=metrics["sem_threshold"],
            mean_z=dict(metrics["mean_z"]),
            histograms={k: Histogram(v["edges"], v["counts"]) for k, v in histograms.items()},
            attacked_z=list(metrics["attacked_z"]),
            semantic=list(metrics["semantic"]),
        )


def histograms(populations: dict, width: float = BIN_WIDTH) -> dict:
    """Shared bin grid aligned to multiples of ``width`` covering every population."""
    values = [np.asarray(v, dtype=np.float64) for v in populations.values() if len(v)]
    if not values:
        return {}
    allv = np.concatenate(values)
    lo = math.floor(allv.min() / width)
    hi = math.floor(allv.max() / width) + 1
    edges = np.arange(lo, hi + 1) * width
    out = {}
    for name, vals in populations.items():
        counts, _ = np.histogram(np.asarray(vals, dtype=np.float64), bins=edges)
        out[name] = Histogram(edges.tolist(), counts.tolist())
    return out


def _z(tokens, scheme: WatermarkScheme, victim, prompt) -> float:
    # no countable position means no evidence of a watermark
    z = score(tokens, scheme, victim, prompt)
    return 0.0 if z is None else z


def unwatermarked_responses(victim: LMParams, corpus: Sequence[CorpusRecord]) -> np.ndarray:
    """Victim responses to the corpus prompts without any watermark bias."""
    prompts = [np.asarray(r.prompt, dtype=np.int64) for r in corpus]
    lengths = {len(r.response) for r in corpus}
    if len(lengths) != 1:
        raise ParameterError("unwatermarked population needs equal response lengths")
    bags = np.stack([make_bag(p, victim.vocab_size) for p in prompts])
    return sample_batch(victim, prompts, bags, lengths.pop(), [_rng.draw_seed(r.seed, 2) for r in corpus])


def evaluate_attack(
    attacker: Attacker,
    corpus: Sequence[CorpusRecord],
    scheme: Optional[WatermarkScheme] = None,
    z_threshold: float = DEFAULT_Z_THRESHOLD,
    sem_threshold: float = DEFAULT_SEM_THRESHOLD,
    seed: int = 0,
    victim: Optional[LMParams] = None,
) -> AttackMetrics:
    """Attack every record once and score the result.

    Detection uses ``scheme`` when given, otherwise each record's own scheme.
    With ``victim`` an unwatermarked reference population is generated too.
    """
    if not corpus:
        raise ParameterError("cannot evaluate on an empty corpus")
    att_z, wm_z, sem = [], [], []
    for i, rec in enumerate(corpus):
        sch = scheme or rec.scheme
        out = attacker.attack(rec, _rng.draw_seed(seed, i))
        att_z.append(_z(out, sch, victim, rec.prompt))
        wm_z.append(_z(rec.response, sch, victim, rec.prompt))
        sem.append(semantic_surrogate(rec.response, out))
    pops = {"watermarked": wm_z, "attacked": att_z}
    if victim is not None:
        clean = unwatermarked_responses(victim, corpus)
        pops["unwatermarked"] = [_z(c, scheme or r.scheme, victim, r.prompt) for c, r in zip(clean, corpus)]
    n = len(corpus)
    z = np.asarray(att_z)
    s = np.asarray(sem)
    removed = z <= z_threshold
    evaded = removed & (s > sem_threshold)
    return AttackMetrics(
        esr=int(evaded.sum()) / n,
        removal_rate=int(removed.sum()) / n,
        mean_semantic=float(s.mean()),
        n=n,
        n_evaded=int(evaded.sum()),
        n_removed=int(removed.sum()),
        z_threshold=float(z_threshold),
        sem_threshold=float(sem_threshold),
        mean_z={k: float(np.mean(v)) for k, v in pops.items()},
        histograms=histograms({k: pops[k] for k in POPULATIONS if k in pops}),
        attacked_z=[float(x) for x in att_z],
        semantic=[float(x) for x in sem],
    )
