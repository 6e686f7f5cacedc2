"""Desk-scale end-to-end setups: victim, corpora, attacker and GRPO settings."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..attack import EpochReport, GrpoConfig, PolicyState, train
from ..toylm import LMParams, build_lm
from ..watermark import WatermarkScheme
from .corpus import CorpusRecord, generate_records, training_pairs
from .evaluate import AttackMetrics, ParaphraseAttacker, PasskAttacker, attacker_reference, evaluate_attack


@dataclass(frozen=True)
class ToySetup:
    name: str
    scheme: WatermarkScheme
    grpo: GrpoConfig
    attacker_copy_strength: float
    vocab_size: int = 64
    order: int = 1
    logit_scale: float = 1.0
    lm_seed: int = 11
    prompt_length: int = 16
    length: int = 64
    n_train: int = 100
    n_test: int = 100
    train_corpus_seed: int = 1
    test_corpus_seed: int = 2
    train_seed: int = 9
    eval_seed: int = 5

    def victim(self) -> LMParams:
        return build_lm(self.vocab_size, self.order, 0.0, self.lm_seed, self.logit_scale)

    def corpora(self, victim: Optional[LMParams] = None) -> tuple[list[CorpusRecord], list[CorpusRecord]]:
        victim = victim or self.victim()
        make = lambda n, s: generate_records(victim, self.scheme, n, self.length, self.prompt_length, s)
        return make(self.n_train, self.train_corpus_seed), make(self.n_test, self.test_corpus_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.to_dict()
        d["grpo"] = self.grpo.to_dict()
        return d


@dataclass
class ToyRun:
    setup: ToySetup
    victim: LMParams
    untrained: LMParams
    trained: PolicyState
    epochs: list[EpochReport]
    test: list[CorpusRecord] = field(repr=False)

    def evaluate(self, params: LMParams, k: int = 1, sem_threshold: float = 0.7) -> AttackMetrics:
        attacker = ParaphraseAttacker(params) if k == 1 else PasskAttacker(params, k, victim=self.victim)
        return evaluate_attack(
            attacker, self.test, z_threshold=4.0, sem_threshold=sem_threshold, seed=self.setup.eval_seed, victim=self.victim
        )


def run_setup(setup: ToySetup, log=None) -> ToyRun:
    victim = setup.victim()
    train_set, test_set = setup.corpora(victim)
    ref = attacker_reference(victim, setup.attacker_copy_strength)
    policy, epochs = train(
        PolicyState.from_reference(ref), training_pairs(train_set), setup.grpo, setup.train_seed, setup.scheme, log
    )
    return ToyRun(setup, victim, ref, policy, epochs, test_set)


TOY_SETUPS = {
    # hash keyed on the previous four tokens; a bag-conditioned resample already
    # scrambles the windows, so training mostly has to recover meaning
    "kgw": ToySetup(
        name="kgw",
        scheme=WatermarkScheme.windowed(prefix_length=4),
        grpo=GrpoConfig(w1_prime=6.0, w2=0.1, w3=0.1, beta=0.04, group_size=12, learning_rate=2.0, epochs=10, batch_size=10),
        attacker_copy_strength=0.5,
    ),
    # context-free green list; copying the input copies the watermark, so training
    # has to trade green tokens for red ones without losing meaning
    "unigram": ToySetup(
        name="unigram",
        scheme=WatermarkScheme.unigram(),
        grpo=GrpoConfig(
            w1_prime=12.0, w2=3.0, w3=0.1, beta=0.04, group_size=12, learning_rate=5.0, epochs=10, batch_size=10,
            train_copy_strength=False,
        ),
        attacker_copy_strength=2.0,
    ),
}


def toy_setup(name: str) -> ToySetup:
    try:
        return TOY_SETUPS[name]
    except KeyError:
        raise KeyError(f"unknown toy setup {name!r}; choose from {sorted(TOY_SETUPS)}") from None


def summarize(run: ToyRun, ks=(1, 20)) -> dict:
    out = {}
    for label, params in (("untrained", run.untrained), ("trained", run.trained.params)):
        for k in ks:
            m = run.evaluate(params, k)
            out[f"{label}@{k}"] = {"esr": m.esr, "removal": m.removal_rate, "semantic": m.mean_semantic, "mean_z": m.mean_z}
    return out


def mean_trend(epochs: list[EpochReport]) -> np.ndarray:
    return np.array([e.mean_z for e in epochs])
