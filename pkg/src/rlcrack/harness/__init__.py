"""Corpora, attack evaluation, reports and the command-line interface."""
from .corpus import CorpusRecord, generate_corpus, generate_records, read_corpus, write_corpus
from .evaluate import (
    AttackMetrics,
    IdentityAttacker,
    ParaphraseAttacker,
    PasskAttacker,
    UnrelatedAttacker,
    attacker_reference,
    evaluate_attack,
)
from .report import export_report, load_report

__all__ = [
    "AttackMetrics",
    "CorpusRecord",
    "IdentityAttacker",
    "ParaphraseAttacker",
    "PasskAttacker",
    "UnrelatedAttacker",
    "attacker_reference",
    "evaluate_attack",
    "export_report",
    "generate_corpus",
    "generate_records",
    "load_report",
    "read_corpus",
    "write_corpus",
]
