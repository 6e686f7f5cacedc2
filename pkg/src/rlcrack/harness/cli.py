"""Command-line entry point: ``rlcrack {gen,detect,certify,passk,train,eval}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import _rng
from ..attack import GrpoConfig, PolicyState, passk_attack, train
from ..certify import PROXY_MODES, StrategyRegistry, StrategySpec, worst_case_radius
from ..errors import ParameterError
from ..toylm import LMParams, build_lm, sample_batch
from ..watermark import DEFAULT_KEY, VARIANTS, WatermarkScheme
from .corpus import generate_corpus, read_corpus, score, training_pairs
from .evaluate import (
    IdentityAttacker,
    ParaphraseAttacker,
    PasskAttacker,
    UnrelatedAttacker,
    attacker_reference,
    evaluate_attack,
)
from .report import export_report, write_json

log = logging.getLogger("rlcrack")


def _add_scheme(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scheme", choices=VARIANTS, default="windowed")
    p.add_argument("--q", type=float, default=0.5, help="green rate")
    p.add_argument("--bias", type=float, default=2.0)
    p.add_argument("--key", type=int, nargs="+", default=[DEFAULT_KEY], help="several keys cycle round-robin")
    p.add_argument("--prefix", type=int, default=None, help="hash window (default 4 windowed, 1 entropy_gated)")
    p.add_argument("--entropy-threshold", type=float, default=0.9)


def _scheme(args) -> WatermarkScheme:
    prefix = args.prefix
    if prefix is None:
        prefix = {"unigram": 0, "windowed": 4, "entropy_gated": 1}[args.scheme]
    return WatermarkScheme(
        variant=args.scheme,
        key=args.key[0],
        green_rate=args.q,
        bias=args.bias,
        prefix_length=prefix,
        entropy_threshold=args.entropy_threshold if args.scheme == "entropy_gated" else None,
    )


def _add_victim(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lm", type=Path, help="victim model JSON (otherwise built from the flags below)")
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--order", type=int, default=1)
    p.add_argument("--lm-seed", type=int, default=11)
    p.add_argument("--logit-scale", type=float, default=1.0)


def _victim(args) -> LMParams:
    if args.lm is not None:
        return LMParams.load(args.lm)
    return build_lm(args.vocab, args.order, 0.0, args.lm_seed, args.logit_scale)


def _load_params(path: Path) -> LMParams:
    data = json.loads(path.read_text())
    return PolicyState.from_dict(data).params if "params" in data else LMParams.from_dict(data)


def _attack_params(args, victim: LMParams) -> LMParams:
    if args.policy is not None:
        return _load_params(args.policy)
    return attacker_reference(victim, args.copy)


def _emit(obj, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    else:
        write_json(obj, out)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    victim = _victim(args)
    scheme = _scheme(args)
    keys = args.key if len(args.key) > 1 else None
    generate_corpus(victim, scheme, args.n, args.len, args.prompt_len, args.seed, keys, args.out)
    if args.lm_out is not None:
        victim.save(args.lm_out)
    return 0


def cmd_detect(args) -> int:
    victim = _victim(args) if args.lm is not None else None
    rows, worst = [], 0.0
    for rec in read_corpus(args.input):
        z = score(rec.response, rec.scheme, victim, rec.prompt)
        diff = 0.0 if z == rec.z else (abs(z - rec.z) if None not in (z, rec.z) else float("inf"))
        worst = max(worst, diff)
        rows.append({"id": rec.id, "z": z, "stored_z": rec.z, "detected": z is not None and z > args.threshold})
    if args.out is not None:
        with open(args.out, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    summary = {
        "n": len(rows),
        "detected": sum(r["detected"] for r in rows),
        "threshold": args.threshold,
        "max_abs_diff": worst,
    }
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return 0 if worst <= 1e-9 else 1


def cmd_certify(args) -> int:
    victim = _victim(args)
    scheme = _scheme(args)
    contexts = sample_batch(victim, [], None, args.prompt_len, _rng.draw_seeds(args.seed, args.contexts))
    registry = StrategyRegistry({f"c{i}": c for i, c in enumerate(contexts)}, {"victim": victim})
    grid = [
        StrategySpec(f"c{i}/x{s:g}/{'bag' if bag else 'nobag'}", f"c{i}", "victim", s, bag)
        for i in range(args.contexts)
        for s in args.scales
        for bag in (True, False)
    ]
    result = worst_case_radius(grid, registry, scheme, args.threshold, args.n_samples, args.seed, args.len, args.mode, victim)
    doc = result.to_dict()
    doc["config"] = {"scheme": scheme.to_dict(), "threshold": args.threshold, "n_samples": args.n_samples, "length": args.len, "seed": args.seed}
    _emit(doc, args.out)
    return 0


def cmd_passk(args) -> int:
    victim = _victim(args)
    params = _attack_params(args, victim)
    corpus = read_corpus(args.input)
    if not corpus:
        raise ParameterError("empty corpus")
    kmax = max(args.k)
    best_z = {k: [] for k in args.k}
    best_sem = {k: [] for k in args.k}
    for i, rec in enumerate(corpus):
        res = passk_attack(params, rec.response, kmax, rec.scheme, args.threshold, _rng.draw_seed(args.seed, i), victim, rec.prompt)
        for k in args.k:
            # candidate sets are nested, so pass@k is the best of the first k
            j = int(np.argmin(res.z_scores[:k]))
            best_z[k].append(float(res.z_scores[j]))
            best_sem[k].append(float(res.semantic_scores[j]))
    results = []
    for k in sorted(args.k):
        z, s = np.array(best_z[k]), np.array(best_sem[k])
        results.append(
            {
                "k": k,
                "esr": float(np.mean((z <= args.threshold) & (s > args.sem_threshold))),
                "removal": float(np.mean(z <= args.threshold)),
                "mean_semantic": float(s.mean()),
            }
        )
    _emit({"version": 1, "config": {"threshold": args.threshold, "sem_threshold": args.sem_threshold, "seed": args.seed}, "results": results}, args.out)
    return 0


def cmd_train(args) -> int:
    victim = _victim(args)
    corpus = read_corpus(args.input)
    config = GrpoConfig(
        w1_prime=args.w1p, w2=args.w2, w3=args.w3, beta=args.beta, group_size=args.group_size,
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
        train_copy_strength=not args.freeze_copy,
    )
    ref = attacker_reference(victim, args.copy)
    # progress z needs no victim model except under entropy gating, so skip it there
    monitor = corpus[0].scheme if corpus and corpus[0].scheme.variant != "entropy_gated" else None
    policy, epochs = train(
        PolicyState.from_reference(ref), training_pairs(corpus), config, args.seed, monitor,
        lambda e: log.info("epoch %d  z %s  semantic %.3f", e.epoch, e.mean_z, e.mean_semantic),
    )
    write_json(policy.to_dict(), args.out)
    if args.report is not None:
        write_json({"version": 1, "config": config.to_dict(), "seed": args.seed, "epochs": [e.to_dict() for e in epochs]}, args.report)
    return 0


def cmd_eval(args) -> int:
    victim = _victim(args)
    corpus = read_corpus(args.input)
    if args.attacker == "identity":
        attacker = IdentityAttacker()
    elif args.attacker == "unrelated":
        attacker = UnrelatedAttacker(victim)
    elif args.attacker == "resample":
        attacker = ParaphraseAttacker(attacker_reference(victim, args.copy), "resample")
    elif args.attacker == "policy":
        if args.policy is None:
            raise ParameterError("--attacker policy needs --policy")
        attacker = ParaphraseAttacker(_load_params(args.policy))
    else:
        attacker = PasskAttacker(_attack_params(args, victim), args.k, args.threshold, victim)
    metrics = evaluate_attack(attacker, corpus, None, args.threshold, args.sem_threshold, args.seed, victim)
    config = {
        "attacker": attacker.name,
        "threshold": args.threshold,
        "sem_threshold": args.sem_threshold,
        "corpus": Path(args.input).name,
        "policy": None if args.policy is None else Path(args.policy).name,
    }
    export_report(metrics, args.out, config, {"seed": args.seed})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlcrack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a watermarked corpus")
    _add_scheme(p)
    _add_victim(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--len", type=int, default=64)
    p.add_argument("--prompt-len", type=int, default=16)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--lm-out", type=Path, help="also save the victim model")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("detect", help="re-run detection over a corpus")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=4.0)
    _add_victim(p)
    p.add_argument("--out", type=Path, help="JSONL detection results")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("certify", help="KL certificates over a strategy grid")
    _add_scheme(p)
    _add_victim(p)
    p.add_argument("--contexts", type=int, default=2)
    p.add_argument("--prompt-len", type=int, default=16)
    p.add_argument("--scales", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--len", type=int, default=64)
    p.add_argument("--threshold", type=float, default=4.0)
    p.add_argument("--mode", choices=PROXY_MODES, default="empirical_variance")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_certify)

    for name, func, helptext in (("passk", cmd_passk, "best-of-k oracle attack"), ("eval", cmd_eval, "evaluate an attacker")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--in", dest="input", type=Path, required=True)
        _add_victim(p)
        p.add_argument("--policy", type=Path, help="trained policy or model JSON")
        p.add_argument("--copy", type=float, default=2.0, help="copy strength of the untrained paraphraser")
        p.add_argument("--threshold", type=float, default=4.0)
        p.add_argument("--sem-threshold", type=float, default=0.7)
        p.add_argument("--seed", type=int, required=True)
        if name == "passk":
            p.add_argument("--k", type=int, nargs="+", default=[1, 20])
            p.add_argument("--out", type=Path)
        else:
            p.add_argument("--attacker", choices=("identity", "resample", "unrelated", "policy", "passk"), default="policy")
            p.add_argument("--k", type=int, default=20)
            p.add_argument("--out", type=Path, required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("train", help="GRPO-train a paraphrase policy")
    p.add_argument("--in", dest="input", type=Path, required=True)
    _add_victim(p)
    p.add_argument("--copy", type=float, default=2.0, help="initial copy strength of the policy")
    p.add_argument("--freeze-copy", action="store_true")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--group-size", type=int, default=12)
    p.add_argument("--lr", type=float, default=5.0)
    p.add_argument("--w1p", type=float, default=12.0)
    p.add_argument("--w2", type=float, default=3.0)
    p.add_argument("--w3", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=0.04)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_train)
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ParameterError, ValueError) as exc:
        print(f"rlcrack {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"rlcrack {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
