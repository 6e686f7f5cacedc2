"""Acceptance gate: one PASS/FAIL line per criterion (shown in the terminal summary)."""
import dataclasses
import math
import time

import numpy as np
import pytest
from scipy.optimize import brentq

from rlcrack import _rng
from rlcrack.attack import GrpoConfig, PolicyState, k3_term, objective, objective_grad, sample_group
from rlcrack.certify import (
    PasskBoundInput,
    StrategyRegistry,
    StrategySpec,
    certificate,
    discretized_gaussian,
    distribution_moments,
    dv_lower_bound,
    kl_exact,
    passk_bounds,
    single_shot_bound,
    tilt,
    worst_case_radius,
)
from rlcrack.harness.cli import run_cli
from rlcrack.harness.corpus import generate_records
from rlcrack.harness.toy import TOY_SETUPS, run_setup
from rlcrack.toylm import build_lm
from rlcrack.watermark import WatermarkScheme

LAMBDAS = np.round(np.arange(0.0, 2.0001, 0.1), 10)


def test_c01_dv_bound_suite(acceptance):
    start = time.perf_counter()
    cases = violations = 0
    worst = math.inf
    for n in (4, 8, 16, 32, 64):
        for mu, sigma, width in ((0, 1, 8), (6, 1, 3), (5, 2, 4), (1, 0.5, 2), (3, 1, 8), (-2, 3, 1)):
            probs, f = discretized_gaussian(mu, sigma, n, width)
            m, v = distribution_moments(probs, f)
            for lam in LAMBDAS:
                q = tilt(probs, f, lam)
                gap = q.expected_score() - dv_lower_bound(m, v, kl_exact(q.probs, probs))
                worst = min(worst, gap)
                violations += gap < -1e-9
                cases += 1
    elapsed = time.perf_counter() - start
    acceptance(
        "C1 DV bound suite",
        violations == 0 and elapsed < 60,
        f"{cases} cases, {violations} violations, min slack {worst:.3g}, {elapsed:.2f}s",
    )


def test_c02_certificate_tightness(acceptance):
    mu, sigma, delta = 6.0, 1.0, 4.0
    probs, f = discretized_gaussian(mu, sigma, 10_000, width=8.0)
    m, v = distribution_moments(probs, f)
    rho = certificate(m, v, delta).rho_star
    kl_at = lambda lam: kl_exact(tilt(probs, f, lam).probs, probs)
    lam_rho = brentq(lambda lam: kl_at(lam) - rho, 0.0, 10.0, xtol=1e-14)
    at_rho = tilt(probs, f, lam_rho).expected_score()
    at_star = tilt(probs, f, (m - delta) / v).expected_score()
    rel = abs(at_rho - delta) / delta
    rel_star = abs(at_star - delta) / delta
    acceptance(
        "C2 certificate tightness",
        rel <= 0.02 and rel_star <= 0.02,
        f"rho*={rho:.6f}; E_Q[f] at KL=rho* is {at_rho:.6f} (rel err {rel:.2e}); at lambda* {at_star:.6f} (rel err {rel_star:.2e})",
    )


def test_c03_collapse_and_monotonicity(acceptance):
    collapse = all(certificate(mu, s2, 4.0).rho_star == 0.0 for mu in np.linspace(-5, 4, 37) for s2 in (0.1, 1.0, 7.0))
    victim = build_lm(32, 1, 0.0, 5)
    scheme = WatermarkScheme.unigram()
    contexts = {f"c{i}": generate_records(victim, scheme, 1, 1, 8, seed=i)[0].prompt for i in range(2)}
    registry = StrategyRegistry(contexts, {"victim": victim})
    grid = [
        StrategySpec(f"{c}/x{s:g}/{'bag' if bag else 'nobag'}", c, "victim", s, bag)
        for c in contexts
        for s in (0.5, 1.0, 2.0)
        for bag in (True, False)
    ]
    order = list(np.random.default_rng(0).permutation(len(grid)))
    # a logit scale of 0 flattens the watermarked distribution: its certificate collapses
    grid.append(StrategySpec("c0/x0/bag", "c0", "victim", 0.0, True))
    order.append(len(grid) - 1)
    radii = []
    for k in range(1, len(grid) + 1):
        res = worst_case_radius([grid[i] for i in order[: k]], registry, scheme, 4.0, 60, seed=17, length=48)
        radii.append(res.radius)
    final = worst_case_radius(grid, registry, scheme, 4.0, 60, seed=17, length=48)
    est_collapse = all(
        final.certificates[s].rho_star == 0.0 for s, e in final.estimates.items() if e.mean <= 4.0
    )
    monotone = all(b <= a for a, b in zip(radii, radii[1:]))
    acceptance(
        "C3 certificate collapse and grid monotonicity",
        collapse and est_collapse and monotone and radii[-1] == 0.0,
        f"nested radii {[round(r, 4) for r in radii]}",
    )


def _sample(probs, n, seed):
    cdf = np.cumsum(probs)
    u = _rng.generator(seed).random(n) * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), probs.size - 1)


def test_c04_single_shot_and_passk_bounds(acceptance):
    mu, sigma, delta = 6.0, 1.0, 4.0
    probs, f = discretized_gaussian(mu, sigma, 64, width=8.0)
    m, v = distribution_moments(probs, f)
    rho = certificate(m, v, delta).rho_star
    evade = f <= delta
    worst_margin = math.inf
    checks = informative = 0
    for i, lam in enumerate((0.0, 0.5, 1.0, 1.5, 2.0, 2.5)):
        q = tilt(probs, f, lam).probs
        kl = kl_exact(q, probs)
        n = 100_000
        hits = evade[_sample(q, n, _rng.draw_seed(1, i))]
        freq = hits.mean()
        se = math.sqrt(max(freq * (1 - freq), 1e-300) / n)
        bound = single_shot_bound(kl, rho)
        worst_margin = min(worst_margin, bound + 3 * se - freq)
        checks += 1
        informative += bound < 1
        for k in (2, 5, 20):
            trials = 10_000
            draws = evade[_sample(q, trials * k, _rng.draw_seed(2, 100 * i + k))].reshape(trials, k)
            freq_k = draws.any(axis=1).mean()
            se_k = math.sqrt(max(freq_k * (1 - freq_k), 1e-300) / trials)
            union = passk_bounds(PasskBoundInput.identical(k, 0.5, kl, rho)).union_bound
            worst_margin = min(worst_margin, union + 3 * se_k - freq_k)
            checks += 1
            informative += union < 1
    flags_ok = True
    for r in np.linspace(0.0, 8.0, 81):
        for k in (1, 2, 5, 20, 100):
            for eta in (1.0, 0.5, 0.1, 0.01):
                b = passk_bounds(PasskBoundInput.identical(k, eta, 0.0, r))
                flags_ok &= b.infeasible == (r - math.log(k / eta) < 0)
    exact = passk_bounds(PasskBoundInput.identical(20, 0.1, 0.0, math.log(200)))
    flags_ok &= not exact.infeasible
    acceptance(
        "C4 single-shot and pass@k bounds",
        worst_margin >= 0 and flags_ok,
        f"{checks} Monte Carlo checks ({informative} with bound < 1), min (bound + 3se - freq) = {worst_margin:.4f}; infeasibility flags exact: {flags_ok}",
    )


def test_c05_detector_calibration(acceptance):
    victim = build_lm(64, 1, 0.0, 11)
    lines, ok = [], True
    for name, scheme in (("windowed", WatermarkScheme.windowed(4)), ("unigram", WatermarkScheme.unigram())):
        marked = generate_records(victim, scheme, 1000, 200, 16, seed=101)
        tpr = np.mean([r.z > 4.0 for r in marked])
        clean = generate_records(victim, WatermarkScheme.from_dict({**scheme.to_dict(), "bias": 0.0}), 10_000, 200, 16, seed=202)
        fpr = np.mean([r.z > 4.0 for r in clean])
        ok &= tpr >= 0.99 and fpr <= 0.001
        lines.append(f"{name} TPR {tpr:.3f} FPR {fpr:.4f}")
    acceptance("C5 detector calibration", ok, "; ".join(lines))


def test_c06_k3_estimator(acceptance):
    rng = np.random.default_rng(2024)
    n = 100_000
    worst, nonneg = 0.0, True
    for _ in range(20):
        q = rng.dirichlet(np.ones(8))
        p = rng.dirichlet(np.ones(8))
        x = rng.choice(8, size=n, p=q)
        vals = k3_term(p[x], q[x])
        nonneg &= bool(np.all(vals >= 0))
        z = abs(vals.mean() - kl_exact(q, p)) / (vals.std(ddof=1) / math.sqrt(n))
        worst = max(worst, z)
    acceptance("C6 k3 estimator", nonneg and worst <= 3.0, f"20 pairs, all >= 0: {nonneg}, max |error|/stderr {worst:.2f}")


def _fd(params, groups, config, h=1e-6):
    flat = np.append(params.table.ravel(), params.copy_strength)
    out = np.empty_like(flat)
    for i in range(flat.size):
        vals = []
        for sgn in (1, -1):
            v = flat.copy()
            v[i] += sgn * h
            vals.append(objective(params.with_params(v[:-1].reshape(params.table.shape), v[-1]), groups, config))
        out[i] = (vals[0] - vals[1]) / (2 * h)
    return out


def test_c07_grpo_gradient(acceptance):
    start = time.perf_counter()
    ref = build_lm(5, 1, 0.8, 4)  # 25 table cells + copy strength
    rng = np.random.default_rng(4)
    start_params = ref.with_params(ref.table + 0.4 * rng.standard_normal(ref.table.shape), 1.1)
    policy = PolicyState(start_params, start_params, ref, 0, np.zeros(ref.n_params))
    pairs = [(rng.integers(0, 5, 6), rng.integers(0, 5, 7)) for _ in range(3)]
    shift = 0.1 * np.cos(np.arange(ref.table.size)).reshape(ref.table.shape)
    at = start_params.with_params(start_params.table + shift, 0.9)
    cases = {
        "advantage": (dict(w2=0.0, w3=0.0, beta=0.0), False),
        "kl_reward": (dict(w2=1.5, w3=0.0, beta=0.0), True),
        "beta": (dict(w2=0.0, w3=0.0, beta=0.7), True),
        "ppl": (dict(w2=0.0, w3=0.3, beta=0.0, ppl_mode="policy"), True),
        "combined": (dict(w2=0.9, w3=0.1, beta=0.04, ppl_mode="policy"), False),
    }
    errs = {}
    for name, (opts, zero_adv) in cases.items():
        config = GrpoConfig(group_size=6, **opts)
        groups = [sample_group(policy, q, wr, config, _rng.draw_seed(7, i)) for i, (q, wr) in enumerate(pairs)]
        if zero_adv:
            groups = [dataclasses.replace(g, advantages=np.zeros_like(g.advantages)) for g in groups]
        _, gt, gc = objective_grad(at, groups, config)
        a = np.append(gt.ravel(), gc)
        fd = _fd(at, groups, config)
        errs[name] = float(np.linalg.norm(a - fd) / np.linalg.norm(fd))
    elapsed = time.perf_counter() - start
    acceptance(
        "C7 GRPO gradient vs finite differences",
        ref.n_params <= 50 and max(errs.values()) <= 1e-4 and elapsed < 60,
        f"{ref.n_params} params, rel errors " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# end-to-end toy runs, shared by criteria 8-10


@pytest.fixture(scope="module")
def toy_runs():
    runs = {}
    for name, setup in TOY_SETUPS.items():
        start = time.perf_counter()
        run = run_setup(setup)
        train_time = time.perf_counter() - start
        untrained = {k: run.evaluate(run.untrained, k) for k in (1, 20)}
        trained = {k: run.evaluate(run.trained.params, k) for k in (1, 20)}
        runs[name] = dict(run=run, train_time=train_time, total_time=time.perf_counter() - start, untrained=untrained, trained=trained)
    return runs


@pytest.mark.parametrize("name", sorted(TOY_SETUPS))
def test_c08_end_to_end_training(acceptance, toy_runs, name):
    r = toy_runs[name]
    before, after = r["untrained"][1], r["trained"][1]
    gain = after.esr - before.esr
    epoch_sem = min(e.mean_semantic for e in r["run"].epochs)
    ok = gain >= 0.30 and after.mean_semantic >= 0.7 and epoch_sem >= 0.7 and r["total_time"] <= 600
    acceptance(
        f"C8 end-to-end training [{name}]",
        ok,
        f"held-out ESR {before.esr:.2f} -> {after.esr:.2f} (+{100 * gain:.0f} pts), semantic {after.mean_semantic:.3f} "
        f"(min epoch {epoch_sem:.3f}), train {r['train_time']:.0f}s, with eval {r['total_time']:.0f}s",
    )


def test_c09_passk_trend(acceptance, toy_runs):
    r = toy_runs["unigram"]
    p1, p20 = r["untrained"][1].esr, r["untrained"][20].esr
    other = toy_runs["kgw"]["untrained"]
    acceptance(
        "C9 pass@k trend [unigram]",
        p20 >= p1 + 0.20,
        f"pass@1 ESR {p1:.2f}, pass@20 ESR {p20:.2f} (+{100 * (p20 - p1):.0f} pts); "
        f"kgw for reference: {other[1].esr:.2f} -> {other[20].esr:.2f}",
    )


@pytest.mark.parametrize("name", sorted(TOY_SETUPS))
def test_c10_distribution_shift(acceptance, toy_runs, name):
    m = toy_runs[name]["trained"][1].mean_z
    clean, marked, attacked = m["unwatermarked"], m["watermarked"], m["attacked"]
    separated = marked - clean > 4
    closer = abs(attacked - clean) < abs(attacked - marked)
    acceptance(
        f"C10 distribution shift [{name}]",
        separated and closer,
        f"mean z unwatermarked {clean:.2f}, watermarked {marked:.2f}, attacked {attacked:.2f}",
    )


def test_training_trend_on_toy_setup(toy_runs):
    z = [e.mean_z for e in toy_runs["unigram"]["run"].epochs]
    assert z[-1] < z[0]


def _pipeline(root):
    root.mkdir()
    p = lambda name: str(root / name)
    steps = [
        ["gen", "--scheme", "unigram", "--n", "30", "--len", "64", "--seed", "1", "--out", p("train.jsonl"), "--lm-out", p("victim.json")],
        ["gen", "--scheme", "unigram", "--n", "20", "--len", "64", "--seed", "2", "--out", p("test.jsonl")],
        ["gen", "--scheme", "entropy_gated", "--key", "7", "8", "9", "--n", "10", "--len", "40", "--seed", "3", "--out", p("mixed.jsonl")],
        ["detect", "--in", p("mixed.jsonl"), "--lm", p("victim.json"), "--out", p("mixed.detect.jsonl")],
        ["certify", "--lm", p("victim.json"), "--scheme", "unigram", "--contexts", "1", "--scales", "1", "2", "--n-samples", "30", "--seed", "4", "--out", p("cert.json")],
        ["train", "--in", p("train.jsonl"), "--lm", p("victim.json"), "--epochs", "2", "--freeze-copy", "--seed", "9", "--out", p("policy.json"), "--report", p("train.report.json")],
        ["eval", "--in", p("test.jsonl"), "--lm", p("victim.json"), "--policy", p("policy.json"), "--seed", "5", "--out", p("eval.json")],
        ["eval", "--in", p("test.jsonl"), "--lm", p("victim.json"), "--attacker", "resample", "--seed", "5", "--out", p("base.json")],
        ["passk", "--in", p("test.jsonl"), "--lm", p("victim.json"), "--k", "1", "5", "--seed", "6", "--out", p("passk.json")],
    ]
    return [run_cli(argv) for argv in steps]


def test_c11_cli_determinism(acceptance, tmp_path):
    codes_a = _pipeline(tmp_path / "a")
    codes_b = _pipeline(tmp_path / "b")
    files = sorted(f.name for f in (tmp_path / "a").iterdir())
    same = [f for f in files if (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()]
    ok = codes_a == codes_b == [0] * len(codes_a) and same == files and len(files) >= 12
    acceptance("C11 CLI determinism", ok, f"{len(same)}/{len(files)} artifacts byte-identical across two runs, exit codes {codes_a}")
