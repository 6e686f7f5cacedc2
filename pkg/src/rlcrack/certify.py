"""KL robustness certificates for detector scores.

If the centred score is sub-Gaussian with variance proxy sigma2 under the
watermarked distribution P, then every attack distribution Q satisfies

    E_Q[f] >= mu - sqrt(2 * sigma2 * KL(Q || P))

so no Q inside the KL ball of radius rho* = (mu - delta)_+^2 / (2 sigma2) can
push the expected score to the detection threshold delta.  Exponential tilting
Q ∝ P exp(-lambda f) attains the bound when f is Gaussian.
"""
from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp, rel_entr
from scipy.stats import norm

from . import _rng
from .errors import AbsoluteContinuityError, NoCountablePositions, ParameterError
from .toylm import LMParams, compose, make_bag, sample_sequence, scale_logits
from .watermark import WatermarkScheme, detect

PROXY_MODES = ("empirical_variance", "range_hoeffding")


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    variance: float
    stderr_mean: float
    n: int
    proxy_mode: str


@dataclass(frozen=True)
class RobustnessCertificate:
    mu: float
    sigma2: float
    delta_detect: float
    rho_star: float
    n: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_moments(
    sampler: Callable,
    n: int,
    seed: int,
    mode: str = "empirical_variance",
    batched: bool = False,
) -> MomentEstimate:
    """Monte Carlo mean and variance proxy of a seeded score sampler.

    ``sampler`` maps a per-draw seed to one score, or, with ``batched=True``,
    an array of per-draw seeds to an array of scores.  Draw i always uses
    ``draw_seed(seed, i)``, so the estimate does not depend on evaluation order.
    """
    if n < 2:
        raise ParameterError("estimate_moments needs n >= 2")
    if mode not in PROXY_MODES:
        raise ParameterError(f"unknown proxy mode {mode!r}")
    seeds = _rng.draw_seeds(seed, n)
    if batched:
        x = np.asarray(sampler(seeds), dtype=np.float64)
    else:
        x = np.array([sampler(int(s)) for s in seeds], dtype=np.float64)
    if x.shape != (n,) or not np.all(np.isfinite(x)):
        raise ParameterError("sampler must return n finite scores")
    mean = float(np.sum(x) / n)
    if mode == "empirical_variance":
        var = float(np.sum((x - mean) ** 2) / (n - 1))
    else:
        var = float((x.max() - x.min()) ** 2 / 4.0)
    return MomentEstimate(mean, var, math.sqrt(var / n), n, mode)


def certificate(mu: float, sigma2: float, delta_detect: float, n: Optional[int] = None) -> RobustnessCertificate:
    if not sigma2 > 0:
        raise ParameterError(f"sigma2 must be > 0, got {sigma2}")
    gap = max(mu - delta_detect, 0.0)
    return RobustnessCertificate(mu, sigma2, delta_detect, gap * gap / (2.0 * sigma2), n)


def dv_lower_bound(mu: float, sigma2: float, kl: float) -> float:
    if kl < 0:
        raise ParameterError(f"kl must be >= 0, got {kl}")
    if sigma2 < 0:
        raise ParameterError(f"sigma2 must be >= 0, got {sigma2}")
    return mu - math.sqrt(2.0 * sigma2 * kl)


@dataclass(frozen=True)
class TiltedDistribution:
    base: np.ndarray
    lam: float
    score: np.ndarray
    probs: np.ndarray
    log_normalizer: float  # log E_P[exp(-lam * score)]

    def expected_score(self) -> float:
        return float(np.sum(self.probs * self.score))


def _as_distribution(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ParameterError(f"{name} must be a non-empty vector of non-negative reals")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ParameterError(f"{name} sums to {p.sum()!r}, not 1")
    return p


def tilt(base, score, lam: float) -> TiltedDistribution:
    """Q[i] ∝ base[i] * exp(-lam * score[i]), normalized in log space."""
    p = _as_distribution(base, "base")
    f = np.asarray(score, dtype=np.float64)
    if f.shape != p.shape or not np.all(np.isfinite(f)):
        raise ParameterError("score must be finite and aligned with base")
    if lam < 0:
        raise ParameterError("lambda must be >= 0")
    if lam == 0:
        return TiltedDistribution(p, 0.0, f, p.copy(), 0.0)
    with np.errstate(divide="ignore"):
        logw = np.log(p) - lam * f
    log_z = float(logsumexp(logw))
    if not math.isfinite(log_z):
        raise ParameterError("tilting annihilated all mass")
    return TiltedDistribution(p, float(lam), f, np.exp(logw - log_z), log_z)


def kl_exact(q, p) -> float:
    """KL(q || p) by direct summation with 0 ln 0 = 0."""
    q = _as_distribution(q, "q")
    p = _as_distribution(p, "p")
    if q.shape != p.shape:
        raise ParameterError("q and p must share a support")
    if np.any((q > 0) & (p == 0)):
        raise AbsoluteContinuityError("q is not absolutely continuous w.r.t. p")
    return max(float(np.sum(rel_entr(q, p))), 0.0)


def discretized_gaussian(mu: float, sigma: float, n_outcomes: int, width: float = 8.0):
    """Equal-width grid over mu +- width*sigma; returns (probs, midpoints)."""
    edges = np.linspace(mu - width * sigma, mu + width * sigma, n_outcomes + 1)
    mass = np.diff(norm.cdf(edges, loc=mu, scale=sigma))
    return mass / mass.sum(), 0.5 * (edges[:-1] + edges[1:])


def distribution_moments(probs, score) -> tuple[float, float]:
    p = _as_distribution(probs, "probs")
    f = np.asarray(score, dtype=np.float64)
    mu = float(np.sum(p * f))
    return mu, float(np.sum(p * (f - mu) ** 2))


def subgaussian_curvature(values, lambdas=None, weights=None) -> float:
    """Largest 2 log E[exp(l (f - mu))] / l^2 over a grid of l (both signs)."""
    x = np.asarray(values, dtype=np.float64)
    w = np.full(x.size, 1.0 / x.size) if weights is None else np.asarray(weights, dtype=np.float64)
    mu = float(np.sum(w * x))
    sd = math.sqrt(max(float(np.sum(w * (x - mu) ** 2)), 1e-300))
    if lambdas is None:
        lambdas = np.concatenate([-np.linspace(0.1, 3, 30), np.linspace(0.1, 3, 30)]) / sd
    lam = np.asarray(lambdas, dtype=np.float64)
    lam = lam[lam != 0]
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    log_mgf = logsumexp(logw[None, :] + lam[:, None] * (x - mu)[None, :], axis=1)
    return float(np.max(2.0 * log_mgf / lam**2))


def check_subgaussian(values, proxy: float, tolerance: float = 0.2, weights=None) -> float:
    """Warn when the fitted log-MGF curvature exceeds ``proxy`` by more than ``tolerance``."""
    curv = subgaussian_curvature(values, weights=weights)
    if curv > (1.0 + tolerance) * proxy:
        warnings.warn(
            f"log-MGF curvature {curv:.4g} exceeds variance proxy {proxy:.4g} by more than {tolerance:.0%}",
            RuntimeWarning,
            stacklevel=2,
        )
    return curv


# ---------------------------------------------------------------------------
# strategy grids


@dataclass(frozen=True)
class StrategySpec:
    strategy_id: str
    context_id: str
    lm_variant_id: str
    logit_scale: float = 1.0
    use_bag: bool = True


@dataclass
class StrategyRegistry:
    contexts: Mapping[str, Sequence[int]]
    lms: Mapping[str, LMParams]

    def resolve(self, strategy: StrategySpec) -> tuple[np.ndarray, LMParams]:
        if strategy.context_id not in self.contexts:
            raise ParameterError(f"unknown context {strategy.context_id!r}")
        if strategy.lm_variant_id not in self.lms:
            raise ParameterError(f"unknown LM variant {strategy.lm_variant_id!r}")
        return np.asarray(self.contexts[strategy.context_id], dtype=np.int64), self.lms[strategy.lm_variant_id]


def strategy_sampler(
    strategy: StrategySpec,
    registry: StrategyRegistry,
    scheme: WatermarkScheme,
    length: int,
    detector_lm: Optional[LMParams] = None,
):
    """Seed -> z-score of one watermarked output generated under ``strategy``."""
    context, lm = registry.resolve(strategy)
    bag = make_bag(context, lm.vocab_size) if strategy.use_bag else None
    transform = compose(scheme.embedder(lm.vocab_size), scale_logits(strategy.logit_scale) if strategy.logit_scale != 1.0 else None)
    det_lm = detector_lm if detector_lm is not None else lm

    def sample(seed: int) -> float:
        out = sample_sequence(lm, context, bag, length, seed, transform)
        try:
            return detect(out, scheme, victim_lm=det_lm, prompt=context).z_score
        except NoCountablePositions:
            return 0.0

    return sample


@dataclass
class WorstCase:
    radius: float
    argmin: str
    estimates: dict = field(default_factory=dict)
    certificates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        rows = []
        for sid, est in self.estimates.items():
            cert = self.certificates[sid]
            rows.append(
                {
                    "strategy_id": sid,
                    "mu": est.mean,
                    "sigma2": est.variance,
                    "stderr": est.stderr_mean,
                    "rho_star": cert.rho_star,
                    "n": est.n,
                    "proxy_mode": est.proxy_mode,
                }
            )
        return {"version": 1, "strategies": rows, "grid_minimum": {"strategy_id": self.argmin, "rho_star": self.radius}}


def strategy_seed(seed: int, strategy_id: str) -> int:
    """Per-strategy stream keyed on the id, so a strategy scores the same in any grid."""
    return _rng.fold(seed, zlib.crc32(strategy_id.encode()))


def worst_case_radius(
    strategies: Sequence[StrategySpec],
    registry: StrategyRegistry,
    scheme: WatermarkScheme,
    threshold: float,
    n_samples: int,
    seed: int,
    length: int = 64,
    mode: str = "empirical_variance",
    detector_lm: Optional[LMParams] = None,
    estimates: Optional[Mapping[str, MomentEstimate]] = None,
) -> WorstCase:
    """Minimum certificate over a strategy grid.

    Precomputed ``estimates`` (keyed by strategy id) are reused instead of sampling.
    """
    if not strategies:
        raise ParameterError("strategy list is empty")
    result = WorstCase(radius=math.inf, argmin="")
    for strategy in strategies:
        if estimates is not None and strategy.strategy_id in estimates:
            est = estimates[strategy.strategy_id]
        else:
            sampler = strategy_sampler(strategy, registry, scheme, length, detector_lm)
            est = estimate_moments(sampler, n_samples, strategy_seed(seed, strategy.strategy_id), mode)
        cert = certificate(est.mean, est.variance, threshold, est.n)
        result.estimates[strategy.strategy_id] = est
        result.certificates[strategy.strategy_id] = cert
        if cert.rho_star < result.radius:
            result.radius, result.argmin = cert.rho_star, strategy.strategy_id
    return result


# ---------------------------------------------------------------------------
# high-probability and pass@k bounds


def single_shot_bound(kl: float, rho_star: float) -> float:
    """Upper bound exp(KL - rho*) (capped at 1) on one sample evading."""
    if kl < 0:
        raise ParameterError("kl must be >= 0")
    if rho_star < 0 or not (math.isfinite(kl) and math.isfinite(rho_star)):
        raise ParameterError("rho_star must be finite and >= 0")
    return min(1.0, math.exp(min(kl - rho_star, 0.0)))


@dataclass(frozen=True)
class PasskBoundInput:
    k: int
    eta: float
    kls: Sequence[float]
    rho_stars: Sequence[float]

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError("k must be >= 1")
        if not 0 < self.eta <= 1:
            raise ParameterError("eta must lie in (0, 1]")
        if len(self.kls) != self.k or len(self.rho_stars) != self.k:
            raise ParameterError("need one KL and one certificate per attempt")
        if any(kl < 0 for kl in self.kls):
            raise ParameterError("KL budgets must be >= 0")

    @classmethod
    def identical(cls, k: int, eta: float, kl: float, rho_star: float) -> "PasskBoundInput":
        return cls(k, eta, [kl] * k, [rho_star] * k)


@dataclass(frozen=True)
class PasskBounds:
    union_bound: float
    budgets: tuple
    infeasible: bool

    @property
    def budget_per_attempt(self) -> float:
        return min(self.budgets)


def passk_bounds(inputs: PasskBoundInput) -> PasskBounds:
    """Union bound on any of k attempts evading, and the per-attempt KL budget
    rho*_i - ln(k / eta) that keeps that probability below eta."""
    terms = [math.exp(min(kl - r, 700.0)) for kl, r in zip(inputs.kls, inputs.rho_stars)]
    union = min(1.0, math.fsum(terms))
    slack = math.log(inputs.k / inputs.eta)
    budgets = tuple(r - slack for r in inputs.rho_stars)
    return PasskBounds(union, budgets, any(b < 0 for b in budgets))
