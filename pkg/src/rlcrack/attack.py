"""A GRPO-style paraphraser trained to shed a watermark, at toy scale.

The policy is an :class:`~rlcrack.toylm.LMParams` conditioned on the bag of the
watermarked response it paraphrases.  Per pair ``(question, wr)`` a group of G
outputs is drawn from the pre-step policy, and one ascent step is taken on

    J = 1/G sum_i 1/|o_i| sum_t [ ratio_t * (w1 * adv_i + w2 * dkl_it) - beta * KL_t ]
        - w3 * mean_i PPL_i

where ``ratio_t = pi(o_t) / pi_old(o_t)``, ``dkl_it`` is the token-wise KL reward
evaluated at the current policy (so it is differentiated too), ``KL_t`` is the exact per-position
KL(pi || pi_ref) over the vocabulary, and ``PPL_i`` is the perplexity of o_i
under the reference model (constant in the parameters) or under the policy.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import _rng
from .errors import NonFiniteGradient, ParameterError
from .toylm import (
    LMParams,
    check_tokens,
    log_softmax,
    make_bag,
    sample_batch,
    sequence_logprob,
    step_states,
)
from .watermark import WatermarkScheme, detect

RATIO_CLAMP = (1e-6, 1e6)
SEM_GAIN = math.log(0.975 / 0.025)


# ---------------------------------------------------------------------------
# reward pieces


def semantic_surrogate(original: Sequence[int], paraphrase: Sequence[int]) -> float:
    """Cosine similarity of the two token-count vectors."""
    a = np.asarray(original, dtype=np.int64)
    b = np.asarray(paraphrase, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        raise ParameterError("semantic_surrogate needs non-empty sequences")
    size = int(max(a.max(), b.max())) + 1
    ca = np.bincount(a, minlength=size).astype(np.float64)
    cb = np.bincount(b, minlength=size).astype(np.float64)
    return float(np.clip(ca @ cb / math.sqrt((ca @ ca) * (cb @ cb)), 0.0, 1.0))


def semantic_reward(score: float, center: float = 0.85, half_width: float = 0.15) -> float:
    """Sigmoid rescaling: 0 at ``center``, +-0.95 at ``center +- half_width``."""
    if not 0.0 <= score <= 1.0:
        raise ParameterError(f"semantic score must lie in [0, 1], got {score}")
    x = SEM_GAIN * (score - center) / half_width
    return 2.0 / (1.0 + math.exp(-x)) - 1.0


def group_advantage(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ParameterError("group_advantage needs at least two rewards")
    std = r.std()
    if std < 1e-12:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def k3_term(p_target, q_policy):
    """Non-negative KL estimator r - ln r - 1 with r = p_target / q_policy."""
    p = np.asarray(p_target, dtype=np.float64)
    q = np.asarray(q_policy, dtype=np.float64)
    if np.any(p <= 0) or np.any(q <= 0):
        raise ParameterError("k3_term needs strictly positive probabilities")
    r = np.clip(p / q, *RATIO_CLAMP)
    out = r - np.log(r) - 1.0
    return float(out) if out.ndim == 0 else out


def perplexity(
    ref: LMParams,
    question: Sequence[int],
    output: Sequence[int],
    bag: Optional[np.ndarray] = None,
) -> float:
    out = check_tokens(output, ref.vocab_size)
    if out.size == 0:
        raise ParameterError("perplexity of an empty output is undefined")
    return math.exp(-sequence_logprob(ref, question, bag, out) / out.size)


# ---------------------------------------------------------------------------
# policy state


@dataclass(frozen=True)
class PolicyState:
    params: LMParams
    old_params: LMParams
    ref_params: LMParams
    step: int = 0
    # running sum of applied updates, one entry per table cell plus copy strength
    update_sum: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_reference(cls, ref: LMParams) -> "PolicyState":
        return cls(ref, ref, ref, 0, np.zeros(ref.n_params))

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "params": self.params.to_dict(),
            "ref_params": self.ref_params.to_dict(),
            "optimizer": {"step": self.step, "update_sum": self.update_sum.tolist()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyState":
        params = LMParams.from_dict(data["params"])
        ref = LMParams.from_dict(data["ref_params"])
        opt = data["optimizer"]
        return cls(params, params, ref, int(opt["step"]), np.asarray(opt["update_sum"], dtype=np.float64))


@dataclass(frozen=True)
class GrpoConfig:
    w1_prime: float = 12.0
    w2: float = 0.9
    w3: float = 0.1
    beta: float = 0.04
    group_size: int = 12
    learning_rate: float = 1e-2
    epochs: int = 10
    batch_size: int = 48
    sem_threshold_center: float = 0.85
    sem_range: tuple = (0.7, 1.0)
    ppl_mode: str = "ref"
    train_copy_strength: bool = True

    def validate(self) -> None:
        if self.group_size < 2:
            raise ParameterError("group_size must be >= 2")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0")
        if self.beta < 0 or self.w1_prime < 0:
            raise ParameterError("beta and w1_prime must be >= 0")
        if self.ppl_mode not in ("ref", "policy"):
            raise ParameterError("ppl_mode must be 'ref' or 'policy'")
        for name in ("w1_prime", "w2", "w3", "beta", "learning_rate"):
            if not math.isfinite(getattr(self, name)):
                raise ParameterError(f"{name} must be finite")

    @property
    def sem_half_width(self) -> float:
        lo, hi = self.sem_range
        return (hi - lo) / 2.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sem_range"] = list(self.sem_range)
        return d


# ---------------------------------------------------------------------------
# group sampling and the surrogate objective


@dataclass
class GroupSample:
    """Everything the objective needs about one (question, wr) pair, frozen at sampling."""

    question: np.ndarray
    response: np.ndarray
    outputs: np.ndarray  # (G, L)
    states: np.ndarray  # (G, L) window state at each output position
    wr_bag: np.ndarray
    semantic_scores: np.ndarray
    semantic_rewards: np.ndarray
    advantages: np.ndarray
    w1: float
    delta_kl: np.ndarray  # (G, L) token-wise KL reward under pi_old
    old_logprob: np.ndarray  # (G, L) log pi_old of the realized tokens
    wm_logprob: np.ndarray  # (G, L) log P_wm of the realized tokens
    human_logprob: np.ndarray  # (G, L) log P_h of the realized tokens
    ref_logp_full: np.ndarray  # (G, L, V) log pi_ref over the vocabulary
    ref_ppl: np.ndarray  # (G,)


def policy_logits(params: LMParams, states: np.ndarray, bag: np.ndarray) -> np.ndarray:
    return params.table[states] + params.copy_strength * np.log1p(bag)


def paraphrase_batch(params: LMParams, response: Sequence[int], seeds) -> np.ndarray:
    """Policy outputs for one input, same length as the input."""
    resp = check_tokens(response, params.vocab_size)
    return sample_batch(params, [], make_bag(resp, params.vocab_size), resp.size, seeds)


def token_kl_reward(
    policy: PolicyState,
    wm_context: Sequence[int],
    question: Sequence[int],
    output_prefix: Sequence[int],
    token: int,
) -> float:
    """k3(P_wm, q) - k3(P_h, q) for one realized token.

    q is the policy probability given the paraphrase input (bag of ``wm_context``);
    P_wm and P_h are the frozen reference conditioned on the watermarked response
    and on the question respectively.
    """
    v = policy.params.vocab_size
    wr_bag = make_bag(wm_context, v)
    q_bag = make_bag(question, v)
    prefix = check_tokens(output_prefix, v)
    cont = np.append(prefix, token)
    state = step_states(policy.params, [], cont)[-1:]
    q = np.exp(log_softmax(policy_logits(policy.params, state, wr_bag)))[0, token]
    p_wm = np.exp(log_softmax(policy_logits(policy.ref_params, state, wr_bag)))[0, token]
    p_h = np.exp(log_softmax(policy_logits(policy.ref_params, state, q_bag)))[0, token]
    return k3_term(p_wm, q) - k3_term(p_h, q)


def sample_group(
    policy: PolicyState,
    question: Sequence[int],
    response: Sequence[int],
    config: GrpoConfig,
    seed: int,
) -> GroupSample:
    old, ref = policy.old_params, policy.ref_params
    v = old.vocab_size
    question = check_tokens(question, v)
    response = check_tokens(response, v)
    G, L = config.group_size, response.size
    if L == 0:
        raise ParameterError("watermarked response must be non-empty")
    outputs = paraphrase_batch(old, response, _rng.draw_seeds(seed, G))
    states = np.stack([step_states(old, [], o) for o in outputs])
    wr_bag = make_bag(response, v)
    q_bag = make_bag(question, v)

    sem = np.array([semantic_surrogate(response, o) for o in outputs])
    rewards = np.array([semantic_reward(s, config.sem_threshold_center, config.sem_half_width) for s in sem])
    adv = group_advantage(rewards)
    w1 = max(config.w1_prime * (1.0 - rewards.mean()), 1.0)

    g_idx, t_idx = np.meshgrid(np.arange(G), np.arange(L), indexing="ij")
    old_lp = log_softmax(policy_logits(old, states, wr_bag))[g_idx, t_idx, outputs]
    ref_full = log_softmax(policy_logits(ref, states, wr_bag))
    ref_lp = ref_full[g_idx, t_idx, outputs]
    human_lp = log_softmax(policy_logits(ref, states, q_bag))[g_idx, t_idx, outputs]
    q = np.exp(old_lp)
    delta = k3_term(np.exp(ref_lp), q) - k3_term(np.exp(human_lp), q)
    ref_ppl = np.exp(-ref_lp.mean(axis=1))
    return GroupSample(
        question, response, outputs, states, wr_bag, sem, rewards, adv, w1,
        delta, old_lp, ref_lp, human_lp, ref_full, ref_ppl,
    )


def _group_terms(params: LMParams, gs: GroupSample, config: GrpoConfig, want_grad: bool):
    """Objective contribution of one group and, optionally, its gradient."""
    G, L = gs.outputs.shape
    g_idx, t_idx = np.meshgrid(np.arange(G), np.arange(L), indexing="ij")
    logp = log_softmax(policy_logits(params, gs.states, gs.wr_bag))  # (G, L, V)
    probs = np.exp(logp)
    lp_tok = logp[g_idx, t_idx, gs.outputs]
    ratio = np.exp(lp_tok - gs.old_logprob)
    # the KL reward is evaluated at the current policy, as in its k3 form
    r_wm = np.exp(gs.wm_logprob - lp_tok)
    r_h = np.exp(gs.human_logprob - lp_tok)
    delta = k3_term(np.exp(gs.wm_logprob), np.exp(lp_tok)) - k3_term(np.exp(gs.human_logprob), np.exp(lp_tok))
    reward = gs.w1 * gs.advantages[:, None] + config.w2 * delta
    kl = np.sum(probs * (logp - gs.ref_logp_full), axis=-1)  # (G, L)

    if config.ppl_mode == "policy":
        ppl = np.exp(-lp_tok.mean(axis=1))
    else:
        ppl = gs.ref_ppl
    value = float(np.mean(np.mean(ratio * reward - config.beta * kl, axis=1)) - config.w3 * ppl.mean())
    if not want_grad:
        return value, None, None

    onehot = np.zeros_like(probs)
    onehot[g_idx, t_idx, gs.outputs] = 1.0
    centered = onehot - probs
    lo, hi = RATIO_CLAMP
    d_delta = np.where((r_h > lo) & (r_h < hi), r_h, 1.0) - np.where((r_wm > lo) & (r_wm < hi), r_wm, 1.0)
    coef = ratio * (reward + config.w2 * d_delta) / (G * L)
    dz = coef[..., None] * centered
    if config.beta:
        dz -= (config.beta / (G * L)) * probs * (logp - gs.ref_logp_full - kl[..., None])
    if config.ppl_mode == "policy" and config.w3:
        dz += (config.w3 * ppl / (G * L))[:, None, None] * centered

    g_table = np.zeros_like(params.table)
    np.add.at(g_table, gs.states.reshape(-1), dz.reshape(-1, params.vocab_size))
    g_copy = float(np.sum(dz.sum(axis=(0, 1)) * np.log1p(gs.wr_bag)))
    return value, g_table, g_copy


def objective(params: LMParams, groups: Sequence[GroupSample], config: GrpoConfig) -> float:
    """Batch objective (mean over pairs) at ``params``, samples held fixed."""
    return float(np.mean([_group_terms(params, gs, config, False)[0] for gs in groups]))


def objective_grad(params: LMParams, groups: Sequence[GroupSample], config: GrpoConfig):
    """Return (objective, d/d table, d/d copy_strength)."""
    total_t = np.zeros_like(params.table)
    total_c = 0.0
    values = []
    for gs in groups:
        v, gt, gc = _group_terms(params, gs, config, True)
        values.append(v)
        total_t += gt
        total_c += gc
    n = len(groups)
    return float(np.mean(values)), total_t / n, total_c / n


@dataclass
class StepStats:
    objective: float
    mean_semantic: float
    mean_delta_kl: float
    ppl: float
    grad_norm: float
    mean_z: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def grpo_step(
    policy: PolicyState,
    batch: Sequence[tuple],
    config: GrpoConfig,
    seed: int,
    monitor: Optional[WatermarkScheme] = None,
    z_threshold: float = 4.0,
) -> tuple[PolicyState, StepStats]:
    """One ascent step on a batch of (question, watermarked_response) pairs.

    ``monitor`` only feeds the z statistic reported in the stats; the detector
    never enters the objective.
    """
    config.validate()
    if not batch:
        raise ParameterError("grpo_step needs a non-empty batch")
    if not policy.old_params.same_as(policy.params):
        raise ParameterError("old_params must equal params at the start of a step")
    groups = [sample_group(policy, q, wr, config, _rng.draw_seed(seed, i)) for i, (q, wr) in enumerate(batch)]
    value, g_table, g_copy = objective_grad(policy.params, groups, config)
    grad_norm = math.sqrt(float(np.sum(g_table**2)) + g_copy**2)
    if not (math.isfinite(grad_norm) and math.isfinite(value)):
        raise NonFiniteGradient(
            "non-finite objective or gradient",
            {"objective": value, "grad_norm": grad_norm, "step": policy.step},
        )
    lr = config.learning_rate
    p = policy.params
    new_table = p.table + lr * g_table
    # copy strength is projected back onto its domain
    new_copy = max(p.copy_strength + lr * g_copy, 0.0) if config.train_copy_strength else p.copy_strength
    new_params = p.with_params(new_table, new_copy)
    applied = np.concatenate([(new_table - p.table).ravel(), [new_copy - p.copy_strength]])
    new_policy = replace(
        policy,
        params=new_params,
        old_params=new_params,
        step=policy.step + 1,
        update_sum=policy.update_sum + applied,
    )
    mean_z = None
    if monitor is not None:
        mean_z = float(np.mean([detect(o, monitor, z_threshold).z_score for gs in groups for o in gs.outputs]))
    stats = StepStats(
        objective=value,
        mean_semantic=float(np.mean([gs.semantic_scores.mean() for gs in groups])),
        mean_delta_kl=float(np.mean([gs.delta_kl.mean() for gs in groups])),
        ppl=float(np.mean([gs.ref_ppl.mean() for gs in groups])),
        grad_norm=grad_norm,
        mean_z=mean_z,
    )
    return new_policy, stats


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochReport:
    epoch: int
    objective: float
    mean_z: Optional[float]
    mean_semantic: float
    mean_delta_kl: float
    ppl: float
    grad_norm: float

    def to_dict(self) -> dict:
        return asdict(self)


def train(
    policy: PolicyState,
    dataset: Sequence[tuple],
    config: GrpoConfig,
    seed: int,
    monitor: Optional[WatermarkScheme] = None,
    log=None,
) -> tuple[PolicyState, list[EpochReport]]:
    """Run ``config.epochs`` passes of batched GRPO steps over ``dataset``."""
    config.validate()
    if not dataset:
        raise ParameterError("training dataset is empty")
    reports = []
    step_index = 0
    for epoch in range(config.epochs):
        order = _rng.generator(_rng.draw_seed(seed, 1_000_000 + epoch)).permutation(len(dataset))
        stats: list[StepStats] = []
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            policy, s = grpo_step(policy, batch, config, _rng.draw_seed(seed, step_index), monitor)
            stats.append(s)
            step_index += 1
        rep = EpochReport(
            epoch=epoch,
            objective=float(np.mean([s.objective for s in stats])),
            mean_z=None if monitor is None else float(np.mean([s.mean_z for s in stats])),
            mean_semantic=float(np.mean([s.mean_semantic for s in stats])),
            mean_delta_kl=float(np.mean([s.mean_delta_kl for s in stats])),
            ppl=float(np.mean([s.ppl for s in stats])),
            grad_norm=float(np.mean([s.grad_norm for s in stats])),
        )
        reports.append(rep)
        if log is not None:
            log(rep)
    return policy, reports


# ---------------------------------------------------------------------------
# pass@k oracle attack


@dataclass
class PasskResult:
    best: np.ndarray
    best_index: int
    z_scores: np.ndarray
    semantic_scores: np.ndarray


def passk_attack(
    policy: PolicyState | LMParams,
    watermarked: Sequence[int],
    k: int,
    scheme: WatermarkScheme,
    threshold: float = 4.0,
    seed: int = 0,
    victim_lm: Optional[LMParams] = None,
    prompt: Optional[Sequence[int]] = None,
) -> PasskResult:
    """Oracle-mode best-of-k: keep the candidate the detector scores lowest.

    Candidate j uses seed ``draw_seed(seed, j)``, so the k-candidate set is a
    prefix of the (k+1)-candidate set.
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    params = policy.params if isinstance(policy, PolicyState) else policy
    wr = check_tokens(watermarked, params.vocab_size)
    cands = paraphrase_batch(params, wr, _rng.draw_seeds(seed, k))
    z = np.array([detect(c, scheme, threshold, victim_lm, prompt).z_score for c in cands])
    sem = np.array([semantic_surrogate(wr, c) for c in cands])
    best = int(np.argmin(z))
    return PasskResult(cands[best], best, z, sem)
