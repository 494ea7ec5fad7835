"""Token-level weight estimators for the unified reweighted-likelihood view.

Every objective reduces to a per-token weight w applied to -w * ln q[token].
Sign convention: weights are oriented so that ascent on sum(w * ln q)
descends the corresponding divergence. The textual estimator signs of the
baseline write-up (q*(ln q - ln p) and the JSD analog) carry the opposite
orientation; sign_fidelity=True reproduces them verbatim for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidParameterError, LogOfZeroError
from .numerics import CategoricalDist

OFF_POLICY_TAGS = (
    "sft",
    "fkld_token",
    "fkld_dense",
    "seqkd",
    "rkld_off",
    "jsd_off",
    "hpd",
    "hpd_no_sample",
    "hpd_no_reinforce",
)
ON_POLICY_TAGS = ("rkld_on", "opd_k1")
ALL_TAGS = OFF_POLICY_TAGS + ON_POLICY_TAGS

HPD_VARIANTS = ("hpd", "hpd_no_sample", "hpd_no_reinforce")


@dataclass(frozen=True)
class ObjectiveKind:
    tag: str
    beta: float = 0.5
    sign_fidelity: bool = False

    def __post_init__(self):
        if self.tag not in ALL_TAGS:
            raise ConfigError(f"unknown objective tag {self.tag!r}")
        if not (0.0 < self.beta < 1.0):
            raise InvalidParameterError(f"beta must lie in (0, 1), got {self.beta!r}")

    @property
    def on_policy(self) -> bool:
        return self.tag in ON_POLICY_TAGS


def _logprob(d: CategoricalDist, token: int, name: str) -> float:
    if d.probs[token] <= 0.0:
        raise LogOfZeroError(f"{name}[{token}] = 0")
    return float(d.logprobs[token])


def weight_sft(token: int, expert: int) -> float:
    """One-hot indicator weight: 1 on the expert token, 0 elsewhere."""
    return 1.0 if token == expert else 0.0


def weight_fkld_token(p: CategoricalDist, expert: int) -> float:
    """Teacher probability of the expert token."""
    return float(p.probs[expert])


def weights_fkld_dense(p: CategoricalDist) -> np.ndarray:
    """Full-vocabulary forward-KL weights: w_v = p_v at the state."""
    return p.probs.copy()


def hpd_k1(p: CategoricalDist, q: CategoricalDist, token: int) -> float:
    """Negative reverse k1 gap q * (ln p - ln q); positive iff q underestimates."""
    lp = _logprob(p, token, "p")
    lq = _logprob(q, token, "q")
    return float(q.probs[token]) * (lp - lq)


def weight_rkld_off(
    p: CategoricalDist, q: CategoricalDist, expert: int, sign_fidelity: bool = False
) -> float:
    """Off-policy reverse-KL weight at the expert token."""
    w = hpd_k1(p, q, expert)
    return -w if sign_fidelity else w


def weight_jsd_off(
    p: CategoricalDist,
    q: CategoricalDist,
    expert: int,
    beta: float = 0.5,
    sign_fidelity: bool = False,
) -> float:
    """Off-policy generalized-JSD weight at the expert token."""
    if not (0.0 < beta < 1.0):
        raise InvalidParameterError(f"beta must lie in (0, 1), got {beta!r}")
    m = beta * p.probs[expert] + (1.0 - beta) * q.probs[expert]
    if m <= 0.0:
        raise LogOfZeroError(f"midpoint mixture is 0 at token {expert}")
    lq = _logprob(q, expert, "q")
    w = (1.0 - beta) * float(q.probs[expert]) * (float(np.log(m)) - lq)
    return -w if sign_fidelity else w


def weight_rkld_on(p: CategoricalDist, q: CategoricalDist, token: int) -> float:
    """On-policy reverse-KL weight: log-ratio reward at a student-sampled token."""
    return _logprob(p, token, "p") - _logprob(q, token, "q")


@dataclass(frozen=True)
class HPDWeights:
    """Per-step record of the hybrid-policy weight rules."""

    k1: float
    k1_prime: float
    w_star: float
    sampled_token: int
    w_sampled: float


def hpd_weights(
    p: CategoricalDist,
    q: CategoricalDist,
    expert: int,
    sampled: int,
    variant: str = "hpd",
) -> HPDWeights:
    """Expert and sampled-token weights per the masking/reinforcement rules.

    variant "hpd": full rule (doubled forward-KL weight when k1 > 0 and the
    sampled token is simultaneously suppressed); "hpd_no_reinforce" drops
    the doubling; "hpd_no_sample" ignores the sampled token entirely.
    """
    if variant not in HPD_VARIANTS:
        raise ConfigError(f"unknown hpd variant {variant!r}")
    k1 = hpd_k1(p, q, expert)
    k1p = hpd_k1(p, q, sampled)
    p_star = float(p.probs[expert])

    if variant == "hpd_no_sample":
        w_sampled = 0.0
        w_star = p_star + k1 if k1 > 0.0 else k1
        return HPDWeights(k1=k1, k1_prime=k1p, w_star=w_star,
                          sampled_token=int(sampled), w_sampled=w_sampled)

    w_sampled = k1p if (sampled != expert and k1p < 0.0) else 0.0
    if k1 > 0.0 and k1p < 0.0 and variant == "hpd":
        w_star = 2.0 * p_star + k1
    elif k1 < 0.0:
        w_star = k1
    else:
        w_star = p_star + k1
    return HPDWeights(k1=k1, k1_prime=k1p, w_star=w_star,
                      sampled_token=int(sampled), w_sampled=w_sampled)


def opd_rewards(teacher_dists, student_dists, tokens) -> np.ndarray:
    """Per-step rewards r_t = ln p(a_t|s_t) - ln q(a_t|s_t) on a sampled path."""
    if not (len(teacher_dists) == len(student_dists) == len(tokens)):
        raise InvalidParameterError("per-step distributions must align with tokens")
    return np.array(
        [
            _logprob(pt, a, "p") - _logprob(qt, a, "q")
            for pt, qt, a in zip(teacher_dists, student_dists, tokens)
        ]
    )
