"""Exact categorical-distribution math.

All quantities are in nats. Probabilities below ZERO_TOL are treated as
exact zeros for support checks; their log-probability is -inf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceInfiniteError, InvalidInputError, InvalidParameterError

ZERO_TOL = 1e-12
PROB_SUM_TOL = 1e-9


@dataclass(frozen=True)
class CategoricalDist:
    """Probability vector over a vocabulary with cached log-probabilities."""

    probs: np.ndarray
    logprobs: np.ndarray

    @classmethod
    def from_probs(cls, probs) -> "CategoricalDist":
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise InvalidInputError("probability vector must be a non-empty 1-d array")
        if not np.all(np.isfinite(p)):
            raise InvalidInputError("probabilities must be finite")
        if np.any(p < -ZERO_TOL):
            raise InvalidInputError("probabilities must be non-negative")
        if abs(p.sum() - 1.0) > PROB_SUM_TOL:
            raise InvalidInputError(f"probabilities sum to {p.sum()!r}, not 1")
        p = np.where(p < ZERO_TOL, 0.0, p)
        with np.errstate(divide="ignore"):
            lp = np.where(p > 0.0, np.log(np.where(p > 0.0, p, 1.0)), -np.inf)
        p.setflags(write=False)
        lp.setflags(write=False)
        return cls(probs=p, logprobs=lp)

    @property
    def size(self) -> int:
        return self.probs.size

    @property
    def support(self) -> np.ndarray:
        return self.probs > 0.0


def softmax(logits) -> CategoricalDist:
    """Numerically stabilized softmax over a logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise InvalidInputError("logits must be a non-empty 1-d array")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")
    shifted = z - z.max()
    e = np.exp(shifted)
    p = e / e.sum()
    return CategoricalDist.from_probs(p)


def entropy(d: CategoricalDist) -> float:
    """Shannon entropy -sum p ln p, with 0 ln 0 := 0."""
    p = d.probs
    mask = p > 0.0
    return float(-np.sum(p[mask] * d.logprobs[mask]))


def _check_same_size(p: CategoricalDist, q: CategoricalDist) -> None:
    if p.size != q.size:
        raise InvalidInputError(f"vocabulary sizes differ: {p.size} vs {q.size}")


def kl_exact(p: CategoricalDist, q: CategoricalDist) -> float:
    """KL(p || q) = sum_v p_v (ln p_v - ln q_v)."""
    _check_same_size(p, q)
    mask = p.support
    if np.any(mask & ~q.support):
        bad = int(np.argmax(mask & ~q.support))
        raise DivergenceInfiniteError(
            f"KL(p||q) is infinite: p[{bad}] > 0 but q[{bad}] = 0"
        )
    val = float(np.sum(p.probs[mask] * (p.logprobs[mask] - q.logprobs[mask])))
    if -1e-12 < val < 0.0:
        return 0.0
    return val


def jsd_beta(p: CategoricalDist, q: CategoricalDist, beta: float) -> float:
    """Generalized Jensen-Shannon divergence against M = beta*p + (1-beta)*q."""
    _check_same_size(p, q)
    if not (0.0 < beta < 1.0):
        raise InvalidParameterError(f"beta must lie in (0, 1), got {beta!r}")
    m = CategoricalDist.from_probs(beta * p.probs + (1.0 - beta) * q.probs)
    return beta * kl_exact(p, m) + (1.0 - beta) * kl_exact(q, m)


@dataclass(frozen=True)
class DivergenceReport:
    """Monte Carlo estimate of KL(q || p) alongside its exact value."""

    exact_value: float
    mc_mean: float
    mc_stderr: float
    n_samples: int


def k1_samples(
    p: CategoricalDist, q: CategoricalDist, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Per-sample log-ratios ln(q[a]/p[a]) with a drawn from q."""
    _check_same_size(p, q)
    if n < 1:
        raise InvalidParameterError("sample count must be >= 1")
    draws = rng.choice(p.size, size=n, p=q.probs)
    if np.any(~p.support[draws]):
        bad = int(draws[np.argmax(~p.support[draws])])
        raise DivergenceInfiniteError(
            f"sampled token {bad} has zero probability under p"
        )
    return q.logprobs[draws] - p.logprobs[draws]


def k1_mc(
    p: CategoricalDist, q: CategoricalDist, n: int, rng: np.random.Generator
) -> DivergenceReport:
    """Single-sample-style Monte Carlo estimator of KL(q || p), aggregated over n draws."""
    vals = k1_samples(p, q, n, rng)
    mean = float(vals.mean())
    stderr = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return DivergenceReport(
        exact_value=kl_exact(q, p), mc_mean=mean, mc_stderr=stderr, n_samples=n
    )
