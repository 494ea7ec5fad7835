"""Teacher fitting, off-policy distillation, and on-policy distillation.

A teacher provider exposes exact conditionals given a raw token prefix:
either the ground-truth MarkovSource (oracle mode) or a fitted TabularLM.
All loops are deterministic given the config seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Corpus, MarkovSource
from .errors import ConfigError, DivergenceInfiniteError, InvalidInputError, PipelineError
from .model import GradAccumulator, TabularLM, accumulate_token_grad, pad_context, sgd_step
from .numerics import CategoricalDist, entropy, kl_exact
from .objectives import (
    ObjectiveKind,
    hpd_weights,
    weight_fkld_token,
    weight_jsd_off,
    weight_rkld_off,
)

METRICS_HEADER = (
    "step,objective,seed,train_entropy,kl_fwd,kl_rev,accuracy,mean_reward,wallclock_ms"
)

# ln of a zero count underflows to prob 0 through softmax at this floor
LOGIT_FLOOR = -1000.0


class OracleTeacher:
    """Exact conditionals straight from a MarkovSource."""

    def __init__(self, source: MarkovSource):
        self.source = source
        self.order = source.order
        self.vocab = source.vocab

    def dist(self, prefix) -> CategoricalDist:
        return self.source.conditional_for_prefix(prefix)

    def sample_sequence(self, length: int, rng: np.random.Generator) -> list[int]:
        return self.source.sample_sequence(length, rng)


class ModelTeacher:
    """Conditionals from a fitted TabularLM."""

    def __init__(self, model: TabularLM):
        self.model = model
        self.order = model.order
        self.vocab = model.vocab

    def dist(self, prefix) -> CategoricalDist:
        return self.model.predict(self.model.context_for(prefix))

    def sample_sequence(self, length: int, rng: np.random.Generator) -> list[int]:
        return self.model.rollout([], length, rng=rng)


def make_teacher(mode: str, source: MarkovSource | None = None,
                 model: TabularLM | None = None):
    if mode == "oracle_source":
        if source is None:
            raise ConfigError("oracle_source teacher needs a source")
        return OracleTeacher(source)
    if mode == "mle_fit":
        if model is None:
            raise ConfigError("mle_fit teacher needs a fitted model")
        return ModelTeacher(model)
    raise ConfigError(f"unknown teacher_mode {mode!r}")


def train_teacher_mle(corpus: Corpus, order: int, lam: float = 0.0) -> TabularLM:
    """Tabular MLE: logits are ln of add-lam-smoothed conditional frequencies."""
    if order < 1:
        raise InvalidInputError("order must be >= 1")
    if lam < 0.0:
        raise InvalidInputError("smoothing must be >= 0")
    from .model import Vocab

    v = corpus.vocab_size
    vocab = Vocab.default(v)
    counts: dict[tuple, np.ndarray] = {}
    for seq in corpus.sequences:
        for t, tok in enumerate(seq):
            ctx = pad_context(seq[:t], order, vocab.bos_id)
            row = counts.get(ctx)
            if row is None:
                row = counts[ctx] = np.zeros(v)
            row[tok] += 1.0
    model = TabularLM(order=order, vocab=vocab)
    for ctx, row in counts.items():
        total = row.sum()
        if total == 0.0 and lam == 0.0:
            continue
        probs = (row + lam) / (total + lam * v)
        with np.errstate(divide="ignore"):
            logits = np.where(probs > 0.0, np.log(np.where(probs > 0.0, probs, 1.0)),
                              LOGIT_FLOOR)
        model.rows[ctx] = logits
    return model


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveKind
    steps: int
    seed: int
    lr: float = 0.1
    batch_size: int = 32
    eval_every: int = 100
    teacher_mode: str = "oracle_source"
    smoothing: float = 0.0
    opd_reward_mode: str = "per_token"
    temperature: float = 1.0
    hpd_samples: int = 1
    opd_baseline: bool = False
    horizon: int = 16
    n_eval_seqs: int = 20
    eval_len: int = 16
    eval_from: str = "teacher"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0.0:
            raise ConfigError("lr must be > 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.teacher_mode not in ("oracle_source", "mle_fit"):
            raise ConfigError(f"unknown teacher_mode {self.teacher_mode!r}")
        if self.opd_reward_mode not in ("per_token", "trajectory"):
            raise ConfigError(f"unknown opd_reward_mode {self.opd_reward_mode!r}")
        if self.eval_from not in ("teacher", "student"):
            raise ConfigError(f"unknown eval_from {self.eval_from!r}")
        if self.hpd_samples < 1:
            raise ConfigError("hpd_samples must be >= 1")


@dataclass
class MetricsRow:
    step: int
    objective: str
    seed: int
    train_entropy: float
    kl_fwd: float
    kl_rev: float
    accuracy: float | None = None
    mean_reward: float | None = None
    wallclock_ms: float | None = None

    def to_csv_line(self) -> str:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return ",".join(
            [
                str(self.step),
                self.objective,
                str(self.seed),
                fmt(self.train_entropy),
                fmt(self.kl_fwd),
                fmt(self.kl_rev),
                fmt(self.accuracy),
                fmt(self.mean_reward),
                fmt(self.wallclock_ms),
            ]
        )


def _guarded_kl(p: CategoricalDist, q: CategoricalDist) -> float:
    try:
        return kl_exact(p, q)
    except DivergenceInfiniteError:
        return math.inf


def evaluate_divergences(student: TabularLM, teacher, cfg: TrainConfig,
                         eval_rng: np.random.Generator) -> tuple[float, float]:
    """Mean exact KL(p||q) and KL(q||p) over states from fresh rollouts."""
    fwd, rev, n = 0.0, 0.0, 0
    q_cache: dict = {}
    for _ in range(cfg.n_eval_seqs):
        if cfg.eval_from == "teacher":
            seq = teacher.sample_sequence(cfg.eval_len, eval_rng)
        else:
            seq = student.rollout([], cfg.eval_len, rng=eval_rng)
        for t in range(len(seq)):
            p = teacher.dist(seq[:t])
            ctx = student.context_for(seq[:t])
            q = q_cache.get(ctx)
            if q is None:
                q = q_cache[ctx] = student.predict(ctx)
            fwd += _guarded_kl(p, q)
            rev += _guarded_kl(q, p)
            n += 1
    return fwd / n, rev / n


def _eval_accuracy(student: TabularLM, eval_tasks) -> float | None:
    if not eval_tasks:
        return None
    from .evaluation import completion_accuracy

    return completion_accuracy(student, eval_tasks)


def _hpd_sample(q: CategoricalDist, rng: np.random.Generator) -> int:
    return int(rng.choice(q.size, p=q.probs))


def distill_offpolicy(
    cfg: TrainConfig,
    teacher,
    corpus: Corpus,
    student: TabularLM,
    eval_tasks=None,
) -> tuple[TabularLM, list[MetricsRow]]:
    """Minibatch reweighted-likelihood distillation on a fixed corpus."""
    kind = cfg.objective
    if kind.on_policy:
        raise ConfigError(f"objective {kind.tag!r} is on-policy; use distill_onpolicy_opd")
    if kind.tag == "seqkd" and corpus.provenance != "teacher_generated":
        raise ConfigError("seqkd expects a teacher_generated corpus")
    if not corpus.sequences:
        raise InvalidInputError("corpus is empty")

    rng = np.random.default_rng(cfg.seed)
    eval_seed = np.random.SeedSequence(cfg.seed).spawn(1)[0]
    student = student.copy()
    acc = GradAccumulator()
    rows: list[MetricsRow] = []
    n_seqs = len(corpus.sequences)

    for step in range(1, cfg.steps + 1):
        batch_entropies = []
        q_cache: dict = {}  # student rows only change at sgd_step
        for _ in range(cfg.batch_size):
            si = int(rng.integers(n_seqs))
            seq = corpus.sequences[si]
            t = int(rng.integers(len(seq)))
            prefix = seq[:t]
            expert = seq[t]
            ctx = student.context_for(prefix)
            p = teacher.dist(prefix)
            cached = q_cache.get(ctx)
            if cached is None:
                q = student.predict(ctx)
                cached = q_cache[ctx] = (q, entropy(q), np.cumsum(q.probs))
            q, q_entropy, q_cum = cached
            batch_entropies.append(q_entropy)

            tag = kind.tag
            if tag in ("sft", "seqkd"):
                accumulate_token_grad(acc, student, ctx, expert, 1.0, q=q)
            elif tag == "fkld_token":
                accumulate_token_grad(acc, student, ctx, expert,
                                      weight_fkld_token(p, expert), q=q)
            elif tag == "fkld_dense":
                # sum over v of p_v * (onehot(v) - q) collapses to p - q
                acc.add_row(ctx, p.probs - q.probs, count=1)
            elif tag == "rkld_off":
                w = weight_rkld_off(p, q, expert, sign_fidelity=kind.sign_fidelity)
                accumulate_token_grad(acc, student, ctx, expert, w, q=q)
            elif tag == "jsd_off":
                w = weight_jsd_off(p, q, expert, beta=kind.beta,
                                   sign_fidelity=kind.sign_fidelity)
                accumulate_token_grad(acc, student, ctx, expert, w, q=q)
            else:  # hpd variants
                for _i in range(cfg.hpd_samples):
                    sampled = min(int(np.searchsorted(q_cum, rng.random(), side="right")),
                                  q.size - 1)
                    hw = hpd_weights(p, q, expert, sampled, variant=tag)
                    accumulate_token_grad(acc, student, ctx, expert, hw.w_star,
                                          count=1 if _i == 0 else 0, q=q)
                    if hw.w_sampled != 0.0:
                        accumulate_token_grad(acc, student, ctx, hw.sampled_token,
                                              hw.w_sampled, count=0, q=q)
        sgd_step(student, acc, cfg.lr)

        if step % cfg.eval_every == 0 or step == cfg.steps:
            eval_rng = np.random.default_rng(eval_seed)
            kl_fwd, kl_rev = evaluate_divergences(student, teacher, cfg, eval_rng)
            rows.append(
                MetricsRow(
                    step=step,
                    objective=kind.tag,
                    seed=cfg.seed,
                    train_entropy=float(np.mean(batch_entropies)),
                    kl_fwd=kl_fwd,
                    kl_rev=kl_rev,
                    accuracy=_eval_accuracy(student, eval_tasks),
                )
            )
    return student, rows


def distill_onpolicy_opd(
    cfg: TrainConfig,
    teacher,
    student: TabularLM,
    prompts=None,
    eval_tasks=None,
) -> tuple[TabularLM, list[MetricsRow]]:
    """Score-function on-policy distillation with per-token K1 rewards."""
    kind = cfg.objective
    if not kind.on_policy:
        raise ConfigError(f"objective {kind.tag!r} is off-policy; use distill_offpolicy")
    reward_mode = "per_token" if kind.tag == "rkld_on" else cfg.opd_reward_mode
    if cfg.horizon < 1:
        raise ConfigError("horizon must be >= 1")
    prompts = [list(p) for p in prompts] if prompts else [[]]

    rng = np.random.default_rng(cfg.seed)
    eval_seed = np.random.SeedSequence(cfg.seed).spawn(1)[0]
    student = student.copy()
    acc = GradAccumulator()
    rows: list[MetricsRow] = []

    for step in range(1, cfg.steps + 1):
        batch_entropies = []
        batch_rewards = []
        batch_items = []  # (ctx, token, reward) per rollout
        for _ in range(cfg.batch_size):
            prompt = prompts[int(rng.integers(len(prompts)))]
            seq = list(prompt)
            steps_items = []
            rewards = []
            for _t in range(cfg.horizon):
                ctx = student.context_for(seq)
                q = student.predict(ctx)
                batch_entropies.append(entropy(q))
                a = int(rng.choice(student.vocab.size, p=q.probs))
                p = teacher.dist(seq)
                if p.probs[a] <= 0.0:
                    raise DivergenceInfiniteError(
                        f"student sampled token {a} outside teacher support at {ctx}"
                    )
                r = float(p.logprobs[a] - q.logprobs[a])
                steps_items.append((ctx, a))
                rewards.append(r)
                seq.append(a)
            if reward_mode == "trajectory":
                total = sum(rewards)
                coeffs = [total] * len(rewards)
            else:
                coeffs = rewards
            batch_rewards.extend(rewards)
            batch_items.append((steps_items, coeffs))

        baseline = float(np.mean(batch_rewards)) if cfg.opd_baseline else 0.0
        for steps_items, coeffs in batch_items:
            for (ctx, a), c in zip(steps_items, coeffs):
                accumulate_token_grad(acc, student, ctx, a, c - baseline)
        sgd_step(student, acc, cfg.lr)

        if step % cfg.eval_every == 0 or step == cfg.steps:
            eval_rng = np.random.default_rng(eval_seed)
            kl_fwd, kl_rev = evaluate_divergences(student, teacher, cfg, eval_rng)
            rows.append(
                MetricsRow(
                    step=step,
                    objective=kind.tag,
                    seed=cfg.seed,
                    train_entropy=float(np.mean(batch_entropies)),
                    kl_fwd=kl_fwd,
                    kl_rev=kl_rev,
                    accuracy=_eval_accuracy(student, eval_tasks),
                    mean_reward=float(np.mean(batch_rewards)),
                )
            )
    return student, rows


def metrics_write(rows, path, meta: dict | None = None) -> None:
    """Write rows under the fixed CSV header, with a '#' JSON meta line."""
    import json

    with open(path, "w", encoding="utf-8") as f:
        if meta is not None:
            f.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        f.write(METRICS_HEADER + "\n")
        for row in rows:
            f.write(row.to_csv_line() + "\n")


@dataclass(frozen=True)
class Stage:
    name: str
    cfg: TrainConfig


def run_experiment(
    stages: list[Stage],
    teacher,
    student: TabularLM,
    corpus: Corpus | None = None,
    prompts=None,
    eval_tasks=None,
    out_dir=None,
    meta: dict | None = None,
) -> tuple[TabularLM, dict[str, list[MetricsRow]]]:
    """Run stages sequentially, threading the student; one CSV per stage.

    Step numbering is continuous across stages.
    """
    import os

    if not stages:
        raise PipelineError("experiment needs at least one stage")
    all_rows: dict[str, list[MetricsRow]] = {}
    offset = 0
    for stage in stages:
        cfg = stage.cfg
        if cfg.objective.on_policy:
            student, rows = distill_onpolicy_opd(cfg, teacher, student,
                                                 prompts=prompts, eval_tasks=eval_tasks)
        else:
            if corpus is None:
                raise PipelineError(f"stage {stage.name!r} needs a corpus")
            student, rows = distill_offpolicy(cfg, teacher, corpus, student,
                                              eval_tasks=eval_tasks)
        rows = [replace_step(r, r.step + offset) for r in rows]
        offset += cfg.steps
        all_rows[stage.name] = rows
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            stage_meta = dict(meta or {})
            stage_meta["stage"] = stage.name
            metrics_write(rows, os.path.join(out_dir, f"metrics_{stage.name}.csv"),
                          meta=stage_meta)
    return student, all_rows


def replace_step(row: MetricsRow, step: int) -> MetricsRow:
    import dataclasses

    return dataclasses.replace(row, step=step)
