"""Order-k tabular autoregressive logit model with exact analytic gradients.

Contexts are tuples of the last k token ids, left-padded with the vocab's
begin-of-sequence id. Unseen contexts predict the uniform distribution
(all-zero logit row).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidInputError,
    LogOfZeroError,
    NumericOverflowError,
    ParseError,
)
from .numerics import CategoricalDist, softmax

CHECKPOINT_FORMAT_VERSION = 1

ContextKey = tuple[int, ...]


@dataclass(frozen=True)
class Vocab:
    names: tuple[str, ...]
    bos_id: int = 0

    def __post_init__(self):
        if len(self.names) < 2:
            raise InvalidInputError("vocabulary needs at least 2 tokens")
        if len(set(self.names)) != len(self.names):
            raise InvalidInputError("token names must be unique")
        if not (0 <= self.bos_id < len(self.names)):
            raise InvalidInputError("bos_id out of range")

    @classmethod
    def default(cls, size: int) -> "Vocab":
        return cls(names=tuple(f"t{i}" for i in range(size)))

    @property
    def size(self) -> int:
        return len(self.names)


def pad_context(prefix, order: int, bos_id: int) -> ContextKey:
    """Last `order` ids of prefix, left-padded with the BOS id."""
    tail = tuple(int(t) for t in prefix[-order:]) if order > 0 else ()
    if len(tail) < order:
        tail = (bos_id,) * (order - len(tail)) + tail
    return tail


@dataclass
class TabularLM:
    order: int
    vocab: Vocab
    rows: dict[ContextKey, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.order < 1:
            raise InvalidInputError("model order must be >= 1")

    def _check_ctx(self, ctx: ContextKey) -> ContextKey:
        ctx = tuple(int(t) for t in ctx)
        if len(ctx) != self.order:
            raise InvalidInputError(
                f"context length {len(ctx)} != model order {self.order}"
            )
        if any(not (0 <= t < self.vocab.size) for t in ctx):
            raise InvalidInputError(f"context {ctx} has out-of-range token ids")
        return ctx

    def logits(self, ctx: ContextKey) -> np.ndarray:
        ctx = self._check_ctx(ctx)
        row = self.rows.get(ctx)
        if row is None:
            return np.zeros(self.vocab.size)
        return row.copy()

    def set_row(self, ctx: ContextKey, logits) -> None:
        ctx = self._check_ctx(ctx)
        row = np.asarray(logits, dtype=np.float64)
        if row.shape != (self.vocab.size,) or not np.all(np.isfinite(row)):
            raise InvalidInputError("logit row must be finite and of vocab size")
        self.rows[ctx] = row.copy()

    def predict(self, ctx: ContextKey, temperature: float = 1.0) -> CategoricalDist:
        z = self.logits(ctx)
        if temperature != 1.0:
            if temperature <= 0.0:
                raise InvalidInputError("temperature must be > 0 (use greedy=True for argmax)")
            z = z / temperature
        return softmax(z)

    def sample_next(
        self, ctx: ContextKey, rng: np.random.Generator, temperature: float = 1.0
    ) -> int:
        d = self.predict(ctx, temperature=temperature)
        return int(rng.choice(self.vocab.size, p=d.probs))

    def greedy_next(self, ctx: ContextKey) -> int:
        return int(np.argmax(self.logits(ctx)))

    def context_for(self, prefix) -> ContextKey:
        return pad_context(prefix, self.order, self.vocab.bos_id)

    def rollout(
        self,
        prompt,
        steps: int,
        rng: np.random.Generator | None = None,
        temperature: float = 1.0,
        greedy: bool = False,
    ) -> list[int]:
        """Extend prompt by `steps` autoregressively sampled tokens."""
        if steps < 1:
            raise InvalidInputError("steps must be >= 1")
        if not greedy and rng is None:
            raise InvalidInputError("sampled rollout needs an rng")
        seq = [int(t) for t in prompt]
        for _ in range(steps):
            ctx = self.context_for(seq)
            if greedy:
                seq.append(self.greedy_next(ctx))
            else:
                seq.append(self.sample_next(ctx, rng, temperature=temperature))
        return seq[len(prompt):]

    def copy(self) -> "TabularLM":
        return TabularLM(
            order=self.order,
            vocab=self.vocab,
            rows={k: v.copy() for k, v in self.rows.items()},
        )


@dataclass
class GradAccumulator:
    """Per-row accumulated descent directions plus a sample count.

    `n_samples` counts token positions (one per accumulate call with
    count=1); sgd_step averages by it so the learning-rate scale is
    independent of batch size.
    """

    directions: dict[ContextKey, np.ndarray] = field(default_factory=dict)
    n_samples: int = 0

    def clear(self) -> None:
        self.directions = {}
        self.n_samples = 0

    def add_row(self, ctx: ContextKey, direction: np.ndarray, count: int = 1) -> None:
        acc = self.directions.get(ctx)
        if acc is None:
            self.directions[ctx] = np.array(direction, dtype=np.float64)
        else:
            acc += direction
        self.n_samples += count


def accumulate_token_grad(
    acc: GradAccumulator,
    model: TabularLM,
    ctx: ContextKey,
    token: int,
    weight: float,
    count: int = 1,
    q: "CategoricalDist | None" = None,
) -> GradAccumulator:
    """Add the exact descent direction of -weight * ln q[token] on ctx's row.

    The direction is weight * (onehot(token) - q); the weight is a constant
    (no derivative flows through it). Pass q to reuse an already computed
    predictive distribution for ctx.
    """
    if not np.isfinite(weight):
        raise InvalidInputError("weight must be finite")
    ctx = model._check_ctx(ctx)
    if not (0 <= token < model.vocab.size):
        raise InvalidInputError(f"token id {token} out of range")
    if q is None:
        q = model.predict(ctx)
    if q.probs[token] <= 0.0:
        raise LogOfZeroError(f"q[{token}] = 0 at context {ctx}")
    if weight == 0.0:
        return acc
    direction = -weight * q.probs
    direction[token] += weight
    acc.add_row(ctx, direction, count=count)
    return acc


def sgd_step(model: TabularLM, acc: GradAccumulator, lr: float) -> TabularLM:
    """Move every touched logit row by lr * mean descent direction; clears acc."""
    if lr <= 0.0:
        raise InvalidInputError("learning rate must be > 0")
    if acc.n_samples > 0:
        scale = lr / acc.n_samples
        for ctx, direction in acc.directions.items():
            row = model.logits(ctx) + scale * direction
            if not np.all(np.isfinite(row)):
                raise NumericOverflowError(f"non-finite logits at context {ctx}")
            model.rows[ctx] = row
    acc.clear()
    return model


def checkpoint_save(model: TabularLM, path, header_extra: dict | None = None) -> None:
    """Write the model as JSON; float repr keeps 17 significant digits."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "order": model.order,
        "vocab": {"names": list(model.vocab.names), "bos_id": model.vocab.bos_id},
        "rows": [
            {"context": list(ctx), "logits": [float(x) for x in row]}
            for ctx, row in sorted(model.rows.items())
        ],
    }
    if header_extra:
        doc.update(header_extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
        f.write("\n")


def checkpoint_load(path) -> TabularLM:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    try:
        version = doc["format_version"]
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ParseError(f"{path}: unsupported format_version {version}")
        vocab = Vocab(names=tuple(doc["vocab"]["names"]), bos_id=int(doc["vocab"]["bos_id"]))
        model = TabularLM(order=int(doc["order"]), vocab=vocab)
        for i, entry in enumerate(doc["rows"]):
            ctx = tuple(int(t) for t in entry["context"])
            row = np.asarray(entry["logits"], dtype=np.float64)
            if len(ctx) != model.order:
                raise ParseError(f"{path}: rows[{i}]: context length != order")
            if row.shape != (vocab.size,) or not np.all(np.isfinite(row)):
                raise ParseError(f"{path}: rows[{i}]: bad logit row")
            model.rows[ctx] = row
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ParseError):
            raise
        raise ParseError(f"{path}: malformed checkpoint: {e}") from e
    return model
