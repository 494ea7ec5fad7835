"""Ground-truth stochastic sources and corpus generation/IO.

Builtin sources:
  uniform             every conditional is uniform over the vocabulary
  deterministic_cycle order-1 cycle i -> (i+1) mod V, one-hot rows
  bimodal_gap         order-2, V=6; the next token after the gap token
                      depends on the token two steps back, so an order-1
                      observer faces an irreducibly bimodal conditional
  random_dirichlet    every row drawn from a symmetric Dirichlet

bimodal_gap tokens: 0 = gap, 1/2 = coin tokens, 3 = chooser, 4/5 = mode
tokens. The chain cycles chooser -> coin in {1,2} -> gap -> mode (4 if
the coin was 1, else 5) -> chooser. Only the gap state is irreducible for
an order-1 observer; every other conditional depends on the last token
alone. Rows are smoothed toward uniform by BIMODAL_EPS so every
conditional has full support. The construction is symmetric under jointly
swapping 1<->2 and 4<->5, and the rows for contexts (., gap) with a
non-coin earlier token equal the average of the two mode rows, so the
exact order-1 marginal at "last token = gap" is the 50/50 mixture of rows
(1,0) and (2,0) regardless of the stationary distribution.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidInputError, ParseError
from .model import ContextKey, TabularLM, Vocab, pad_context
from .numerics import CategoricalDist

CORPUS_FORMAT_VERSION = 1

GAP_TOKEN = 0
COIN_A = 1
COIN_B = 2
CHOOSER_TOKEN = 3
MODE_X = 4
MODE_Y = 5
BIMODAL_VOCAB = 6
BIMODAL_EPS = 0.1


@dataclass
class MarkovSource:
    """Stochastic source with exactly known conditional distributions."""

    name: str
    order: int
    vocab: Vocab
    table: dict[ContextKey, CategoricalDist] = field(default_factory=dict)

    def initial_context(self) -> ContextKey:
        return (self.vocab.bos_id,) * self.order

    def conditional(self, ctx: ContextKey) -> CategoricalDist:
        ctx = tuple(int(t) for t in ctx)
        if len(ctx) != self.order:
            raise InvalidInputError(
                f"context length {len(ctx)} != source order {self.order}"
            )
        try:
            return self.table[ctx]
        except KeyError:
            raise InvalidInputError(f"no conditional for context {ctx}") from None

    def conditional_for_prefix(self, prefix) -> CategoricalDist:
        return self.conditional(pad_context(prefix, self.order, self.vocab.bos_id))

    def sample_sequence(self, length: int, rng: np.random.Generator) -> list[int]:
        seq: list[int] = []
        for _ in range(length):
            d = self.conditional_for_prefix(seq)
            seq.append(int(rng.choice(self.vocab.size, p=d.probs)))
        return seq


def _all_contexts(size: int, order: int):
    return itertools.product(range(size), repeat=order)


def _smoothed(base: np.ndarray, eps: float) -> CategoricalDist:
    v = base.size
    return CategoricalDist.from_probs((1.0 - eps) * base + eps / v)


def _bimodal_base_row(ctx: ContextKey) -> np.ndarray:
    prev2, prev1 = ctx
    row = np.zeros(BIMODAL_VOCAB)
    if prev1 == CHOOSER_TOKEN:
        row[COIN_A] = row[COIN_B] = 0.5
    elif prev1 in (COIN_A, COIN_B):
        row[GAP_TOKEN] = 1.0
    elif prev1 == GAP_TOKEN:
        if prev2 == COIN_A:
            row[MODE_X] = 1.0
        elif prev2 == COIN_B:
            row[MODE_Y] = 1.0
        else:
            row[MODE_X] = row[MODE_Y] = 0.5
    else:
        row[CHOOSER_TOKEN] = 1.0
    return row


def bimodal_ambiguous_mixture(eps: float = BIMODAL_EPS) -> CategoricalDist:
    """Exact best order-1 conditional at the "last token = gap" state."""
    a = _smoothed(_bimodal_base_row((COIN_A, GAP_TOKEN)), eps).probs
    b = _smoothed(_bimodal_base_row((COIN_B, GAP_TOKEN)), eps).probs
    return CategoricalDist.from_probs(0.5 * (a + b))


def build_source(spec: dict) -> MarkovSource:
    """Construct a builtin source from a descriptor dict.

    Keys: name (required); vocab_size, order, seed, concentration, eps
    depending on the builtin.
    """
    if "name" not in spec:
        raise ConfigError("source descriptor needs a 'name'")
    name = spec["name"]
    known = {"name", "vocab_size", "order", "seed", "concentration", "eps"}
    extra = set(spec) - known
    if extra:
        raise ConfigError(f"unknown source keys: {sorted(extra)}")

    if name == "uniform":
        v = int(spec.get("vocab_size", 4))
        m = int(spec.get("order", 1))
        vocab = Vocab.default(v)
        row = CategoricalDist.from_probs(np.full(v, 1.0 / v))
        table = {ctx: row for ctx in _all_contexts(v, m)}
        return MarkovSource(name=name, order=m, vocab=vocab, table=table)

    if name == "deterministic_cycle":
        v = int(spec.get("vocab_size", 3))
        vocab = Vocab.default(v)
        table = {}
        for ctx in _all_contexts(v, 1):
            row = np.zeros(v)
            row[(ctx[0] + 1) % v] = 1.0
            table[ctx] = CategoricalDist.from_probs(row)
        return MarkovSource(name=name, order=1, vocab=vocab, table=table)

    if name == "bimodal_gap":
        if (int(spec.get("vocab_size", BIMODAL_VOCAB)) != BIMODAL_VOCAB
                or int(spec.get("order", 2)) != 2):
            raise ConfigError(
                f"bimodal_gap is fixed at vocab_size={BIMODAL_VOCAB}, order=2")
        eps = float(spec.get("eps", BIMODAL_EPS))
        if not (0.0 < eps < 1.0):
            raise ConfigError("bimodal_gap eps must lie in (0, 1)")
        vocab = Vocab.default(BIMODAL_VOCAB)
        table = {
            ctx: _smoothed(_bimodal_base_row(ctx), eps)
            for ctx in _all_contexts(BIMODAL_VOCAB, 2)
        }
        return MarkovSource(name=name, order=2, vocab=vocab, table=table)

    if name == "random_dirichlet":
        v = int(spec.get("vocab_size", 8))
        m = int(spec.get("order", 1))
        if "seed" not in spec:
            raise ConfigError("random_dirichlet needs a 'seed'")
        conc = float(spec.get("concentration", 1.0))
        if conc <= 0.0:
            raise ConfigError("concentration must be > 0")
        rng = np.random.default_rng(int(spec["seed"]))
        vocab = Vocab.default(v)
        table = {
            ctx: CategoricalDist.from_probs(rng.dirichlet(np.full(v, conc)))
            for ctx in _all_contexts(v, m)
        }
        return MarkovSource(name=name, order=m, vocab=vocab, table=table)

    raise ConfigError(f"unknown source name {name!r}")


SOURCE_FORMAT_VERSION = 1


def source_save(source: MarkovSource, path, header_extra: dict | None = None) -> None:
    doc = {
        "format_version": SOURCE_FORMAT_VERSION,
        "name": source.name,
        "order": source.order,
        "vocab": {"names": list(source.vocab.names), "bos_id": source.vocab.bos_id},
        "rows": [
            {"context": list(ctx), "probs": [float(x) for x in d.probs]}
            for ctx, d in sorted(source.table.items())
        ],
    }
    if header_extra:
        doc.update(header_extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
        f.write("\n")


def source_load(path) -> MarkovSource:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    try:
        if doc["format_version"] != SOURCE_FORMAT_VERSION:
            raise ParseError(f"{path}: unsupported format_version")
        vocab = Vocab(names=tuple(doc["vocab"]["names"]), bos_id=int(doc["vocab"]["bos_id"]))
        table = {}
        for i, entry in enumerate(doc["rows"]):
            ctx = tuple(int(t) for t in entry["context"])
            if len(ctx) != int(doc["order"]):
                raise ParseError(f"{path}: rows[{i}]: context length != order")
            table[ctx] = CategoricalDist.from_probs(np.asarray(entry["probs"]))
        return MarkovSource(
            name=str(doc["name"]), order=int(doc["order"]), vocab=vocab, table=table
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ParseError):
            raise
        raise ParseError(f"{path}: malformed source file: {e}") from e


@dataclass
class Corpus:
    sequences: list[list[int]]
    provenance: str
    seed: int
    vocab_size: int

    PROVENANCES = ("ground_truth", "teacher_generated", "student_generated")

    def __post_init__(self):
        if self.provenance not in self.PROVENANCES:
            raise InvalidInputError(f"unknown provenance {self.provenance!r}")

    def num_tokens(self) -> int:
        return sum(len(s) for s in self.sequences)


def sample_corpus(
    source: MarkovSource, num_seqs: int, length: int, rng: np.random.Generator, seed: int = -1
) -> Corpus:
    if num_seqs < 1 or length < 1:
        raise InvalidInputError("num_seqs and length must be >= 1")
    seqs = [source.sample_sequence(length, rng) for _ in range(num_seqs)]
    return Corpus(
        sequences=seqs, provenance="ground_truth", seed=seed, vocab_size=source.vocab.size
    )


def generate_seqkd_corpus(
    teacher: TabularLM,
    prompts,
    length: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
    seed: int = -1,
) -> Corpus:
    """Teacher rollouts at the given temperature; temperature=0 means greedy."""
    if temperature < 0.0:
        raise InvalidInputError("temperature must be >= 0")
    if length < 1:
        raise InvalidInputError("length must be >= 1")
    greedy = temperature == 0.0
    seqs = []
    for prompt in prompts:
        cont = teacher.rollout(
            prompt, length, rng=rng, greedy=greedy,
            temperature=temperature if not greedy else 1.0,
        )
        seqs.append([int(t) for t in prompt] + cont)
    return Corpus(
        sequences=seqs,
        provenance="teacher_generated",
        seed=seed,
        vocab_size=teacher.vocab.size,
    )


def corpus_write(corpus: Corpus, path, header_extra: dict | None = None) -> None:
    header = {
        "format_version": CORPUS_FORMAT_VERSION,
        "V": corpus.vocab_size,
        "provenance": corpus.provenance,
        "seed": corpus.seed,
    }
    if header_extra:
        header.update(header_extra)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for seq in corpus.sequences:
            f.write(" ".join(str(t) for t in seq) + "\n")


def corpus_read(path) -> Corpus:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file, missing header")
    try:
        header = json.loads(lines[0])
        version = header["format_version"]
        v = int(header["V"])
        provenance = header["provenance"]
        seed = int(header["seed"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{path}: line 1: bad header: {e}") from e
    if version != CORPUS_FORMAT_VERSION:
        raise ParseError(f"{path}: line 1: unsupported format_version {version}")
    seqs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            seq = [int(t) for t in line.split()]
        except ValueError as e:
            raise ParseError(f"{path}: line {lineno}: non-integer token: {e}") from e
        for t in seq:
            if not (0 <= t < v):
                raise ParseError(
                    f"{path}: line {lineno}: token id {t} out of range [0, {v})"
                )
        seqs.append(seq)
    return Corpus(sequences=seqs, provenance=provenance, seed=seed, vocab_size=v)
