"""Command-line surface for reproducible, config-driven runs.

Commands: gen-source, gen-corpus, train-teacher, distill, opd, eval,
gradcheck, sweep. Every command takes a JSON config (--config) plus
optional dotted-key overrides (--set train.lr=0.5). Overrides win; the
effective config is echoed to a sidecar file, and every output file
embeds {format_version, config_hash, seed}.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import data as data_mod
from .errors import ConfigError, ParseError, PipelineError
from .evaluation import divergence_audit, gradcheck, make_completion_tasks
from .model import TabularLM, Vocab, checkpoint_load, checkpoint_save
from .numerics import entropy
from .objectives import ALL_TAGS, ObjectiveKind
from .training import (
    Stage,
    TrainConfig,
    distill_offpolicy,
    distill_onpolicy_opd,
    make_teacher,
    metrics_write,
    run_experiment,
    train_teacher_mle,
)

CONFIG_FORMAT_VERSION = 1

_SCHEMA = {
    "seed": None,
    "out_dir": None,
    "source": {"name", "vocab_size", "order", "seed", "concentration", "eps"},
    "source_path": None,
    "corpus_path": None,
    "corpus": {"num_seqs", "length", "regime", "temperature"},
    "student_order": None,
    "teacher": {"mode", "order", "smoothing"},
    "init_checkpoint": None,
    "train": {
        "objective", "beta", "sign_fidelity", "lr", "steps", "batch_size",
        "eval_every", "opd_reward_mode", "temperature", "hpd_samples",
        "opd_baseline", "horizon", "n_eval_seqs", "eval_len", "eval_from",
    },
    "tasks": {"num_tasks", "cont_len", "min_conf"},
    "stages": None,
    "sweep": {"objectives", "seeds"},
    "gradcheck": {"n_tokens", "eps", "vocab_size", "order", "model_seed"},
    "timing": None,
}


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    for key, val in cfg.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        allowed = _SCHEMA[key]
        if allowed is not None and isinstance(val, dict):
            extra = set(val) - allowed
            if extra:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(extra)}")
    if "seed" not in cfg:
        raise ConfigError("config must set 'seed'")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("'seed' must be an integer")
    if "stages" in cfg:
        if not isinstance(cfg["stages"], list) or not cfg["stages"]:
            raise ConfigError("'stages' must be a non-empty list")
        for i, st in enumerate(cfg["stages"]):
            if not isinstance(st, dict):
                raise ConfigError(f"stages[{i}] must be an object")
            extra = set(st) - ({"name"} | _SCHEMA["train"])
            if extra:
                raise ConfigError(f"unknown keys in stages[{i}]: {sorted(extra)}")


def apply_overrides(cfg: dict, sets: list[str]) -> dict:
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} clashes with a scalar")
        node[parts[-1]] = value
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def load_config(path: str | None, sets: list[str]) -> dict:
    if path is not None:
        with open(path, encoding="utf-8") as f:
            try:
                cfg = json.load(f)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: line {e.lineno}: {e.msg}") from e
    else:
        cfg = {}
    cfg = apply_overrides(cfg, sets)
    validate_config(cfg)
    return cfg


def _meta(cfg: dict) -> dict:
    return {
        "format_version": CONFIG_FORMAT_VERSION,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
    }


def _outdir(cfg: dict) -> str:
    out = cfg.get("out_dir", "out")
    os.makedirs(out, exist_ok=True)
    return out


def _echo_effective(cfg: dict, out: str, command: str) -> None:
    path = os.path.join(out, f"{command}_effective_config.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def _get_source(cfg: dict) -> data_mod.MarkovSource:
    if "source_path" in cfg:
        return data_mod.source_load(cfg["source_path"])
    if "source" in cfg:
        return data_mod.build_source(cfg["source"])
    raise ConfigError("config needs 'source' or 'source_path'")


def _get_corpus(cfg: dict, source=None) -> data_mod.Corpus:
    if "corpus_path" in cfg:
        return data_mod.corpus_read(cfg["corpus_path"])
    if source is None:
        source = _get_source(cfg)
    c = cfg.get("corpus", {})
    rng = np.random.default_rng(cfg["seed"])
    regime = c.get("regime", "ground_truth")
    num_seqs = int(c.get("num_seqs", 2000))
    length = int(c.get("length", 64))
    if regime == "ground_truth":
        return data_mod.sample_corpus(source, num_seqs, length, rng, seed=cfg["seed"])
    if regime == "teacher_generated":
        teacher_model = _fit_teacher_model(cfg, source)
        prompts = [[] for _ in range(num_seqs)]
        return data_mod.generate_seqkd_corpus(
            teacher_model, prompts, length, rng,
            temperature=float(c.get("temperature", 1.0)), seed=cfg["seed"],
        )
    raise ConfigError(f"unknown corpus regime {regime!r}")


def _fit_teacher_model(cfg: dict, source) -> TabularLM:
    t = cfg.get("teacher", {})
    order = int(t.get("order", source.order))
    lam = float(t.get("smoothing", 0.1))
    rng = np.random.default_rng(cfg["seed"] + 1)
    fit_corpus = data_mod.sample_corpus(source, 2000, 64, rng, seed=cfg["seed"] + 1)
    return train_teacher_mle(fit_corpus, order, lam)


def _get_teacher(cfg: dict, source):
    t = cfg.get("teacher", {})
    mode = t.get("mode", "oracle_source")
    if mode == "oracle_source":
        return make_teacher("oracle_source", source=source)
    return make_teacher("mle_fit", model=_fit_teacher_model(cfg, source))


def _get_student(cfg: dict, source) -> TabularLM:
    if "init_checkpoint" in cfg:
        return checkpoint_load(cfg["init_checkpoint"])
    order = int(cfg.get("student_order", 1))
    return TabularLM(order=order, vocab=Vocab.default(source.vocab.size))


def _get_tasks(cfg: dict, source):
    t = cfg.get("tasks")
    if t is None:
        return None
    rng = np.random.default_rng(cfg["seed"] + 2)
    return make_completion_tasks(
        source,
        num_tasks=int(t.get("num_tasks", 200)),
        cont_len=int(t.get("cont_len", 2)),
        rng=rng,
        min_conf=float(t.get("min_conf", 0.9)),
    )


def _train_config(cfg: dict, overrides: dict | None = None) -> TrainConfig:
    t = dict(cfg.get("train", {}))
    if overrides:
        t.update(overrides)
    if "objective" not in t:
        raise ConfigError("train config needs an 'objective' tag")
    kind = ObjectiveKind(
        tag=t["objective"],
        beta=float(t.get("beta", 0.5)),
        sign_fidelity=bool(t.get("sign_fidelity", False)),
    )
    return TrainConfig(
        objective=kind,
        steps=int(t.get("steps", 1000)),
        seed=int(t.get("seed", cfg["seed"])),
        lr=float(t.get("lr", 0.1)),
        batch_size=int(t.get("batch_size", 32)),
        eval_every=int(t.get("eval_every", 100)),
        teacher_mode=cfg.get("teacher", {}).get("mode", "oracle_source"),
        smoothing=float(cfg.get("teacher", {}).get("smoothing", 0.0)),
        opd_reward_mode=t.get("opd_reward_mode", "per_token"),
        temperature=float(t.get("temperature", 1.0)),
        hpd_samples=int(t.get("hpd_samples", 1)),
        opd_baseline=bool(t.get("opd_baseline", False)),
        horizon=int(t.get("horizon", 16)),
        n_eval_seqs=int(t.get("n_eval_seqs", 20)),
        eval_len=int(t.get("eval_len", 16)),
        eval_from=t.get("eval_from", "teacher"),
    )


def cmd_gen_source(cfg: dict) -> int:
    out = _outdir(cfg)
    _echo_effective(cfg, out, "gen-source")
    source = _get_source(cfg)
    data_mod.source_save(source, os.path.join(out, "source.json"),
                         header_extra=_meta(cfg))
    print(f"wrote {os.path.join(out, 'source.json')}")
    return 0


def cmd_gen_corpus(cfg: dict) -> int:
    out = _outdir(cfg)
    _echo_effective(cfg, out, "gen-corpus")
    corpus = _get_corpus(cfg)
    data_mod.corpus_write(corpus, os.path.join(out, "corpus.txt"),
                          header_extra=_meta(cfg))
    print(f"wrote {os.path.join(out, 'corpus.txt')} "
          f"({len(corpus.sequences)} sequences, {corpus.num_tokens()} tokens)")
    return 0


def cmd_train_teacher(cfg: dict) -> int:
    out = _outdir(cfg)
    _echo_effective(cfg, out, "train-teacher")
    source = _get_source(cfg)
    corpus = _get_corpus(cfg, source)
    t = cfg.get("teacher", {})
    model = train_teacher_mle(corpus, int(t.get("order", source.order)),
                              float(t.get("smoothing", 0.0)))
    path = os.path.join(out, "teacher.json")
    checkpoint_save(model, path, header_extra=_meta(cfg))
    print(f"wrote {path} ({len(model.rows)} contexts)")
    return 0


def _run_single(cfg: dict, on_policy: bool, csv_name="metrics.csv",
                ckpt_name="student.json", train_overrides=None) -> int:
    out = _outdir(cfg)
    source = _get_source(cfg)
    teacher = _get_teacher(cfg, source)
    student = _get_student(cfg, source)
    tasks = _get_tasks(cfg, source)
    tc = _train_config(cfg, train_overrides)

    if "stages" in cfg:
        stages = [
            Stage(name=st.get("name", f"stage{i}"),
                  cfg=_train_config(cfg, {k: v for k, v in st.items() if k != "name"}))
            for i, st in enumerate(cfg["stages"])
        ]
        corpus = _get_corpus(cfg, source) if any(
            not s.cfg.objective.on_policy for s in stages) else None
        student, _rows = run_experiment(stages, teacher, student, corpus=corpus,
                                        eval_tasks=tasks, out_dir=out, meta=_meta(cfg))
        checkpoint_save(student, os.path.join(out, ckpt_name), header_extra=_meta(cfg))
        print(f"ran {len(stages)} stages -> {out}")
        return 0

    if on_policy or tc.objective.on_policy:
        if not tc.objective.on_policy:
            raise ConfigError(
                f"'opd' needs an on-policy objective, got {tc.objective.tag!r}")
        student, rows = distill_onpolicy_opd(tc, teacher, student, eval_tasks=tasks)
    else:
        corpus = _get_corpus(cfg, source)
        student, rows = distill_offpolicy(tc, teacher, corpus, student, eval_tasks=tasks)
    meta = _meta(cfg)
    metrics_write(rows, os.path.join(out, csv_name), meta=meta)
    checkpoint_save(student, os.path.join(out, ckpt_name), header_extra=meta)
    print(f"wrote {os.path.join(out, csv_name)}")
    return 0


def cmd_distill(cfg: dict) -> int:
    _echo_effective(cfg, _outdir(cfg), "distill")
    return _run_single(cfg, on_policy=False)


def cmd_opd(cfg: dict) -> int:
    _echo_effective(cfg, _outdir(cfg), "opd")
    return _run_single(cfg, on_policy=True)


def cmd_eval(cfg: dict) -> int:
    out = _outdir(cfg)
    _echo_effective(cfg, out, "eval")
    source = _get_source(cfg)
    teacher = _get_teacher(cfg, source)
    student = _get_student(cfg, source)
    tasks = _get_tasks(cfg, source)
    tc = _train_config(cfg) if "train" in cfg else None
    n_eval = tc.n_eval_seqs if tc else 20
    eval_len = tc.eval_len if tc else 16
    rng = np.random.default_rng(cfg["seed"])
    states = []
    ent = []
    for _ in range(n_eval):
        seq = teacher.sample_sequence(eval_len, rng)
        for t in range(len(seq)):
            states.append(seq[:t])
            ent.append(entropy(student.predict(student.context_for(seq[:t]))))
    kl_fwd, kl_rev = divergence_audit(student, teacher, states)
    acc = None
    if tasks:
        from .evaluation import completion_accuracy

        acc = completion_accuracy(student, tasks)
    path = os.path.join(out, "audit.csv")
    with open(path, "w", encoding="utf-8") as f:
        f.write("# " + json.dumps(_meta(cfg), sort_keys=True) + "\n")
        f.write("kl_fwd,kl_rev,mean_entropy,accuracy\n")
        f.write(",".join([
            repr(kl_fwd), repr(kl_rev), repr(float(np.mean(ent))),
            "" if acc is None else repr(acc),
        ]) + "\n")
    print(f"wrote {path}: kl_fwd={kl_fwd:.6f} kl_rev={kl_rev:.6f}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    g = cfg.get("gradcheck", {})
    v = int(g.get("vocab_size", 8))
    order = int(g.get("order", 1))
    n_tokens = int(g.get("n_tokens", 64))
    eps = float(g.get("eps", 1e-5))
    rng = np.random.default_rng(int(g.get("model_seed", cfg["seed"])))
    model = TabularLM(order=order, vocab=Vocab.default(v))
    items = []
    for _ in range(n_tokens):
        ctx = tuple(int(x) for x in rng.integers(v, size=order))
        model.set_row(ctx, rng.normal(size=v))
        items.append((ctx, int(rng.integers(v)), float(rng.uniform(-2.0, 2.0))))
    err = gradcheck(model, items, eps=eps)
    print(f"gradcheck max relative error: {err:.3e} ({n_tokens} tokens, eps={eps})")
    return 0 if err < 1e-5 else 1


def cmd_sweep(cfg: dict) -> int:
    out = _outdir(cfg)
    _echo_effective(cfg, out, "sweep")
    sw = cfg.get("sweep")
    if not sw or "objectives" not in sw or "seeds" not in sw:
        raise ConfigError("sweep needs 'sweep.objectives' and 'sweep.seeds'")
    objectives = list(sw["objectives"])
    seeds = [int(s) for s in sw["seeds"]]
    for tag in objectives:
        if tag not in ALL_TAGS:
            raise ConfigError(f"unknown objective tag {tag!r} in sweep")
    threads = max(1, int(os.environ.get("DISTILL_LAB_THREADS", "1")))

    def run_cell(tag: str, seed: int) -> str:
        cell = json.loads(json.dumps(cfg))
        cell["seed"] = seed
        cell.pop("sweep", None)
        cell.setdefault("train", {})["objective"] = tag
        cell["train"]["seed"] = seed
        source = _get_source(cell)
        teacher = _get_teacher(cell, source)
        student = _get_student(cell, source)
        tasks = _get_tasks(cell, source)
        tc = _train_config(cell)
        if tc.objective.on_policy:
            _, rows = distill_onpolicy_opd(tc, teacher, student, eval_tasks=tasks)
        else:
            corpus = _get_corpus(cell, source)
            _, rows = distill_offpolicy(tc, teacher, corpus, student, eval_tasks=tasks)
        path = os.path.join(out, f"metrics_{tag}_seed{seed}.csv")
        metrics_write(rows, path, meta=_meta(cell))
        return path

    cells = [(tag, seed) for tag in objectives for seed in seeds]
    if threads == 1:
        paths = [run_cell(tag, seed) for tag, seed in cells]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            paths = list(pool.map(lambda c: run_cell(*c), cells))
    print(f"wrote {len(paths)} metrics files under {out}")
    return 0


_COMMANDS = {
    "gen-source": cmd_gen_source,
    "gen-corpus": cmd_gen_corpus,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "opd": cmd_opd,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distill-lab",
        description="Desk-scale distillation laboratory with exactly known teachers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", default=[], dest="sets",
                       metavar="KEY=VALUE", help="dotted-key override")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.sets)
        return _COMMANDS[args.command](cfg)
    except (ConfigError, ParseError, PipelineError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
