"""Run-level orchestration shared by the command line: table construction from
a config, the alpha sweep and the beam-width sweep."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .decoder import beam_decode, build_index, greedy_decode, sequence_log_likelihood
from .embedspace import EmbeddingTable, Vocab, combine, gen_clumped, gen_hypercube, gen_uniform, load_table
from .errors import InvalidArgumentError
from .metrics import BucketSpec, corpus_bleu
from .toymodel.tasks import EOS, TaskData, ToyTask, gen_task, token_names
from .toymodel.training import TrainConfig, run_table

log = logging.getLogger(__name__)

GEN_KINDS = ("uniform", "hypercube", "combined", "clumped")


def make_table(
    kind: str,
    vocab_size: int,
    d: int,
    seed: int,
    vocab: Vocab | None = None,
    alpha: float = 0.9,
    clump_fraction: float = 0.9,
    clump_cos: float = 0.999,
    pre: EmbeddingTable | None = None,
    tokens=None,
) -> EmbeddingTable:
    """Generate a table of one of the synthetic kinds.

    ``combined`` mixes ``pre`` (default: the clumped table for the same seed)
    with the uniform table for the same seed.
    """
    if kind == "uniform":
        return gen_uniform(vocab_size, d, seed, tokens=tokens)
    if kind == "hypercube":
        return gen_hypercube(vocab_size, d, seed, tokens=tokens)[0]
    if kind == "clumped":
        return gen_clumped(vocab_size, d, seed, clump_fraction, clump_cos, vocab=vocab, tokens=tokens)
    if kind == "combined":
        if pre is None:
            pre = gen_clumped(vocab_size, d, seed, clump_fraction, clump_cos, vocab=vocab, tokens=tokens)
        return combine(pre, gen_uniform(vocab_size, d, seed, tokens=tokens), alpha)
    raise InvalidArgumentError(f"unknown table kind {kind!r}; expected one of {GEN_KINDS}")


def table_from_config(cfg: ExperimentConfig, seed: int, vocab: Vocab | None = None, spec: str | None = None):
    """``spec`` is a kind name or a table file; a file must match the task vocabulary size."""
    spec = cfg.table if spec is None else spec
    if spec in GEN_KINDS:
        pre = load_table(cfg.pre) if cfg.pre else None
        return make_table(
            spec, cfg.vocab_size, cfg.dim, seed, vocab=vocab, alpha=cfg.alpha,
            clump_fraction=cfg.clump_fraction, clump_cos=cfg.clump_cos, pre=pre,
            tokens=token_names(cfg.vocab_size),
        )
    if not Path(spec).exists():
        raise InvalidArgumentError(f"table {spec!r} is neither a kind {GEN_KINDS} nor an existing file")
    table = load_table(spec)
    if table.size != cfg.vocab_size:
        raise InvalidArgumentError(f"table {spec} has {table.size} rows, task vocabulary has {cfg.vocab_size}")
    return table


def task_from_config(cfg: ExperimentConfig, seed: int) -> tuple[TaskData, TaskData]:
    task = ToyTask(cfg.task, cfg.vocab_size, cfg.zipf, cfg.min_len, cfg.max_len, cfg.n_pairs, seed)
    return gen_task(task).split(cfg.held_out)


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        lr=cfg.lr,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        loss=cfg.loss,
        targets_trainable=cfg.targets_trainable,
        target_lr=cfg.target_lr or None,
        seed=seed,
        clip=cfg.clip if cfg.clip > 0 else None,
        hidden=cfg.hidden,
        max_extra=cfg.max_extra,
    )


def bucket_spec(cfg: ExperimentConfig, vocab: Vocab) -> BucketSpec:
    if cfg.buckets.strip():
        return BucketSpec.parse(cfg.buckets)
    return BucketSpec.from_mass(vocab, exclude=(EOS,))


# ------------------------------------------------------------------ alpha sweep


@dataclass(frozen=True)
class SweepRow:
    label: str
    bleu_like: float
    rare_f1: float
    frequent_f1: float


def run_sweep(cfg: ExperimentConfig, report=None) -> tuple[list[SweepRow], list[SweepRow]]:
    """Train on combined(clumped, uniform, alpha) for every alpha and seed.

    Returns the per-alpha seed means and, for reference, the pure uniform and
    pure clumped runs under the same seeds and config. ``report(seed, name,
    run)`` is called after every trained model.
    """
    alphas = cfg.alpha_list()
    seeds = cfg.seeds()
    acc: dict[str, list[tuple[float, float, float]]] = {}
    for seed in seeds:
        train_data, test_data = task_from_config(cfg, seed)
        spec = bucket_spec(cfg, train_data.vocab)
        rare, frequent = spec.labels[0], spec.labels[-1]
        tokens = token_names(cfg.vocab_size)
        uni = gen_uniform(cfg.vocab_size, cfg.dim, seed, tokens=tokens)
        clu = (
            load_table(cfg.pre)
            if cfg.pre
            else gen_clumped(
                cfg.vocab_size, cfg.dim, seed, cfg.clump_fraction, cfg.clump_cos, vocab=train_data.vocab, tokens=tokens
            )
        )
        tables = {"uniform": uni, "clumped": clu}
        tables.update({f"alpha={a:g}": combine(clu, uni, a) for a in alphas})
        tc = train_config(cfg, seed)
        for name, table in tables.items():
            run = run_table(table, train_data, test_data, tc, spec, name)
            log.info("seed %d %s: bleu %.2f", seed, name, run.bleu)
            if report is not None:
                report(seed, name, run)
            acc.setdefault(name, []).append((run.bleu, run.report[rare].f1, run.report[frequent].f1))

    def mean(name):
        b, r, f = np.mean(np.array(acc[name]), axis=0)
        return float(b), float(r), float(f)

    rows = [SweepRow(f"{a:g}", *mean(f"alpha={a:g}")) for a in alphas]
    refs = [SweepRow(name, *mean(name)) for name in ("uniform", "clumped")]
    return rows, refs


def write_sweep(path, rows: list[SweepRow], first_column: str = "alpha") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{first_column}\tbleu_like\trare_f1\tfrequent_f1\n")
        for r in rows:
            fh.write(f"{r.label}\t{r.bleu_like:.6f}\t{r.rare_f1:.6f}\t{r.frequent_f1:.6f}\n")


# ------------------------------------------------------------------- beam sweep


@dataclass(frozen=True)
class BeamRow:
    beam: int
    score: float
    delta_vs_greedy: float
    mean_loglik: float


def run_beam_sweep(
    model,
    srcs,
    refs,
    beams,
    eos: int = EOS,
    max_extra: int = 200,
    length_norm: str = "none",
    kappa: float = 1.0,
    score_sign="plus",
) -> list[BeamRow]:
    """BLEU of beam decodes per width, against greedy decoding of the same model."""
    if not beams:
        raise InvalidArgumentError("empty beam list")
    index = build_index(model.targets)
    greedy = [greedy_decode(model, index, s, eos, max_extra) for s in srcs]
    base = corpus_bleu(greedy, refs)
    rows = []
    for b in beams:
        results = [
            beam_decode(model, index, s, b, eos, max_extra, length_norm, kappa, score_sign) for s in srcs
        ]
        hyps = [r.tokens for r in results]
        score = corpus_bleu(hyps, refs)
        loglik = [
            sequence_log_likelihood(model, index, s, r.tokens, eos, True, kappa, score_sign)
            for s, r in zip(srcs, results)
        ]
        rows.append(BeamRow(b, score, score - base, float(np.mean(loglik)) if loglik else 0.0))
    return rows


def write_beam_sweep(path, rows: list[BeamRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("beam\tscore\tdelta_vs_greedy\tmean_loglik\n")
        for r in rows:
            fh.write(f"{r.beam}\t{r.score:.6f}\t{r.delta_vs_greedy:.6f}\t{r.mean_loglik:.10g}\n")
