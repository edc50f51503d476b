"""Command-line entry point.

Exit codes: 0 success, 2 invalid arguments or config, 3 a stage failed.
Every command writes its resolved config next to its outputs; passing that
file back with ``--config`` repeats the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

from .config import ExperimentConfig
from .decoder import LENGTH_NORMS, beam_decode, build_index, write_nbest
from .embedspace import Vocab, load_table, save_table
from .errors import ConmtError, InvalidArgumentError
from .experiments import (
    GEN_KINDS,
    make_table,
    run_beam_sweep,
    run_sweep,
    table_from_config,
    task_from_config,
    train_config,
    write_beam_sweep,
    write_sweep,
)
from .geometry import profile_table, write_profile
from .metrics import BucketSpec, corpus_bleu, token_f1_by_bucket
from .toymodel.model import ToySeq2Seq
from .toymodel.tasks import EOS, EOS_TOKEN, TASK_KINDS, token_names
from .toymodel.training import LOSSES, evaluate, train, write_frequency_report, write_metrics

log = logging.getLogger("conmt")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@contextmanager
def stage(name: str):
    try:
        yield
    except InvalidArgumentError:
        raise
    except (ConmtError, OSError, RuntimeError, ValueError) as exc:
        raise StageError(name, exc) from exc


# ------------------------------------------------------------------- helpers


def resolve(args, command: str) -> ExperimentConfig:
    given = {k: v for k, v in vars(args).items() if k in ExperimentConfig.keys()}
    cfg = ExperimentConfig(command=command)
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
        if cfg.command and cfg.command != command:
            raise InvalidArgumentError(f"config was written by '{cfg.command}', not '{command}'")
    return cfg.with_overrides({**given, "command": command})


def require(cfg: ExperimentConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(cfg, k) in ("", None)]
    if missing:
        raise InvalidArgumentError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def single_seed(cfg: ExperimentConfig) -> int:
    seeds = cfg.seeds()
    if len(seeds) != 1:
        raise InvalidArgumentError(f"this command takes one seed, got {seeds}")
    return seeds[0]


def read_sequences(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def write_sequences(path, seqs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in seqs:
            fh.write(" ".join(s) + "\n")


def to_ids(seqs, names, what: str) -> list[tuple[int, ...]]:
    index = {t: i for i, t in enumerate(names)}
    out = []
    for n, seq in enumerate(seqs, 1):
        try:
            out.append(tuple(index[t] for t in seq))
        except KeyError as exc:
            raise InvalidArgumentError(f"{what} line {n}: unknown token {exc.args[0]!r}") from None
    return out


def aligned_vocab(path, names) -> Vocab:
    """Load counts and order them like ``names`` (by token string when the sets agree)."""
    vocab = Vocab.load(path)
    if len(vocab) != len(names):
        raise InvalidArgumentError(f"frequency file has {len(vocab)} tokens, table has {len(names)}")
    if set(vocab.tokens) == set(names) and vocab.tokens != tuple(names):
        idx = vocab.index
        vocab = Vocab(tuple(names), vocab.freq[[idx[t] for t in names]])
    return vocab


def config_path(out: str) -> Path:
    p = Path(out)
    return p / "config.txt" if p.is_dir() else p.with_name(p.name + ".config.txt")


# ------------------------------------------------------------------ commands


def cmd_gen_emb(args) -> int:
    cfg = resolve(args, "gen-emb")
    require(cfg, "seed", "out")
    seed = single_seed(cfg)
    vocab = None
    size = cfg.vocab_size
    tokens = None
    if cfg.freq:
        vocab = Vocab.load(cfg.freq)
        size, tokens = len(vocab), vocab.tokens
    with stage("gen-emb"):
        pre = load_table(cfg.pre) if cfg.pre else None
        table = make_table(
            cfg.kind, size, cfg.dim, seed, vocab=vocab, alpha=cfg.alpha,
            clump_fraction=cfg.clump_fraction, clump_cos=cfg.clump_cos, pre=pre, tokens=tokens,
        )
        save_table(table, cfg.out, cfg.format or None)
        cfg.save(config_path(cfg.out))
    print(f"wrote {cfg.kind} table |V|={table.size} d={table.d} to {cfg.out}")
    return EXIT_OK


def cmd_profile(args) -> int:
    cfg = resolve(args, "profile")
    require(cfg, "out")
    if "table" not in vars(args) and not args.config:
        raise InvalidArgumentError("missing required option(s): --table")
    with stage("load"):
        table = load_table(cfg.table, cfg.format or None)
        vocab = aligned_vocab(cfg.freq, table.token_names()) if cfg.freq else Vocab.uniform_ranked(table.size)
    with stage("profile"):
        per_token, binned = profile_table(table, vocab, cfg.k, cfg.bin)
        paths = write_profile(cfg.out, per_token, binned)
        cfg.save(config_path(cfg.out))
    sims = per_token["nn_sim"]
    print(f"mean nn_sim {float(sims.mean()):.6f}; wrote {paths[0]} and {paths[1]}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve(args, "train")
    require(cfg, "seed", "out")
    seed = single_seed(cfg)
    out = Path(cfg.out)
    with stage("data"):
        train_data, heldout = task_from_config(cfg, seed)
        table = table_from_config(cfg, seed, vocab=train_data.vocab)
        if table.tokens is None:
            table = type(table)(table.rows, table.kind, table.seed, token_names(table.size))
    tc = train_config(cfg, seed)
    with stage("train"):
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
        model = ToySeq2Seq.init(table, cfg.vocab_size, hidden=cfg.hidden, max_len=cfg.max_len + 1, seed=seed)
        result = train(model, train_data, tc, heldout=heldout)
    with stage("write"):
        write_metrics(out / "metrics.jsonl", result.metrics)
        model.save(out / "model")
        names = model.targets.token_names()
        src_names = token_names(cfg.vocab_size)
        Vocab(names, train_data.vocab.freq).save(out / "train.freq.tsv")
        write_sequences(out / "heldout.src", [[src_names[t] for t in s] for s in heldout.srcs])
        write_sequences(out / "heldout.ref", [[names[t] for t in s] for s in heldout.tgts])
        final, hyps = evaluate(model, heldout, tc.loss, tc.max_extra)
        write_sequences(out / "heldout.hyp", [[names[t] for t in s] for s in hyps])
    print(json.dumps({"epochs": len(result.metrics), **final}, sort_keys=True))
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = resolve(args, "decode")
    require(cfg, "model", "src", "out")
    with stage("load"):
        model = ToySeq2Seq.load(cfg.model)
        if cfg.table not in GEN_KINDS:
            table = load_table(cfg.table, cfg.format or None)
            if (table.size, table.d) != (model.targets.size, model.d):
                raise InvalidArgumentError(
                    f"table is {table.size}x{table.d}, the model expects {model.targets.size}x{model.d}"
                )
            model = ToySeq2Seq(model.params, table)
        srcs = to_ids(read_sequences(cfg.src), token_names(model.src_vocab), "source")
    index = build_index(model.targets)
    names = model.targets.token_names()
    with stage("decode"):
        results = [
            beam_decode(
                model, index, s, cfg.beam, EOS, cfg.max_extra, cfg.length_norm, cfg.kappa, cfg.score_sign, cfg.nbest
            )
            for s in srcs
        ]
        write_sequences(cfg.out, [[names[t] for t in r.tokens] for r in results])
        if cfg.nbest > 1:
            write_nbest(cfg.out + ".nbest.tsv", results, names)
        cfg.save(config_path(cfg.out))
    print(f"decoded {len(results)} sentences with beam {cfg.beam} to {cfg.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve(args, "eval")
    require(cfg, "hyps", "refs")
    with stage("load"):
        hyps, refs = read_sequences(cfg.hyps), read_sequences(cfg.refs)
    if cfg.metric == "bleu":
        with stage("bleu"):
            score = corpus_bleu(hyps, refs)
        print(f"bleu\t{score:.6f}")
        if cfg.out:
            Path(cfg.out + ".bleu.tsv").write_text(f"metric\tvalue\nbleu\t{score:.6f}\n", encoding="utf-8")
            Path(cfg.out + ".bleu.json").write_text(json.dumps({"bleu": score}) + "\n", encoding="utf-8")
            cfg.save(config_path(cfg.out))
        return EXIT_OK
    require(cfg, "freq")
    with stage("f1"):
        vocab = Vocab.load(cfg.freq)
        if cfg.buckets.strip():
            spec = BucketSpec.parse(cfg.buckets)
        else:
            eos = [vocab.index[EOS_TOKEN]] if EOS_TOKEN in vocab.index else []
            spec = BucketSpec.from_mass(vocab, exclude=eos)
        report = token_f1_by_bucket(hyps, refs, vocab, spec)
    sys.stdout.write(report.to_tsv())
    if cfg.out:
        Path(cfg.out + ".f1.tsv").write_text(report.to_tsv(), encoding="utf-8")
        Path(cfg.out + ".f1.json").write_text(report.to_json() + "\n", encoding="utf-8")
        cfg.save(config_path(cfg.out))
    return EXIT_OK


def cmd_sweep_alpha(args) -> int:
    cfg = resolve(args, "sweep-alpha")
    require(cfg, "seed", "out")
    cfg.seeds()
    cfg.alpha_list()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    runs = {}

    def report(seed, name, run):
        runs[f"{seed}\t{name}"] = run

    with stage("sweep"):
        rows, refs = run_sweep(cfg, report)
    with stage("write"):
        write_sweep(out / "sweep_alpha.tsv", rows)
        write_sweep(out / "reference.tsv", refs, first_column="table")
        write_frequency_report(out / "f1_by_bucket.tsv", runs, first_columns=("seed", "table"))
    for r in rows:
        print(f"alpha {r.label}: bleu_like {r.bleu_like:.3f} rare_f1 {r.rare_f1:.4f} frequent_f1 {r.frequent_f1:.4f}")
    return EXIT_OK


def cmd_sweep_beam(args) -> int:
    cfg = resolve(args, "sweep-beam")
    require(cfg, "model", "src", "refs", "out")
    beams = cfg.beam_list()
    with stage("load"):
        model = ToySeq2Seq.load(cfg.model)
        names = model.targets.token_names()
        srcs = to_ids(read_sequences(cfg.src), token_names(model.src_vocab), "source")
        refs = to_ids(read_sequences(cfg.refs), names, "reference")
    with stage("sweep"):
        rows = run_beam_sweep(
            model, srcs, refs, beams, EOS, cfg.max_extra, cfg.length_norm, cfg.kappa, cfg.score_sign
        )
        write_beam_sweep(cfg.out, rows)
        cfg.save(config_path(cfg.out))
    for r in rows:
        print(f"beam {r.beam}: score {r.score:.3f} delta {r.delta_vs_greedy:+.3f}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def _task_flags(p):
    p.add_argument("--task", choices=TASK_KINDS)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--zipf", type=float)
    p.add_argument("--min-len", dest="min_len", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--n-pairs", dest="n_pairs", type=int)
    p.add_argument("--held-out", dest="held_out", type=float)


def _table_flags(p):
    p.add_argument("--dim", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--clump-fraction", dest="clump_fraction", type=float)
    p.add_argument("--clump-cos", dest="clump_cos", type=float)
    p.add_argument("--pre", help="pre-trained table to combine (default: clumped table for the seed)")


def _train_flags(p):
    p.add_argument("--loss", choices=LOSSES)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--clip", type=float, help="global gradient-norm clip; 0 disables")
    p.add_argument("--max-extra", dest="max_extra", type=int)


def _search_flags(p):
    p.add_argument("--length-norm", dest="length_norm", choices=LENGTH_NORMS)
    p.add_argument("--score-sign", dest="score_sign", choices=("plus", "minus"))
    p.add_argument("--kappa", type=float)
    p.add_argument("--max-extra", dest="max_extra", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conmt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="saved config to start from")
        p.set_defaults(func=fn)
        return p

    p = add("gen-emb", cmd_gen_emb, "generate a target embedding table")
    p.add_argument("--kind", choices=GEN_KINDS)
    p.add_argument("--seed")
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--freq", help="token<TAB>count file; sets |V|, token names and frequency ranks")
    _table_flags(p)
    p.add_argument("--format", choices=("binary", "text-vec"))
    p.add_argument("--out")

    p = add("profile", cmd_profile, "nearest-neighbor geometry by frequency rank")
    p.add_argument("--table")
    p.add_argument("--freq")
    p.add_argument("--k", type=int)
    p.add_argument("--bin", type=int)
    p.add_argument("--format", choices=("binary", "text-vec"))
    p.add_argument("--out", help="output prefix")

    p = add("train", cmd_train, "train the toy seq2seq against a target table")
    _task_flags(p)
    p.add_argument("--table", help=f"table file or one of {', '.join(GEN_KINDS)}")
    _table_flags(p)
    _train_flags(p)
    p.add_argument("--trainable-targets", dest="targets_trainable", action="store_const", const=True)
    p.add_argument("--target-lr", dest="target_lr", type=float)
    p.add_argument("--seed")
    p.add_argument("--out", help="output directory")

    p = add("decode", cmd_decode, "greedy or beam decoding with a trained model")
    p.add_argument("--model", help="checkpoint prefix (reads PREFIX.ctoy and PREFIX.cemb)")
    p.add_argument("--table", help="table file replacing the checkpoint's target table")
    p.add_argument("--format", choices=("binary", "text-vec"))
    p.add_argument("--src")
    p.add_argument("--beam", type=int)
    p.add_argument("--nbest", type=int)
    _search_flags(p)
    p.add_argument("--out")

    p = add("eval", cmd_eval, "corpus BLEU or frequency-bucketed token F1")
    p.add_argument("metric", choices=("bleu", "f1"))
    p.add_argument("--hyps")
    p.add_argument("--refs")
    p.add_argument("--freq")
    p.add_argument("--buckets", help='comma list of frequency boundaries, e.g. "10,1000"')
    p.add_argument("--out", help="output prefix")

    p = add("sweep-alpha", cmd_sweep_alpha, "train on combined tables over a list of alphas")
    _task_flags(p)
    _table_flags(p)
    _train_flags(p)
    p.add_argument("--alphas")
    p.add_argument("--buckets")
    p.add_argument("--seed", help="seed or comma list of seeds")
    p.add_argument("--out", help="output directory")

    p = add("sweep-beam", cmd_sweep_beam, "BLEU and likelihood over beam widths")
    p.add_argument("--model")
    p.add_argument("--src")
    p.add_argument("--refs")
    p.add_argument("--beams")
    _search_flags(p)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except InvalidArgumentError as exc:
        print(f"conmt {args.cmd}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"conmt {args.cmd}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except OSError as exc:
        # unreadable --config or similar, before any stage ran
        print(f"conmt {args.cmd}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
