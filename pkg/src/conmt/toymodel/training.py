"""Plain-SGD training of :class:`ToySeq2Seq` and the experiments built on it."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..embedspace import EmbeddingTable, Vocab
from ..errors import InvalidArgumentError, TrainingDivergedError
from ..geometry import mean_pairwise_cosine
from ..metrics import BucketSpec, F1Report, corpus_bleu, token_accuracy, token_f1_by_bucket
from .model import Batch, ToySeq2Seq, greedy_batch, loss_and_grads, loss_only
from .tasks import EOS, TaskData

log = logging.getLogger(__name__)

LOSSES = ("cosine", "discrete")


@dataclass
class TrainConfig:
    lr: float = 0.5
    epochs: int = 30
    batch_size: int = 32
    loss: str = "cosine"
    targets_trainable: bool = False
    target_lr: float | None = None  # defaults to lr
    seed: int = 0
    clip: float | None = 1.0
    hidden: int = 128
    max_extra: int = 200
    eval_every: int = 1

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise InvalidArgumentError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidArgumentError("lr must be >= 0, batch_size >= 1, epochs >= 0")


@dataclass
class TrainResult:
    model: ToySeq2Seq
    metrics: list[dict] = field(default_factory=list)


def _clip(grads: dict, max_norm: float | None) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def train_step(model: ToySeq2Seq, pairs, config: TrainConfig) -> float:
    """One SGD update on ``pairs``; returns the mean loss before the update."""
    batch = Batch.from_pairs(pairs)
    value, grads = loss_and_grads(
        model.params, model.targets64, batch, config.loss, target_grad=config.targets_trainable
    )
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value} on a batch of {len(pairs)} pairs")
    if config.lr == 0:
        return value
    _clip(grads, config.clip)
    for name in model.params:
        model.params[name] -= config.lr * grads[name]
    if config.targets_trainable:
        tlr = config.lr if config.target_lr is None else config.target_lr
        E = model.targets64
        E -= tlr * grads["targets"]
        E /= np.linalg.norm(E, axis=1, keepdims=True)
    return value


def evaluate(model: ToySeq2Seq, data: TaskData, loss: str = "cosine", max_extra: int = 200):
    hyps = greedy_batch(model, data.srcs, max_extra=max_extra)
    refs = data.tgts
    return {
        "heldout_loss": loss_only(model.params, model.targets64, Batch.from_pairs(list(data.pairs)), loss),
        "token_acc": token_accuracy(hyps, refs),
        "bleu": corpus_bleu(hyps, refs),
    }, hyps


def train(
    model: ToySeq2Seq,
    data: TaskData,
    config: TrainConfig,
    heldout: TaskData | None = None,
    on_epoch=None,
) -> TrainResult:
    """Shuffled mini-batch SGD for ``config.epochs`` epochs.

    Per-epoch metrics: mean training loss, and (with ``heldout``) held-out
    loss, greedy token accuracy and BLEU. Raises :class:`TrainingDivergedError`
    when the epoch loss exceeds ten times the first epoch's for three epochs
    running.
    """
    rng = np.random.default_rng(config.seed)
    pairs = list(data.pairs)
    result = TrainResult(model)
    first_loss = None
    bad_epochs = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(pairs))
        losses, weights = [], []
        for start in range(0, len(order), config.batch_size):
            chunk = [pairs[i] for i in order[start : start + config.batch_size]]
            losses.append(train_step(model, chunk, config))
            weights.append(sum(len(t) + 1 for _, t in chunk))
        epoch_loss = float(np.average(losses, weights=weights))
        row = {"epoch": epoch, "loss": epoch_loss}
        if config.targets_trainable:
            row["mean_pairwise_cos"] = mean_pairwise_cosine(model.targets64)
        if heldout is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
            row.update(evaluate(model, heldout, config.loss, config.max_extra)[0])
        result.metrics.append(row)
        log.debug("epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(row)
        if first_loss is None:
            first_loss = epoch_loss
        bad_epochs = bad_epochs + 1 if epoch_loss > 10 * first_loss else 0
        if bad_epochs >= 3:
            raise TrainingDivergedError(
                f"loss diverged: {epoch_loss:.4g} vs first epoch {first_loss:.4g}; "
                f"metrics: {json.dumps(result.metrics)}"
            )
    if config.targets_trainable:
        model.sync_targets()
    return result


def write_metrics(path, metrics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in metrics:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def collapse_experiment(model: ToySeq2Seq, data: TaskData, config: TrainConfig) -> list[float]:
    """Mean pairwise target cosine before training and after every epoch."""
    if config.loss != "cosine":
        raise InvalidArgumentError("the collapse experiment uses the cosine loss")
    traj = [mean_pairwise_cosine(model.targets64)]

    def record(row):
        traj.append(mean_pairwise_cosine(model.targets64))

    train(model, data, config, on_epoch=record)
    return traj


@dataclass
class FrequencyRun:
    name: str
    report: F1Report
    bleu: float
    token_acc: float
    metrics: list[dict]


def run_table(
    table: EmbeddingTable,
    train_data: TaskData,
    test_data: TaskData,
    config: TrainConfig,
    spec: BucketSpec,
    name: str = "",
) -> FrequencyRun:
    """Train one model against ``table`` and score its greedy decodes by frequency bucket."""
    model = ToySeq2Seq.init(
        table, train_data.task.vocab_size, hidden=config.hidden, max_len=train_data.task.max_len + 1, seed=config.seed
    )
    res = train(model, train_data, config)
    hyps = greedy_batch(model, test_data.srcs, max_extra=config.max_extra)
    refs = test_data.tgts
    report = token_f1_by_bucket(hyps, refs, train_data.vocab, spec)
    return FrequencyRun(name, report, corpus_bleu(hyps, refs), token_accuracy(hyps, refs), res.metrics)


def frequency_experiment(
    train_data: TaskData,
    test_data: TaskData,
    tables: dict[str, EmbeddingTable],
    config: TrainConfig,
    spec: BucketSpec | None = None,
) -> dict[str, FrequencyRun]:
    """Same data, seed and config for every table; F1 by training-frequency bucket."""
    sizes = {(t.size, t.d) for t in tables.values()}
    if len(sizes) != 1:
        raise InvalidArgumentError(f"tables disagree in |V| or d: {sorted(sizes)}")
    (size, _), = sizes
    if size != train_data.task.vocab_size:
        raise InvalidArgumentError(f"tables have {size} rows but the task vocabulary has {train_data.task.vocab_size}")
    spec = spec or BucketSpec.from_mass(train_data.vocab, exclude=(EOS,))
    return {name: run_table(t, train_data, test_data, config, spec, name) for name, t in tables.items()}


def write_frequency_report(path, runs: dict[str, FrequencyRun], first_columns=("table",)) -> None:
    """One row per (run, bucket); run keys may carry several tab-separated leading fields."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(first_columns) + "\tbucket\ttp\tfp\tfn\tprecision\trecall\tf1\n")
        for name, run in runs.items():
            for label, s in run.report.items():
                fh.write(
                    f"{name}\t{label}\t{s.tp}\t{s.fp}\t{s.fn}\t{s.precision:.6f}\t{s.recall:.6f}\t{s.f1:.6f}\n"
                )


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
