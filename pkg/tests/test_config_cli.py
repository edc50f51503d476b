import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conmt.cli import main
from conmt.config import ExperimentConfig
from conmt.embedspace import load_table
from conmt.errors import InvalidArgumentError

SMALL = ["--task", "copy", "--vocab-size", "20", "--n-pairs", "60", "--dim", "8", "--hidden", "8", "--max-extra", "6"]


# ------------------------------------------------------------------ config


def test_config_text_roundtrip(tmp_path):
    cfg = ExperimentConfig(command="train", dim=16, lr=0.25, targets_trainable=True, seed="3")
    cfg.save(tmp_path / "c.txt")
    again = ExperimentConfig.load(tmp_path / "c.txt")
    assert again == cfg
    assert set(line.split(" = ")[0] for line in cfg.to_text().splitlines()) == set(ExperimentConfig.keys())


@settings(max_examples=40, deadline=None)
@given(
    dim=st.integers(1, 4096),
    lr=st.floats(0, 10, allow_nan=False),
    trainable=st.booleans(),
    seeds=st.lists(st.integers(0, 2**31), min_size=1, max_size=4),
)
def test_config_roundtrip_property(dim, lr, trainable, seeds):
    cfg = ExperimentConfig(dim=dim, lr=lr, targets_trainable=trainable, seed=",".join(map(str, seeds)))
    again = ExperimentConfig.from_text(cfg.to_text())
    assert again == cfg and again.seeds() == seeds


def test_config_comments_and_errors():
    cfg = ExperimentConfig.from_text("# run\ndim = 32  # small\n\nbeams = 1,3\n")
    assert cfg.dim == 32 and cfg.beam_list() == [1, 3]
    for bad in ("dim = x", "nope = 1", "dim = 1\ndim = 2", "just words", "targets_trainable = maybe"):
        with pytest.raises(InvalidArgumentError):
            ExperimentConfig.from_text(bad)
    with pytest.raises(InvalidArgumentError):
        ExperimentConfig(alphas="").alpha_list()
    with pytest.raises(InvalidArgumentError):
        ExperimentConfig(alphas="0.5,1.5").alpha_list()
    with pytest.raises(InvalidArgumentError):
        ExperimentConfig(beams="0,2").beam_list()


# --------------------------------------------------------------------- cli


def test_gen_emb_and_profile(tmp_path, capsys):
    out = tmp_path / "t.cemb"
    assert main(["gen-emb", "--kind", "hypercube", "--vocab-size", "64", "--dim", "16", "--seed", "2", "--out", str(out)]) == 0
    table = load_table(out)
    assert table.size == 64 and table.kind == "hypercube"
    assert ExperimentConfig.load(tmp_path / "t.cemb.config.txt").kind == "hypercube"
    assert main(["profile", "--table", str(out), "--k", "3", "--bin", "16", "--out", str(tmp_path / "p")]) == 0
    lines = (tmp_path / "p.tokens.tsv").read_text().splitlines()
    assert len(lines) == 65
    assert (tmp_path / "p.binned.tsv").read_text().count("\n") == 5


def test_missing_seed_exits_2(tmp_path, capsys):
    assert main(["gen-emb", "--kind", "uniform", "--out", str(tmp_path / "t.cemb")]) == 2
    assert "--seed" in capsys.readouterr().err


def test_bad_flag_value_exits_2(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["gen-emb", "--kind", "spiral", "--seed", "1", "--out", str(tmp_path / "x")])
    assert err.value.code == 2


def test_corrupt_table_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.cemb"
    bad.write_bytes(b"garbage, not a table")
    assert main(["profile", "--table", str(bad), "--out", str(tmp_path / "p")]) == 3
    assert "stage 'load'" in capsys.readouterr().err


def test_config_for_other_command_exits_2(tmp_path):
    ExperimentConfig(command="train", seed="1").save(tmp_path / "c.txt")
    assert main(["gen-emb", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "t.cemb")]) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    assert main(["train", *SMALL, "--epochs", "3", "--lr", "0.5", "--seed", "4", "--out", str(run)]) == 0
    return run


def test_train_outputs(trained):
    for name in ("config.txt", "metrics.jsonl", "model.ctoy", "model.cemb", "train.freq.tsv", "heldout.src", "heldout.ref", "heldout.hyp"):
        assert (trained / name).exists(), name
    rows = [json.loads(x) for x in (trained / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3]


def test_rerun_from_saved_config_is_identical(trained, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--config", str(trained / "config.txt"), "--out", str(again)]) == 0
    assert (again / "metrics.jsonl").read_bytes() == (trained / "metrics.jsonl").read_bytes()
    assert (again / "model.ctoy").read_bytes() == (trained / "model.ctoy").read_bytes()


def test_decode_and_eval(trained, tmp_path, capsys):
    hyp = tmp_path / "beam.hyp"
    args = ["decode", "--model", str(trained / "model"), "--src", str(trained / "heldout.src"), "--max-extra", "6"]
    assert main([*args, "--beam", "1", "--out", str(hyp)]) == 0
    # beam 1 reproduces the greedy hypotheses written by train
    assert hyp.read_text() == (trained / "heldout.hyp").read_text()
    assert main([*args, "--beam", "3", "--nbest", "2", "--out", str(tmp_path / "b3.hyp")]) == 0
    assert (tmp_path / "b3.hyp.nbest.tsv").exists()
    capsys.readouterr()
    assert main(["eval", "bleu", "--hyps", str(hyp), "--refs", str(trained / "heldout.ref"), "--out", str(tmp_path / "e")]) == 0
    score = float(capsys.readouterr().out.split()[1])
    assert json.loads((tmp_path / "e.bleu.json").read_text())["bleu"] == pytest.approx(score, abs=1e-6)
    ref = str(trained / "heldout.ref")
    assert main(["eval", "bleu", "--hyps", ref, "--refs", ref]) == 0
    assert float(capsys.readouterr().out.split()[1]) == pytest.approx(100.0)
    assert main(["eval", "f1", "--hyps", str(hyp), "--refs", str(trained / "heldout.ref"),
                 "--freq", str(trained / "train.freq.tsv"), "--out", str(tmp_path / "f")]) == 0
    assert (tmp_path / "f.f1.tsv").read_text().startswith("bucket")


def test_decode_table_shape_mismatch_exits_2(trained, tmp_path):
    other = tmp_path / "o.cemb"
    assert main(["gen-emb", "--kind", "uniform", "--vocab-size", "20", "--dim", "4", "--seed", "1", "--out", str(other)]) == 0
    assert main(["decode", "--model", str(trained / "model"), "--src", str(trained / "heldout.src"),
                 "--table", str(other), "--out", str(tmp_path / "h")]) == 2


def test_sweep_beam(trained, tmp_path):
    out = tmp_path / "beam.tsv"
    assert main(["sweep-beam", "--model", str(trained / "model"), "--src", str(trained / "heldout.src"),
                 "--refs", str(trained / "heldout.ref"), "--beams", "1,2,4", "--max-extra", "6", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "beam\tscore\tdelta_vs_greedy\tmean_loglik"
    first = lines[1].split("\t")
    assert first[0] == "1" and float(first[2]) == 0.0


def test_sweep_beam_empty_list_exits_2(trained, tmp_path):
    assert main(["sweep-beam", "--model", str(trained / "model"), "--src", str(trained / "heldout.src"),
                 "--refs", str(trained / "heldout.ref"), "--beams", "", "--out", str(tmp_path / "b")]) == 2


def test_sweep_alpha_endpoints_match_references(tmp_path):
    out = tmp_path / "sweep"
    args = ["sweep-alpha", "--task", "lexicon", "--vocab-size", "30", "--n-pairs", "80", "--dim", "8", "--hidden", "8",
            "--epochs", "2", "--max-extra", "6", "--seed", "0,1"]
    assert main([*args, "--alphas", "0,1", "--out", str(out)]) == 0
    rows = [line.split("\t") for line in (out / "sweep_alpha.tsv").read_text().splitlines()[1:]]
    refs = {r[0]: r[1:] for r in (line.split("\t") for line in (out / "reference.tsv").read_text().splitlines()[1:])}
    # alpha weights the clumped table: 0 is pure uniform, 1 is pure clumped
    assert rows[0][1:] == refs["uniform"] and rows[1][1:] == refs["clumped"]
    assert (out / "f1_by_bucket.tsv").read_text().startswith("seed\ttable\tbucket")
    assert main([*args, "--alphas", "", "--out", str(tmp_path / "empty")]) == 2
