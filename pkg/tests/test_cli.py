import re

import numpy as np
import pytest

from avretrieval.cli import main
from avretrieval.data_io import read_checkpoint
from avretrieval.model import AVModel
from avretrieval.retrieval import parse_report

RUN = """\
dim = 16
n_layers = 2
n_blocks = 1
n_queries = 2
n_heads = 2
batch_size = 16
learning_rate = 1e-3
epochs = {epochs}
"""

SPEC = """\
pair_count = {pairs}
dim = 16
n_frames = 3
n_audio_tokens = 4
latent_dim = 8
"""

LOG_LINE = re.compile(r"^epoch=\d+ loss=[-+0-9.e]+ r1=[0-9.]+$")


@pytest.fixture
def files(tmp_path):
    def make(epochs=2, pairs=16):
        (tmp_path / "run.txt").write_text(RUN.format(epochs=epochs))
        (tmp_path / "spec.txt").write_text(SPEC.format(pairs=pairs))
        assert main(["gen-data", "--spec", str(tmp_path / "spec.txt"), "--out", str(tmp_path / "d.avge")]) == 0
        return tmp_path
    return make


def train(d, capsys, *extra):
    rc = main(["train", "--config", str(d / "run.txt"), "--data", str(d / "d.avge"), "--out", str(d / "m.ckpt"),
               *extra])
    return rc, capsys.readouterr()


def test_train_logs_and_checkpoint(files, capsys):
    d = files()
    rc, out = train(d, capsys)
    assert rc == 0
    lines = out.out.strip().splitlines()
    assert len(lines) == 2 and all(LOG_LINE.match(l) for l in lines)
    dims, table = read_checkpoint(d / "m.ckpt")
    assert dims.dim == 16 and "log_tau" in table


def test_train_deterministic(files, capsys):
    d = files()
    _, first = train(d, capsys, "--seed", "4")
    a = (d / "m.ckpt").read_bytes()
    _, second = train(d, capsys, "--seed", "4")
    assert first.out == second.out and a == (d / "m.ckpt").read_bytes()


def test_zero_epochs_writes_initialisation(files, capsys):
    d = files(epochs=0)
    assert train(d, capsys, "--seed", "7")[0] == 0
    dims, table = read_checkpoint(d / "m.ckpt")
    for k, p in AVModel(dims, seed=7).named_parameters():
        assert np.array_equal(table[k], p.data)


def test_eval_report(files, capsys):
    d = files()
    train(d, capsys)
    assert main(["eval", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "d.avge")]) == 0
    plain = parse_report(capsys.readouterr().out)
    assert {"t2v_r1", "v2t_r10", "rsum"} <= plain.keys()
    assert main(["eval", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "d.avge"),
                 "--alignment-mode", "global_only", "--dsl"]) == 0
    assert parse_report(capsys.readouterr().out).keys() == plain.keys()
    assert main(["eval", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "d.avge"), "--direction", "v2t"]) == 0
    only = parse_report(capsys.readouterr().out)
    assert "t2v_r1" not in only and only["v2t_r1"] == plain["v2t_r1"]


def test_exit_codes(files, capsys, tmp_path):
    d = files()
    (tmp_path / "bad.txt").write_text("dim = sixteen\n")
    assert main(["train", "--config", str(tmp_path / "bad.txt"), "--data", str(d / "d.avge"),
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--config", str(d / "run.txt"), "--data", str(d / "spec.txt"),
                 "--out", str(tmp_path / "x")]) == 3
    assert main(["eval", "--ckpt", str(d / "spec.txt"), "--data", str(d / "d.avge")]) == 3
    (tmp_path / "wide.txt").write_text(RUN.format(epochs=0).replace("dim = 16", "dim = 32"))
    assert main(["train", "--config", str(tmp_path / "wide.txt"), "--data", str(d / "d.avge"),
                 "--out", str(tmp_path / "w.ckpt")]) == 3
    assert "width" in capsys.readouterr().err


def test_eval_dim_mismatch(files, capsys, tmp_path):
    d = files()
    (tmp_path / "wide.txt").write_text(SPEC.format(pairs=4).replace("dim = 16", "dim = 32"))
    main(["gen-data", "--spec", str(tmp_path / "wide.txt"), "--out", str(tmp_path / "w.avge")])
    train(d, capsys)
    assert main(["eval", "--ckpt", str(d / "m.ckpt"), "--data", str(tmp_path / "w.avge")]) == 3


def test_nan_loss_exit(files, capsys):
    d = files()
    text = RUN.format(epochs=5).replace("learning_rate = 1e-3", "learning_rate = 1e30") + "optimizer = sgd\n"
    (d / "run.txt").write_text(text)
    with np.errstate(all="ignore"):
        rc, out = train(d, capsys)
    assert rc == 4 and "non-finite" in out.err


def test_gen_data_seed_override(files, tmp_path):
    d = files()
    main(["gen-data", "--spec", str(d / "spec.txt"), "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["gen-data", "--spec", str(d / "spec.txt"), "--out", str(tmp_path / "b"), "--seed", "1"])
    main(["gen-data", "--spec", str(d / "spec.txt"), "--out", str(tmp_path / "c"), "--seed", "2"])
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes() != (tmp_path / "c").read_bytes()


def test_bench_command(tmp_path, capsys):
    (tmp_path / "run.txt").write_text(RUN.format(epochs=0))
    rc = main(["bench", "--config", str(tmp_path / "run.txt"), "--sizes", "1,4", "--reps", "5",
               "--frames", "3", "--out", str(tmp_path / "b.txt")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "precompute_sim_slope=" in out and (tmp_path / "b.txt").read_text() == out
    assert main(["bench", "--sizes", "4,x"]) == 2
    assert main(["bench", "--sizes", "4", "--reps", "3"]) == 2
