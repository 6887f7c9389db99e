import csv
import math
import os
import subprocess
import sys

import pytest

from ffreedg.cli import main

SMALL_CFG = """\
data.scenario = clear2adverse
data.n_source = 16
data.n_eval = 4
data.n_clients = 5
data.imgs_per_client = 4
data.height = 6
data.width = 6
model.hidden = 8
model.embed = 6
pretrain.epochs = 2
pretrain.lr = 0.1
fed.rounds = 5
fed.clients_per_round = 2
fed.lr = 0.05
fed.eval_every = 2
cust.epochs = 2
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL_CFG)
    return str(path)


@pytest.fixture
def ckpt(cfg, tmp_path):
    out = tmp_path / "pre"
    assert main(["pretrain", "--config", cfg, "--out", str(out)]) == 0
    return out / "checkpoint.frzn"


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_pretrain_outputs_and_repeatability(cfg, ckpt, tmp_path):
    again = tmp_path / "pre2"
    assert main(["pretrain", "--config", cfg, "--out", str(again), "--seed", "0"]) == 0
    assert (again / "checkpoint.frzn").read_bytes() == ckpt.read_bytes()
    rows = _rows(ckpt.parent / "pretrain_loss.csv")
    assert rows[0] == ["epoch", "loss"] and len(rows) == 3


def test_evaluate_reproduces_logged_miou(cfg, ckpt, capsys):
    logged = _rows(ckpt.parent / "pretrain_eval.csv")[1][1]
    capsys.readouterr()
    assert main(["evaluate", "--config", cfg, "--ckpt", str(ckpt), "--split", "eval"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1] == f"miou\t{logged}"
    assert len(out) == 6


def test_federate_csv_contract(cfg, ckpt, tmp_path):
    out = tmp_path / "fed"
    assert main(["federate", "--config", cfg, "--init", str(ckpt), "--agg", "fedavg",
                 "--mode", "semisup", "--out", str(out)]) == 0
    rows = _rows(out / "metrics.csv")
    assert rows[0] == ["round", "mode", "agg", "lr", "l_sup", "l_cons", "l_teacher", "l_mclip",
                       "masked_frac", "miou_eval", "iou_0", "iou_1", "iou_2", "iou_3", "iou_4",
                       "clients"]
    assert len(rows) == 1 + math.ceil(5 / 2)
    assert [r[0] for r in rows[1:]] == ["1", "3", "4"]
    assert all(r[1] == "semisup" and r[2] == "fedavg" for r in rows[1:])
    for r in rows[1:]:
        for field in r[3:-1]:
            assert format(float(field), ".17g") == field
        assert len(r[-1].split(";")) == 2
    assert (out / "final.frzn").read_bytes()[:4] == b"FRZN"


def test_cust_and_data_dump(cfg, ckpt, tmp_path, capsys):
    dump = tmp_path / "data.frzn"
    assert main(["make-data", "--config", cfg, "--out", str(dump)]) == 0
    assert main(["cust", "--config", cfg, "--init", str(ckpt), "--data", str(dump),
                 "--out", str(tmp_path / "c")]) == 0
    assert len(_rows(tmp_path / "c" / "metrics.csv")) == 1 + math.ceil(2 / 2)
    capsys.readouterr()
    assert main(["evaluate", "--data", str(dump), "--ckpt", str(ckpt), "--split", "clients"]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("miou\t")


def test_missing_key_names_it(tmp_path, capsys):
    path = tmp_path / "partial.cfg"
    path.write_text("data.scenario = weather\n")
    assert main(["pretrain", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "pretrain.epochs" in capsys.readouterr().err


def test_exit_codes(cfg, ckpt, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("fed.rounds = -3\n")
    assert main(["federate", "--config", str(bad), "--init", str(ckpt), "--out", str(tmp_path)]) == 2
    assert main(["federate", "--config", cfg, "--init", str(tmp_path / "missing.frzn"),
                 "--out", str(tmp_path / "x")]) == 4
    huge = tmp_path / "huge.cfg"
    huge.write_text(SMALL_CFG.replace("fed.lr = 0.05", "fed.lr = 1e306"))
    with pytest.warns(RuntimeWarning):
        code = main(["federate", "--config", str(huge), "--init", str(ckpt), "--out", str(tmp_path / "d")])
    assert code == 3


def test_gradcheck_subcommand(capsys):
    assert main(["gradcheck", "--trials", "2"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 8


def test_partition_city(capsys):
    assert main(["partition", "--scenario", "city", "--seed", "1"]) == 0
    rows = [r.split("\t") for r in capsys.readouterr().out.strip().splitlines()]
    assert len(rows) == 144
    assert all(10 <= int(r[1]) <= 45 and "," not in r[2] for r in rows)


def test_federate_byte_identical_across_thread_counts(cfg, ckpt, tmp_path):
    outs = []
    for threads in ("1", "3"):
        out = tmp_path / f"t{threads}"
        env = dict(os.environ, FRIEREN_THREADS=threads)
        subprocess.run([sys.executable, "-m", "ffreedg", "federate", "--config", cfg,
                        "--init", str(ckpt), "--out", str(out)], check=True, env=env,
                       capture_output=True)
        outs.append(out)
    for name in ("metrics.csv", "final.frzn"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
