import hashlib
import socket
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from splitft.checkpoint import load_checkpoint, save_checkpoint
from splitft.cli import main
from splitft.decompose import SplitPlan, build_decomposed, decompose_ffn
from splitft.nn import ModelConfig, build_model
from splitft.splitnet import read_metrics_csv


@pytest.mark.parametrize("sub", [[], ["train"], ["decompose"], ["estimate"], ["gendata"]])
def test_help_exits_zero(sub):
    proc = subprocess.run([sys.executable, "-m", "splitft", *sub, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "usage" in proc.stdout


def test_train_loopback_writes_csv(tmp_path):
    out = tmp_path / "m.csv"
    ck = tmp_path / "w.sftw"
    code = main(["train", "--role", "loopback", "--iters", "50", "--metrics_out", str(out),
                 "--checkpoint_out", str(ck), "--dataset_size", "512"])
    assert code == 0
    rows = read_metrics_csv(out)
    assert len(rows) == 50 and [r.iteration for r in rows] == list(range(1, 51))
    assert "ffn1.3.w" in load_checkpoint(ck)


def test_local_equals_loopback(tmp_path):
    common = ["train", "--iters", "10", "--dataset_size", "256"]
    assert main([*common, "--role", "local", "--metrics_out", str(tmp_path / "a.csv")]) == 0
    assert main([*common, "--role", "loopback", "--metrics_out", str(tmp_path / "b.csv")]) == 0
    a, b = read_metrics_csv(tmp_path / "a.csv"), read_metrics_csv(tmp_path / "b.csv")
    assert [m.loss for m in a] == [m.loss for m in b]


def test_config_file_and_override(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# comment\nrole = loopback\niters = 7\ndataset_size=64\n")
    out = tmp_path / "m.csv"
    assert main(["train", "--config", str(conf), "--iters", "4", "--metrics_out", str(out)]) == 0
    assert len(read_metrics_csv(out)) == 4


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--role", "bogus"],
        ["train", "--rank", "0"],
        ["train", "--rank", "many"],
        ["train", "--split_layer", "9"],
        ["train", "--role", "edge", "--residual_mode", "kept_local"],
        ["train", "--optimizer", "lbfgs"],
        ["decompose", "--rank", "33"],
        ["gendata", "--vocab_size", "9"],
    ],
)
def test_config_errors_exit_2(argv, tmp_path):
    assert main([*argv, "--metrics_out", str(tmp_path / "x.csv")] if argv[0] == "train" else argv) == 2


def test_unknown_config_key(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("colour=blue\n")
    assert main(["train", "--config", str(conf)]) == 2


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_unreachable_peer_exits_3(tmp_path):
    port = _free_port()
    t0 = time.monotonic()
    code = main(["train", "--role", "edge", "--peer", f"127.0.0.1:{port}", "--connect_timeout", "1",
                 "--metrics_out", str(tmp_path / "m.csv")])
    assert code == 3 and time.monotonic() - t0 < 5


def test_edge_and_cloud_over_localhost_match_loopback(tmp_path):
    port = _free_port()
    common = ["train", "--iters", "20", "--dataset_size", "512", "--residual_mode", "kept_with_transfer"]
    box = {}

    def cloud():
        box["code"] = main([*common, "--role", "cloud", "--listen", f"127.0.0.1:{port}",
                            "--metrics_out", str(tmp_path / "cloud.csv"), "--connect_timeout", "20"])

    t = threading.Thread(target=cloud)
    t.start()
    code = main([*common, "--role", "edge", "--peer", f"127.0.0.1:{port}",
                 "--metrics_out", str(tmp_path / "edge.csv"), "--connect_timeout", "20"])
    t.join(30)
    assert code == 0 and box["code"] == 0
    assert main([*common, "--role", "loopback", "--metrics_out", str(tmp_path / "loop.csv")]) == 0
    edge, cloud_m, loop = (read_metrics_csv(tmp_path / f) for f in ("edge.csv", "cloud.csv", "loop.csv"))
    assert [m.loss for m in edge] == [m.loss for m in loop] == [m.loss for m in cloud_m]
    assert [m.bytes_up for m in edge] == [m.bytes_up for m in loop]


def test_handshake_mismatch_exits_3(tmp_path):
    port = _free_port()
    box = {}

    def cloud():
        box["code"] = main(["train", "--role", "cloud", "--listen", f"127.0.0.1:{port}", "--rank", "4",
                            "--metrics_out", "", "--connect_timeout", "20"])

    t = threading.Thread(target=cloud)
    t.start()
    code = main(["train", "--role", "edge", "--peer", f"127.0.0.1:{port}", "--rank", "8",
                 "--metrics_out", "", "--connect_timeout", "20"])
    t.join(30)
    assert code == 3 and box["code"] == 3


def test_decompose_table_and_checkpoint(tmp_path, capsys):
    cfg = ModelConfig()
    src, dst = tmp_path / "in.sftw", tmp_path / "out.sftw"
    stack = build_model(cfg, 9)
    save_checkpoint(src, stack.state_dict())
    assert main(["decompose", "--checkpoint_in", str(src), "--split_layer", "2", "--rank", "32",
                 "--checkpoint_out", str(dst)]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln[:1].isdigit()]
    errors = [float(ln.split(",")[1].split()[0]) for ln in lines]
    assert len(errors) == 32 and errors[-1] < 1e-6
    assert all(b <= a for a, b in zip(errors, errors[1:]))
    plan = SplitPlan(2, 32)
    reloaded = build_decomposed(cfg, plan, seed=0)
    reloaded.load_state(load_checkpoint(dst))
    ids = np.random.default_rng(0).integers(0, cfg.vocab_size, size=(3, cfg.seq_len))
    assert np.array_equal(reloaded.forward(ids), decompose_ffn(stack, plan).forward(ids))


def test_estimate_bert_base_rows(capsys):
    assert main(["estimate"]) == 0
    rows = {ln.split()[0]: float(ln.split()[3]) for ln in capsys.readouterr().out.splitlines()
            if ln.split()[0] in ("naive", "sl", "sft")}
    assert rows == {"naive": 744.0, "sl": 2923.6, "sft": 647.6}


def test_estimate_zero_bandwidth(capsys):
    assert main(["estimate", "--bandwidth_bps", "0", "--sl_comm_ms", "", "--sft_comm_ms", ""]) == 2
    assert "bandwidth" in capsys.readouterr().err


def test_estimate_sweep(tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["estimate", "--sweep", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "rank,volume_bytes,comm_ms,total_ms" and len(lines) == 65
    r8 = lines[8].split(",")
    assert r8[0] == "8" and int(r8[1]) == 3_149_824
    assert float(r8[3]) == pytest.approx(623.6 + 3_149_824 * 8 / 1e9 * 1e3, abs=1e-3)


def test_gendata_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert main(["gendata", "--size", "2000", "--seed", "3", "--out", str(p)]) == 0
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()
    lines = a.read_text().splitlines()
    assert len(lines) == 2001
    labels = np.array([int(ln.split(",")[0]) for ln in lines[1:]])
    assert 0.45 <= labels.mean() <= 0.55


def test_train_from_csv_dataset(tmp_path):
    data = tmp_path / "d.csv"
    assert main(["gendata", "--size", "100", "--out", str(data)]) == 0
    out = tmp_path / "m.csv"
    assert main(["train", "--dataset", str(data), "--iters", "3", "--metrics_out", str(out)]) == 0
    assert len(read_metrics_csv(out)) == 3
