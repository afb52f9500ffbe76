"""Command-line tests. Encrypted runs use the TOY preset at width 128 and an offline directory."""

import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cryptotl import nn
from cryptotl.cli import main
from cryptotl.data import make_domain_pair, read_csv, write_csv
from cryptotl.he_layers import plaintext_frozen_forward
from cryptotl.protocol import codec, count_frames
from cryptotl.protocol.frames import Tag
from cryptotl.storage import load_frozen, load_model

WIDTH = "128"


def run(capsys, *argv):
    """Run the CLI in-process; returns (exit code, parsed JSON lines on stdout)."""
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, [json.loads(line) for line in out.splitlines() if line.strip()]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    pair = make_domain_pair(2, n_source=400, n_target=200, n_test=40, dim=128, separation=0.4)
    write_csv(d / "src.csv", pair.source_x, pair.source_y)
    write_csv(d / "tgt.csv", pair.target_x[:10], pair.target_y[:10])
    write_csv(d / "test.csv", pair.test_x, pair.test_y)
    return d


@pytest.fixture(scope="module")
def trained(work):
    assert main(["train-source", "--data", str(work / "src.csv"), "--out", str(work / "server.ctlw"),
                 "--width", WIDTH]) == 0
    assert main(["export-frozen", "--weights", str(work / "server.ctlw"),
                 "--out", str(work / "frozen.ctlw")]) == 0
    assert main(["keygen", "--preset", "toy", "--out-dir", str(work / "keys"), "--width", WIDTH,
                 "--seed", "4"]) == 0
    return work


def test_keygen_is_deterministic_and_labelled(tmp_path, capsys):
    code, (a,) = run(capsys, "keygen", "--preset", "toy", "--out-dir", tmp_path / "a", "--width", 64)
    assert code == 0 and a["label"] == "TOY-INSECURE" and a["insecure"] is True
    run(capsys, "keygen", "--preset", "toy", "--out-dir", tmp_path / "b", "--width", 64)
    for name in ("secret.key", "public.key", "relin.key", "galois.key", "keys.meta"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for name in ("public.key", "relin.key", "galois.key"):
        assert codec.read_label((tmp_path / "a" / name).read_bytes()) == "TOY-INSECURE"
    assert oct(os.stat(tmp_path / "a" / "secret.key").st_mode & 0o777) == "0o600"
    # -4..-1, 1..7 (conv, baby steps, pool), 8k for k < 8 (giant steps), -64 (replicate)
    assert a["galois_steps"] == 4 + 7 + 7 + 1
    code, _ = run(capsys, "keygen", "--preset", "toy", "--out-dir", tmp_path / "a", "--width", 64)
    assert code == 2
    code, _ = run(capsys, "keygen", "--preset", "toy", "--out-dir", tmp_path / "a", "--width", 64,
                  "--seed", 1, "--force")
    assert code == 0
    assert (tmp_path / "a" / "public.key").read_bytes() != (tmp_path / "b" / "public.key").read_bytes()


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run(capsys, "keygen", "--preset", "p9", "--out-dir", tmp_path)[0] == 2
    with pytest.raises(SystemExit) as exc:
        main(["keygen"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--width", "-3"])
    assert exc.value.code == 2


def test_capacity_error_exits_5(tmp_path, capsys):
    assert run(capsys, "keygen", "--preset", "toy", "--out-dir", tmp_path, "--width", 4096)[0] == 5


def test_bad_csv_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("0,1,2\n1,x,3\n")
    code = main(["train-source", "--data", str(bad), "--out", str(tmp_path / "m"), "--width", "2"])
    assert code == 3 and "bad.csv:2" in capsys.readouterr().err
    assert run(capsys, "train-source", "--data", tmp_path / "missing.csv", "--out", tmp_path / "m")[0] == 3


def test_unreachable_server_exits_4(trained, tmp_path, capsys):
    import socket
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    code, _ = run(capsys, "finetune", "--server", f"127.0.0.1:{port}", "--timeout", 2,
                  "--data", trained / "tgt.csv", "--keys", trained / "keys", "--out", tmp_path / "c.ctlw")
    assert code == 4


def test_serve_refuses_insecure_preset(trained, capsys):
    code, _ = run(capsys, "serve", "--weights", trained / "frozen.ctlw", "--preset", "toy",
                  "--offline-dir", trained / "never")
    assert code == 2


def test_train_source_on_fixture(tmp_path, capsys):
    code, (res,) = run(capsys, "train-source", "--data", "fixture:source", "--out", tmp_path / "s.ctlw")
    assert code == 0 and res["val_accuracy"] >= 0.9
    kind, spec, _ = load_model(tmp_path / "s.ctlw")
    assert kind == "server" and spec.input_width == 768


def test_train_source_dp_flags(trained, tmp_path, capsys):
    common = ["train-source", "--data", trained / "src.csv", "--width", WIDTH, "--epochs", 1]
    run(capsys, *common, "--out", tmp_path / "plain.ctlw")
    run(capsys, *common, "--out", tmp_path / "zero.ctlw", "--dp-noise", 0)
    assert (tmp_path / "plain.ctlw").read_bytes() == (tmp_path / "zero.ctlw").read_bytes()
    _, (lo,) = run(capsys, *common, "--out", tmp_path / "a.ctlw", "--dp-noise", 0.25)
    _, (hi,) = run(capsys, *common, "--out", tmp_path / "b.ctlw", "--dp-noise", 1.0)
    assert lo["epsilon"] > hi["epsilon"] > 0
    assert lo["delta"] == pytest.approx(1 / 400)


def test_export_rejects_client_model(trained, tmp_path, capsys):
    kind, spec, state = load_model(trained / "server.ctlw")
    from cryptotl.storage import save_model
    save_model(tmp_path / "client.ctlw", nn.init_state(nn.client_spec(126)), "client")
    assert run(capsys, "export-frozen", "--weights", tmp_path / "client.ctlw", "--out", tmp_path / "f")[0] == 3


def test_bench_reports_op_counts(capsys):
    code, (rep,) = run(capsys, "bench", "--preset", "toy", "--width", 64, "--repeat", 1)
    assert code == 0 and rep["levels_consumed"] == 6 and rep["max_abs_error"] < 1e-3
    ops = rep["ops"]
    assert (ops["conv"]["mul_plain"], ops["conv"]["rotate"]) == (9, 8)
    assert (ops["dense1"]["mul_plain"], ops["dense1"]["rotate"]) == (64, 14)
    assert (ops["pool"]["rotate"], ops["pool"]["mul_plain"]) == (2, 1)
    assert (ops["relu"]["mul"], ops["relu"]["relinearize"]) == (2, 2)
    assert rep["threads"] == 1 and (rep["t1"], rep["t2"]) == (8, 8)


def test_experiment_rows(tmp_path, capsys):
    out, per = tmp_path / "curve.csv", tmp_path / "per.csv"
    code, (res,) = run(capsys, "experiment", "--fractions", "5,50", "--seeds", 2, "--out", out,
                       "--per-seed-out", per, "--n-source", 200, "--n-target", 200, "--n-test", 100,
                       "--epochs", 1)
    assert code == 0 and res["rows"] == 4
    rows = list(csv.reader(out.open()))
    assert rows[0][:4] == ["fraction", "method", "seed", "accuracy"] and len(rows) == 1 + 2 * 2
    prow = list(csv.reader(per.open()))
    assert prow[0] == ["fraction", "method", "seed", "accuracy"] and len(prow) == 1 + 2 * 2 * 2
    assert run(capsys, "experiment", "--fractions", "0,5", "--out", out)[0] == 2
    assert run(capsys, "experiment", "--fractions", "150", "--out", out)[0] == 2


# --------------------------------------------------------------------------- end to end

@pytest.fixture(scope="module")
def server(trained):
    """A real ``cryptotl serve`` process on an offline directory, for two sessions."""
    off = trained / "off"
    proc = subprocess.Popen(
        [sys.executable, "-m", "cryptotl", "serve", "--weights", str(trained / "frozen.ctlw"),
         "--preset", "toy", "--allow-insecure", "--offline-dir", str(off), "--max-sessions", "2"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    ready = json.loads(proc.stdout.readline())
    assert ready["event"] == "listening" and ready["label"] == "TOY-INSECURE"
    yield off
    if proc.poll() is None:
        proc.terminate()
    out, err = proc.communicate(timeout=60)
    proc.stderr_text = err


def _sessions(off):
    return sorted(off.glob("session-*"))


def test_end_to_end(trained, server, capsys):
    w = trained
    code, (ft,) = run(capsys, "finetune", "--offline-dir", server, "--timeout", 120, "--data", w / "tgt.csv",
                      "--keys", w / "keys", "--out", w / "client.ctlw", "--epochs", 5)
    assert code == 0 and ft["queries"] == 5 and ft["p_impl"] == 2
    (first,) = _sessions(server)
    assert count_frames(first, Tag.QUERY) == 5

    code, (again,) = run(capsys, "finetune", "--offline-dir", server, "--data", w / "tgt.csv",
                         "--keys", w / "keys", "--out", w / "client2.ctlw", "--epochs", 5,
                         "--cache", w / "client.ctlw.features.npz")
    assert code == 0 and again["queries"] == 0 and again["cached_rows"] == 10
    assert len(_sessions(server)) == 1
    assert (w / "client.ctlw").read_bytes() == (w / "client2.ctlw").read_bytes()

    code, lines = run(capsys, "predict", "--offline-dir", server, "--timeout", 120, "--input", w / "test.csv",
                      "--keys", w / "keys", "--client-weights", w / "client.ctlw")
    *items, summary = lines
    assert code == 0 and len(items) == 40 and summary["queries"] == 20
    assert count_frames(_sessions(server)[1], Tag.QUERY) == 20
    assert summary["t_C_mean"] < summary["t_S_mean"]

    # the same pipeline in plaintext
    frozen = load_frozen(w / "frozen.ctlw")
    tx, ty = read_csv(w / "tgt.csv", 128)
    ex, ey = read_csv(w / "test.csv", 128)
    ref = nn.finetune_client(plaintext_frozen_forward(tx, frozen), ty, nn.client_spec(frozen.out_width),
                             nn.TrainConfig(epochs=5, seed=0))
    ref_acc = nn.accuracy(ref.state, nn.client_spec(frozen.out_width), plaintext_frozen_forward(ex, frozen), ey)
    assert abs(summary["accuracy"] - ref_acc) <= 0.02
    assert [i["class"] for i in items] == list(nn.predict(ref.state, nn.client_spec(frozen.out_width),
                                                           plaintext_frozen_forward(ex, frozen))[0])
    assert np.isfinite([i["score"] for i in items]).all()
