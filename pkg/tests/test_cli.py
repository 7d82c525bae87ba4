import os

import pytest

from kpft import cli, gradcheck
from kpft.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
T5 = os.path.join(ROOT, "configs", "t5_base.cfg")

SHORT = """\
[model]
layers = 1
hidden = 8
ffn = 16
heads = 2
vocab = 6
max_seq = 4
classes = 2

[adapter]
kind = compacter
bottleneck = 4
n = 2

[optim]
lr = {lr}
batch_size = 8
steps = 20
eval_every = 10
log_every = 10

[task]
seq_len = 3
train_size = 64
val_size = 32
test_size = 32
"""


@pytest.fixture
def short_cfg(tmp_path):
    path = tmp_path / "short.cfg"
    path.write_text(SHORT.format(lr=0.01))
    return str(path)


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_count_params_t5_compacterpp(capsys):
    code, out, _ = run(capsys, "count-params", "--config", T5, "--method", "compacter++")
    assert code == EXIT_OK
    assert "fraction_counted=0.0469727822%" in out


def test_count_params_all_methods_table(capsys, tmp_path):
    record = tmp_path / "budget.txt"
    code, out, _ = run(capsys, "count-params", "--config", T5, "--all-methods", "--record", str(record))
    assert code == EXIT_OK
    table = out[out.index("method "):].splitlines()[1:]
    assert [row.split()[0] for row in table] == list(cli.parambudget.TABLE_METHODS)
    assert "[compacter]" in record.read_text()


def test_count_params_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "count-params", "--config", str(tmp_path / "nope.cfg"))
    assert code == EXIT_CONFIG and "cannot read config" in err


def test_bad_config_reports_line(capsys, tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[model]\nhidden = 8\n\n[adapter]\nbottleneck = 3\nn = 2\n")
    code, _, err = run(capsys, "count-params", "--config", str(path))
    assert code == EXIT_CONFIG and "line 6" in err and "n=2" in err


def test_usage_errors(capsys):
    assert run(capsys, "frobnicate")[0] == EXIT_CONFIG
    assert run(capsys, "gradcheck", "--trials", "0")[0] == EXIT_CONFIG
    assert run(capsys, "gradcheck", "--op", "nosuchop", "--trials", "1")[0] == EXIT_CONFIG


def test_gradcheck_single_op(capsys):
    code, out, _ = run(capsys, "gradcheck", "--op", "kron", "--trials", "5")
    assert code == EXIT_OK
    assert out.startswith("ok op=kron trials=5 ")


def test_gradcheck_failure_exit(capsys, monkeypatch):
    def broken(gen):
        fn, inputs = gradcheck.CHECKS["gelu"](gen)
        x = inputs["x"]

        def shifted():
            out = fn()
            out.value = out.value + x.value ** 2  # seen by finite differences only
            return out
        return shifted, inputs

    monkeypatch.setitem(gradcheck.CHECKS, "broken", broken)
    code, out, err = run(capsys, "gradcheck", "--op", "broken", "--trials", "2")
    assert code == EXIT_CHECK
    assert out.startswith("FAIL op=broken") and "gradient check failed: op=broken" in err


def test_materialize_check(capsys):
    code, out, _ = run(capsys, "materialize-check", "--trials", "20")
    assert code == EXIT_OK
    assert [line.split()[1] for line in out.splitlines()] == ["op=phm_vs_materialized", "op=lphm_vs_phm"]


def test_train_then_eval(capsys, short_cfg, tmp_path):
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", "--config", short_cfg, "--out", str(out_dir))
    assert code == EXIT_OK
    assert out.splitlines()[:2] == [line for line in out.splitlines() if line.startswith("step=")]
    final = dict(kv.split("=") for kv in out.splitlines()[-1].split())
    assert (out_dir / "checkpoint.kpft").exists() and "[report]" in (out_dir / "report.txt").read_text()
    code, out, _ = run(capsys, "eval", "--config", short_cfg, "--checkpoint", str(out_dir / "checkpoint.kpft"))
    assert code == EXIT_OK
    assert out.strip() == f"accuracy={final['final_accuracy']}"


def test_train_deterministic(capsys, short_cfg, tmp_path):
    run(capsys, "train", "--config", short_cfg, "--out", str(tmp_path / "a"))
    run(capsys, "train", "--config", short_cfg, "--out", str(tmp_path / "b"))
    assert (tmp_path / "a" / "checkpoint.kpft").read_bytes() == (tmp_path / "b" / "checkpoint.kpft").read_bytes()


def test_seed_override(capsys, short_cfg, tmp_path, monkeypatch):
    run(capsys, "train", "--config", short_cfg, "--out", str(tmp_path / "a"))
    monkeypatch.setenv("KPFT_SEED", "5")
    run(capsys, "train", "--config", short_cfg, "--out", str(tmp_path / "b"))
    assert (tmp_path / "a" / "checkpoint.kpft").read_bytes() != (tmp_path / "b" / "checkpoint.kpft").read_bytes()
    monkeypatch.setenv("KPFT_SEED", "abc")
    assert run(capsys, "train", "--config", short_cfg, "--out", str(tmp_path / "c"))[0] == EXIT_CONFIG


@pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0, reason="root ignores permissions")
def test_unwritable_out_dir(capsys, short_cfg, tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir(mode=0o500)
    assert run(capsys, "train", "--config", short_cfg, "--out", str(locked / "x"))[0] == EXIT_IO


def test_out_dir_is_a_file(capsys, short_cfg, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run(capsys, "train", "--config", short_cfg, "--out", str(blocker / "sub"))[0] == EXIT_IO


def test_eval_corrupt_checkpoint(capsys, short_cfg, tmp_path):
    bad = tmp_path / "bad.kpft"
    bad.write_bytes(b"not a checkpoint")
    code, _, err = run(capsys, "eval", "--config", short_cfg, "--checkpoint", str(bad))
    assert code == EXIT_IO and "bad.kpft" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort(capsys, tmp_path):
    path = tmp_path / "hot.cfg"
    path.write_text(SHORT.format(lr=1e300))
    code, _, err = run(capsys, "train", "--config", str(path), "--out", str(tmp_path / "o"))
    assert code == EXIT_NUMERIC and "numeric abort" in err


def test_bench_rows(capsys, short_cfg):
    code, out, _ = run(capsys, "bench", "--config", short_cfg, "--steps", "2", "--backend", "python")
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[0].startswith("# desk-scale") and "backend=python" in lines[0]
    rows = [dict(kv.split("=") for kv in line.split()) for line in lines[1:]]
    assert [r["method"] for r in rows] == list(cli.BENCH_METHODS)
    for r in rows:
        if r["method"] in ("phm", "compacter", "compacter++"):
            assert r["materialized_kxd"] == "no"


def test_bench_rejects_t5(capsys):
    assert run(capsys, "bench", "--config", T5)[0] == EXIT_CONFIG
