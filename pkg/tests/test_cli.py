import json
from pathlib import Path

import numpy as np
import pytest

from bss import bifpn, cli, metrics, shuffle_attention as sa, simam
from bss.io import read_bst, tensor_to_json, write_bst

EVAL = Path(metrics.__file__).parent / "fixtures" / "eval"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def x8(tmp_path, rng):
    x = rng.standard_normal((1, 8, 4, 4)).astype(np.float32)
    p = tmp_path / "x.bst"
    write_bst(p, x)
    return x, p


def test_simam(capsys, tmp_path, x8):
    x, p = x8
    code, _, _ = run(capsys, "simam", "--in", p, "--out", tmp_path / "y.bst", "--emit-energy", tmp_path / "e.bst",
                     "--lambda", "0.01")
    assert code == 0
    np.testing.assert_array_equal(read_bst(tmp_path / "y.bst"), simam.simam_forward(x, 0.01))
    np.testing.assert_allclose(read_bst(tmp_path / "e.bst"), simam.simam_energy(x, 0.01).e_star, rtol=1e-6)


def test_json_tensor_input(capsys, tmp_path, x8):
    x, _ = x8
    p = tmp_path / "x.json"
    p.write_text(json.dumps(tensor_to_json(x)))
    assert run(capsys, "simam", "--in", p, "--out", tmp_path / "y.bst")[0] == 0
    np.testing.assert_array_equal(read_bst(tmp_path / "y.bst"), simam.simam_forward(x))


def test_sa(capsys, tmp_path, x8):
    x, p = x8
    code, _, _ = run(capsys, "sa", "--in", p, "--groups", 2, "--shuffle-groups", 4, "--out", tmp_path / "y.bst")
    assert code == 0
    np.testing.assert_array_equal(read_bst(tmp_path / "y.bst"), sa.sa_forward(x, sa.SAConfig(groups=2, shuffle_groups=4)))


def test_sa_bad_groups(capsys, tmp_path, x8):
    _, p = x8
    code, _, err = run(capsys, "sa", "--in", p, "--groups", 3, "--out", tmp_path / "y.bst")
    assert code == 1 and err.startswith("bss:error:config:")
    assert not (tmp_path / "y.bst").exists()


def test_fuse_default_neck(capsys, tmp_path, rng):
    g = bifpn.default_neck()
    ins = {}
    args = ["fuse", "--out-dir", tmp_path / "out"]
    for lv, d in g.inputs.items():
        ins[lv] = rng.standard_normal(d).astype(np.float32)
        write_bst(tmp_path / f"{lv}.bst", ins[lv])
        args += ["--input", f"{lv}={tmp_path / f'{lv}.bst'}"]
    assert run(capsys, *args)[0] == 0
    ref = bifpn.graph_execute(g, ins)
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == sorted(f"{k}.bst" for k in ref)
    for k, v in ref.items():
        np.testing.assert_array_equal(read_bst(tmp_path / "out" / f"{k}.bst"), v)


def test_fuse_missing_level_writes_nothing(capsys, tmp_path, rng):
    write_bst(tmp_path / "P3.bst", rng.standard_normal((1, 16, 32, 32)).astype(np.float32))
    code, _, err = run(capsys, "fuse", "--input", f"P3={tmp_path / 'P3.bst'}", "--out-dir", tmp_path / "out")
    assert code == 1 and "P4" in err
    assert not (tmp_path / "out").exists()


def test_fuse_invalid_graph(capsys, tmp_path):
    bad = {"inputs": {"P3": [1, 1, 2, 2]}, "nodes": [{"id": "P3", "kind": "input"},
           {"id": "O", "kind": "output", "inputs": [{"src": "O"}], "weights": [1]}], "outputs": ["O"]}
    (tmp_path / "g.json").write_text(json.dumps(bad))
    code, _, err = run(capsys, "fuse", "--graph", tmp_path / "g.json", "--out-dir", tmp_path / "o")
    assert code == 1 and "self-loop" in err


def test_eval(capsys, tmp_path):
    code, out, _ = run(capsys, "eval", "--gt", EVAL / "gt", "--det", EVAL / "det.jsonl", "--out-dir", tmp_path)
    assert code == 0 and "D40" in out
    assert (tmp_path / "report.json").read_text() == (EVAL / "golden_report.json").read_text()
    assert sorted(p.name for p in tmp_path.glob("pr_*.csv")) == [
        "pr_0_D00.csv", "pr_1_D10.csv", "pr_2_D20.csv", "pr_3_D40.csv"]


def test_eval_malformed(capsys, tmp_path):
    gt = tmp_path / "gt"
    gt.mkdir()
    (gt / "a.txt").write_text("0 0.5 0.5 0.1 0.1\n0 0.5 0.5 oops 0.1\n")
    det = tmp_path / "det.jsonl"
    det.write_text("")
    code, _, err = run(capsys, "eval", "--gt", gt, "--det", det, "--out-dir", tmp_path / "o")
    assert code == 2 and f"{gt / 'a.txt'}:2:" in err
    assert not (tmp_path / "o").exists()


def test_eval_bad_iou(capsys):
    code, _, err = run(capsys, "eval", "--gt", EVAL / "gt", "--det", EVAL / "det.jsonl", "--iou", "1.5")
    assert code == 1 and "iou" in err


def test_check(capsys, tmp_path):
    code, out, _ = run(capsys, "check", "--suite", "grad", "--op", "group_norm", "--trials", 3, "--seed", 5)
    assert code == 0 and out.startswith("PASS")
    rep = json.loads(out[out.index("{"):])
    assert rep["passed"] and rep["results"][0]["name"] == "group_norm"
    code, _, _ = run(capsys, "check", "--suite", "invariants", "--out", tmp_path / "r.json")
    assert code == 0 and json.loads((tmp_path / "r.json").read_text())["passed"]


def test_check_failure_exit(capsys):
    code, out, _ = run(capsys, "check", "--suite", "grad", "--op", "sa_forward", "--trials", 2, "--tol", "1e-15")
    assert code == 1 and out.startswith("FAIL")


def test_check_unknown_op(capsys):
    code, _, err = run(capsys, "check", "--suite", "grad", "--op", "nope")
    assert code == 1 and "unknown op" in err


def test_bench(capsys, tmp_path):
    assert run(capsys, "bench", "--repeat", 1, "--out", tmp_path / "b.json")[0] == 0
    assert json.loads((tmp_path / "b.json").read_text())


def test_selftest(capsys, tmp_path):
    code, out, _ = run(capsys, "selftest", "--out-dir", tmp_path)
    assert code == 0 and "FAIL" not in out
    rep = json.loads((tmp_path / "selftest_report.json").read_text())
    assert rep["passed"] and "eval/report.json" in rep["artifacts"]


@pytest.mark.parametrize("argv", [[], ["nope"], ["simam"], ["simam", "--in", "x", "--out", "y", "--lambda", "-1"],
                                  ["eval", "--gt", "g", "--det", "d", "--classes", "0"]])
def test_usage_errors(capsys, argv):
    with pytest.raises(SystemExit) as info:
        cli.main(argv)
    assert info.value.code == 2
    assert "bss:error:usage:" in capsys.readouterr().err


def test_missing_input_file(capsys, tmp_path):
    code, _, err = run(capsys, "simam", "--in", tmp_path / "none.bst", "--out", tmp_path / "y.bst")
    assert code == 2 and err.startswith("bss:error:")


def test_corrupt_bst(capsys, tmp_path):
    (tmp_path / "x.bst").write_bytes(b"BST1garbage")
    code, _, err = run(capsys, "simam", "--in", tmp_path / "x.bst", "--out", tmp_path / "y.bst")
    assert code == 2 and "parse" in err
    assert not (tmp_path / "y.bst").exists()


def test_bad_threads_env(capsys, tmp_path, monkeypatch, x8):
    _, p = x8
    monkeypatch.setenv("BSS_THREADS", "zero")
    code, _, err = run(capsys, "simam", "--in", p, "--out", tmp_path / "y.bst")
    assert code == 2 and "BSS_THREADS" in err
