import json
import subprocess
import sys

import pytest

from vql.cli import EXIT_VERIFY_FAILED, main

GEN = ["gen", "--users", "3", "--avg-len", "30", "--items", "40", "--clusters", "4", "--d-in", "4",
       "--samples-per-user", "5"]
DIMS = ["--d", "4", "--codebook-size", "6"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, model, cache = root / "data", root / "model.npz", root / "cache"
    assert main(GEN + ["--seed", "7", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(model), "--epochs", "2", "--lr", "0.05",
                 "--groups", "2", "--heads", "2", "--scales", "2"] + DIMS) == 0
    assert main(["build-cache", "--data", str(data), "--model", str(model), "--out", str(cache)]) == 0
    return root, data, model, cache


def infer(ws, tier, *extra):
    root, data, model, cache = ws
    out = root / f"scores_{tier}.csv"
    code = main(["infer", "--data", str(data), "--model", str(model), "--cache", str(cache),
                 "--tier", tier, "--user", "1", "--candidates", "9", "--reps", "2", "--out", str(out), *extra])
    return code, out


def test_gen_is_byte_identical_for_a_seed(tmp_path):
    for sub in ("a", "b"):
        assert main(GEN + ["--seed", "7", "--out", str(tmp_path / sub)]) == 0
    for name in ("events.txt", "items.txt", "samples.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_writes_model_and_metrics(workspace):
    root, _, model, _ = workspace
    lines = (root / "model.npz.metrics.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,") and len(lines) == 4


def test_all_tiers_give_identical_scores(workspace):
    outs = {}
    for tier in ("light", "medium", "heavy"):
        code, path = infer(workspace, tier)
        assert code == 0
        outs[tier] = path.read_text()
    assert outs["light"] == outs["medium"] == outs["heavy"]
    assert outs["heavy"].splitlines()[0] == "rank,item_id,score"


def test_exit_codes_for_bad_inputs(workspace, tmp_path):
    root, data, model, cache = workspace
    assert main(["train", "--data", str(tmp_path / "missing")]) == 19
    # a model trained with another seed makes every tier stale
    other = tmp_path / "other.npz"
    assert main(["train", "--data", str(data), "--out", str(other), "--seed", "5", "--groups", "2",
                 "--heads", "2", "--scales", "2"] + DIMS) == 0
    for tier in ("light", "medium", "heavy"):
        code, _ = infer((root, data, other, cache), tier)
        assert code == 34
    # truncated cache file
    bad = tmp_path / "cache"
    (bad / "heavy").mkdir(parents=True)
    for g in range(2):
        blob = (cache / "heavy" / f"u1_g{g}.vqlc").read_bytes()
        (bad / "heavy" / f"u1_g{g}.vqlc").write_bytes(blob[:-7])
    assert infer((root, data, model, bad), "heavy")[0] == 33
    # malformed event log
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "events.txt").write_text("# vql-events v1 d_in=2\n1 2 3 +1.0\n")
    assert main(["train", "--data", str(broken)]) == 20


def test_config_file_with_flags_winning(tmp_path, capsys):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({"users": 2, "avg_len": 10, "items": 20, "d_in": 2, "seed": 3}))
    assert main(["gen", "--config", str(cfg), "--users", "4", "--out", str(tmp_path / "d")]) == 0
    shown = capsys.readouterr().err.splitlines()[0]
    assert shown.startswith("# vql gen ")
    resolved = json.loads(shown[len("# vql gen "):])
    assert resolved["users"] == 4 and resolved["seed"] == 3 and resolved["avg_len"] == 10
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["gen", "--config", str(cfg)]) == 12


def test_verify_exit_codes(tmp_path):
    assert main(["verify"]) == 0
    assert main(["verify", "--inject-fault", "tie-rule", "--out", str(tmp_path / "v.csv")]) == EXIT_VERIFY_FAILED
    assert "assignment,False" in (tmp_path / "v.csv").read_text()


def test_small_bench(tmp_path, monkeypatch):
    monkeypatch.setenv("VQL_THREADS", "2")
    out = tmp_path / "b"
    assert main(["bench", "--lengths", "20,80", "--candidates", "4,8", "--reps", "2", "--d", "8",
                 "--codebook-size", "5", "--topk", "5", "--topk-lengths", "5,20", "--out", str(out)]) == 0
    for name in ("bench.csv", "topk.csv", "throughput.csv"):
        assert (out / name).exists()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "vql", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("vql ")
