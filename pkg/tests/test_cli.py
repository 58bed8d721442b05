import json

import pytest

from slifmr import cli
from slifmr import config as C
from slifmr.errors import ConfigError

TINY = ["--synth_users=40", "--synth_items=60", "--synth_interactions=600", "--synth_clusters=3",
        "--d=8", "--epochs=2", "--topk_per_modality=4", "--sge_topn=4", "--batch_size=256"]


def last_json(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return [json.loads(line) for line in out]


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nlr = 0.01\nK_list = 10,20\nsge_enabled = true\n")
    cfg = C.resolve(str(path), ["--sge_enabled=false", "beta=0.3"], env={})
    assert cfg.lr == 0.01 and cfg.K_list == (10, 20) and not cfg.sge_enabled and cfg.beta == 0.3


def test_seed_env_override(tmp_path):
    assert C.resolve(None, ["seed=3"], env={"SLIF_SEED": "11"}).seed == 11


@pytest.mark.parametrize("bad, key", [
    ("lr=0", "lr"), ("sge_interval=0", "sge_interval"), ("fusion_mode=max", "fusion_mode"),
    ("beta=-0.1", "beta"), ("prune_ratio=1.0", "prune_ratio"), ("L_b=0", "L_b"),
    ("sge_merge=append", "sge_merge"), ("d=abc", "d"),
])
def test_validation_names_key(bad, key):
    with pytest.raises(ConfigError, match=key):
        C.resolve(None, [bad], env={})


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("learning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="bad.cfg:1"):
        C.resolve(str(path), env={})


def test_config_roundtrip(tmp_path):
    cfg = C.TrainConfig(lr=0.01, K_list=(5, 20), sge_enabled=False)
    C.write_config(tmp_path / "c.txt", cfg)
    assert C.resolve(str(tmp_path / "c.txt"), env={}) == cfg


def test_train_then_eval(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SLIF_SEED", raising=False)
    run = tmp_path / "run"
    assert cli.main(["train", "--run-dir", str(run), "--override", "sge_enabled=false", *TINY]) == 0
    trained = last_json(capsys)[-1]
    assert cli.main(["eval", str(run), "--split", "valid"]) == 0
    evaluated = last_json(capsys)[-1]
    assert evaluated["metrics"] == pytest.approx(trained["valid"])
    assert cli.main(["eval", str(run), "--k", "10,20"]) == 0
    assert set(last_json(capsys)[-1]["metrics"]) >= {"recall@10", "recall@20"}


def test_same_config_same_metrics(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SLIF_SEED", raising=False)
    outs = []
    for name in ("a", "b"):
        assert cli.main(["train", "--run-dir", str(tmp_path / name), *TINY]) == 0
        outs.append(last_json(capsys)[-1])
    assert outs[0]["test"] == outs[1]["test"]
    lines = []
    for name in ("a", "b"):
        recs = [json.loads(x) for x in (tmp_path / name / "manifest.jsonl").read_text().splitlines()]
        lines.append([r for r in recs if r["type"] in ("epoch", "best")])
    assert lines[0] == lines[1]


def test_eval_errors(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SLIF_SEED", raising=False)
    assert cli.main(["eval", str(tmp_path / "missing")]) == 2
    run = tmp_path / "run"
    assert cli.main(["train", "--run-dir", str(run), *TINY]) == 0
    capsys.readouterr()
    victim = run / "best" / "user_emb.bin"
    victim.write_bytes(b"JUNK" + victim.read_bytes()[4:])
    assert cli.main(["eval", str(run)]) == 1
    assert "user_emb.bin" in capsys.readouterr().err


def test_missing_dataset_path(tmp_path, capsys):
    assert cli.main(["train", "--run-dir", str(tmp_path), "--synthetic=false", "--data_dir=/no/such/dir"]) == 2
    assert "data_dir" in capsys.readouterr().err


def test_sweep_counts(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SLIF_SEED", raising=False)
    assert cli.main(["sweep", "--run-dir", str(tmp_path), "--grid", "sge_interval=1,5",
                     "--grid", "beta=0.1,0.5", *TINY]) == 0
    rows = (tmp_path / "summary.jsonl").read_text().splitlines()
    assert len(rows) == 4
    with pytest.raises(ConfigError):
        cli.parse_grid([])
    assert cli.parse_grid(["sge_interval=1,5,10,15,20"]) == {"sge_interval": [1, 5, 10, 15, 20]}


def test_sweep_single_point_matches_train(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SLIF_SEED", raising=False)
    assert cli.main(["sweep", "--run-dir", str(tmp_path / "s"), "--grid", "beta=0.5", *TINY]) == 0
    sweep = last_json(capsys)[-1]
    assert cli.main(["train", "--run-dir", str(tmp_path / "t"), "--beta=0.5", *TINY]) == 0
    assert last_json(capsys)[-1]["test"] == sweep["test"]


def test_noise_rows_and_zero_ratio(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SLIF_SEED", raising=False)
    assert cli.main(["noise", "--run-dir", str(tmp_path / "n"), "--kind", "interaction",
                     "--ratios", "0,0.1,0.2", *TINY]) == 0
    rows = last_json(capsys)
    assert len(rows) == 3
    assert cli.main(["train", "--run-dir", str(tmp_path / "t"), *TINY]) == 0
    assert last_json(capsys)[-1]["test"] == rows[0]["test"]


def test_synth_writes_loadable_files(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path), "--users", "30", "--items", "40",
                     "--interactions", "300", "--clusters", "2"]) == 0
    for name in ("interactions.txt", "kg.txt", "visual.txt", "textual.txt"):
        assert (tmp_path / name).exists()
    assert cli.main(["train", "--run-dir", str(tmp_path / "run"), "--synthetic=false",
                     f"--data_dir={tmp_path}", "--d=8", "--epochs=1", "--topk_per_modality=3"]) == 0
