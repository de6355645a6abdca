import json

import pytest

from insertgen.cli import main

TINY_OVERRIDES = {
    "model_dim": 8, "num_heads": 2, "num_encoder_layers": 1,
    "num_decoder_layers": 1, "ffn_dim": 12, "max_len": 12,
    "total_steps": 4, "pretrain_steps": 2, "batch_tokens": 6,
    "eval_every": 2, "val_max_examples": 4,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One data dir plus one insertion and one baseline checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--task", "copy", "--n", "12", "--n-val", "4",
                 "--vocab-size", "4", "--min-len", "1", "--max-len", "3",
                 "--seed", "0", "--out", str(data)]) == 0
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY_OVERRIDES))
    ins = root / "ins"
    base = root / "base"
    for mode, out in (("default", ins), ("baseline_l2r", base)):
        assert main(["train", "--data", str(data), "--mode", mode,
                     "--config", str(cfg), "--out", str(out)]) == 0
    return {"root": root, "data": data, "cfg": cfg, "ins": ins, "base": base}


def test_gen_data_writes_files_deterministically(tmp_path, capsys):
    args = ["gen-data", "--task", "reverse", "--n", "6", "--n-val", "2",
            "--vocab-size", "4", "--max-len", "3", "--seed", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("train.tsv", "val.tsv", "vocab.tsv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len((tmp_path / "a" / "train.tsv").read_text().splitlines()) == 6
    assert "wrote 6 train" in capsys.readouterr().out


def test_train_outputs_and_config_echo(workspace, capsys):
    out = workspace["ins"]
    assert (out / "model.ckpt").exists()
    assert (out / "metrics.jsonl").exists()
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["model_dim"] == 8
    assert echoed["total_steps"] == 4
    assert echoed["mode"] == "default"
    assert echoed["preset"] == "desk"


def test_train_flag_overrides_config_file(workspace, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(workspace["data"]),
                 "--config", str(workspace["cfg"]),
                 "--total-steps", "2", "--out", str(out)]) == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["total_steps"] == 2  # flag beats config file
    assert echoed["model_dim"] == 8  # config file beats preset
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["steps"] == 2
    assert "val_seq_acc" in summary


def test_train_rejects_unknown_config_key(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 0.1}))
    code = main(["train", "--data", str(workspace["data"]),
                 "--config", str(bad), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_decode_eval_analyze_pipeline(workspace, tmp_path, capsys):
    hyp = tmp_path / "decodes.tsv"
    assert main(["decode", "--ckpt", str(workspace["ins"]),
                 "--data", str(workspace["data"] / "val.tsv"),
                 "--beam", "2", "--out", str(hyp)]) == 0
    assert len(hyp.read_text().splitlines()) == 4

    assert main(["eval", "--hyp", str(hyp),
                 "--ref", str(workspace["data"] / "val.tsv")]) == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(report) == {"sequence_accuracy", "bleu"}
    assert 0.0 <= report["sequence_accuracy"] <= 1.0
    assert 0.0 <= report["bleu"] <= 100.0

    csv_out = tmp_path / "profile.csv"
    assert main(["analyze", "--decodes", str(hyp),
                 "--vocab", str(workspace["data"] / "vocab.tsv"),
                 "--out", str(csv_out)]) == 0
    stats = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert stats["n_trajectories"] == 4
    assert csv_out.read_text().startswith("class,bin,count")


def test_decode_baseline_checkpoint(workspace, tmp_path):
    hyp = tmp_path / "base.tsv"
    assert main(["decode", "--ckpt", str(workspace["base"]),
                 "--data", str(workspace["data"] / "val.tsv"),
                 "--out", str(hyp)]) == 0
    assert len(hyp.read_text().splitlines()) == 4


def test_eval_rejects_length_mismatch(workspace, tmp_path, capsys):
    hyp = tmp_path / "short.tsv"
    assert main(["decode", "--ckpt", str(workspace["ins"]),
                 "--data", str(workspace["data"] / "val.tsv"),
                 "--out", str(hyp)]) == 0
    capsys.readouterr()
    code = main(["eval", "--hyp", str(hyp),
                 "--ref", str(workspace["data"] / "train.tsv")])
    assert code == 1
    assert "hypotheses vs" in capsys.readouterr().err


def test_bench_reports_slopes(workspace, tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--ckpt-insertion", str(workspace["ins"]),
                 "--ckpt-baseline", str(workspace["base"]),
                 "--lengths", "2,4", "--n-per-length", "2",
                 "--out", str(out)]) == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(printed) == {"slope_insertion", "slope_baseline", "mean_slowdown"}
    lines = out.read_text().splitlines()
    assert lines[0] == "length_bin,model,mean_ms,n"
    assert len(lines) == 5  # header + 2 models x 2 bins
    assert {ln.split(",")[1] for ln in lines[1:]} == {"insertion", "baseline_l2r"}


def test_bench_rejects_swapped_checkpoints(workspace, capsys):
    code = main(["bench", "--ckpt-insertion", str(workspace["base"]),
                 "--ckpt-baseline", str(workspace["ins"])])
    assert code == 1
    assert "insertion checkpoint" in capsys.readouterr().err


def test_missing_input_is_a_user_error(tmp_path, capsys):
    code = main(["decode", "--ckpt", str(tmp_path / "nope"),
                 "--data", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])  # missing required flags
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--task", "sudoku", "--out", "x"])
    assert exc.value.code == 1


def test_verify_suite_passes(capsys):
    assert main(["verify"]) == 0
