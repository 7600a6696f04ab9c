import json

import numpy as np
import pytest
import torch

from metastab.cli import main
from metastab.data import load_frames
from metastab.stabilizer import ToyStabilizer, save_model


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--videos", "2", "--frames", "40", "--size", "24",
                 "--band-lo", "1", "--band-hi", "12"]) == 0
    model = ToyStabilizer(seed=0)
    with torch.no_grad():
        model.conv3.weight.normal_(0, 0.01, generator=torch.Generator().manual_seed(1))
    save_model(root / "model.ckpt", model)
    return root


def video_dir(ws, i=0):
    return str(ws / "data" / f"synth_{i:03d}" / "unstable")


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_missing_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


def test_stabilize_without_checkpoint(workspace, capsys, tmp_path):
    code, _, err = run(["stabilize", "--video", video_dir(workspace), "--out", str(tmp_path / "o")], capsys)
    assert code == 1 and "--ckpt" in err


def test_unknown_flag_and_bad_config_key(workspace, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["jerk", "--wobble", "3"])
    assert exc.value.code == 1
    assert "--wobble" in capsys.readouterr().err
    code, _, err = run(["jerk", "--video", video_dir(workspace), "--out", "/tmp/x.csv", "--set", "adapt.q=1"],
                       capsys)
    assert code == 1 and "adapt.q" in err


def test_runtime_failure_exit_code(workspace, capsys, tmp_path):
    code, _, err = run(["stabilize", "--ckpt", str(workspace / "model.ckpt"), "--video", str(tmp_path / "none"),
                        "--out", str(tmp_path / "o")], capsys)
    assert code == 2 and "failed" in err


def test_stabilize_and_eval(workspace, capsys, tmp_path):
    out = tmp_path / "stab"
    code, stdout, _ = run(["stabilize", "--ckpt", str(workspace / "model.ckpt"), "--video", video_dir(workspace),
                           "--out", str(out)], capsys)
    assert code == 0 and stdout.strip().splitlines()[-1] == str(out)
    assert len(load_frames(out)) == 40
    rep = tmp_path / "eval.json"
    code, stdout, _ = run(["eval", "--orig", video_dir(workspace), "--stab", str(out), "--metrics", "stability",
                           "--report", str(rep)], capsys)
    assert code == 0 and stdout.strip() == str(rep)
    data = json.loads(rep.read_text())
    assert 0 <= data["metrics"]["stability"] <= 1
    assert set(data) == {"video_id", "config", "metrics", "provenance"}
    code, _, err = run(["eval", "--orig", video_dir(workspace), "--stab", str(out), "--metrics", "wow",
                        "--report", str(rep)], capsys)
    assert code == 1 and "--metrics" in err


def test_jerk_outputs(workspace, capsys, tmp_path):
    code, stdout, _ = run(["jerk", "--video", video_dir(workspace), "--out", str(tmp_path / "traj.csv"),
                           "--peaks", "3", "--k", "1"], capsys)
    assert code == 0
    assert stdout.split() == [str(tmp_path / n) for n in ("traj.csv", "jerk.csv", "peaks.json")]
    peaks = json.loads((tmp_path / "peaks.json").read_text())
    assert len(peaks["peaks"]) == 3
    rows = (tmp_path / "jerk.csv").read_text().splitlines()
    assert rows[0] == "t,delta" and len(rows) == 1 + 38
    deltas = np.array([float(r.split(",")[1]) for r in rows[1:]])
    assert int(np.argmax(deltas)) == peaks["peaks"][0]


def test_targeted_adapt_label_and_byte_identical_reports(workspace, capsys, tmp_path):
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, stdout, _ = run(["adapt", "--ckpt", str(workspace / "model.ckpt"), "--video", video_dir(workspace),
                               "--out", str(out), "--strategy", "targeted", "--p", "10", "--M", "3",
                               "--alpha", "1e-5"], capsys)
        assert code == 0
        assert stdout.split()[-1] == str(out / "report.json")
        reports.append((out / "report.json").read_bytes())
    assert reports[0] == reports[1]
    rep = json.loads(reports[0])
    assert rep["label"] == "TargetedAdapt^(3)_10"
    assert rep["config"]["adapt"]["p"] == 10
    assert rep["provenance"]["checkpoints"]["model"]["arch"] == "toy-v1"
    assert rep["video_id"] == "synth_000/unstable"
    a, b = (load_frames(tmp_path / n / "frames").frames for n in ("a", "b"))
    assert np.array_equal(a, b)


def test_vanilla_adapt_count_all(workspace, capsys, tmp_path):
    code, _, _ = run(["adapt", "--ckpt", str(workspace / "model.ckpt"), "--video", video_dir(workspace, 1),
                      "--out", str(tmp_path), "--count", "all", "--alpha", "1e-5"], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["label"] == "VanillaAdapt^(1)_all"
    assert rep["adaptation"]["gradient_steps"] == len(rep["adaptation"]["clip_starts"]) == 40 // 9


def test_judge_mock(workspace, capsys, tmp_path):
    out = tmp_path / "judge.json"
    argv = ["judge", "--mock", "--videos", video_dir(workspace, 0), video_dir(workspace, 1), "--out", str(out)]
    code, _, _ = run(argv, capsys)
    assert code == 0
    first = out.read_bytes()
    assert run(argv, capsys)[0] == 0 and out.read_bytes() == first
    data = json.loads(first)
    assert data["n_scored"] == 2 and data["mean_score"] == 8.0 and data["hsr"] == 1.0
    assert [v["video_id"] for v in data["videos"]] == ["synth_000/unstable", "synth_001/unstable"]
    dup = ["judge", "--mock", "--videos", video_dir(workspace, 0), video_dir(workspace, 0), "--out", str(out)]
    code, _, err = run(dup, capsys)
    assert code == 1 and "duplicate" in err


def test_train_affine_requires_data(capsys, tmp_path):
    code, _, err = run(["train-affine", "--out", str(tmp_path / "a.ckpt")], capsys)
    assert code == 1 and "--data" in err


def test_meta_train_writes_checkpoint_and_log(workspace, capsys, tmp_path):
    out = tmp_path / "meta.ckpt"
    code, stdout, _ = run(["meta-train", "--data", str(workspace / "data"), "--out", str(out), "--iters", "2",
                           "--set", "meta.batch_tasks=1"], capsys)
    assert code == 0
    assert stdout.split() == [str(out), str(out.with_suffix(".log.jsonl"))]
    lines = out.with_suffix(".log.jsonl").read_text().splitlines()
    assert len(lines) == 2 and "outer_loss_breakdown" in json.loads(lines[0])
