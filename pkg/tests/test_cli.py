"""Command line behaviour: exit codes, stdout/stderr contracts, round trips."""

import csv
import json
from pathlib import Path

import pytest

from modcap.cli import main as cli_main

TRAIN_FLAGS = ["--d-v", "8", "--d-a", "4", "--heads", "2",
               "--xe-epochs", "1", "--rl-epochs", "0",
               "--batch-size", "8", "--lr", "3e-3", "--seed", "3"]


def run(argv):
    """main() with argparse's SystemExit folded into a return code."""
    try:
        return cli_main(argv)
    except SystemExit as ex:
        return int(ex.code or 0)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "data"
    assert run(["corpus", "--out", str(path), "--scenes", "24", "--seed", "5"]) == 0
    return path


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, data_dir):
    path = tmp_path_factory.mktemp("cli-ckpt") / "model.bin"
    code = run(["train", "--data", str(data_dir), "--out", str(path)] + TRAIN_FLAGS)
    assert code == 0
    return path


# -- exit codes ---------------------------------------------------------------


def test_no_arguments_is_a_usage_error(capsys):
    assert run([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_unknown_subcommand_is_a_usage_error():
    assert run(["frobnicate"]) == 1


def test_unknown_flag_is_a_usage_error():
    assert run(["corpus", "--out", "x", "--wat"]) == 1


def test_unknown_preset_exits_1(data_dir, tmp_path):
    code = run(["train", "--data", str(data_dir),
                "--out", str(tmp_path / "m.bin"), "--preset", "Nope/Q"])
    assert code == 1


def test_invalid_combination_exits_1(data_dir, tmp_path, capsys):
    code = run(["train", "--data", str(data_dir), "--out", str(tmp_path / "m.bin"),
                "--strategy", "uniform", "--linguistic"])
    assert code == 1
    assert "configuration error" in capsys.readouterr().err


def test_missing_data_directory_exits_2(tmp_path):
    assert run(["train", "--data", str(tmp_path / "nope"),
                "--out", str(tmp_path / "m.bin")]) == 2


def test_corrupt_corpus_exits_2(data_dir, tmp_path):
    broken = tmp_path / "broken"
    broken.mkdir()
    for name in ("meta.json", "vocab.json", "scenes.jsonl", "captions.jsonl"):
        (broken / name).write_text((data_dir / name).read_text())
    with open(broken / "scenes.jsonl", "a") as fh:
        fh.write("{not json\n")
    assert run(["train", "--data", str(broken), "--out", str(tmp_path / "m.bin")]) == 2


def test_invalid_corpus_shape_exits_2(tmp_path):
    assert run(["corpus", "--out", str(tmp_path / "bad"), "--scenes", "0"]) == 2


def test_missing_scene_exits_2(data_dir, checkpoint):
    assert run(["caption", "--checkpoint", str(checkpoint),
                "--data", str(data_dir), "--scene", "99999"]) == 2


# -- seeds and configuration echo ----------------------------------------------


def echoed_config(capsys):
    err = capsys.readouterr().err
    return json.loads(next(line for line in err.splitlines()
                           if line.startswith("{")))


def test_seed_flag_lands_in_the_echo(data_dir, tmp_path, capsys):
    run(["train", "--data", str(data_dir), "--out", str(tmp_path / "m.bin"),
         "--seed", "42", "--xe-epochs", "0", "--rl-epochs", "0",
         "--d-v", "8", "--d-a", "4"])
    assert echoed_config(capsys)["train"]["seed"] == 42


def test_cnm_seed_env_is_the_fallback(data_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CNM_SEED", "77")
    run(["train", "--data", str(data_dir), "--out", str(tmp_path / "m.bin"),
         "--xe-epochs", "0", "--rl-epochs", "0", "--d-v", "8", "--d-a", "4"])
    assert echoed_config(capsys)["train"]["seed"] == 77


def test_explicit_seed_beats_the_env(data_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CNM_SEED", "77")
    run(["train", "--data", str(data_dir), "--out", str(tmp_path / "m.bin"),
         "--seed", "5", "--xe-epochs", "0", "--rl-epochs", "0",
         "--d-v", "8", "--d-a", "4"])
    assert echoed_config(capsys)["train"]["seed"] == 5


def test_malformed_cnm_seed_exits_1(tmp_path, monkeypatch):
    monkeypatch.setenv("CNM_SEED", "not-a-number")
    assert run(["corpus", "--out", str(tmp_path / "c")]) == 1


def test_preset_flags_override_order(data_dir, tmp_path, capsys):
    run(["train", "--data", str(data_dir), "--out", str(tmp_path / "m.bin"),
         "--preset", "Col/H", "--m-units", "3",
         "--xe-epochs", "0", "--rl-epochs", "0", "--d-v", "8", "--d-a", "4"])
    doc = echoed_config(capsys)
    assert doc["model"]["strategy"] == "hard"
    assert doc["model"]["m_units"] == 3


# -- the subcommands, end to end ------------------------------------------------


def test_corpus_reports_split_sizes(tmp_path, capsys):
    assert run(["corpus", "--out", str(tmp_path / "c"), "--scenes", "20"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["scenes"] == 20
    assert doc["splits"]["train"] + doc["splits"]["val"] + doc["splits"]["test"] == 20


def test_train_writes_checkpoint_and_summary(checkpoint, capsys):
    assert checkpoint.exists()
    assert Path(str(checkpoint) + ".meta.json").exists()


def test_eval_reports_metrics(data_dir, checkpoint, tmp_path, capsys):
    out = tmp_path / "report.json"
    code = run(["eval", "--checkpoint", str(checkpoint), "--data", str(data_dir),
                "--split", "val", "--beam", "2", "--out", str(out)])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    for key in ("bleu1", "bleu4", "cider_d", "pos_recall", "token_acc"):
        assert key in doc
    assert json.loads(out.read_text()) == doc


def test_eval_greedy_mode(data_dir, checkpoint, capsys):
    code = run(["eval", "--checkpoint", str(checkpoint), "--data", str(data_dir),
                "--split", "val", "--greedy"])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["decode"]["mode"] == "greedy"


def test_caption_prints_one_line_per_scene(data_dir, checkpoint, capsys):
    code = run(["caption", "--checkpoint", str(checkpoint), "--data", str(data_dir),
                "--split", "val", "--greedy"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2  # 24 scenes split 80/10/10 leaves 2 in val
    for line in lines:
        scene_id, caption = line.split("\t")
        assert scene_id.isdigit()
        assert caption


def test_caption_sampling_is_seeded(data_dir, checkpoint, capsys):
    argv = ["caption", "--checkpoint", str(checkpoint), "--data", str(data_dir),
            "--split", "val", "--sample", "--seed", "9"]
    assert run(argv) == 0
    first = capsys.readouterr().out
    assert run(argv) == 0
    assert capsys.readouterr().out == first


def test_trace_writes_json_and_svg(data_dir, checkpoint, tmp_path, capsys):
    out, svg = tmp_path / "t.json", tmp_path / "t.svg"
    scene_id = json.loads((data_dir / "scenes.jsonl").read_text()
                          .splitlines()[0])["id"]
    code = run(["trace", "--checkpoint", str(checkpoint), "--data", str(data_dir),
                "--scene", str(scene_id), "--out", str(out), "--svg", str(svg)])
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["kind"] == "teacher_forced"
    assert doc["scene_id"] == scene_id
    assert svg.read_text().startswith("<svg")
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == len(doc["steps"])


def test_trace_generated_mode(data_dir, checkpoint, capsys):
    scene_id = json.loads((data_dir / "scenes.jsonl").read_text()
                          .splitlines()[0])["id"]
    code = run(["trace", "--checkpoint", str(checkpoint), "--data", str(data_dir),
                "--scene", str(scene_id), "--generated", "--max-len", "6"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["kind"] == "generated"
    assert len(doc["steps"]) <= 6


def test_gradcheck_prints_a_line_per_case(capsys):
    assert run(["gradcheck", "--sections", "primitives"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 30
    assert "FAIL" not in out


def test_gradcheck_unknown_section_exits_1():
    assert run(["gradcheck", "--sections", "nonsense"]) == 1


def test_gradcheck_failures_exit_3(capsys):
    assert run(["gradcheck", "--sections", "primitives", "--tol", "1e-15"]) == 3
    assert "FAIL" in capsys.readouterr().out


def ablation_rows(out_dir):
    with open(out_dir / "ablation.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_ablate_writes_csv_and_json(data_dir, tmp_path, capsys):
    out = tmp_path / "abl"
    code = run(["ablate", "--data", str(data_dir), "--out", str(out),
                "--presets", "Col/S,Col/1", "--beam", "2"] + TRAIN_FLAGS)
    assert code == 0
    rows = ablation_rows(out)
    assert [r["preset"] for r in rows] == ["Col/1", "Col/S"]  # sorted
    doc = json.loads((out / "ablation.json").read_text())
    assert [r["preset"] for r in doc["rows"]] == ["Col/1", "Col/S"]
    for row in rows:
        assert row["runtime_seconds"]  # present, value not asserted


def test_ablate_is_deterministic_apart_from_runtime(data_dir, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["ablate", "--data", str(data_dir), "--out", str(out),
                    "--presets", "Col/1,Module/O", "--beam", "2"] + TRAIN_FLAGS) == 0
        rows = ablation_rows(out)
        for row in rows:
            row.pop("runtime_seconds")
        outs.append(rows)
    assert outs[0] == outs[1]
