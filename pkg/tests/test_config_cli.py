import json
import shutil

import numpy as np
import pytest

from cascade_spk import cli
from cascade_spk import encoder as enc
from cascade_spk import scoring as sc
from cascade_spk.config import PipelineConfig, apply_overrides, config_hash, load_config, parse_override
from cascade_spk.corpus import read_manifest, write_manifest
from cascade_spk.errors import ConfigError

SMALL = {
    "corpus": {"num_speakers": 16, "utterances_per_speaker": 4, "frames_per_utterance": 200},
    "encoder": {"hidden_dims": [16], "embedding_dim": 8, "head_hidden_dims": [16], "head_output_dim": 16},
    "dino": {"epochs": 1, "batch_size": 8},
    "finetune": {"epochs": 2, "crop_len": 100, "batch_size": 8},
    "scoring": {"num_trials": 100, "eval_speakers": 5, "asnorm_k": 5},
    "seed": 7,
}


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def two_runs(config_file, tmp_path_factory):
    roots = []
    for name in ("a", "b"):
        root = tmp_path_factory.mktemp(f"run_{name}")
        assert cli.main(["run-all", "--config", str(config_file), "--workdir", str(root)]) == 0
        roots.append(root)
    return roots


def artifacts(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file() and p.name != "runs.jsonl")


# -- config ---------------------------------------------------------------------

def test_defaults_validate():
    cfg = load_config()
    assert cfg.dino.n_global == 2 and cfg.filter.confidence_threshold == 0.4
    assert cfg.scoring.p_target == 0.01 and cfg.paths.workdir == "work"


def test_overrides_and_seed(config_file):
    cfg = load_config(config_file, ["dino.epochs=3", "filter.confidence_threshold=0.5",
                                    "paths.workdir=elsewhere"], seed=11)
    assert cfg.dino.epochs == 3 and cfg.filter.confidence_threshold == 0.5
    assert cfg.paths.workdir == "elsewhere"
    assert {cfg.corpus.seed, cfg.dino.seed, cfg.filter.seed, cfg.finetune.seed, cfg.scoring.seed} == {11}
    assert parse_override("a.b=[1, 2]") == (["a", "b"], [1, 2])
    assert parse_override("a=hello") == (["a"], "hello")
    assert apply_overrides({"x": {"y": 1}}, ["x.z=2"]) == {"x": {"y": 1, "z": 2}}


@pytest.mark.parametrize("overrides", [["dino.nonsense=1"], ["bogus.x=1"], ["dino.epochs=many"],
                                       ["dino.epochs=1.5"], ["encoder.feature_dim=7"],
                                       ["dino.teacher_temp=0.5"], ["noequals"],
                                       ["scoring.eval_speakers=200"]])
def test_invalid_configs(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides)


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")
    (tmp_path / "c.json").write_text("[1]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_config_hash():
    assert config_hash(PipelineConfig()) == config_hash(load_config())
    assert config_hash(load_config(None, ["dino.epochs=2"])) != config_hash(load_config())


# -- exit codes -----------------------------------------------------------------

def test_config_error_exit_code(capsys, tmp_path):
    code, _, err = run_cli(capsys, "generate", "--workdir", tmp_path, "--set", "dino.bogus=1")
    assert code == 2
    obj = json.loads(err.strip().splitlines()[-1])
    assert obj["error"] == "ConfigError" and obj["exit_code"] == 2 and obj["command"] == "generate"


def test_missing_input_exit_code(capsys, tmp_path, config_file):
    code, _, err = run_cli(capsys, "pretrain", "--config", config_file, "--workdir", tmp_path)
    assert code == 3 and "missing input artifact" in err


def test_locked_workdir(capsys, tmp_path, config_file):
    (tmp_path / ".lock").write_text("123")
    code, _, err = run_cli(capsys, "generate", "--config", config_file, "--workdir", tmp_path)
    assert code == 3 and "WorkdirLockedError" in err
    assert not (tmp_path / "corpus").exists()


def test_lock_released_after_failure(capsys, tmp_path, config_file):
    run_cli(capsys, "pretrain", "--config", config_file, "--workdir", tmp_path)
    assert not (tmp_path / ".lock").exists()


def test_exit_code_mapping():
    from cascade_spk.errors import (CascadeError, FormatError, InvalidRoleError,
                                    NumericalFailureError)
    assert cli.exit_code_for(ConfigError("x")) == 2
    assert cli.exit_code_for(InvalidRoleError("x")) == 2
    assert cli.exit_code_for(FormatError("x")) == 3
    assert cli.exit_code_for(FileNotFoundError("x")) == 3
    assert cli.exit_code_for(CascadeError("x")) == 3
    assert cli.exit_code_for(NumericalFailureError("x")) == 4
    assert cli.exit_code_for(RuntimeError("x")) == 5


def test_eval_perfect_separation(capsys, tmp_path, config_file):
    trials = [sc.Trial(["a"], "b", "target"), sc.Trial(["a"], "c", "nontarget")]
    sc.write_scores(tmp_path / "toy.txt", sc.TrialScoreSet(trials, np.array([0.9, 0.1])))
    code, out, _ = run_cli(capsys, "eval", "--config", config_file, "--workdir", tmp_path / "w",
                           "--scores", tmp_path / "toy.txt")
    assert code == 0 and json.loads(out)["eer"] == 0.0
    report = json.loads((tmp_path / "w" / "reports" / "toy.json").read_text())
    assert report["eer"] == 0.0 and report["min_dcf"] == 0.0


def test_eval_needs_tag_or_scores(capsys, tmp_path, config_file):
    code, _, _ = run_cli(capsys, "eval", "--config", config_file, "--workdir", tmp_path)
    assert code == 2


def test_bad_flag_values():
    with pytest.raises(SystemExit):
        cli.main(["finetune", "--use-filtered", "maybe"])
    with pytest.raises(SystemExit):
        cli.main(["finetune", "--init", "oracle"])


def test_model_tags():
    assert cli.model_tag("teacher", True) == "filtered_teacher"
    assert cli.model_tag("student", False, raw=True) == "unfiltered_student_raw"
    assert cli.model_tag("random", True) == "random"


# -- full pipeline --------------------------------------------------------------

def test_run_all_reports_ablation_grid(two_runs):
    root = two_runs[0]
    tags = sorted(p.stem for p in (root / "reports").iterdir())
    assert tags == ["filtered_student", "filtered_teacher", "unfiltered_student", "unfiltered_teacher"]
    for tag in tags:
        rep = json.loads((root / "reports" / f"{tag}.json").read_text())
        assert rep["tag"] == tag and 0 <= rep["eer"] <= 1
        assert rep["counts"] == {"targets": 50, "nontargets": 50}


def test_run_all_deterministic(two_runs):
    a, b = two_runs
    assert artifacts(a) == artifacts(b)
    for rel in artifacts(a):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_run_records(two_runs):
    root = two_runs[0]
    recs = [json.loads(l) for l in (root / "runs.jsonl").read_text().splitlines()]
    stages = [r["stage"] for r in recs]
    assert stages[:4] == ["generate", "pretrain", "filter", "pretrain"]
    assert stages[4:] == ["finetune", "score", "eval"] * 4
    assert len({r["config_hash"] for r in recs}) == 1
    assert all(set(r) == {"stage", "config_hash", "inputs", "outputs", "wall_time", "tool_version"}
               for r in recs)
    for r in recs:
        assert all((p if p.startswith("/") else str(root / p)) for p in r["outputs"])


@pytest.mark.parametrize("stage,argv,target", [
    ("score", ["score", "--init", "teacher", "--use-filtered", "true"], "scores/filtered_teacher.txt"),
    ("filter", ["filter"], "filter/confidence.jsonl"),
    ("finetune", ["finetune", "--init", "student"], "finetune/unfiltered_student/model.cspk"),
    ("eval", ["eval", "--tag", "unfiltered_teacher"], "reports/unfiltered_teacher.json"),
])
def test_stage_isolation(capsys, two_runs, config_file, tmp_path, stage, argv, target):
    root = tmp_path / "copy"
    shutil.copytree(two_runs[0], root)
    original = (root / target).read_bytes()
    (root / target).unlink()
    code, _, err = run_cli(capsys, *argv, "--config", config_file, "--workdir", root)
    assert code == 0, err
    assert (root / target).read_bytes() == original


def test_ground_truth_not_read_by_filter(capsys, two_runs, config_file, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(two_runs[0], root)
    recs = read_manifest(root / "corpus" / "train.jsonl")
    import dataclasses
    scrambled = [dataclasses.replace(r, truth_speakers=["nobody"], truth_quality="noisy") for r in recs]
    write_manifest(root / "corpus" / "train.jsonl", scrambled)
    original = (root / "filter" / "confidence.jsonl").read_bytes()
    code, _, _ = run_cli(capsys, "filter", "--config", config_file, "--workdir", root)
    assert code == 0 and (root / "filter" / "confidence.jsonl").read_bytes() == original


def test_raw_scoring_needs_override(capsys, two_runs, config_file, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(two_runs[0], root)
    ck = root / "pretrain" / "unfiltered" / "teacher.cspk"
    code, _, err = run_cli(capsys, "score", "--config", config_file, "--workdir", root, "--checkpoint", ck)
    assert code == 2 and "InvalidRoleError" in err
    code, out, _ = run_cli(capsys, "score", "--config", config_file, "--workdir", root,
                           "--init", "teacher", "--allow-raw-checkpoint")
    assert code == 0 and json.loads(out)["tag"] == "unfiltered_teacher_raw"
    code, _, _ = run_cli(capsys, "score", "--config", config_file, "--workdir", root,
                         "--init", "random", "--allow-raw-checkpoint")
    assert code == 2


def test_cohort_smaller_than_k(capsys, two_runs, config_file, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(two_runs[0], root)
    code, _, _ = run_cli(capsys, "score", "--config", config_file, "--workdir", root,
                         "--set", "scoring.asnorm_k=500")
    assert code == 2


# -- inspect --------------------------------------------------------------------

def test_inspect_formats(capsys, two_runs):
    root = two_runs[0]
    expect = {
        "pretrain/unfiltered/teacher.cspk": "format: CSPK checkpoint",
        "finetune/filtered_teacher/model.cspk": "num_classes: 11",
        "filter/confidence.jsonl": "summary: ",
        "reports/filtered_teacher.json": "format: metrics report",
        "corpus/train.jsonl": "format: manifest",
        "corpus/trials.txt": "format: trial list",
        "scores/filtered_teacher.txt": "format: score file",
    }
    for rel, needle in expect.items():
        code, out, err = run_cli(capsys, "inspect", root / rel)
        assert code == 0, err
        assert needle in out, rel
    feat = next((root / "corpus").rglob("*.cspf"))
    code, out, _ = run_cli(capsys, "inspect", feat)
    assert code == 0 and "frames: 200" in out


def test_inspect_checkpoint_lists_tensors(capsys, two_runs):
    code, out, _ = run_cli(capsys, "inspect", two_runs[0] / "pretrain" / "unfiltered" / "teacher.cspk")
    assert "role: teacher" in out and "embed.weight [8, 32]" in out


def test_inspect_errors(capsys, two_runs, tmp_path):
    data = (two_runs[0] / "pretrain" / "unfiltered" / "teacher.cspk").read_bytes()
    (tmp_path / "t.cspk").write_bytes(data[: len(data) // 2])
    code, _, err = run_cli(capsys, "inspect", tmp_path / "t.cspk")
    assert code == 3 and "trunc" in err.lower()
    (tmp_path / "x.bin").write_bytes(b"\x89ZZZ\xff\xfe")
    code, _, err = run_cli(capsys, "inspect", tmp_path / "x.bin")
    assert code == 3 and "CSPK" in err and "CSPF" in err


def test_inspect_does_not_mutate(capsys, two_runs):
    path = two_runs[0] / "filter" / "confidence.jsonl"
    before = path.read_bytes()
    run_cli(capsys, "inspect", path)
    assert path.read_bytes() == before
