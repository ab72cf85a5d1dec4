from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from teebranch.cli import (
    EXIT_EMPTY_FRONT,
    EXIT_ERROR,
    EXIT_MISSING_ARTIFACT,
    EXIT_OK,
    main,
)
from teebranch.experiment import (
    SpecError,
    build_summary,
    cmd_attack,
    cmd_profile,
    cmd_report,
    cmd_search,
    cmd_train,
    entropy_audit,
    file_digest,
    load_experiment_spec,
    load_manifest,
    write_default_spec,
)
from teebranch.latency import CostProfile, save_profile
from teebranch.space import default_ranges, save_ranges


def write_small_spec(directory: Path, **overrides) -> Path:
    """A spec small enough for an end-to-end pipeline run in tests."""
    directory.mkdir(parents=True, exist_ok=True)
    save_ranges(default_ranges(num_blocks=4), directory / "ranges.yaml")
    profile = CostProfile(
        gpu_block_ms=(2.0, 3.0, 2.5, 3.5),
        adapter_ms=(0.2, 0.2, 0.3, 0.3),
        transfer_base_ms=0.5,
        transfer_bandwidth_bytes_per_ms=8192.0,
        tee_cost_coeffs=(2e-6, 0.1),
        classifier_ms=0.05,
    )
    save_profile(profile, directory / "profile.yaml")
    doc = {
        "version": 1,
        "ranges": "ranges.yaml",
        "profile": "profile.yaml",
        "data": {"n_train": 256, "n_val": 64, "n_test": 64,
                 "pretrain_seed": 1001, "task_seed": 2002, "aux_seed": 3003},
        "backbone": {"depth": 4, "width": 6, "num_classes": 8, "seed": 7,
                     "pretrain_epochs": 2, "pretrain_lr": 0.25, "batch_size": 64},
        "teacher": {"epochs": 3, "lr": 0.25, "seed": 8},
        "search": {"alpha": 0.5, "h_limit_bytes": 600_000, "batch_size": 2,
                   "iterations": 2, "init_samples": 4, "mc_samples": 16, "seed": 0,
                   "candidate_pool": 24},
        "candidate": {"lr": 0.5, "batch_size": 32, "epochs": 1},
        "train": {"beta": 0.5, "lambda": 0.1, "kd_temperature": 4.0, "lr": 0.3,
                  "clip_threshold": 2.0, "epochs": 3, "batch_size": 64, "seed": 11},
        "attack": {"scenarios": ["NoShield", "BlackBox", "PoisonedREE"],
                   "query_fraction": 0.01, "seeds": [0, 1]},
        "profile_eval": {"num_samples": 8, "seed": 3, "cpu_slowdown": 8.0},
        "audit": True,
    }
    doc.update(overrides)
    spec_path = directory / "experiment.yaml"
    spec_path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return spec_path


class TestSpecParsing:
    def test_default_template_loads(self, tmp_path):
        spec_path = write_default_spec(tmp_path)
        spec = load_experiment_spec(spec_path)
        assert spec.search.alpha == 0.5
        assert spec.attack.query_fraction == 0.01
        assert spec.train.lambda_ == 0.1

    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = write_small_spec(tmp_path)
        doc = yaml.safe_load(path.read_text())
        doc["surprise"] = 1
        path.write_text(yaml.safe_dump(doc))
        with pytest.raises(SpecError, match="surprise"):
            load_experiment_spec(path)

    def test_unknown_nested_key_rejected(self, tmp_path):
        path = write_small_spec(tmp_path)
        doc = yaml.safe_load(path.read_text())
        doc["train"]["typo_field"] = 3
        path.write_text(yaml.safe_dump(doc))
        with pytest.raises(SpecError, match="typo_field"):
            load_experiment_spec(path)

    def test_bad_version_rejected(self, tmp_path):
        path = write_small_spec(tmp_path, version=99)
        with pytest.raises(SpecError, match="version"):
            load_experiment_spec(path)

    def test_missing_referenced_file_rejected(self, tmp_path):
        path = write_small_spec(tmp_path, ranges="missing.yaml")
        with pytest.raises(SpecError, match="not found"):
            load_experiment_spec(path)

    def test_cli_reports_spec_error(self, tmp_path, capsys):
        path = write_small_spec(tmp_path, version=99)
        code = main(["profile", "--spec", str(path), "--out", str(tmp_path / "out")])
        assert code == EXIT_ERROR
        assert "spec error" in capsys.readouterr().err

    def test_malformed_profile_file_is_a_parse_error(self, tmp_path, capsys):
        path = write_small_spec(tmp_path)
        (tmp_path / "profile.yaml").write_text(
            "version: 1\nkind: cost-profile\ngpu_block_ms: [1.0]\n")
        code = main(["profile", "--spec", str(path), "--out", str(tmp_path / "out")])
        assert code == EXIT_ERROR
        assert "malformed" in capsys.readouterr().err


class TestProfileStage:
    def test_report_rows_and_oracle_column(self, tmp_path):
        spec = load_experiment_spec(write_small_spec(tmp_path))
        report = cmd_profile(spec, tmp_path / "out")
        lines = report.read_text().strip().splitlines()
        assert len(lines) == 8 + 1
        header = lines[0].split(",")
        i_par = header.index("parallel_ms")
        i_base = header.index("backbone_sum_ms")
        i_diff = header.index("oracle_diff_ms")
        i_k = header.index("active_blocks")
        for line in lines[1:]:
            cells = line.split(",")
            assert float(cells[i_diff]) < 1e-9
            assert float(cells[i_par]) >= float(cells[i_base]) - 1e-12
            if cells[i_k] == "0":
                assert float(cells[i_par]) == pytest.approx(float(cells[i_base]))
        manifest = load_manifest(tmp_path / "out")
        assert manifest["stages"]["profile"]["completed"]
        assert (tmp_path / "out" / "figures" / "schedule_trace.png").exists()

    def test_sequential_baseline_dominates_parallel(self, tmp_path):
        spec = load_experiment_spec(write_small_spec(tmp_path))
        report = cmd_profile(spec, tmp_path / "out")
        rows = report.read_text().strip().splitlines()[1:]
        header = report.read_text().splitlines()[0].split(",")
        i_par, i_seq = header.index("parallel_ms"), header.index("sequential_baseline_ms")
        i_k = header.index("active_blocks")
        active = [r.split(",") for r in rows if r.split(",")[i_k] != "0"]
        assert active
        wins = sum(float(c[i_seq]) >= float(c[i_par]) for c in active)
        assert wins == len(active)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    spec_path = write_small_spec(base / "spec")
    out = base / "run"
    spec = load_experiment_spec(spec_path)
    cmd_profile(spec, out)
    result = cmd_search(spec, out)
    assert not result.empty
    cmd_train(spec, out)
    cmd_attack(spec, out)
    cmd_report(out)
    return spec_path, out


class TestPipelineEndToEnd:

    def test_all_stage_artifacts_present(self, run_dir):
        _, out = run_dir
        for name in ("profile_report.csv", "search_checkpoint.jsonl", "front.csv",
                     "selected_config.yaml", "victim_baseline.ckpt",
                     "victim_poisoned.ckpt", "curves_baseline.csv",
                     "curves_poisoned.csv", "attack_report.csv", "summary.txt",
                     "summary.json", "manifest.json"):
            assert (out / name).exists(), name

    def test_figures_rendered(self, run_dir):
        _, out = run_dir
        for name in ("schedule_trace.png", "pareto_front.png", "training_curves.png",
                     "attack_accuracy.png", "summary_overview.png"):
            assert (out / "figures" / name).exists(), name

    def test_manifest_lists_artifact_digests(self, run_dir):
        _, out = run_dir
        manifest = load_manifest(out)
        for stage in ("profile", "search", "train", "attack"):
            assert manifest["stages"][stage]["completed"]
            for name, digest in manifest["stages"][stage]["artifacts"].items():
                target = out / name if (out / name).exists() else out / "figures" / name
                assert file_digest(target) == digest

    def test_summary_checks_and_cross_references(self, run_dir):
        _, out = run_dir
        summary = json.loads((out / "summary.json").read_text())
        assert summary["missing_stages"] == []
        assert summary["acceptance_checks"]["latency_lower_bound"] is True
        assert summary["stage_digests"]["search"] == \
            load_manifest(out)["stages"]["search"]["artifacts"]

    def test_report_idempotent(self, run_dir):
        _, out = run_dir
        before_txt = (out / "summary.txt").read_bytes()
        before_json = (out / "summary.json").read_bytes()
        before_fig = (out / "figures" / "summary_overview.png").read_bytes()
        cmd_report(out)
        assert (out / "summary.txt").read_bytes() == before_txt
        assert (out / "summary.json").read_bytes() == before_json
        assert (out / "figures" / "summary_overview.png").read_bytes() == before_fig

    def test_selected_config_on_front_maximizes_score(self, run_dir):
        _, out = run_dir
        rows = (out / "front.csv").read_text().strip().splitlines()[1:]
        cells = [r.split(",") for r in rows]
        selected = [c for c in cells if c[-1] == "1"]
        assert len(selected) == 1
        assert selected[0][-2] == "1"  # selected row is on the front

    def test_checkpoint_header_echoes_search_settings(self, run_dir):
        spec_path, out = run_dir
        spec = load_experiment_spec(spec_path)
        header = json.loads(
            (out / "search_checkpoint.jsonl").read_text().splitlines()[0])
        assert header["settings"]["alpha"] == spec.search.alpha
        assert header["settings"]["h_limit_bytes"] == spec.search.h_limit_bytes
        assert header["settings"]["seed"] == spec.search.seed


class TestCliFlow:
    def test_missing_artifact_exit_code(self, tmp_path):
        spec_path = write_small_spec(tmp_path)
        code = main(["train", "--spec", str(spec_path), "--out", str(tmp_path / "empty")])
        assert code == EXIT_MISSING_ARTIFACT

    def test_empty_front_exit_code(self, tmp_path):
        spec_path = write_small_spec(tmp_path)
        doc = yaml.safe_load(spec_path.read_text())
        doc["search"]["h_limit_bytes"] = 4
        spec_path.write_text(yaml.safe_dump(doc))
        code = main(["search", "--spec", str(spec_path), "--out", str(tmp_path / "out")])
        assert code == EXIT_EMPTY_FRONT

    def test_report_on_empty_dir_lists_missing_stages(self, tmp_path, capsys):
        out = tmp_path / "fresh"
        out.mkdir()
        code = main(["report", "--out", str(out)])
        assert code == EXIT_MISSING_ARTIFACT
        assert "missing stages" in capsys.readouterr().out

    def test_write_default_spec_flag(self, tmp_path, capsys):
        code = main(["--write-default-spec", str(tmp_path / "tpl")])
        assert code == EXIT_OK
        assert (tmp_path / "tpl" / "experiment.yaml").exists()


class TestAudit:
    def test_audit_passes_for_seeded_code(self):
        with entropy_audit(True):
            rng = np.random.default_rng(0)
            rng.normal(size=10)

    def test_audit_catches_global_numpy(self):
        from teebranch.experiment import AuditError
        with pytest.raises(AuditError, match="numpy"):
            with entropy_audit(True):
                np.random.rand(3)

    def test_audit_catches_global_python_random(self):
        import random

        from teebranch.experiment import AuditError
        with pytest.raises(AuditError, match="python"):
            with entropy_audit(True):
                random.random()
