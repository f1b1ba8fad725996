import json

import pytest
import yaml

from synthaudit.audit import report_digest
from synthaudit.cli import (
    ConfigError,
    config_digest,
    load_config,
    main,
    run_compare,
)

TINY = {
    "corpus": {"n_total": 60},
    "gan": {"total_steps": 18, "batch_size": 8, "width_g": 8, "width_d": 8, "z_dim": 8,
            "log_every": 6},
    "downstream": {"epochs": 2, "width": 4, "augment": False},
    "attack": {"max_per_class": 10, "whitebox": {"epochs": 2, "hidden": [8]}},
    "audit": {"sample_n": 40, "shift_sample_n": 40, "min_count": 2},
}


def write_config(tmp_path, out_name="run", extra=None):
    cfg = json.loads(json.dumps(TINY))
    cfg["output_dir"] = str(tmp_path / out_name)
    if extra:
        for k, v in extra.items():
            cfg.setdefault(k, {}).update(v) if isinstance(v, dict) else cfg.update({k: v})
    path = tmp_path / f"{out_name}.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestConfig:
    def test_defaults_load(self):
        cfg = load_config()
        assert cfg["gan"]["gamma"] == 2.0
        assert cfg["downstream"]["weights"] == {
            "protest": 1.0, "violence": 10.0, "attributes": 5.0,
        }

    def test_unknown_key_rejected_with_path(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text(yaml.safe_dump({"gan": {"gama": 1}}))
        with pytest.raises(ConfigError, match="gan.gama"):
            load_config(p)

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError, match="gan.nope"):
            load_config(overrides=["gan.nope=1"])

    def test_override_propagates(self):
        cfg = load_config(overrides=["gan.gamma=0", "downstream.epochs=7"])
        assert cfg["gan"]["gamma"] == 0
        assert cfg["downstream"]["epochs"] == 7

    def test_open_dict_override(self):
        cfg = load_config(overrides=["corpus.protest_rate_bias.gender.Female=0.3"])
        assert cfg["corpus"]["protest_rate_bias"] == {"gender": {"Female": 0.3}}

    def test_digest_changes_with_config(self):
        a = load_config()
        b = load_config(overrides=["gan.gamma=0"])
        assert config_digest(a) != config_digest(b)
        assert config_digest(a) == config_digest(load_config())

    def test_validation_bounds(self):
        with pytest.raises(ConfigError, match="gamma"):
            load_config(overrides=["gan.gamma=-1"])
        with pytest.raises(ConfigError, match="n_total"):
            load_config(overrides=["corpus.n_total=3"])


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_pipe")
    cfg_path = write_config(tmp)
    code = main(["pipeline", "--config", str(cfg_path)])
    assert code == 0
    out = tmp / "run"
    return cfg_path, out


class TestPipeline:
    def test_writes_report(self, pipeline_run):
        _, out = pipeline_run
        report = json.loads((out / "audit" / "report.json").read_text())
        assert report["schema_version"] == 1
        kinds = set(report["sections"])
        assert {"generative", "utility", "fairness", "demographic_shift",
                "privacy", "attacks"} <= kinds
        assert set(report["sections"]["attacks"]["victims"]) == {"real", "synthetic"}

    def test_figures_and_csvs_alongside_report(self, pipeline_run):
        _, out = pipeline_run
        audit = out / "audit"
        assert (audit / "spd_cells.csv").exists()
        assert list(audit.glob("fig_*.png"))

    def test_stage_dirs_have_config_snapshots(self, pipeline_run):
        _, out = pipeline_run
        for stage in ("corpus", "gan", "synth", "downstream/real", "attacks", "audit"):
            assert (out / stage / "config.snapshot.json").exists()
            assert (out / stage / ".done").exists()

    def test_gan_log_has_header(self, pipeline_run):
        _, out = pipeline_run
        lines = (out / "gan" / "train_log.jsonl").read_text().splitlines()
        header = json.loads(lines[0])["header"]
        assert header["stage"] == "train-gan"
        assert header["gamma"] == 2.0

    def test_rerun_skips_completed_stages(self, pipeline_run, capsys):
        cfg_path, _ = pipeline_run
        assert main(["pipeline", "--config", str(cfg_path)]) == 0
        statuses = [json.loads(l)["status"] for l in capsys.readouterr().out.splitlines()]
        assert statuses and all(s == "skipped" for s in statuses)

    def test_compare_report_with_itself(self, pipeline_run):
        _, out = pipeline_run
        path = out / "audit" / "report.json"
        delta = run_compare(path, path)
        assert all(v == 0.0 for v in delta["deltas"].values())

    def test_compare_subcommand_exit_zero(self, pipeline_run, capsys):
        _, out = pipeline_run
        path = str(out / "audit" / "report.json")
        assert main(["compare", path, path]) == 0
        assert "deltas" in capsys.readouterr().out


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump({"nonsense": True}))
        assert main(["gen-corpus", "--config", str(bad)]) == 2

    def test_bad_override_is_2(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["gen-corpus", "--config", str(cfg), "gan.zzz=1"]) == 2

    def test_bad_jobs_is_2(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["gen-corpus", "--config", str(cfg), "--jobs", "0"]) == 2


class TestOutputRoot:
    def test_env_var_roots_relative_output(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SYNTHAUDIT_OUTPUT_ROOT", str(tmp_path / "root"))
        cfg = tmp_path / "cfg.yaml"
        body = json.loads(json.dumps(TINY))
        body["output_dir"] = "rel_run"
        cfg.write_text(yaml.safe_dump(body))
        assert main(["gen-corpus", "--config", str(cfg)]) == 0
        assert (tmp_path / "root" / "rel_run" / "corpus" / "manifest.csv").exists()


class TestDeterminism:
    def test_two_deterministic_runs_identical_reports(self, tmp_path, monkeypatch):
        cfg = tmp_path / "cfg.yaml"
        body = json.loads(json.dumps(TINY))
        body["output_dir"] = "run"
        cfg.write_text(yaml.safe_dump(body))
        digests = []
        for name in ("a", "b"):
            monkeypatch.setenv("SYNTHAUDIT_OUTPUT_ROOT", str(tmp_path / name))
            assert main(["pipeline", "--config", str(cfg), "--deterministic"]) == 0
            digests.append(report_digest(tmp_path / name / "run" / "audit" / "report.json"))
        assert digests[0] == digests[1]
