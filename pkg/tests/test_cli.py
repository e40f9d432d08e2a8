import numpy as np
import pytest

from iosda import cli, datahub
from iosda.config import KEYS, RunConfig, full_scale, parse_text
from iosda.errors import ConfigError
from iosda.evalkit import read_metrics_csv

TINY = [
    "synth.feat_dim=6", "synth.samples_per_class=30", "timeline.n_known=2", "synth.open_per_domain=1",
    "gan.z_dim=8", "gan.gen_hidden=16", "gan.disc_hidden=16", "gan.epochs=5",
    "meosda.extractor_dims=16,8", "meosda.head_hidden=8", "meosda.epochs=3", "meosda.batch_size=16",
    "timeline.threshold=0.4", "verbosity=quiet",
]


def tiny_args(*extra):
    out = []
    for item in TINY:
        out += ["--set", item]
    return out + list(extra)


# ------------------------------------------------------------------ config


def test_defaults_cover_every_key():
    cfg = RunConfig()
    assert set(cfg.values) == set(KEYS)
    assert cfg["timeline.threshold"] == 0.95
    assert cfg["timeline.replay_per_class"] == 100
    assert cfg["meosda.t_boundary"] == 0.5
    assert cfg.synth_spec().n_known == cfg.timeline_config().n_known == 4


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="meosda.epoch"):
        RunConfig({"meosda.epoch": "3"})


@pytest.mark.parametrize("key,value", [("gan.epochs", "many"), ("meosda.batch_norm", "maybe"),
                                       ("timeline.threshold", "1.5"), ("synth.domains", "1"),
                                       ("verbosity", "loud"), ("gan.gen_hidden", "")])
def test_bad_values_rejected(key, value):
    with pytest.raises(ConfigError):
        RunConfig({key: value})


def test_parse_text_comments_and_errors():
    assert parse_text("# header\nseed = 3  # trailing\n\nmeosda.epochs=4\n") == {"seed": "3", "meosda.epochs": "4"}
    with pytest.raises(ConfigError, match="cfg:2"):
        parse_text("seed=1\nnot a pair\n", "cfg")


def test_snapshot_round_trip(tmp_path):
    cfg = RunConfig({"seed": "9", "gan.gen_hidden": "32, 16", "meosda.batch_norm": "false"})
    cfg.write(tmp_path / "config.txt")
    back = RunConfig.load(tmp_path / "config.txt")
    assert back.values == cfg.values
    assert back.to_text() == cfg.to_text()


def test_full_scale_overrides_are_valid():
    cfg = RunConfig(full_scale())
    assert cfg.meosda_config().extractor_dims == (1024, 512)
    assert cfg.gan_config().z_dim == 2000


def test_seed_precedence(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("meosda.epochs=2\n")
    assert RunConfig.load(p, env={"IOSDA_SEED": "11"})["seed"] == 11
    assert RunConfig.load(p, {"seed": "4"}, env={"IOSDA_SEED": "11"})["seed"] == 4
    assert RunConfig.load(p, {"seed": "4"}, seed=6, env={"IOSDA_SEED": "11"})["seed"] == 6
    assert RunConfig.load(p, env={})["seed"] == 0


# --------------------------------------------------------------------- cli


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.txt"
    assert cli.main(["run", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_unknown_key_is_usage_error(capsys):
    assert cli.main(["run", "--set", "bogus=1"]) == 1
    assert "bogus" in capsys.readouterr().err


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--no-such-flag"])
    assert exc.value.code == 1


def test_help_lists_commands_and_keys(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("gen-synth", "run", "eval", "grad-check", "export-embeddings"):
        assert cmd in out
    with pytest.raises(SystemExit):
        cli.main(["run", "--help"])
    out = capsys.readouterr().out
    assert "meosda.epochs=30" in out and "IOSDA_SEED" in out


def test_missing_data_file_is_data_error(tmp_path):
    args = tiny_args("--out", str(tmp_path / "r"), "--set", f"data.paths={tmp_path / 'x.csv'}")
    assert cli.main(["run"] + args) == 2


def test_grad_check_passes(capsys):
    assert cli.main(["grad-check", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "7/7 checks passed" in out


def test_grad_check_env_seed(monkeypatch, capsys):
    monkeypatch.setenv("IOSDA_SEED", "abc")
    assert cli.main(["grad-check"]) == 1


def test_same_seed_gives_identical_metrics(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run"] + tiny_args("--seed", "7", "--out", str(a))) == 0
    assert cli.main(["run"] + tiny_args("--seed", "7", "--out", str(b))) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert "seed=7\n" in (a / "config.txt").read_text()


def test_snapshot_reproduces_run(tmp_path):
    first = tmp_path / "first"
    assert cli.main(["run"] + tiny_args("--seed", "3", "--out", str(first))) == 0
    again = tmp_path / "again"
    assert cli.main(["run", "--config", str(first / "config.txt"), "--out", str(again)]) == 0
    assert (first / "metrics.csv").read_bytes() == (again / "metrics.csv").read_bytes()


def test_env_seed_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("IOSDA_SEED", "12")
    out = tmp_path / "r"
    assert cli.main(["run"] + tiny_args("--out", str(out))) == 0
    assert "seed=12\n" in (out / "config.txt").read_text()


def test_eval_and_export(tmp_path, capsys):
    run = tmp_path / "run"
    assert cli.main(["run"] + tiny_args("--out", str(run))) == 0
    capsys.readouterr()
    (run / "forgetting.csv").unlink()
    assert cli.main(["eval", str(run)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split() == ["metric", "D2", "D3", "AVG"]
    assert (run / "forgetting.csv").read_text().splitlines()[0] == "domain,A_OS,F_OS,A_OSstar,F_OSstar"

    original = (run / "embeddings_t3.csv").read_bytes()
    exported = tmp_path / "emb.csv"
    assert cli.main(["export-embeddings", str(run), "3", "--out", str(exported)]) == 0
    assert exported.read_bytes() == original
    assert cli.main(["export-embeddings", str(run), "2", "--out", str(exported)]) == 0
    assert exported.read_bytes() == (run / "embeddings_t2.csv").read_bytes()
    assert cli.main(["export-embeddings", str(run), "1"]) == 2
    assert cli.main(["export-embeddings", str(run), "9"]) == 2
    assert cli.main(["eval", str(tmp_path)]) == 2


def test_gen_synth_then_run_from_files(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["gen-synth", "--out", str(data), "--format", "csv"] + tiny_args()) == 0
    files = sorted(data.glob("domain*.csv"))
    assert [f.name for f in files] == ["domain1.csv", "domain2.csv", "domain3.csv"]
    d2 = datahub.load_features(files[1])
    assert not d2.labels_visible
    assert np.all(d2.training_view().labels == datahub.HIDDEN)

    from_files, synth = tmp_path / "files", tmp_path / "synth"
    paths = ",".join(str(f) for f in files)
    assert cli.main(["run"] + tiny_args("--out", str(from_files), "--set", f"data.paths={paths}")) == 0
    assert cli.main(["run"] + tiny_args("--out", str(synth))) == 0
    # CSV stores exact float64 text, so both runs see identical data
    assert (from_files / "metrics.csv").read_bytes() == (synth / "metrics.csv").read_bytes()


def test_gen_synth_binary(tmp_path):
    assert cli.main(["gen-synth", "--out", str(tmp_path), "--format", "bin"] + tiny_args()) == 0
    d1 = datahub.load_features(tmp_path / "domain1.bin")
    assert d1.domain_id == 1 and d1.labels_visible and d1.feat_dim == 6


def test_seeds_fan_out(tmp_path, capsys):
    base = tmp_path / "multi"
    assert cli.main(["run"] + tiny_args("--out", str(base), "--seeds", "1,2", "--jobs", "2")) == 0
    for s in (1, 2):
        assert (base / f"seed{s}" / "metrics.csv").is_file()
        assert f"seed={s}\n" in (base / f"seed{s}" / "config.txt").read_text()
    assert cli.main(["run"] + tiny_args("--out", str(base), "--seeds", "x")) == 1
    assert cli.main(["run"] + tiny_args("--out", str(base), "--seeds", "1", "--jobs", "0")) == 1


@pytest.mark.slow
def test_default_config_run(tmp_path):
    out = tmp_path / "default"
    assert cli.main(["run", "--out", str(out), "--set", "verbosity=quiet"]) == 0
    keys = [(r.timestamp, r.domain_id) for r in read_metrics_csv(out / "metrics.csv")]
    assert keys == [(2, 2), (3, 2), (3, 3)]
