import pytest

from frontsim.cli import KEYS, build_parser, main
from frontsim.config import SCHEMA, ConfigError, ExperimentConfig, derive_int, derive_rng


# -- config -------------------------------------------------------------------------------------


def test_defaults_cover_schema():
    cfg = ExperimentConfig()
    assert all(cfg[k] == SCHEMA[k].default for k in SCHEMA)


def test_roundtrip_preserves_every_key():
    cfg = ExperimentConfig()
    cfg.apply_overrides(["channel.variant=mt_misalign", "noise.sigma=2.5", "lsd.enabled=false",
                         "channel.d=auto", "spectre.secret=0xdeadbeef"])
    again = ExperimentConfig.loads(cfg.dumps())
    assert again == cfg
    assert again.dumps() == cfg.dumps()


def test_comments_and_int_forms():
    cfg = ExperimentConfig.loads("# a comment\nseed = 0x10\nchannel.d = 4\n")
    assert cfg["seed"] == 16 and cfg.optional("channel.d") == 4
    assert ExperimentConfig().optional("channel.d") is None


@pytest.mark.parametrize("text", ["bogus.key = 1\n", "seed = abc\n", "lsd.enabled = maybe\n"])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.loads(text)


def test_override_syntax_and_unknown_keys():
    cfg = ExperimentConfig()
    with pytest.raises(ConfigError):
        cfg.apply_overrides(["seed"])
    with pytest.raises(ConfigError):
        cfg.apply_overrides(["nope=1"])


def test_builders_follow_keys():
    cfg = ExperimentConfig()
    cfg.apply_overrides(["cost.mite=20", "lsd.enabled=false", "channel.variant=nonmt_evict"])
    assert cfg.cost_model().cycles_mite == 20
    assert cfg.frontend_factory()().lsd_geom.enabled is False
    assert cfg.frontend_factory(lsd_enabled=True)().lsd_geom.enabled is True
    assert cfg.channel_params().variant == "nonmt_evict"


def test_derived_streams_are_independent_and_stable():
    a = derive_rng(1, "channel").integers(0, 1 << 30, 4).tolist()
    assert a == derive_rng(1, "channel").integers(0, 1 << 30, 4).tolist()
    assert a != derive_rng(1, "message").integers(0, 1 << 30, 4).tolist()
    assert a != derive_rng(2, "channel").integers(0, 1 << 30, 4).tolist()
    assert derive_int(5, "message") == derive_int(5, "message")


# -- command line -----------------------------------------------------------------------------------


def run(tmp_path, *argv):
    return main([*argv, "--output-dir", str(tmp_path)])


@pytest.mark.parametrize("cmd", sorted(KEYS))
def test_help_lists_config_keys(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([cmd, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert all(k in out for k in KEYS[cmd])


def test_missing_output_dir_exits_1(tmp_path, capsys):
    assert main(["histogram", "--output-dir", str(tmp_path / "absent")]) == 1
    assert "does not exist" in capsys.readouterr().err


def test_invalid_d_exits_1(tmp_path, capsys):
    assert run(tmp_path, "channel", "--set", "channel.d=9") == 1
    assert "d must" in capsys.readouterr().err


def test_unknown_key_exits_1(tmp_path):
    assert run(tmp_path, "channel", "--set", "channel.frobnicate=1") == 1


def test_strict_inconclusive_exits_2(tmp_path):
    argv = ["patch", "--set", "noise.sigma=500", "--set", "patch.trials=2"]
    assert run(tmp_path, *argv) == 0
    assert run(tmp_path, *argv, "--strict") == 2
    assert "inconclusive" in (tmp_path / "patch.csv").read_text()


def test_precedence_seed_flag_over_set_over_file(tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text("seed = 1\nchannel.length = 16\n")
    args = build_parser().parse_args(["channel", "--config", str(cfg_file), "--set", "seed=2",
                                      "--set", "channel.length=8"])
    from frontsim.cli import load_config
    cfg = load_config(args)
    assert (cfg["seed"], cfg["channel.length"]) == (2, 8)
    args = build_parser().parse_args(["channel", "--config", str(cfg_file), "--set", "seed=2",
                                      "--seed", "3"])
    assert load_config(args)["seed"] == 3


FAST = {
    "histogram": ["--set", "noise.sigma=1", "--set", "histogram.samples=500"],
    "channel": ["--set", "noise.sigma=3", "--set", "channel.length=64"],
    "sweep-d": ["--set", "noise.sigma=3", "--set", "channel.length=32"],
    "spectre": ["--secret", "random", "--set", "noise.sigma=1"],
    "patch": ["--set", "noise.sigma=0.5", "--set", "patch.trials=2"],
    "fingerprint": ["--set", "fingerprint.runs=2", "--set", "fingerprint.duration_s=1"],
}
OUTPUTS = {"histogram": "histogram.csv", "channel": "channel.csv", "sweep-d": "sweep_d.csv",
           "spectre": "spectre.csv", "patch": "patch.csv", "fingerprint": "fingerprint.csv"}


@pytest.mark.parametrize("cmd", sorted(FAST))
def test_same_seed_byte_identical(cmd, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    assert run(a, cmd, "--seed", "11", *FAST[cmd]) == 0
    assert run(b, cmd, "--seed", "11", *FAST[cmd]) == 0
    assert sorted(p.name for p in a.iterdir()) == sorted(p.name for p in b.iterdir())
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes()
    assert (a / OUTPUTS[cmd]).stat().st_size > 0


def test_different_seed_changes_noisy_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    run(a, "histogram", "--seed", "1", *FAST["histogram"])
    run(b, "histogram", "--seed", "2", *FAST["histogram"])
    assert (a / "histogram.csv").read_bytes() != (b / "histogram.csv").read_bytes()


def test_channel_counters_written(tmp_path):
    assert run(tmp_path, "channel", "--set", "channel.length=16") == 0
    rows = (tmp_path / "counters.csv").read_text().splitlines()
    assert len(rows) >= 1 and rows[0]


def test_fingerprint_from_csv_victims(tmp_path):
    from frontsim.fingerprint import synthetic_victim, write_victim_csv
    paths = []
    for n in ("cnn_a", "cnn_c"):
        p = tmp_path / f"{n}.csv"
        write_victim_csv(synthetic_victim(n, 1.0), p)
        paths.append(str(p))
    assert run(tmp_path, "fingerprint", "--set", "fingerprint.victims=" + ",".join(paths),
               "--set", "fingerprint.runs=2") == 0
    assert (tmp_path / "fingerprint.csv").read_text().count("\n") == 5
    assert run(tmp_path, "fingerprint", "--set", "fingerprint.victims=/no/such.csv") == 1
