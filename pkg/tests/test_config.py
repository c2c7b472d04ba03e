import pytest

from impervia.config import Config, config_items, load_config, model_digest
from impervia.errors import ConfigError


def test_defaults_follow_reference_hyperparameters():
    cfg = Config()
    cfg.validate()
    assert cfg.timesteps == 1000
    assert cfg.beta_start == 1e-4 and cfg.beta_end == 0.02
    assert cfg.lr == 3e-4
    assert cfg.ema_rate == 0.99
    assert cfg.n_cond == 3
    assert cfg.patch_side == 128
    assert cfg.ddim_steps == 500 and cfg.ddim_eta == 0.0
    assert cfg.seeds == 5
    assert cfg.scales == (4, 8, 16, 32, 64, 128)
    assert cfg.cluster_k == 5
    assert cfg.lag_years == 10


def test_file_and_override_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nlr=0.001\nseeds=3\nscales=2,4,8\n")
    cfg = load_config(path, overrides={"seeds": "7"})
    assert cfg.lr == 0.001
    assert cfg.seeds == 7          # flag beats file
    assert cfg.scales == (2, 4, 8)
    assert cfg.timesteps == 1000   # default untouched


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("warp_drive=1\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_invalid_values_rejected(tmp_path):
    cases = ["timesteps=0", "beta_start=0.5\nbeta_end=0.1", "gn_groups=3",
             "ddim_eta=2.0", "scales=8,4", "ca_window=4", "signature_stat=mode"]
    for body in cases:
        path = tmp_path / "case.cfg"
        path.write_text(body + "\n")
        with pytest.raises(ConfigError):
            load_config(path)


def test_malformed_line_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("just words\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_items_cover_every_field():
    cfg = Config()
    items = config_items(cfg)
    assert set(items) == {f for f in cfg.__dataclass_fields__}
    assert items["scales"] == "4,8,16,32,64,128"


def test_model_digest_tracks_topology_only():
    a, b, c = Config(), Config(), Config()
    b.seeds = 99            # sampling knob: digest unchanged
    c.base_channels = 16    # topology knob: digest changes
    c.gn_groups = 4
    assert model_digest(a) == model_digest(b)
    assert model_digest(a) != model_digest(c)
    assert len(model_digest(a)) == 64
