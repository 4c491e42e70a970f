import pytest

from compactvae.config import (
    Config,
    compression_ratio,
    desk_config,
    latent_size,
    load_config,
    overfit_config,
    paper_config,
)
from compactvae.errors import ConfigError


def test_defaults_valid():
    for cfg in (desk_config(), paper_config(), overfit_config()):
        cfg.validate()


@pytest.mark.parametrize("overrides, fields", [
    ({"encoder.n_latents": 300}, ("encoder.n_latents", "encoder.n_patches")),
    ({"encoder.n_patches": 4096}, ("encoder.n_patches", "encoder.n_points")),
    ({"encoder.latent_dim": 256}, ("encoder.latent_dim", "encoder.width")),
    ({"decoder.patch_size": 7}, ("decoder.resolution", "decoder.patch_size")),
    ({"fields.coarse_resolution": 48}, ("fields.grid_resolution", "fields.coarse_resolution")),
    ({"encoder.heads": 7}, ("encoder.width", "encoder.heads")),
])
def test_validation_names_both_fields(overrides, fields):
    with pytest.raises(ConfigError) as info:
        desk_config().replace(**overrides)
    for f in fields:
        assert f in str(info.value)


@pytest.mark.parametrize("overrides", [
    {"decoder.keep_ratio": 0.0}, {"decoder.keep_ratio": 1.5}, {"training.lambda_kl": -1},
    {"encoder.position_mode": "sinusoidal"}, {"diffusion.sigma_min": 100.0},
])
def test_rejected_values(overrides):
    with pytest.raises(ConfigError):
        desk_config().replace(**overrides)


def test_unknown_keys():
    with pytest.raises(ConfigError, match="encoder.bogus"):
        desk_config().replace(**{"encoder.bogus": 1})
    with pytest.raises(ConfigError):
        Config.from_dict({"nope": {}})


def test_type_coercion():
    cfg = desk_config().replace(**{"encoder.n_latents": "16", "training.milestones": "10,20",
                                   "decoder.keep_ratio": "0.5"})
    assert cfg.encoder.n_latents == 16
    assert cfg.training.milestones == [10, 20]
    assert cfg.decoder.keep_ratio == 0.5
    with pytest.raises(ConfigError):
        desk_config().replace(**{"encoder.n_latents": "1.5"})


def test_precedence(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[encoder]\nn_latents = 16\nlatent_dim = 8\n\n[decoder]\nresolution = 32\n")
    cfg = load_config(path, {"encoder.n_latents": 8})
    assert cfg.encoder.n_latents == 8  # override beats file
    assert cfg.encoder.latent_dim == 8  # file beats default
    assert cfg.decoder.resolution == 32
    assert cfg.encoder.width == desk_config().encoder.width  # default
    base = overfit_config()
    assert load_config(path, base=base).encoder.width == base.encoder.width


def test_bad_file_and_preset(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[encoder\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(preset="huge")


def test_json_round_trip():
    cfg = overfit_config()
    import json

    assert Config.from_dict(json.loads(cfg.to_json())) == cfg


def test_compression_ratio():
    assert latent_size(64, 32) == 2048
    assert compression_ratio(64, 32, 1024) == 16
    assert compression_ratio(32, 32, 512, 64) == 32
