import pytest
import torch

from compactvae.config import Config


def tiny_config(**overrides) -> Config:
    """A model small enough for unit tests to run in milliseconds."""
    base = {
        "geometry.count": 4, "geometry.n_vol": 128, "geometry.n_near": 128,
        "encoder.n_points": 64, "encoder.n_patches": 16, "encoder.n_latents": 4,
        "encoder.width": 32, "encoder.latent_dim": 8, "encoder.n_blocks": 1,
        "encoder.heads": 4, "encoder.patch_layers": 1, "encoder.n_freqs": 8,
        "decoder.resolution": 8, "decoder.patch_size": 2, "decoder.channels": 4,
        "decoder.n_layers": 1, "decoder.n_merged": 2, "decoder.latent_layers": 1,
        "fields.hidden": 16, "fields.grid_resolution": 16, "fields.coarse_resolution": 8,
        "training.batch_size": 2, "training.lr": 1e-3, "training.log_every": 1,
        "diffusion.width": 32, "diffusion.n_layers": 1, "diffusion.heads": 4,
        "diffusion.batch_size": 8,
    }
    base.update(overrides)
    return Config().replace(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# acceptance criterion number -> PASS/FAIL line, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria (slow ones train a model)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
