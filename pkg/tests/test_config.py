"""Tests for configuration defaults, files and overrides."""

import pytest

from config.config import (ABLATION_PRESETS, AblationFlags, DimsConfig, TrainConfig, config_snapshot,
                           load_config_file, merge_overrides, snapshot_to_config)
from core.errors import ConfigError
from core.model import init_model
from core.numerics import Rng


def test_defaults_echo_published_hyperparameters():
    snapshot = config_snapshot(TrainConfig())
    assert snapshot["lr"] == 3e-5
    assert snapshot["warmup_iters"] == 100
    assert snapshot["adam_beta1"] == 0.9
    assert snapshot["adam_beta2"] == 0.98
    assert snapshot["adam_eps"] == 1e-6
    assert snapshot["weight_decay"] == 0.001
    assert snapshot["ema_beta"] == 0.95
    assert snapshot["tau"] == 0.07
    assert snapshot["weighting"] == "fixed"
    assert snapshot["learnable_tau"] is False


def test_loss_weights_start_at_one():
    state = init_model(TrainConfig(dims="tiny").dims_config(), Rng(0))
    assert float(state.online.s_inter.exp().reciprocal()) == 1.0
    assert float(state.online.s_intra.exp().reciprocal()) == 1.0


def test_config_file(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("# desk run\nlr = 0.001\nema_beta = 0.9\n\nuse_intra = false\nflip_prob = 0.25\nk = 6\nclasses = 4\n")
    cfg = load_config_file(path)
    assert cfg.lr == 0.001 and cfg.ema_beta == 0.9
    assert cfg.ablation.use_intra is False
    assert cfg.augment.flip_prob == 0.25
    assert cfg.latent.k == 6
    assert cfg.dims_config().vocab_size == 2 + 6 * 8


def test_config_file_errors(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("learning_rate = 0.1\n")
    with pytest.raises(ConfigError):
        load_config_file(path)
    path.write_text("lr 0.1\n")
    with pytest.raises(ConfigError):
        load_config_file(path)
    with pytest.raises(FileNotFoundError):
        load_config_file(tmp_path / "missing.txt")


def test_overrides_win_and_validate():
    cfg = merge_overrides(TrainConfig(), {"ema-beta": "0.5", "tau": 0.1, "seed": None})
    assert cfg.ema_beta == 0.5 and cfg.tau == 0.1 and cfg.seed == 0
    with pytest.raises(ConfigError):
        merge_overrides(TrainConfig(), {"ema_beta": 1.0})
    with pytest.raises(ConfigError):
        merge_overrides(TrainConfig(), {"lr": 0})
    with pytest.raises(ConfigError):
        merge_overrides(TrainConfig(), {"warmup_iters": -1})
    with pytest.raises(ConfigError):
        merge_overrides(TrainConfig(), {"use_contrastive": "false"})


def test_overrides_do_not_mutate_base():
    base = TrainConfig()
    merge_overrides(base, {"use_inter": False})
    assert base.ablation.use_inter is True


def test_snapshot_round_trip():
    cfg = merge_overrides(TrainConfig(), {"lr": 1e-3, "use_intra": False, "noise_sigma": 0.2, "dims": "tiny"})
    assert config_snapshot(snapshot_to_config(config_snapshot(cfg))) == config_snapshot(cfg)


def test_dims_presets():
    desk = DimsConfig.from_preset("desk")
    assert (desk.d_enc, desk.d_pre, desk.d_cl, desk.d_ncl, desk.predictor_bottleneck) == (64, 128, 64, 1024, 256)
    ratio = DimsConfig.from_preset("full-scale")
    assert ratio.d_ncl >= ratio.d_pre >= ratio.d_cl
    with pytest.raises(ConfigError):
        DimsConfig.from_preset("huge")
    with pytest.raises(ConfigError):
        DimsConfig.from_preset("desk", d_cl=0)


def test_ablation_presets():
    assert list(ABLATION_PRESETS) == ["cl", "cl+inter", "cl+inter+intra", "clipin"]
    assert ABLATION_PRESETS["clipin"] == AblationFlags()
    assert all(flags.use_contrastive for flags in ABLATION_PRESETS.values())


def test_full_scale_keeps_legacy_alias():
    assert DimsConfig.from_preset("paper-ratio") == DimsConfig.from_preset("full-scale")
    cfg = merge_overrides(TrainConfig(), {"dims": "paper-ratio"})
    assert cfg.dims_config() == DimsConfig.from_preset("full-scale", vocab_size=cfg.latent.vocab_size)


def test_shifted_corpus_settings():
    cfg = TrainConfig()
    assert (cfg.ood_n_samples, cfg.ood_looseness_rate, cfg.ood_noise_sigma) == (512, 0.3, 0.05)
    shifted = cfg.ood_latent()
    assert (shifted.looseness_rate, shifted.noise_sigma) == (0.3, 0.05)
    assert (shifted.k, shifted.classes) == (cfg.latent.k, cfg.latent.classes)
    assert merge_overrides(cfg, {"ood_n_samples": 0}).ood_n_samples == 0
    with pytest.raises(ConfigError):
        merge_overrides(cfg, {"ood_n_samples": -1})
    with pytest.raises(ConfigError):
        merge_overrides(cfg, {"ood_looseness_rate": 1.5})
