import pytest

from msfuse.config import (RunConfig, TrainConfig, desk_profile, dump_run_config, load_run_config)


def test_paper_defaults():
    cfg = TrainConfig()
    assert (cfg.image.lr, cfg.image.batch_size, cfg.image.epochs, cfg.image.patience) == (1e-5, 10, 500, 50)
    assert cfg.image.margin == 1.5 and cfg.image.minority_factor == 10
    assert (cfg.text.lr, cfg.text.batch_size, cfg.text.epochs, cfg.text.patience) == (1e-3, 128, 500, 50)
    assert (cfg.fusion.lr, cfg.fusion.batch_size, cfg.fusion.epochs, cfg.fusion.patience) == (1e-4, 16, 200, 50)
    assert (cfg.model.decoder_hidden, cfg.model.decoder_layers, cfg.model.attention_channels) == (512, 4, 8)
    cfg.validate()
    desk_profile().validate()


def test_validate_rejects_patience_above_epochs():
    cfg = TrainConfig()
    cfg.fusion.patience = 300
    with pytest.raises(ValueError):
        cfg.validate()


def test_dict_round_trip():
    cfg = desk_profile(seed=3, milestone=6.0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == TrainConfig.from_dict(cfg.to_dict()).digest()


def test_ini_overrides(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[synth]\npatient_count = 50\nvolume_dims = 16,16,8\n"
                    "[fusion]\nlr = 0.01\n[model]\ndecoder_hidden = 32\n[train]\nmilestone = 6.0\n")
    run = load_run_config(path)
    assert run.synth.patient_count == 50 and run.synth.volume_dims == (16, 16, 8)
    assert run.train.fusion.lr == 0.01
    assert run.train.model.decoder_hidden == 32
    assert run.train.milestone == 6.0


@pytest.mark.parametrize("text", ["[fusion]\nmomentum = 0.9\n", "[optimizer]\nlr = 1\n", "[train]\nimage = 3\n"])
def test_ini_rejects_unknown(tmp_path, text):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ValueError):
        load_run_config(path)


def test_dump_then_load_is_identity(tmp_path):
    run = RunConfig(train=desk_profile(seed=5))
    path = tmp_path / "dump.ini"
    path.write_text(dump_run_config(run))
    back = load_run_config(path)
    assert back.train == run.train
    assert back.synth == run.synth
