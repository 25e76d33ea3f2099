import dataclasses

import pytest

from implant_depth.config import (ModelConfig, RunConfig, TrainConfig,
                                  config_to_text, idpnet_defaults,
                                  ird_defaults, load_config, lr_at,
                                  save_config, text_to_config)
from implant_depth.errors import ConfigError


class TestLrSchedule:
    def test_detector_schedule(self):
        cfg = ird_defaults().train
        assert lr_at(0, cfg) == pytest.approx(1e-3)
        assert lr_at(39, cfg) == pytest.approx(1e-3)
        assert lr_at(40, cfg) == pytest.approx(1e-4)
        assert lr_at(59, cfg) == pytest.approx(1e-4)
        assert lr_at(60, cfg) == pytest.approx(1e-5)
        assert lr_at(79, cfg) == pytest.approx(1e-5)

    def test_depth_schedule(self):
        cfg = idpnet_defaults().train
        assert lr_at(19, cfg) == pytest.approx(1e-3)
        assert lr_at(20, cfg) == pytest.approx(1e-4)
        assert lr_at(29, cfg) == pytest.approx(1e-4)
        assert lr_at(30, cfg) == pytest.approx(1e-5)

    def test_no_drops(self):
        cfg = dataclasses.replace(idpnet_defaults().train, lr_drop_epochs=())
        assert all(lr_at(e, cfg) == pytest.approx(1e-3) for e in range(40))

    def test_non_increasing(self):
        cfg = ird_defaults().train
        values = [lr_at(e, cfg) for e in range(cfg.epochs)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_epoch_out_of_range(self):
        cfg = idpnet_defaults().train
        with pytest.raises(ConfigError):
            lr_at(40, cfg)
        with pytest.raises(ConfigError):
            lr_at(-1, cfg)


class TestValidation:
    def test_drops_must_increase(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_drop_epochs=(30, 20), epochs=40).validate()

    def test_drops_below_epochs(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_drop_epochs=(20, 45), epochs=40).validate()

    def test_positive_epochs(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0).validate()

    def test_batch_size(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0).validate()

    def test_stage_names(self):
        with pytest.raises(ConfigError):
            TrainConfig(stage="both").validate()

    def test_crop_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(crop_d=30).validate()
        with pytest.raises(ConfigError):
            ModelConfig(crop_hw=24).validate()

    def test_defaults_valid(self):
        ird_defaults().validate()
        idpnet_defaults().validate()


class TestRoundTrip:
    def test_text_round_trip(self):
        cfg = idpnet_defaults(seed=17, enable_tpl=False,
                              lr_drop_epochs=(5, 9), epochs=12)
        text = config_to_text(cfg)
        assert text_to_config(text) == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = ird_defaults(seed=3, augment=False)
        path = tmp_path / "run.ini"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_unknown_key_rejected(self):
        text = config_to_text(idpnet_defaults()) + "\n[train]\nbogus = 1\n"
        with pytest.raises(ConfigError):
            text_to_config(config_to_text(idpnet_defaults()).replace(
                "seed = 0", "seed = 0\nbogus = 1"))

    def test_bad_value_rejected(self):
        text = config_to_text(idpnet_defaults()).replace(
            "epochs = 40", "epochs = forty")
        with pytest.raises(ConfigError):
            text_to_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.ini")

    def test_empty_drop_list_round_trips(self):
        cfg = idpnet_defaults(lr_drop_epochs=())
        assert text_to_config(config_to_text(cfg)) == cfg
