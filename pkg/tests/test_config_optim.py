import math

import numpy as np
import pytest

from cppf.autodiff import Tensor
from cppf.config import ConfigError, TrainConfig, dump_config, load_config, parse_config_text
from cppf.optim import SGD, lr_schedule


class TestConfigText:
    def test_round_trip(self):
        cfg = TrainConfig(phases=2, hidden_dims=(8, 4), ssl_temperature=0.3, use_esr=False, alpha_schedule="staged")
        assert TrainConfig(**parse_config_text(dump_config(cfg))) == cfg

    def test_default_round_trip(self):
        assert TrainConfig(**parse_config_text(dump_config(TrainConfig()))) == TrainConfig()

    def test_comments_and_blank_lines(self):
        assert parse_config_text("# header\n\nepochs = 3  # short\n") == {"epochs": 3}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="line:2: unknown config key 'epoch'"):
            parse_config_text("phases = 5\nepoch = 3\n", "line")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("epochs = 3\nepochs = 4\n")

    def test_bad_values(self):
        for text in ("epochs = three", "use_pc = maybe", "base_lr = fast", "nokey"):
            with pytest.raises(ConfigError):
                parse_config_text(text)

    def test_auto(self):
        assert parse_config_text("ssl_temperature = auto") == {"ssl_temperature": None}

    def test_load_with_overrides(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("epochs = 3\nwarmup_epochs = 1\nseed_model = 1\n")
        cfg = load_config(p, seed_model=4)
        assert cfg.epochs == 3 and cfg.seed_model == 4

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "none.txt")


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(batch_size=1),
            dict(esr_lambda=0.5),
            dict(chosen_proportion=1.0),
            dict(objective="byol"),
            dict(warmup_epochs=60),
            dict(alpha=-1.0),
            dict(alpha_stages=(0.0,)),
            dict(queue_mode="columns"),
            dict(epochs=0),
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_baseline(self):
        b = TrainConfig().as_baseline()
        assert b.is_baseline and b.use_past_teacher
        assert not TrainConfig().is_baseline

    def test_default_weights(self):
        cfg = TrainConfig()
        assert (cfg.esr_lambda, cfg.chosen_proportion, cfg.alpha, cfg.gamma_initial, cfg.gamma_final) == (2.0, 0.5, 0.1, 0.01, 1.0)
        assert cfg.alpha_pairs() == ((0.0, 0.0), (0.25, 1e-3), (0.5, 1e-2), (0.75, 1e-1))


class TestLrSchedule:
    def test_first_warmup_step(self):
        assert lr_schedule(0, 60, 0.1, 5) == pytest.approx(0.1 / 5, abs=1e-12)

    def test_warmup_is_linear(self):
        assert [lr_schedule(e, 60, 0.1, 5) for e in range(5)] == pytest.approx([0.02, 0.04, 0.06, 0.08, 0.1], abs=1e-12)

    def test_last_epoch_is_floor(self):
        assert abs(lr_schedule(59, 60, 0.1, 5) - 0.001) <= 1e-12
        assert abs(lr_schedule(9, 10, 0.5, 0, floor=0.02) - 0.02) <= 1e-12

    def test_cosine_closed_form(self):
        for e in range(5, 60):
            progress = (e - 5) / 54
            expected = 0.001 + 0.5 * (0.1 - 0.001) * (1 + math.cos(math.pi * progress))
            assert abs(lr_schedule(e, 60, 0.1, 5) - expected) <= 1e-12

    def test_decay_starts_at_base(self):
        assert abs(lr_schedule(5, 60, 0.1, 5) - 0.1) <= 1e-12


class TestSgd:
    def test_momentum_update(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD([p], momentum=0.9)
        for _ in range(2):
            p.grad = np.array([1.0])
            opt.step(0.1)
        # v1 = 1, v2 = 1.9
        assert p.data[0] == pytest.approx(1.0 - 0.1 - 0.19)

    def test_skips_missing_grad(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        SGD([p]).step(0.1)
        assert p.data[0] == 1.0
