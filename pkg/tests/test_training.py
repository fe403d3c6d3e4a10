import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from forgelab.backbone import parameter_partition
from forgelab.config import BackboneConfig, RegularizerConfig, TrainingConfig
from forgelab.training import (
    EarlyStopper,
    best_model,
    convergence_report,
    load_metrics_log,
    lr_at,
    total_loss,
    train,
    write_metrics_log,
)


def _toy_training_config(**overrides):
    defaults = dict(
        backbone=BackboneConfig(image_size=32, patch_size=8, embed_dim=32,
                                num_layers=4, num_heads=2, mlp_ratio=2.0),
        regularizer=RegularizerConfig(beta=1.2, mu=0.1),
        batch_size=8,
        max_epochs=2,
        patience=3,
        seed=5,
        augment_prob=0.0,
        val_fraction=0.2,
    )
    defaults.update(overrides)
    return TrainingConfig(**defaults)


class TestTotalLoss:
    def test_plain_sum(self):
        breakdown = total_loss(0.7, 0.2, 0.0, 0.3)
        assert breakdown.total == pytest.approx(1.2)

    def test_all_zero(self):
        assert total_loss(0.0, 0.0, 0.0, 0.0).total == 0.0

    def test_permutation_invariance(self):
        values = (0.11, 0.42, 0.07, 0.9)
        import itertools
        totals = {total_loss(*p).total for p in itertools.permutations(values)}
        assert max(totals) - min(totals) <= 1e-15

    def test_nonfinite_component_named(self):
        with pytest.raises(ValueError, match="dice"):
            total_loss(0.1, float("nan"), 0.0, 0.0)
        with pytest.raises(ValueError, match="contrast"):
            total_loss(0.1, 0.0, 0.0, float("inf"))


class TestLearningRateSchedule:
    def test_endpoints_and_midpoint(self):
        config = _toy_training_config()
        assert lr_at(0, 100, config) == pytest.approx(1e-4)
        assert lr_at(100, 100, config) == pytest.approx(1e-6)
        assert lr_at(50, 100, config) == pytest.approx((1e-4 + 1e-6) / 2)

    def test_out_of_range_rejected(self):
        config = _toy_training_config()
        with pytest.raises(ValueError):
            lr_at(101, 100, config)
        with pytest.raises(ValueError):
            lr_at(-1, 100, config)

    @settings(deadline=None, max_examples=30)
    @given(total=st.integers(2, 500), seed=st.integers(0, 100))
    def test_monotone_and_bounded(self, total, seed):
        config = _toy_training_config()
        rng = np.random.default_rng(seed)
        steps = sorted(rng.integers(0, total + 1, size=4))
        values = [lr_at(int(s), total, config) for s in steps]
        assert all(a >= b - 1e-18 for a, b in zip(values, values[1:]))
        assert all(config.lr_min - 1e-18 <= v <= config.lr_init + 1e-18 for v in values)


class TestEarlyStopper:
    def test_constant_loss_stops_after_patience_plus_one(self):
        stopper = EarlyStopper(patience=4)
        epochs = 0
        while True:
            epochs += 1
            if stopper.update(1.0):
                break
        assert epochs == 5

    def test_decreasing_loss_never_stops(self):
        stopper = EarlyStopper(patience=2)
        for epoch in range(50):
            assert not stopper.update(1.0 / (epoch + 1))

    def test_recovery_resets_counter(self):
        stopper = EarlyStopper(patience=3)
        assert not stopper.update(1.0)
        assert not stopper.update(1.0)
        assert not stopper.update(0.5)
        assert not stopper.update(0.5)
        assert not stopper.update(0.5)
        assert stopper.update(0.5)

    def test_patience_validated(self):
        with pytest.raises(ValueError):
            EarlyStopper(patience=0)


@pytest.fixture(scope="module")
def toy_reals():
    from forgelab.synthesis import toy_face_dataset

    return toy_face_dataset(30, np.random.default_rng(77), image_size=32)


class TestTrainingLoop:
    def test_logged_totals_satisfy_sum_identity(self, toy_reals):
        result = train(_toy_training_config(), toy_reals)
        assert result.log
        for entry in result.log:
            total = entry["ce"] + entry["dice"] + entry["suppression"] + entry["contrast"]
            assert entry["total"] == total

    def test_frozen_parameters_bit_identical_after_run(self, toy_reals):
        result = train(_toy_training_config(max_epochs=2), toy_reals)
        partition = parameter_partition(result.model)
        final = dict(result.model.named_parameters())
        for name in partition.frozen:
            assert torch.equal(final[name], result.initial_state[name]), name

    def test_trainable_parameters_moved(self, toy_reals):
        result = train(_toy_training_config(max_epochs=2), toy_reals)
        moved = [
            name
            for name, p in result.model.named_parameters()
            if not torch.equal(p, result.initial_state[name])
        ]
        assert any("w_qbar" in n for n in moved)
        assert "cls_token" in moved

    def test_deterministic_loss_curves(self, toy_reals):
        config = _toy_training_config(max_epochs=2)
        a = train(config, toy_reals)
        b = train(config, toy_reals)
        for ea, eb in zip(a.log, b.log):
            assert ea["total"] == pytest.approx(eb["total"], rel=1e-5)
            assert ea["ce"] == pytest.approx(eb["ce"], rel=1e-5)

    def test_validation_fakes_come_from_heldout_reals(self, toy_reals):
        result = train(_toy_training_config(max_epochs=1), toy_reals)
        assert result.header["num_val"] > 0
        assert result.header["num_train_real"] + result.header["num_val"] // 2 == len(toy_reals)

    def test_baseline_mode_trains_all_parameters_ce_only(self, toy_reals):
        result = train(_toy_training_config(max_epochs=1, mode="baseline"), toy_reals)
        entry = result.log[0]
        assert entry["dice"] == 0.0
        assert entry["suppression"] == 0.0
        assert entry["contrast"] == 0.0
        moved = [
            name
            for name, p in result.model.named_parameters()
            if not torch.equal(p, result.initial_state[name])
        ]
        assert any("attn.w_q." in n for n in moved)

    def test_full_finetune_updates_frozen_groups(self, toy_reals):
        result = train(_toy_training_config(max_epochs=1, mode="full_finetune"), toy_reals)
        moved = {
            name
            for name, p in result.model.named_parameters()
            if not torch.equal(p, result.initial_state[name])
        }
        assert "patch_embed.proj.weight" in moved

    def test_early_stop_truncates_run(self, toy_reals):
        config = _toy_training_config(max_epochs=60, patience=2, lr_init=1e-7, lr_min=1e-8)
        result = train(config, toy_reals)
        # a near-zero learning rate plateaus immediately
        assert result.stopped_epoch < 60

    def test_divergence_aborts_with_last_good_state(self, toy_reals, monkeypatch):
        import forgelab.training as training_mod

        # 24 train reals at batch 8: calls 1-3 are epoch-1 steps, call 4 the
        # epoch summary; poison the first step of epoch 2
        calls = {"n": 0}
        original = training_mod.total_loss

        def explode_on_fifth_call(ce, dice, suppression, contrast):
            calls["n"] += 1
            if calls["n"] == 5:
                return original(float("nan"), dice, suppression, contrast)
            return original(ce, dice, suppression, contrast)

        monkeypatch.setattr(training_mod, "total_loss", explode_on_fifth_call)
        result = train(_toy_training_config(max_epochs=4), toy_reals)
        assert result.diverged
        assert result.stopped_epoch == 1
        assert len(result.log) == 1
        for p in result.model.parameters():
            assert torch.isfinite(p).all()

    def test_run_directory_artifacts(self, toy_reals, tmp_path):
        config = _toy_training_config(max_epochs=1)
        result = train(config, toy_reals, run_dir=tmp_path / "run")
        assert result.metrics_path.exists()
        assert result.best_checkpoint.exists()
        assert result.last_checkpoint.exists()
        assert (tmp_path / "run" / "config.cfg").exists()
        header, log = load_metrics_log(result.metrics_path)
        assert header["seed"] == config.seed
        assert len(log) == len(result.log)

    def test_best_model_reproduces_best_state(self, toy_reals):
        result = train(_toy_training_config(max_epochs=2), toy_reals)
        model = best_model(result)
        for name, p in model.named_parameters():
            assert torch.equal(p, result.best_state[name])


class TestConvergenceReport:
    def _log(self, totals, seed=0, mode="injected", steps_per_epoch=10):
        header = {"type": "header", "seed": seed, "mode": mode}
        entries = [
            {"type": "epoch", "epoch": i + 1, "steps": (i + 1) * steps_per_epoch,
             "total": t, "ce": t}
            for i, t in enumerate(totals)
        ]
        return header, entries

    def test_identical_logs_give_ratio_one(self):
        log = self._log([1.0, 0.8, 0.5, 0.3])
        report = convergence_report(log, log, loss_threshold=0.5)
        assert report.ratio == 1.0
        assert not report.unreachable

    def test_faster_injected_run(self):
        injected = self._log([1.0, 0.4, 0.3])
        full = self._log([1.0, 0.9, 0.8, 0.5, 0.4])
        report = convergence_report(injected, full, loss_threshold=0.5)
        assert report.steps_injected == 20
        assert report.steps_full == 40
        assert report.ratio == 2.0

    def test_unreachable_threshold_reported_not_raised(self):
        log = self._log([1.0, 0.9])
        report = convergence_report(log, log, loss_threshold=0.01)
        assert report.unreachable
        assert report.ratio is None

    def test_seed_mismatch_rejected(self):
        a = self._log([1.0], seed=0)
        b = self._log([1.0], seed=1)
        with pytest.raises(ValueError, match="seed"):
            convergence_report(a, b, loss_threshold=0.5)

    def test_round_trip_through_files(self, tmp_path):
        header, entries = self._log([0.9, 0.6, 0.2])
        path = write_metrics_log(tmp_path / "m.jsonl", header, entries)
        report = convergence_report(path, path, loss_threshold=0.6)
        assert report.steps_injected == 20
        assert report.ratio == 1.0


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        from forgelab.config import format_config, parse_config_file

        config = _toy_training_config(max_epochs=9,
                                      regularizer=RegularizerConfig(beta=0.9, mu=0.05,
                                                                    deep_layers=(2, 3)))
        path = tmp_path / "run.cfg"
        path.write_text(format_config(config))
        parsed = parse_config_file(path)
        assert parsed == config

    def test_defaults_match_reference_protocol(self):
        config = TrainingConfig()
        assert config.lr_init == 1e-4
        assert config.lr_min == 1e-6
        assert config.weight_decay == 0.01
        assert config.batch_size == 24
        assert config.max_epochs == 300
        assert config.patience == 20
        assert config.gamma0 == 0.2
        assert config.gamma1 == 0.8
        assert config.regularizer.beta == 1.2
        assert config.regularizer.mu == 0.1
        assert config.backbone.image_size == 224
        assert config.backbone.patch_size == 16

    def test_unknown_key_rejected(self, tmp_path):
        from forgelab.config import parse_config_file

        path = tmp_path / "bad.cfg"
        path.write_text("learning_rate = 3\n")
        with pytest.raises(ValueError, match="unknown config key"):
            parse_config_file(path)

    def test_comments_and_blanks_ignored(self, tmp_path):
        from forgelab.config import parse_config_file

        path = tmp_path / "ok.cfg"
        path.write_text("# comment\n\nseed = 3  # trailing\nbatch_size = 4\n")
        config = parse_config_file(path)
        assert config.seed == 3
        assert config.batch_size == 4

    def test_validation_errors(self):
        with pytest.raises(ValueError):
            TrainingConfig(lr_init=1e-6, lr_min=1e-6)
        with pytest.raises(ValueError):
            TrainingConfig(gamma0=0.9, gamma1=0.8)
        with pytest.raises(ValueError):
            TrainingConfig(mode="adapter")
        with pytest.raises(ValueError):
            RegularizerConfig(beta=0.0)

    def test_regularizer_resolution(self):
        reg = RegularizerConfig()
        assert reg.resolve(12) == (5, (9, 10, 11))
        assert reg.resolve(4) == (1, (2, 3))
        explicit = RegularizerConfig(shallow_cutoff=0, deep_layers=(3,))
        assert explicit.resolve(4) == (0, (3,))
        with pytest.raises(ValueError):
            RegularizerConfig(shallow_cutoff=3, deep_layers=(2, 3)).resolve(4)
