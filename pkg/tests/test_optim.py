"""Optimizer, early stopping, and training-loop tests.

The AdamW update is checked against an independent scalar Adam implementation
and against closed forms (zero-gradient fixed point, pure decay, first-step
update) in 64-bit mode.  Loop tests run a genuinely small model end to end
and rely on bitwise determinism rather than loose statistical bounds.
"""

import dataclasses
import json
import math
import os

import numpy as np
import pytest

from nimbus import data as D
from nimbus import layers as L
from nimbus import optim as O
from nimbus.errors import ConfigError, PoisonedGradientError, StateError
from nimbus.model import ModelConfig, build_model


def adam_scalar_ref(p, grads, lr, beta1, beta2, eps):
    """Plain Adam on one scalar, no weight decay; returns value after each step."""
    m = 0.0
    v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(p)
    return out


class ScalarBlock(L.Block):
    """One-parameter container so the optimizer can be driven by hand."""

    def __init__(self, values, dtype=np.float64):
        super().__init__()
        self.p["w"] = np.array(values, dtype=dtype)


TOY_MODEL = ModelConfig(in_channels=8, out_channels=16,
                        stage_widths=(4, 8, 16, 32, 64),
                        depth_multiplier=1, cbam_reduction=4)


def toy_batch(seed, n=4, h=16):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 8, h, h)).astype(np.float32)
    y = np.clip(rng.normal(0.6, 1.0, size=(n, 16, 2 * h, 2 * h)), 0, None)
    return x, y.astype(np.float32)


class TestTrainConfig:
    def test_defaults(self):
        """The stock recipe: batches of 32, ten epochs, patience three."""
        c = O.TrainConfig()
        assert (c.batch_size, c.max_epochs, c.patience) == (32, 10, 3)
        assert c.min_delta == 0 and c.shuffle and c.loss == "bce_logits"
        assert (c.lr, c.weight_decay) == (1e-3, 1e-2)
        assert (c.beta1, c.beta2, c.eps) == (0.9, 0.999, 1e-8)

    @pytest.mark.parametrize("bad", [
        {"max_epochs": 0}, {"batch_size": 0}, {"patience": 0},
        {"min_delta": -0.1}, {"lr": -1e-3}, {"loss": "hinge"},
    ])
    def test_invalid_values_rejected(self, bad):
        """Every numeric floor and the loss-kind whitelist are enforced."""
        with pytest.raises(ConfigError):
            O.TrainConfig(**bad)

    def test_from_dict_rejects_unknown_keys(self):
        """Misspelled keys fail loudly instead of silently using defaults."""
        with pytest.raises(ConfigError):
            O.TrainConfig.from_dict({"learning_rate": 1e-3})


class TestAdamW:
    def test_wd_zero_matches_scalar_adam_reference(self):
        """Ten steps with decay off track the independent scalar Adam to 1e-12."""
        cfg = O.TrainConfig(weight_decay=0.0)
        block = ScalarBlock([0.7])
        opt = O.AdamW(block, cfg)
        rng = np.random.default_rng(3)
        grads = rng.normal(size=10)
        want = adam_scalar_ref(0.7, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        for g, w in zip(grads, want):
            opt.step(block, {"w": np.array([g])})
            assert abs(block.p["w"][0] - w) <= 1e-12

    def test_first_step_matches_closed_form(self):
        """Bias correction makes step one exactly -lr*g/(|g|+eps) per element."""
        cfg = O.TrainConfig(weight_decay=0.0)
        values = np.array([0.7, -1.2, 3.0])
        g = np.array([0.5, -0.25, 1e-4])
        block = ScalarBlock(values)
        O.AdamW(block, cfg).step(block, {"w": g.copy()})
        want = values - cfg.lr * g / (np.abs(g) + cfg.eps)
        np.testing.assert_allclose(block.p["w"], want, rtol=0, atol=1e-12)
        assert abs(abs(block.p["w"][0] - values[0]) - cfg.lr) < 1e-9

    def test_zero_grad_without_decay_is_fixed_point(self):
        """Zero gradients and zero decay leave parameters bitwise untouched."""
        block = ScalarBlock([0.25, -3.5, 0.0])
        opt = O.AdamW(block, O.TrainConfig(weight_decay=0.0))
        before = block.p["w"].copy()
        opt.step(block, {"w": np.zeros(3)})
        np.testing.assert_array_equal(block.p["w"], before)
        assert opt.step_count == 1

    def test_zero_grad_pure_decay_is_exact(self):
        """With decay on, a zero-gradient step multiplies by (1 - lr*wd) exactly."""
        cfg = O.TrainConfig(lr=1e-3, weight_decay=1e-2)
        values = np.array([0.25, -3.5, 1e6])
        block = ScalarBlock(values)
        O.AdamW(block, cfg).step(block, {"w": np.zeros(3)})
        np.testing.assert_array_equal(block.p["w"], values * (1.0 - 1e-3 * 1e-2))
        np.testing.assert_allclose(block.p["w"], values * (1 - 1e-5), rtol=1e-12)

    def test_decay_decoupled_from_moment_history(self):
        """A zero-gradient step decays identically whatever v and step_count hold."""
        outcomes = []
        for v_fill, count in [(0.0, 0), (1.0, 5), (731.0, 99)]:
            block = ScalarBlock([2.0, -0.5])
            opt = O.AdamW(block, O.TrainConfig())
            opt.v["w"].fill(v_fill)
            opt.step_count = count
            opt.step(block, {"w": np.zeros(2)})
            outcomes.append(block.p["w"].copy())
        np.testing.assert_array_equal(outcomes[0], outcomes[1])
        np.testing.assert_array_equal(outcomes[0], outcomes[2])
        np.testing.assert_array_equal(outcomes[0], np.array([2.0, -0.5]) * (1.0 - 1e-3 * 1e-2))

    @pytest.mark.parametrize("poison", [np.nan, np.inf, -np.inf])
    def test_non_finite_gradient_refuses_whole_step(self, poison):
        """One bad element anywhere aborts the step before any state mutates."""
        model = build_model(TOY_MODEL, seed=0)
        opt = O.AdamW(model, O.TrainConfig())
        grads = {name: np.zeros_like(p) for name, p in model.named_params()}
        grads["enc3.dsc1.depthwise.weight"][0, 0, 1, 1] = poison
        before = {name: p.copy() for name, p in model.named_params()}
        with pytest.raises(PoisonedGradientError):
            opt.step(model, grads)
        assert opt.step_count == 0
        for name, p in model.named_params():
            np.testing.assert_array_equal(p, before[name])
            assert not opt.m[name].any() and not opt.v[name].any()

    def test_misaligned_gradients_rejected(self):
        """Wrong names or wrong shapes are a state error, not a silent skip."""
        block = ScalarBlock([1.0, 2.0])
        opt = O.AdamW(block, O.TrainConfig())
        with pytest.raises(StateError):
            opt.step(block, {"weight": np.zeros(2)})
        with pytest.raises(StateError):
            opt.step(block, {"w": np.zeros(3)})

    def test_lr_zero_changes_nothing(self):
        """lr=0 freezes parameters even with nonzero gradients and decay."""
        block = ScalarBlock([1.5, -2.5])
        opt = O.AdamW(block, O.TrainConfig(lr=0.0))
        before = block.p["w"].copy()
        opt.step(block, {"w": np.array([0.3, -40.0])})
        np.testing.assert_array_equal(block.p["w"], before)

    def test_second_moment_stays_nonnegative(self):
        """v accumulates squares, so it can never dip below zero."""
        block = ScalarBlock([0.0])
        opt = O.AdamW(block, O.TrainConfig())
        for g in [3.0, -2.0, 0.0, 1e-9, -40.0]:
            opt.step(block, {"w": np.array([g])})
            assert opt.v["w"][0] >= 0


class TestEarlyStopper:
    def test_rising_val_stops_after_patience(self):
        """patience=1 with worsening loss stops at epoch 2, best stays epoch 1."""
        s = O.EarlyStopper(patience=1)
        assert not s.update(1, 1.0)
        assert s.update(2, 1.1)
        assert s.best_epoch == 1

    def test_decreasing_val_never_stops(self):
        """Continual improvement keeps training alive through every epoch."""
        s = O.EarlyStopper(patience=1)
        for epoch, val in enumerate([3.0, 2.5, 2.0, 1.5], start=1):
            assert not s.update(epoch, val)
        assert s.best_epoch == 4

    def test_plateau_with_min_delta_counts_as_stale(self):
        """Improvements below min_delta do not reset the patience counter."""
        s = O.EarlyStopper(patience=2, min_delta=0.1)
        assert not s.update(1, 1.0)
        assert not s.update(2, 0.95)
        assert s.update(3, 0.91)
        assert s.best_epoch == 1 and s.best == 1.0

    def test_tie_is_not_improvement(self):
        """Equal loss with min_delta=0 is stale: improvement must be strict."""
        s = O.EarlyStopper(patience=2)
        assert not s.update(1, 2.0)
        assert not s.update(2, 2.0)
        assert s.update(3, 2.0)


class TestTrainEpoch:
    def test_lr_zero_leaves_model_unchanged_but_reports_loss(self):
        """A zero learning rate still reports the loss it observed."""
        cfg = O.TrainConfig(lr=0.0, batch_size=4)
        model = build_model(TOY_MODEL, seed=1)
        before = {name: p.copy() for name, p in model.named_params()}
        loss = O.train_epoch(model, [toy_batch(0)], cfg, O.AdamW(model, cfg))
        assert np.isfinite(loss) and loss > 0
        for name, p in model.named_params():
            np.testing.assert_array_equal(p, before[name])

    def test_same_seed_same_batches_is_bitwise_deterministic(self):
        """Two runs from identical initial state agree to the last bit."""
        losses = []
        finals = []
        for _ in range(2):
            cfg = O.TrainConfig(batch_size=4)
            model = build_model(TOY_MODEL, seed=5)
            opt = O.AdamW(model, cfg)
            losses.append(O.train_epoch(model, [toy_batch(1), toy_batch(2)], cfg, opt))
            finals.append({name: p.copy() for name, p in model.named_params()})
        assert losses[0] == losses[1]
        for name in finals[0]:
            np.testing.assert_array_equal(finals[0][name], finals[1][name])

    def test_loss_decreases_over_three_epochs(self):
        """Repeated passes over a small fixed set actually reduce the loss."""
        cfg = O.TrainConfig(batch_size=4)
        model = build_model(TOY_MODEL, seed=2)
        opt = O.AdamW(model, cfg)
        batches = [toy_batch(i) for i in range(5)]
        losses = [O.train_epoch(model, batches, cfg, opt) for _ in range(3)]
        assert losses[2] < losses[0]

    def test_empty_split_rejected(self):
        """An empty batch iterable cannot silently report a zero loss."""
        cfg = O.TrainConfig()
        model = build_model(TOY_MODEL, seed=0)
        with pytest.raises(ConfigError):
            O.train_epoch(model, [], cfg, O.AdamW(model, cfg))


def const_loaders(train_pairs, val_pairs):
    """Batch factories over fixed in-memory (x, y) lists."""
    return (lambda epoch_seed: list(train_pairs)), (lambda: list(val_pairs))


class TestFit:
    def test_rising_val_stops_at_two_and_returns_epoch_one_model(self):
        """Training on all-rain targets while validating on all-dry ones makes
        validation worsen every epoch; patience=1 must stop after epoch 2 and
        hand back the epoch-1 parameters (checked against a one-epoch rerun).
        The learning rate is large so the divergence outweighs the drift of
        batch-norm running statistics."""
        x, _ = toy_batch(7)
        y_rain = np.full((4, 16, 32, 32), 2.0, dtype=np.float32)
        y_dry = np.zeros((4, 16, 32, 32), dtype=np.float32)
        tb, vb = const_loaders([(x, y_rain)], [(x, y_dry)])
        cfg = O.TrainConfig(batch_size=4, max_epochs=6, patience=1, seed=11, lr=0.3)
        model, history = O.fit(build_model(TOY_MODEL, seed=11), tb, vb, cfg)
        assert len(history) == 2
        assert history[1]["val_loss"] > history[0]["val_loss"]
        ref, _ = O.fit(build_model(TOY_MODEL, seed=11), tb, vb,
                       dataclasses.replace(cfg, max_epochs=1))
        for (name, p), (_, q) in zip(model.named_params(), ref.named_params()):
            np.testing.assert_array_equal(p, q)

    def test_improving_val_runs_all_epochs(self):
        """When validation keeps dropping, fit uses its whole epoch budget."""
        x, y = toy_batch(9)
        tb, vb = const_loaders([(x, y)], [(x, y)])
        cfg = O.TrainConfig(batch_size=4, max_epochs=3, patience=3, seed=1)
        _, history = O.fit(build_model(TOY_MODEL, seed=1), tb, vb, cfg)
        assert len(history) == 3
        vals = [h["val_loss"] for h in history]
        assert vals[2] < vals[1] < vals[0]

    def test_history_schema_and_jsonl_file(self, tmp_path):
        """Each epoch logs epoch, losses, wall seconds, and lr, also to disk."""
        x, y = toy_batch(4)
        tb, vb = const_loaders([(x, y)], [(x, y)])
        cfg = O.TrainConfig(batch_size=4, max_epochs=2, patience=3)
        path = str(tmp_path / "history.jsonl")
        _, history = O.fit(build_model(TOY_MODEL, seed=3), tb, vb, cfg,
                           history_path=path)
        assert [h["epoch"] for h in history] == [1, 2]
        for h in history:
            assert set(h) == {"epoch", "train_loss", "val_loss", "seconds", "lr"}
        with open(path, encoding="utf-8") as fh:
            on_disk = [json.loads(line) for line in fh]
        assert on_disk == history


@pytest.fixture(scope="module")
def two_region_set(tmp_path_factory):
    """A dataset with two regions sharing one year, small enough to train."""
    out = str(tmp_path_factory.mktemp("regional"))
    cfg = D.SynthConfig(n_train=12, n_val=4, n_test=4, grid=16,
                        bands=("VIS006", "IR016"), regions=("north", "south"),
                        years=(2019,), seed=21)
    manifest = D.load_manifest(D.synth_generate(cfg, out))
    return manifest


REGIONAL_CFG = O.TrainConfig(batch_size=4, max_epochs=1, patience=1, seed=13)


class TestTrainRegional:
    def test_two_regions_yield_two_checkpoints_and_histories(self, two_region_set, tmp_path):
        """Each (region, year) job trains independently and leaves artifacts."""
        jobs = two_region_set.region_years()
        assert jobs == [("north", 2019), ("south", 2019)]
        results, failures = O.train_regional(two_region_set, jobs, TOY_MODEL,
                                             REGIONAL_CFG, str(tmp_path))
        assert failures == {} and sorted(results) == jobs
        for job, path in results.items():
            assert os.path.exists(path)
            assert os.path.exists(path.replace(".smck", ".history.jsonl"))

    def test_missing_region_is_reported_not_fatal(self, two_region_set, tmp_path):
        """A job with no samples fails alone; the valid job still finishes."""
        jobs = [("north", 2019), ("atlantis", 2019)]
        results, failures = O.train_regional(two_region_set, jobs, TOY_MODEL,
                                             REGIONAL_CFG, str(tmp_path))
        assert list(results) == [("north", 2019)]
        assert list(failures) == [("atlantis", 2019)]
        assert "atlantis" in failures[("atlantis", 2019)]

    def test_rerun_checkpoints_bitwise_identical(self, two_region_set, tmp_path):
        """Same seed, data, and config reproduce the checkpoint byte for byte."""
        paths = []
        for sub in ("a", "b"):
            results, failures = O.train_regional(
                two_region_set, [("south", 2019)], TOY_MODEL, REGIONAL_CFG,
                str(tmp_path / sub))
            assert failures == {}
            paths.append(results[("south", 2019)])
        with open(paths[0], "rb") as fa, open(paths[1], "rb") as fb:
            assert fa.read() == fb.read()

    def test_jobs_use_distinct_derived_seeds(self):
        """Region jobs must not share an init; the derived seeds differ."""
        s = REGIONAL_CFG.seed
        assert D.derive_seed(s, "north", 2019) != D.derive_seed(s, "south", 2019)
        assert D.derive_seed(s, "north", 2019) != s
