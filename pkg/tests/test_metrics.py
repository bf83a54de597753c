"""Verification-metric tests: binarization, CSI, evaluation, baselines,
and ensembling.

Counting is checked against hand-tallied confusion tables on a constructed
micro-dataset whose targets are 2x2-blocky, because a 2x bilinear upsample
of a {0,1} probability field binarized at 0.5 reproduces exactly the
nearest-cell replication of the coarse mask.
"""

import json
import os

import numpy as np
import pytest

from _oracles import csi_ref
from nimbus import data as D
from nimbus import metrics as M
from nimbus.errors import ConfigError, DataError, ShapeError
from nimbus.model import ModelConfig, build_model

TOY_MODEL = ModelConfig(in_channels=8, out_channels=16,
                        stage_widths=(4, 8, 16, 32, 64),
                        depth_multiplier=1, cbam_reduction=4)


def blocky(coarse):
    """Expand a coarse mask to the fine grid by 2x2 replication."""
    return np.kron(np.asarray(coarse, dtype=np.float32), np.ones((2, 2), np.float32))


def micro_manifest(tmp_path, target_masks, regions, latent=False):
    """A hand-built dataset: 1 band, 1 input frame, crop 2, fine targets 4x4.

    target_masks[i] is a list of coarse 2x2 {0,1} masks, one per lead; the
    stored target rates are 1.0 on rain pixels after 2x2 replication.
    """
    root = str(tmp_path)
    os.makedirs(os.path.join(root, "samples"), exist_ok=True)
    t_out = len(target_masks[0])
    records = []
    for i, (masks, region) in enumerate(zip(target_masks, regions)):
        names = {kind: os.path.join("samples", f"m{i:03d}.{kind}.w4cl")
                 for kind in ("input", "target", "latent")}
        D.write_tensor_file(os.path.join(root, names["input"]),
                            np.zeros((1, 1, 4, 4), np.float32))
        target = np.stack([blocky(m) for m in masks])[None]
        D.write_tensor_file(os.path.join(root, names["target"]), target)
        if latent:
            D.write_tensor_file(os.path.join(root, names["latent"]),
                                target[:, :1].copy())
        records.append(D.SampleRecord(
            input_path=names["input"], target_path=names["target"],
            latent_path=names["latent"] if latent else None,
            region=region, year=2019, split="test", timestamp=""))
    return D.Manifest(band_names=("IR016",), t_in=1, t_out=t_out, h_raw=4,
                      crop=2, stats={"IR016": {"mean": 0.0, "std": 1.0}},
                      samples=records, filter_threshold=0.0, root=root)


MICRO_TARGETS = [
    [[[1, 0], [0, 0]], [[1, 1], [0, 0]]],
    [[[0, 0], [0, 0]], [[0, 0], [1, 0]]],
    [[[1, 1], [1, 1]], [[1, 1], [1, 1]]],
]
MICRO_REGIONS = ["r1", "r2", "r1"]
MICRO_PREDS = [
    [[[1, 0], [0, 0]], [[0, 1], [0, 0]]],
    [[[1, 1], [1, 1]], [[0, 0], [0, 0]]],
    [[[1, 1], [1, 1]], [[1, 0], [0, 1]]],
]


def write_micro_predictions(manifest, pred_masks, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for record, masks in zip(manifest.samples, pred_masks):
        probs = np.stack([np.asarray(m, dtype=np.float32) for m in masks])[None]
        D.write_tensor_file(M.prediction_path(out_dir, record), probs)


class ConstantModel:
    """Stub emitting one fixed logit everywhere, for ensemble arithmetic."""

    def __init__(self, prob, shape):
        self.logit = float(np.log(prob / (1 - prob)))
        self.shape = shape

    def forward(self, x, train=False):
        return np.full((x.shape[0],) + self.shape, self.logit, dtype=np.float32)


class TestBinarize:
    def test_all_below_threshold(self):
        """Quiet fields produce no events."""
        assert not M.binarize(np.zeros((3, 3)), 0.2).any()

    def test_boundary_value_is_an_event(self):
        """A rate exactly at the threshold counts as rain (>= convention)."""
        out = M.binarize(np.array([0.19999, 0.2, 0.20001]), 0.2)
        assert out.tolist() == [False, True, True]

    def test_random_field_matches_elementwise_oracle(self):
        """Every element agrees with a scalar comparison loop."""
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, size=(5, 7))
        out = M.binarize(x, 0.4)
        for i in range(5):
            for j in range(7):
                assert out[i, j] == (x[i, j] >= 0.4)

    def test_negative_threshold_rejected(self):
        """Negative rain rates cannot define an event class."""
        with pytest.raises(ConfigError):
            M.binarize(np.zeros(2), -0.1)


class TestCsi:
    def test_perfect_forecast(self):
        """All hits and no misses or false alarms score 1.0."""
        assert M.csi(M.ConfusionCounts(tp=5)) == 1.0

    def test_no_hits(self):
        """False alarms and misses alone score 0.0."""
        assert M.csi(M.ConfusionCounts(fp=3, fn=2)) == 0.0

    def test_direct_formula(self):
        """tp=3, fp=1, fn=2 gives 3/6."""
        assert M.csi(M.ConfusionCounts(tp=3, fp=1, fn=2)) == 0.5

    def test_empty_denominator_scores_zero(self):
        """Nothing predicted and nothing observed is 0, not a crash."""
        assert M.csi(M.ConfusionCounts(tn=100)) == 0.0

    def test_fn_to_tp_conversion_never_decreases(self):
        """Turning one miss into a hit keeps the same denominator and can
        only grow the numerator."""
        rng = np.random.default_rng(1)
        for _ in range(50):
            tp, fp, fn = (int(v) for v in rng.integers(0, 20, size=3))
            if fn == 0:
                fn = 1
            before = M.csi(M.ConfusionCounts(tp=tp, fp=fp, fn=fn))
            after = M.csi(M.ConfusionCounts(tp=tp + 1, fp=fp, fn=fn - 1))
            assert after >= before

    def test_true_negatives_are_ignored(self):
        """CSI depends only on (tp, fp, fn)."""
        a = M.csi(M.ConfusionCounts(tp=3, fp=1, fn=2, tn=0))
        b = M.csi(M.ConfusionCounts(tp=3, fp=1, fn=2, tn=10**9))
        assert a == b

    def test_range_and_oracle_on_random_masks(self):
        """count_events plus csi agrees with the explicit counting oracle."""
        rng = np.random.default_rng(2)
        for _ in range(20):
            pred = rng.uniform(size=(6, 6)) < 0.5
            true = rng.uniform(size=(6, 6)) < 0.5
            got = M.csi(M.count_events(pred, true))
            assert got == csi_ref(pred, true)
            assert 0.0 <= got <= 1.0


class TestCountEvents:
    def test_hand_counted_pair(self):
        """A four-pixel example with one of each outcome."""
        pred = np.array([[True, True], [False, False]])
        true = np.array([[True, False], [True, False]])
        c = M.count_events(pred, true)
        assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)

    def test_total_equals_pixel_count(self):
        """The four outcome classes partition every compared pixel."""
        rng = np.random.default_rng(3)
        pred = rng.uniform(size=(9, 5)) < 0.3
        true = rng.uniform(size=(9, 5)) < 0.7
        assert M.count_events(pred, true).total == 45

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            M.count_events(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


class TestEvalConfig:
    @pytest.mark.parametrize("bad", [
        {"threshold": -1.0}, {"prob_threshold": 0.0}, {"prob_threshold": 1.0},
        {"prediction_kind": "logit"}, {"batch_size": 0},
    ])
    def test_invalid_values_rejected(self, bad):
        with pytest.raises(ConfigError):
            M.EvalConfig(**bad)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            M.EvalConfig.from_dict({"thresh": 0.3})


class TestEvaluateFromFiles:
    @pytest.fixture()
    def micro(self, tmp_path):
        manifest = micro_manifest(tmp_path, MICRO_TARGETS, MICRO_REGIONS)
        pred_dir = str(tmp_path / "preds")
        write_micro_predictions(manifest, MICRO_PREDS, pred_dir)
        return manifest, pred_dir

    def test_counts_match_hand_tally(self, micro):
        """Pooled, per-job, and per-lead counts equal the table worked out
        by hand from the six prediction/target mask pairs."""
        manifest, pred_dir = micro
        report = M.evaluate(pred_dir, manifest, "test")
        assert (report.pooled.tp, report.pooled.fp,
                report.pooled.fn, report.pooled.tn) == (32, 16, 16, 32)
        r1 = report.counts_by_job[("r1", 2019)]
        r2 = report.counts_by_job[("r2", 2019)]
        assert (r1.tp, r1.fp, r1.fn, r1.tn) == (32, 0, 12, 20)
        assert (r2.tp, r2.fp, r2.fn, r2.tn) == (0, 16, 4, 12)
        lead0, lead1 = report.counts_by_lead
        assert (lead0.tp, lead0.fp, lead0.fn, lead0.tn) == (20, 16, 0, 12)
        assert (lead1.tp, lead1.fp, lead1.fn, lead1.tn) == (12, 0, 16, 20)

    def test_pooled_csi_is_ratio_of_pooled_counts(self, micro):
        """The pooled score is sum(tp)/sum(tp+fp+fn), not a mean of CSIs."""
        manifest, pred_dir = micro
        report = M.evaluate(pred_dir, manifest, "test")
        assert report.pooled_csi == 32 / 64
        per_job = list(report.csi_by_job().values())
        assert report.pooled_csi != np.mean(per_job)

    def test_perfect_predictions_score_one_everywhere(self, micro):
        """Predicting the exact coarse truth gives CSI 1.0 pooled, per job,
        and per lead once any event exists in the group."""
        manifest, _ = micro
        perfect_dir = os.path.join(manifest.root, "perfect")
        write_micro_predictions(manifest, MICRO_TARGETS, perfect_dir)
        report = M.evaluate(perfect_dir, manifest, "test")
        assert report.pooled_csi == 1.0
        assert all(v == 1.0 for v in report.csi_by_job().values())
        assert all(v == 1.0 for v in report.csi_by_lead())

    def test_all_zero_predictions_on_rainy_set_score_zero(self, micro):
        manifest, _ = micro
        zero_dir = os.path.join(manifest.root, "zero")
        zeros = [[np.zeros((2, 2)) for _ in masks] for masks in MICRO_TARGETS]
        write_micro_predictions(manifest, zeros, zero_dir)
        assert M.evaluate(zero_dir, manifest, "test").pooled_csi == 0.0

    def test_missing_prediction_file_is_data_error(self, micro):
        manifest, pred_dir = micro
        os.remove(M.prediction_path(pred_dir, manifest.samples[1]))
        with pytest.raises(DataError):
            M.evaluate(pred_dir, manifest, "test")

    def test_wrong_prediction_dims_is_data_error(self, micro):
        manifest, pred_dir = micro
        path = M.prediction_path(pred_dir, manifest.samples[0])
        D.write_tensor_file(path, np.zeros((1, 2, 3, 3), np.float32))
        with pytest.raises(DataError):
            M.evaluate(pred_dir, manifest, "test")

    def test_report_serializes_to_json_and_tsv(self, micro):
        """The JSON dict survives a dumps/loads cycle; the TSV has one line
        per (region, year) plus a pooled line."""
        manifest, pred_dir = micro
        report = M.evaluate(pred_dir, manifest, "test")
        round_trip = json.loads(report.to_json())
        assert round_trip["pooled_csi"] == report.pooled_csi
        assert round_trip["csi_by_job"] == {"r1:2019": 32 / 44, "r2:2019": 0.0}
        assert len(round_trip["csi_by_lead"]) == manifest.t_out
        lines = report.to_tsv().strip().split("\n")
        assert len(lines) == 3 and lines[-1].startswith("pooled\t")


@pytest.fixture(scope="module")
def tiny_set(tmp_path_factory):
    """A small synthetic dataset matching the toy model geometry."""
    out = str(tmp_path_factory.mktemp("mdata"))
    cfg = D.SynthConfig(n_train=6, n_val=2, n_test=4, grid=16,
                        bands=("VIS006", "IR016"), seed=5)
    return D.load_manifest(D.synth_generate(cfg, out))


class TestEvaluateModel:
    def test_file_and_memory_paths_agree_exactly(self, tiny_set, tmp_path):
        """evaluate(model) and evaluate(predictions written to disk) count
        identically because probabilities round-trip bitwise through files."""
        model = build_model(TOY_MODEL, seed=4)
        direct = M.evaluate(model, tiny_set, "test")
        pred_dir = str(tmp_path / "preds")
        paths = M.predict_to_files(model, tiny_set, "test", pred_dir)
        assert len(paths) == 4
        from_files = M.evaluate(pred_dir, tiny_set, "test")
        assert from_files.pooled.to_dict() == direct.pooled.to_dict()
        assert {j: c.to_dict() for j, c in from_files.counts_by_job.items()} \
            == {j: c.to_dict() for j, c in direct.counts_by_job.items()}
        assert [c.to_dict() for c in from_files.counts_by_lead] \
            == [c.to_dict() for c in direct.counts_by_lead]

    def test_count_partition_covers_every_pixel(self, tiny_set):
        """Summed outcome classes equal samples x leads x fine pixels."""
        report = M.evaluate(build_model(TOY_MODEL, seed=4), tiny_set, "test")
        assert report.pooled.total == 4 * 16 * 32 * 32
        assert report.n_samples == 4

    def test_empty_split_is_data_error(self, tiny_set):
        with pytest.raises(DataError):
            M.evaluate(build_model(TOY_MODEL, seed=4), tiny_set, [])


class TestTrivialBaselines:
    def test_all_ones_on_all_rainy_set(self, tmp_path):
        """When every pixel rains, predicting rain everywhere is perfect and
        predicting none is worthless."""
        rain = [[[[1, 1], [1, 1]], [[1, 1], [1, 1]]]] * 2
        manifest = micro_manifest(tmp_path, rain, ["r1", "r1"])
        out = M.trivial_baselines(manifest, "test")
        assert out["all_ones"] == 1.0
        assert out["all_zeros"] == 0.0

    def test_all_zeros_scores_zero_whenever_any_event_exists(self, tmp_path):
        masks = [[[[1, 0], [0, 0]], [[0, 0], [0, 0]]]]
        manifest = micro_manifest(tmp_path, masks, ["r1"])
        assert M.trivial_baselines(manifest, "test")["all_zeros"] == 0.0

    def test_persistence_perfect_on_static_set(self, tmp_path):
        """With zero velocity and zero noise every target frame equals the
        persisted field, so persistence scores exactly 1.0."""
        cfg = D.SynthConfig(n_train=2, n_val=1, n_test=3, grid=16,
                            bands=("IR016",), velocity=(0.0, 0.0),
                            noise_sigma=0.0, seed=9)
        manifest = D.load_manifest(D.synth_generate(cfg, str(tmp_path)))
        out = M.trivial_baselines(manifest, "test")
        assert out["persistence"] == 1.0

    def test_persistence_absent_without_latent_fields(self, tmp_path):
        """No persisted-field files means the entry is None, not an error."""
        masks = [[[[1, 0], [0, 0]], [[0, 1], [0, 0]]]]
        manifest = micro_manifest(tmp_path, masks, ["r1"], latent=False)
        assert M.trivial_baselines(manifest, "test")["persistence"] is None

    def test_persistence_counts_latent_against_each_lead(self, tmp_path):
        """With latent frames present the persistence CSI is the latent mask
        scored against every lead, here hand-checkable."""
        masks = [[[[1, 0], [0, 0]], [[1, 1], [0, 0]]]]
        manifest = micro_manifest(tmp_path, masks, ["r1"], latent=True)
        out = M.trivial_baselines(manifest, "test")
        assert out["persistence"] == pytest.approx(8 / 12)


class TestEnsemble:
    def test_identical_members_equal_single_model(self, tiny_set):
        """Averaging k copies of one model reproduces it within 1e-6."""
        model = build_model(TOY_MODEL, seed=6)
        x, _, _ = next(iter(D.batch_iter(tiny_set, "test", 2, 0, False)))
        single = M.model_probabilities(model, x)
        triple = M.ensemble_predict([model, model, model], x)
        assert np.max(np.abs(triple.astype(np.float64) - single)) <= 1e-6

    def test_constant_members_average_arithmetically(self):
        """Members emitting constant 0.2 and 0.6 average to 0.4."""
        shape = (16, 8, 8)
        pair = [ConstantModel(0.2, shape), ConstantModel(0.6, shape)]
        out = M.ensemble_predict(pair, np.zeros((2, 8, 8, 8), np.float32))
        np.testing.assert_allclose(out, 0.4, atol=1e-6)

    def test_heterogeneous_output_dims_rejected(self):
        pair = [ConstantModel(0.5, (16, 8, 8)), ConstantModel(0.5, (16, 4, 4))]
        with pytest.raises(ShapeError):
            M.ensemble_predict(pair, np.zeros((1, 8, 8, 8), np.float32))

    def test_unknown_mode_and_empty_list_rejected(self):
        with pytest.raises(ConfigError):
            M.ensemble_predict([ConstantModel(0.5, (1, 2, 2))],
                               np.zeros((1, 1, 2, 2)), mode="vote")
        with pytest.raises(ConfigError):
            M.ensemble_predict([], np.zeros((1, 1, 2, 2)))

    def test_ensemble_files_equal_externally_averaged_files(self, tiny_set, tmp_path):
        """Counting from ensemble prediction files equals counting from
        files averaged offline out of per-model predictions."""
        models = [build_model(TOY_MODEL, seed=s) for s in (1, 2)]
        ens_dir = str(tmp_path / "ens")
        M.ensemble_to_files(models, tiny_set, "test", ens_dir)
        solo_dirs = []
        for i, model in enumerate(models):
            d = str(tmp_path / f"solo{i}")
            M.predict_to_files(model, tiny_set, "test", d)
            solo_dirs.append(d)
        avg_dir = str(tmp_path / "avg")
        os.makedirs(avg_dir)
        for record in tiny_set.split_samples("test"):
            stack = np.stack([
                D.read_tensor_file(M.prediction_path(d, record)).astype(np.float64)
                for d in solo_dirs])
            D.write_tensor_file(M.prediction_path(avg_dir, record),
                                np.mean(stack, axis=0).astype(np.float32))
        a = M.evaluate(ens_dir, tiny_set, "test")
        b = M.evaluate(avg_dir, tiny_set, "test")
        assert a.pooled.to_dict() == b.pooled.to_dict()
        assert [c.to_dict() for c in a.counts_by_lead] \
            == [c.to_dict() for c in b.counts_by_lead]
