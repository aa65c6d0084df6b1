import json

import numpy as np
import pytest
import torch

from bodyfit.bodymodel import make_toy_model
from bodyfit.pointcloud import METRIC, NORMALIZED, PARTIAL, PointCloud, normalize_unit
from bodyfit.scalepred import (
    ScaleConfig,
    ScaleError,
    load_scale_predictor,
    new_scale_predictor,
    predict_scale,
    restore_scale,
    save_scale_predictor,
    train_scale,
)
from bodyfit.tensorfile import write_tensorfile

from synthdata import scale_samples

SMALL = ScaleConfig(
    feature_dim=32,
    encoder_blocks=1,
    num_patches=8,
    patch_neighbors=4,
    attention_heads=2,
    mlp_hidden_dims=(32,),
)


@pytest.fixture(scope="module")
def size_toy():
    return make_toy_model(300, 8, 1, size_mode=True)


@pytest.fixture(scope="module")
def pairs(size_toy):
    return scale_samples(size_toy, 6, seed=0, n_points=256)


def _random_normalized(seed, n=200):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.normal(size=(n, 3)))
    return normalize_unit(cloud)[0]


class TestConfig:
    def test_defaults_validate(self):
        ScaleConfig().validate()
        SMALL.validate()

    def test_bad_head_split(self):
        with pytest.raises(ScaleError, match="not divisible"):
            ScaleConfig(feature_dim=30, attention_heads=4).validate()

    def test_bad_counts(self):
        with pytest.raises(ScaleError, match="encoder_blocks"):
            ScaleConfig(encoder_blocks=0).validate()
        with pytest.raises(ScaleError, match="num_patches"):
            ScaleConfig(num_patches=0).validate()


class TestPredict:
    def test_output_positive_for_fresh_weights(self):
        for seed in range(4):
            weights = new_scale_predictor(SMALL, seed=seed)
            s = predict_scale(_random_normalized(seed), weights)
            assert s > 0.0
            assert np.isfinite(s)

    def test_identical_inputs_identical_output(self):
        weights = new_scale_predictor(SMALL, seed=1)
        cloud = _random_normalized(3)
        assert predict_scale(cloud, weights) == predict_scale(cloud, weights)

    def test_metric_input_rejected(self):
        weights = new_scale_predictor(SMALL, seed=1)
        metric = PointCloud(np.random.default_rng(0).normal(size=(64, 3)))
        assert metric.scale_state == METRIC
        with pytest.raises(ScaleError, match="normalize first"):
            predict_scale(metric, weights)

    def test_bare_array_rejected(self):
        weights = new_scale_predictor(SMALL, seed=1)
        with pytest.raises(ScaleError, match="normalize first"):
            predict_scale(np.zeros((32, 3)), weights)

    def test_fresh_predictor_starts_at_one(self):
        # the head is zero-initialized, so an untrained predictor answers
        # exp(0) = 1 regardless of input or seed
        cloud = _random_normalized(5)
        assert predict_scale(cloud, new_scale_predictor(SMALL, seed=0)) == pytest.approx(1.0)

    def test_seed_changes_fresh_weights(self):
        a = new_scale_predictor(SMALL, seed=0).model.state_dict()
        b = new_scale_predictor(SMALL, seed=1).model.state_dict()
        assert any(not torch.equal(a[k], b[k]) for k in a)


class TestRestore:
    def test_unit_scale_is_identity(self):
        cloud = _random_normalized(7)
        back = restore_scale(cloud, 1.0)
        assert back.scale_state == METRIC
        assert np.array_equal(back.points, cloud.points)

    def test_doubling_doubles_bbox_diagonal(self):
        cloud = _random_normalized(8)
        span = cloud.points.max(axis=0) - cloud.points.min(axis=0)
        back = restore_scale(cloud, 2.0)
        span2 = back.points.max(axis=0) - back.points.min(axis=0)
        assert np.linalg.norm(span2) == pytest.approx(2 * np.linalg.norm(span), rel=1e-12)

    def test_round_trip_preserves_extent(self):
        rng = np.random.default_rng(9)
        cloud = PointCloud(rng.uniform(-3, 5, size=(400, 3)))
        normalized, center, inv_scale = normalize_unit(cloud)
        back = restore_scale(normalized, inv_scale)
        # translation is not restored; compare against the centered input
        assert np.abs(back.points - (cloud.points - center)).max() < 1e-9
        extent = np.abs(cloud.points - center).max()
        back_extent = np.abs(back.points).max()
        assert abs(back_extent - extent) < 1e-9

    def test_partial_completeness_preserved(self):
        pts = np.random.default_rng(10).normal(size=(50, 3))
        cloud = normalize_unit(PointCloud(pts))[0]
        partial = PointCloud(cloud.points, scale_state=NORMALIZED, completeness=PARTIAL)
        assert restore_scale(partial, 1.3).completeness == PARTIAL

    def test_bad_factor_rejected(self):
        cloud = _random_normalized(11)
        for bad in (0.0, -2.0, float("nan"), float("inf")):
            with pytest.raises(ScaleError, match="positive"):
                restore_scale(cloud, bad)

    def test_metric_input_rejected(self):
        metric = PointCloud(np.zeros((5, 3)) + np.eye(5, 3))
        with pytest.raises(ScaleError, match="normalize first"):
            restore_scale(metric, 1.0)


class TestTrain:
    def test_zero_lr_leaves_weights_bitwise(self, pairs):
        weights = new_scale_predictor(SMALL, seed=5)
        before = {k: v.clone() for k, v in weights.model.state_dict().items()}
        train_scale(pairs, init=weights, lr=0.0, epochs=2, batch_size=3)
        after = weights.model.state_dict()
        assert before.keys() == after.keys()
        for key in before:
            assert torch.equal(before[key], after[key]), key

    def test_zero_epochs_matches_fresh_seed(self, pairs):
        trained = train_scale(pairs, SMALL, epochs=0, seed=6)
        fresh = new_scale_predictor(SMALL, seed=6)
        for (ka, va), (kb, vb) in zip(
            sorted(trained.model.state_dict().items()),
            sorted(fresh.model.state_dict().items()),
        ):
            assert ka == kb and torch.equal(va, vb)
        assert trained.step == 0 and trained.loss_history == []

    def test_negative_epochs_error(self, pairs):
        with pytest.raises(ScaleError, match="epochs"):
            train_scale(pairs, SMALL, epochs=-1)

    def test_single_sample_overfit(self, pairs):
        weights = train_scale(pairs[:1], SMALL, lr=3e-3, epochs=1000, batch_size=1, seed=0)
        assert weights.step == 1000
        assert min(weights.loss_history) < 1e-4

    def test_first_batch_loss_matches_scalar_loop(self, pairs):
        probe = new_scale_predictor(SMALL, seed=7)
        manual = float(np.mean([
            (predict_scale(cloud, probe) - s) ** 2 for cloud, s in pairs[:4]
        ]))
        weights = train_scale(pairs[:4], init=new_scale_predictor(SMALL, seed=7),
                              lr=1e-5, epochs=1, batch_size=4)
        assert weights.loss_history[0] == pytest.approx(manual, abs=1e-7)

    def test_non_positive_targets_rejected_with_warning(self, pairs, caplog):
        bad = [(pairs[0][0], -1.0), (pairs[1][0], 0.0)]
        with caplog.at_level("WARNING"):
            weights = train_scale(pairs[:2] + bad, SMALL, epochs=1, batch_size=4, seed=1)
        assert "rejected 2 samples" in caplog.text
        assert weights.step == 1  # only the two valid samples trained on

    def test_all_rejected_is_empty_stream(self, pairs):
        bad = [(pairs[0][0], -1.0)]
        with pytest.raises(ScaleError, match="empty training stream"):
            train_scale(bad, SMALL, epochs=1)

    def test_resume_accumulates_steps_and_history(self, pairs):
        weights = train_scale(pairs, SMALL, lr=1e-4, epochs=2, batch_size=3, seed=2)
        steps = weights.step
        out = train_scale(pairs, init=weights, lr=1e-4, epochs=1, batch_size=3)
        assert out is weights
        assert out.step == steps + 2
        assert len(out.loss_history) == out.step

    def test_unknown_schedule_errors(self, pairs):
        with pytest.raises(RuntimeError, match="unknown lr schedule"):
            train_scale(pairs, SMALL, epochs=1, lr_schedule="linear")

    def test_metric_sample_rejected(self, size_toy):
        metric = PointCloud(np.random.default_rng(3).normal(size=(64, 3)))
        with pytest.raises(ScaleError, match="normalize first"):
            train_scale([(metric, 1.0)], SMALL, epochs=1)

    def test_log_lines(self, pairs, tmp_path):
        log = tmp_path / "loss.jsonl"
        train_scale(pairs, SMALL, lr=2e-4, epochs=2, batch_size=3, seed=3,
                    lr_schedule="cosine", warmup_steps=2, log_path=log)
        lines = [json.loads(l) for l in log.read_text().splitlines()]
        assert len(lines) == 4
        assert all(set(l) == {"step", "loss", "lr", "wall_time"} for l in lines)
        assert lines[0]["lr"] == pytest.approx(2e-4 / 2)  # warmup ramp


class TestPersistence:
    def test_round_trip_predictions_bitwise(self, pairs, tmp_path):
        weights = train_scale(pairs, SMALL, lr=1e-4, epochs=1, batch_size=3, seed=4)
        path = tmp_path / "scale.bft"
        save_scale_predictor(weights, path)
        back = load_scale_predictor(path)
        assert back.config == weights.config
        assert back.step == weights.step
        assert back.loss_history == pytest.approx(weights.loss_history)
        cloud = pairs[0][0]
        assert predict_scale(cloud, back) == predict_scale(cloud, weights)

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "notscale.bft"
        write_tensorfile(path, "adapter", {"version": 1}, {"w": np.zeros(2, dtype="<f4")})
        with pytest.raises(ScaleError, match="kind"):
            load_scale_predictor(path)

    def test_missing_version_rejected(self, tmp_path):
        weights = new_scale_predictor(SMALL, seed=0)
        meta = {
            "config": {
                "feature_dim": 32, "encoder_blocks": 1, "num_patches": 8,
                "patch_neighbors": 4, "attention_heads": 2, "mlp_hidden_dims": [32],
            },
            "step": 0,
            "loss_history": [],
        }
        tensors = {k: v.numpy().astype("<f4") for k, v in weights.model.state_dict().items()}
        path = tmp_path / "nover.bft"
        write_tensorfile(path, "scale", meta, tensors)
        with pytest.raises(ScaleError, match="version"):
            load_scale_predictor(path)

    def test_missing_tensor_rejected(self, tmp_path):
        weights = new_scale_predictor(SMALL, seed=0)
        save_scale_predictor(weights, tmp_path / "ok.bft")
        from bodyfit.tensorfile import read_tensorfile

        kind, meta, tensors = read_tensorfile(tmp_path / "ok.bft")
        tensors.pop(sorted(tensors)[0])
        write_tensorfile(tmp_path / "broken.bft", kind, meta, tensors)
        with pytest.raises(ScaleError):
            load_scale_predictor(tmp_path / "broken.bft")
