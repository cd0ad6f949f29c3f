from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import tiny_dataset_config, tiny_train_config
from margintrack.metricspace import ContractViolation
from margintrack.mining import MarginParams
from margintrack.synthdata import Box, FrameData, generate_dataset
from margintrack.trainer import (
    HISTORY_COLUMNS,
    Models,
    TrainConfig,
    TrainerState,
    init_models,
    load_models,
    models_from_dict,
    models_to_dict,
    read_history_csv,
    save_models,
    train,
    train_step,
    write_history_csv,
)


def all_params(models: Models) -> np.ndarray:
    return np.concatenate(
        [
            models.net_r.get_params(),
            models.net_t.get_params(),
            models.fusion.get_params(),
            models.classifier.get_params(),
        ]
    )


class TestTrainConfig:
    def test_stock_defaults(self):
        c = TrainConfig()
        assert c.margin == MarginParams(1.6, 0.1, 0.2, 0.2)
        assert c.lr_feature == 1e-4
        assert c.lr_fc == 1e-3
        assert c.momentum == 0.9
        assert c.epochs == 30
        assert (c.n_pos, c.n_neg) == (64, 196)
        assert c.distance_convention == "squared"

    def test_zero_learning_rate_allowed(self):
        c = TrainConfig(lr_fc=0.0, lr_feature=0.0)
        assert c.lr_fc == 0.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(epochs=0),
            dict(momentum=1.0),
            dict(momentum=-0.1),
            dict(lr_fc=-1e-3),
            dict(lr_feature=float("inf")),
            dict(distance_convention="cosine"),
            dict(metric_variant="contrastive"),
        ],
    )
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ContractViolation):
            TrainConfig(**kwargs)

    def test_flat_dict_round_trip(self):
        c = tiny_train_config(momentum=0.5, use_cross=False)
        doc = c.to_dict()
        assert doc["alpha"] == 1.6 and doc["m"] == 0.2  # margin is flattened
        assert TrainConfig.from_dict(doc) == c

    def test_unknown_keys_rejected(self):
        doc = TrainConfig().to_dict()
        doc["learning_rate"] = 0.1
        with pytest.raises(ContractViolation):
            TrainConfig.from_dict(doc)

    def test_file_round_trip(self, tmp_path):
        c = tiny_train_config(seed=17)
        path = tmp_path / "config.json"
        c.to_file(path)
        assert TrainConfig.from_file(path) == c


class TestInitModels:
    def test_deterministic(self):
        c = tiny_train_config()
        a = init_models(c, feature_dim=6)
        b = init_models(c, feature_dim=6)
        np.testing.assert_array_equal(all_params(a), all_params(b))

    def test_modality_nets_are_distinct(self):
        m = init_models(tiny_train_config(), feature_dim=6)
        assert np.any(m.net_r.get_params() != m.net_t.get_params())

    def test_classifier_sees_doubled_dim(self):
        m = init_models(tiny_train_config(), feature_dim=6)
        assert m.classifier.spec.layer_dims[0] == 12


class TestSgdRule:
    def test_hand_computed_two_steps(self):
        state = TrainerState()
        theta = np.array([0.0])
        g = np.array([1.0])
        theta = state.sgd("k", theta, g, lr=0.1, momentum=0.9)
        assert theta[0] == pytest.approx(-0.1, abs=1e-15)
        theta = state.sgd("k", theta, g, lr=0.1, momentum=0.9)
        # v2 = 0.9 * (-0.1) - 0.1 = -0.19; theta2 = -0.1 - 0.19 = -0.29
        assert theta[0] == pytest.approx(-0.29, abs=1e-15)

    def test_velocity_is_per_key(self):
        state = TrainerState()
        g = np.array([1.0])
        state.sgd("a", np.zeros(1), g, lr=0.1, momentum=0.9)
        theta_b = state.sgd("b", np.zeros(1), g, lr=0.1, momentum=0.9)
        assert theta_b[0] == pytest.approx(-0.1, abs=1e-15)


def converged_frame(feature_dim: int = 6, n_pos: int = 3, n_neg: int = 5) -> FrameData:
    """A frame whose positives coincide with the anchor feature.

    With a microscopic alpha and zero m/delta the mined sets are empty and
    the cross hinge is inactive, so every metric loss term is exactly zero.
    """
    rng = np.random.default_rng(42)
    anchor = rng.normal(size=feature_dim)
    x_pos = np.tile(anchor, (n_pos, 1))
    x_neg = rng.normal(size=(n_neg, feature_dim)) * 3.0
    gt = Box(0.0, 0.0, 1.0, 1.0)
    n = n_pos + n_neg
    return FrameData(
        seq_index=0,
        frame_index=0,
        gt=gt,
        anchor_r=anchor.copy(),
        anchor_t=anchor.copy(),
        boxes=[gt] * n,
        ious=np.ones(n),
        positive_mask=np.array([True] * n_pos + [False] * n_neg),
        x_r=np.vstack([x_pos, x_neg]),
        x_t=np.vstack([x_pos, x_neg * 1.5]),
    )


class TestTrainStep:
    def test_zero_learning_rate_is_a_no_op_update(self, tiny_dataset):
        frame = tiny_dataset[0].frames[0]
        config = tiny_train_config(lr_fc=0.0, lr_feature=0.0)
        models = init_models(config, frame.x_r.shape[1])
        before = all_params(models)
        out = train_step(models, frame, config, TrainerState())
        np.testing.assert_array_equal(all_params(models), before)
        assert np.isfinite(out["total"])
        assert out["l_cls"] > 0.0

    def test_converged_metric_batch_only_trains_classifier(self):
        frame = converged_frame()
        config = tiny_train_config(
            margin=MarginParams(alpha=1e-6, beta=0.0, m=0.0, delta=0.0)
        )
        models = init_models(config, 6)
        net_r_before = models.net_r.get_params()
        net_t_before = models.net_t.get_params()
        cls_before = models.classifier.get_params()
        out = train_step(models, frame, config, TrainerState())
        assert out["l_rgb"] == 0.0
        assert out["l_t"] == 0.0
        assert out["l_cross"] == 0.0
        assert out["l_cls"] > 0.0
        np.testing.assert_array_equal(models.net_r.get_params(), net_r_before)
        np.testing.assert_array_equal(models.net_t.get_params(), net_t_before)
        assert np.any(models.classifier.get_params() != cls_before)

    def test_single_step_descends_on_the_same_batch(self, tiny_dataset):
        frame = tiny_dataset[0].frames[0]
        config = tiny_train_config(lr_fc=1e-3, momentum=0.0)
        models = init_models(config, frame.x_r.shape[1])
        eval_config = tiny_train_config(lr_fc=0.0, lr_feature=0.0, momentum=0.0)
        before = train_step(models, frame, eval_config, TrainerState())["total"]
        train_step(models, frame, config, TrainerState())
        after = train_step(models, frame, eval_config, TrainerState())["total"]
        assert after < before


class TestTrain:
    def test_one_frame_one_epoch_one_step(self):
        data = generate_dataset(tiny_dataset_config(n_sequences=1, n_frames=1), seed=0)
        config = tiny_train_config(epochs=1)
        _, history = train(config, data)
        assert len(history.steps) == 1

    def test_empty_dataset_rejected(self):
        with pytest.raises(ContractViolation):
            train(tiny_train_config(), [])

    def test_bitwise_deterministic(self, tiny_dataset):
        config = tiny_train_config()
        m1, h1 = train(config, tiny_dataset)
        m2, h2 = train(config, tiny_dataset)
        np.testing.assert_array_equal(all_params(m1), all_params(m2))
        assert h1.steps == h2.steps
        assert json.dumps(models_to_dict(m1), sort_keys=True) == json.dumps(
            models_to_dict(m2), sort_keys=True
        )

    def test_history_totals_resum(self, tiny_dataset):
        config = tiny_train_config(w_mmsl=0.7, w_cls=1.3)
        _, history = train(config, tiny_dataset)
        assert history.totals_consistent(config)

    def test_mmsl_weight_zero_isolates_embedding_nets(self, tiny_dataset):
        config = tiny_train_config(w_mmsl=0.0)
        init = init_models(config, tiny_dataset[0].frames[0].x_r.shape[1])
        models, _ = train(config, tiny_dataset)
        np.testing.assert_array_equal(
            models.net_r.get_params(), init.net_r.get_params()
        )
        np.testing.assert_array_equal(
            models.net_t.get_params(), init.net_t.get_params()
        )
        assert np.any(models.classifier.get_params() != init.classifier.get_params())

    def test_mined_sets_shrink_with_training(self):
        data = generate_dataset(tiny_dataset_config(n_sequences=2, n_frames=8), seed=3)
        config = tiny_train_config(epochs=12, lr_fc=3e-3)
        _, history = train(config, data)
        sizes = [
            r.mined_pos_r + r.mined_neg_r + r.mined_pos_t + r.mined_neg_t
            for r in history.steps
        ]
        k = max(1, len(sizes) // 10)
        assert np.mean(sizes[-k:]) < np.mean(sizes[:k])

    def test_mined_union_records_ids_per_frame(self, tiny_dataset):
        config = tiny_train_config(epochs=1)
        _, history = train(config, tiny_dataset)
        assert history.mined_union  # confuser-rich data must mine something
        for (seq, frame, modality), (pos_ids, neg_ids) in history.mined_union.items():
            assert modality in ("rgb", "thermal")
            fd = tiny_dataset[seq].frames[frame]
            n = len(fd.positive_mask)
            assert all(0 <= i < n for i in pos_ids | neg_ids)


class TestPersistence:
    def test_models_json_round_trip(self, tmp_path, tiny_dataset):
        config = tiny_train_config(epochs=1)
        models, _ = train(config, tiny_dataset)
        path = tmp_path / "models.json"
        save_models(path, models, config)
        back = load_models(path)
        np.testing.assert_array_equal(all_params(back), all_params(models))
        doc = json.loads(path.read_text())
        assert doc["config"]["epochs"] == 1

    def test_models_dict_round_trip_without_config(self):
        models = init_models(tiny_train_config(), feature_dim=5)
        back = models_from_dict(models_to_dict(models))
        np.testing.assert_array_equal(all_params(back), all_params(models))

    def test_history_csv_round_trip(self, tmp_path, tiny_dataset):
        config = tiny_train_config(epochs=1)
        _, history = train(config, tiny_dataset)
        path = tmp_path / "history.csv"
        write_history_csv(path, history)
        back = read_history_csv(path)
        assert back == history.steps
        header = path.read_text().splitlines()[0]
        assert tuple(header.split(",")) == HISTORY_COLUMNS

    def test_history_csv_header_checked(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("step,epoch\n0,0\n")
        with pytest.raises(ContractViolation):
            read_history_csv(path)
