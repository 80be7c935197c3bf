"""Loss values, the optimizer, checkpoint selection, and evaluation."""

import math

import numpy as np
import pytest

import aiswatch.training as training
from aiswatch.features import FeatureConfig
from aiswatch.ingest import AisMessage
from aiswatch.model import (
    ModelConfig,
    ShapeMismatch,
    forward,
    init_weights,
    softmax,
)
from aiswatch.trackstore import TrackWindow
from aiswatch.training import (
    ADAM_EPS,
    AdamState,
    EmptyDataset,
    LabeledWindow,
    TrainConfig,
    evaluate,
    inverse_frequency_weights,
    load_dataset_jsonl,
    optimizer_step,
    save_dataset_jsonl,
    stratified_split,
    train_and_select,
    weighted_cross_entropy,
)


def make_example(label, sog, seed, n=8, entity="t1"):
    rng = np.random.default_rng(seed)
    t0 = 1_700_000_000 + int(rng.integers(0, 86_400))
    msgs = tuple(
        AisMessage(entity_id=entity, timestamp=t0 + 60 * i,
                   lat=float(10 + 0.001 * i), lon=float(20 + 0.001 * i),
                   sog=float(max(0.0, sog + rng.normal(0, 0.2))),
                   cog=float(rng.uniform(0, 360)))
        for i in range(n)
    )
    return LabeledWindow(
        window=TrackWindow(entity_id=entity, messages=msgs,
                           assembled_at=msgs[-1].timestamp),
        label=label,
    )


def separable_dataset(n_per_class=8):
    out = []
    for i in range(n_per_class):
        out.append(make_example("fast", 15.0, seed=100 + i))
        out.append(make_example("slow", 2.0, seed=200 + i))
    return out


FCFG = FeatureConfig(n_anchor=2)


def tiny_model():
    return ModelConfig(feature_width=FCFG.feature_width, n_classes=2,
                       d_model=8, n_heads=2, d_ff=16, n_cpe_layers=1,
                       n_cnn_layers=1, n_transformer_layers=1, max_seq_len=64)


class TestWeightedCrossEntropy:
    def test_uniform_five_classes(self):
        probs = np.full(5, 0.2)
        assert weighted_cross_entropy(probs, 3, np.ones(5)) \
            == pytest.approx(math.log(5.0), rel=1e-9)

    def test_weight_two_half_prob(self):
        probs = np.array([0.5, 0.5])
        got = weighted_cross_entropy(probs, 0, np.array([2.0, 1.0]))
        assert got == pytest.approx(1.3862943611, abs=1e-9)

    def test_perfect_prediction_near_zero(self):
        probs = np.array([1.0, 0.0])
        assert abs(weighted_cross_entropy(probs, 0, np.ones(2))) < 1e-11


class TestOptimizerStep:
    def test_zero_gradient_is_noop(self):
        cfg = tiny_model()
        w = init_weights(cfg, seed=0)
        before = {k: a.copy() for k, a in w.arrays.items()}
        grads = {k: np.zeros_like(a) for k, a in w.arrays.items()}
        optimizer_step(w, grads, AdamState.zeros_like(w), lr=0.01)
        for k, a in w.arrays.items():
            assert np.array_equal(a, before[k])

    def test_first_step_hand_value(self):
        """After one step with constant gradient g, every entry moves by
        exactly -lr * g / (|g| + eps)."""
        cfg = tiny_model()
        w = init_weights(cfg, seed=1)
        before = {k: a.copy() for k, a in w.arrays.items()}
        g0 = 0.5
        grads = {k: np.full_like(a, g0) for k, a in w.arrays.items()}
        lr = 1e-3
        optimizer_step(w, grads, AdamState.zeros_like(w), lr=lr)
        expected = -lr * g0 / (abs(g0) + ADAM_EPS)
        for k, a in w.arrays.items():
            assert np.allclose(a - before[k], expected, rtol=1e-12, atol=0)

    def test_first_step_two_element_signs(self):
        cfg = tiny_model()
        w = init_weights(cfg, seed=2)
        before = w.arrays["head.b"].copy()
        grads = {k: np.zeros_like(a) for k, a in w.arrays.items()}
        grads["head.b"] = np.array([3.0, -0.2])
        lr = 0.01
        optimizer_step(w, grads, AdamState.zeros_like(w), lr=lr)
        delta = w.arrays["head.b"] - before
        assert delta[0] == pytest.approx(-lr * 3.0 / (3.0 + ADAM_EPS),
                                         rel=1e-12)
        assert delta[1] == pytest.approx(lr * 0.2 / (0.2 + ADAM_EPS),
                                         rel=1e-12)

    def test_constant_gradient_accumulates_linearly(self):
        cfg = tiny_model()
        w = init_weights(cfg, seed=3)
        before = w.arrays["head.b"].copy()
        state = AdamState.zeros_like(w)
        grads = {k: np.zeros_like(a) for k, a in w.arrays.items()}
        grads["head.b"] = np.full(2, 1.0)
        for _ in range(5):
            optimizer_step(w, grads, state, lr=1e-3)
        assert np.allclose(w.arrays["head.b"] - before, -5e-3, rtol=1e-6)

    def test_shape_mismatch_rejected(self):
        cfg = tiny_model()
        w = init_weights(cfg, seed=0)
        grads = {k: np.zeros_like(a) for k, a in w.arrays.items()}
        grads["head.b"] = np.zeros(3)
        with pytest.raises(ShapeMismatch):
            optimizer_step(w, grads, AdamState.zeros_like(w), lr=0.01)
        with pytest.raises(ShapeMismatch):
            optimizer_step(w, {"head.b": np.zeros(2)},
                           AdamState.zeros_like(w), lr=0.01)


class TestClassWeights:
    def test_inverse_frequency_hand_values(self):
        labels = [0] * 10 + [1] * 30
        w = inverse_frequency_weights(labels, 2)
        assert w == pytest.approx([1.5, 0.5])

    def test_balanced_gives_ones(self):
        w = inverse_frequency_weights([0, 0, 1, 1, 2, 2], 3)
        assert w == pytest.approx([1.0, 1.0, 1.0])

    def test_mean_of_present_is_one(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 4, size=100).tolist()
        w = inverse_frequency_weights(labels, 4)
        assert float(np.mean(w)) == pytest.approx(1.0)

    def test_absent_class_tracks_normalization(self):
        w = inverse_frequency_weights([0, 0], 2)
        # class 0: 1/2 -> normalized to 1; absent class keeps raw weight 1
        assert w[0] == pytest.approx(1.0)
        assert w[1] == pytest.approx(2.0)


class TestStratifiedSplit:
    def test_disjoint_and_covering(self):
        labels = [0] * 10 + [1] * 6 + [2] * 4
        train, val = stratified_split(labels, 0.25,
                                      np.random.default_rng(0))
        assert sorted(train + val) == list(range(20))
        assert set(train).isdisjoint(val)

    def test_every_class_with_two_examples_hits_validation(self):
        labels = [0] * 50 + [1, 1] + [2] * 3
        _, val = stratified_split(labels, 0.1, np.random.default_rng(1))
        val_classes = {labels[i] for i in val}
        assert val_classes == {0, 1, 2}

    def test_singleton_class_stays_in_train(self):
        labels = [0] * 10 + [1]
        train, val = stratified_split(labels, 0.2, np.random.default_rng(2))
        assert labels.index(1) in train

    def test_zero_fraction_gives_empty_val(self):
        train, val = stratified_split([0, 0, 1, 1], 0.0,
                                      np.random.default_rng(3))
        assert val == []
        assert len(train) == 4


class TestSelectionRule:
    def _scripted_run(self, monkeypatch, val_losses):
        script = list(val_losses)
        monkeypatch.setattr(training, "_mean_loss",
                            lambda *a, **k: script.pop(0))
        dataset = separable_dataset(4)
        tcfg = TrainConfig(batch_size=4, learning_rate=1e-3,
                           n_epochs=len(val_losses), seed=0,
                           val_fraction=0.25)
        return train_and_select(dataset, tiny_model(), tcfg, fcfg=FCFG)

    def test_minimum_wins(self, monkeypatch):
        result = self._scripted_run(monkeypatch, [0.9, 0.7, 0.8, 0.75])
        assert result.best_epoch == 2
        assert [e.val_loss for e in result.log] == [0.9, 0.7, 0.8, 0.75]

    def test_tie_resolves_to_earliest(self, monkeypatch):
        result = self._scripted_run(monkeypatch, [0.7, 0.7])
        assert result.best_epoch == 1

    def test_single_epoch(self, monkeypatch):
        result = self._scripted_run(monkeypatch, [1.23])
        assert result.best_epoch == 1
        assert len(result.log) == 1

    def test_selected_weights_are_the_epoch_snapshot(self, monkeypatch):
        """The returned weights equal the state right after the best epoch,
        not the final state."""
        long_run = self._scripted_run(monkeypatch, [0.9, 0.7, 0.8, 0.75])
        short_run = self._scripted_run(monkeypatch, [0.9, 0.1])
        assert long_run.best_epoch == short_run.best_epoch == 2
        for k, a in long_run.weights.arrays.items():
            assert np.array_equal(a, short_run.weights.arrays[k])


class TestTrainAndSelect:
    def test_empty_dataset_rejected(self):
        with pytest.raises(EmptyDataset):
            train_and_select([], tiny_model(), TrainConfig())

    def test_class_count_mismatch_rejected(self):
        dataset = [make_example("a", 5.0, seed=0)]
        with pytest.raises(EmptyDataset):
            train_and_select(dataset, tiny_model(), TrainConfig(),
                             fcfg=FCFG)  # model expects 2 classes

    def test_loss_drops_on_separable_data(self):
        dataset = separable_dataset(8)
        cfg = tiny_model()
        tcfg = TrainConfig(batch_size=8, learning_rate=3e-3, n_epochs=6,
                           seed=0, val_fraction=0.25)
        result = train_and_select(dataset, cfg, tcfg, fcfg=FCFG)

        names = ("fast", "slow")
        init = init_weights(cfg, tcfg.seed)

        def mean_loss(weights):
            total = 0.0
            for ex in dataset:
                x = training.build_features(ex.window, FCFG).rows
                probs = softmax(forward(cfg, weights, x))
                total += weighted_cross_entropy(
                    probs, names.index(ex.label), result.class_weights)
            return total / len(dataset)

        assert mean_loss(result.weights) < mean_loss(init)

    def test_reproducible_bit_for_bit(self):
        dataset = separable_dataset(4)
        tcfg = TrainConfig(batch_size=4, learning_rate=1e-3, n_epochs=3,
                           seed=7, val_fraction=0.25)
        a = train_and_select(dataset, tiny_model(), tcfg, fcfg=FCFG)
        b = train_and_select(dataset, tiny_model(), tcfg, fcfg=FCFG)
        assert a.best_epoch == b.best_epoch
        assert [(e.train_loss, e.val_loss) for e in a.log] \
            == [(e.train_loss, e.val_loss) for e in b.log]
        for k, arr in a.weights.arrays.items():
            assert np.array_equal(arr, b.weights.arrays[k])

    def test_class_weight_scaling_scales_losses_not_argmin(self):
        dataset = separable_dataset(4)
        base = TrainConfig(batch_size=4, learning_rate=1e-3, n_epochs=4,
                           seed=0, val_fraction=0.25,
                           class_weights=(1.0, 1.0))
        tripled = TrainConfig(batch_size=4, learning_rate=1e-3, n_epochs=4,
                              seed=0, val_fraction=0.25,
                              class_weights=(3.0, 3.0))
        a = train_and_select(dataset, tiny_model(), base, fcfg=FCFG)
        b = train_and_select(dataset, tiny_model(), tripled, fcfg=FCFG)
        assert b.best_epoch == a.best_epoch
        for ea, eb in zip(a.log, b.log):
            assert eb.train_loss == pytest.approx(3.0 * ea.train_loss,
                                                  rel=1e-4)
            assert eb.val_loss == pytest.approx(3.0 * ea.val_loss, rel=1e-4)

    def test_explicit_validation_set(self):
        train_set = separable_dataset(4)
        val_set = separable_dataset(2)
        tcfg = TrainConfig(batch_size=4, learning_rate=1e-3, n_epochs=2,
                           seed=0)
        result = train_and_select(train_set, tiny_model(), tcfg, fcfg=FCFG,
                                  val_dataset=val_set)
        assert len(result.log) == 2
        assert result.best_epoch in (1, 2)

    def test_epoch_log_is_one_based_and_complete(self):
        dataset = separable_dataset(3)
        tcfg = TrainConfig(batch_size=4, learning_rate=1e-3, n_epochs=3,
                           seed=1, val_fraction=0.2)
        result = train_and_select(dataset, tiny_model(), tcfg, fcfg=FCFG)
        assert [e.epoch for e in result.log] == [1, 2, 3]


class TestEvaluate:
    def _constant_predictor(self):
        """All-zero weights predict class 0 everywhere (argmax tie -> 0)."""
        cfg = tiny_model()
        w = init_weights(cfg, seed=0)
        for a in w.arrays.values():
            a[:] = 0.0
        return cfg, w

    def test_hand_built_counts(self):
        cfg, w = self._constant_predictor()
        dataset = [make_example("fast", 5.0, seed=1),
                   make_example("fast", 5.0, seed=2),
                   make_example("slow", 5.0, seed=3)]
        r = evaluate(cfg, w, dataset, fcfg=FCFG,
                     class_names=("fast", "slow"))
        assert r.accuracy == pytest.approx(2.0 / 3.0)
        assert r.confusion.tolist() == [[2, 0], [1, 0]]
        assert r.per_class_recall["fast"] == 1.0
        assert r.per_class_recall["slow"] == 0.0

    def test_constant_predictor_on_balanced_set(self):
        cfg, w = self._constant_predictor()
        dataset = [make_example("fast", 5.0, seed=1),
                   make_example("slow", 5.0, seed=2)]
        r = evaluate(cfg, w, dataset, fcfg=FCFG,
                     class_names=("fast", "slow"))
        assert r.accuracy == pytest.approx(0.5)

    def test_all_correct_identity_matrix_and_absent_recall(self):
        cfg, w = self._constant_predictor()
        dataset = [make_example("fast", 5.0, seed=i) for i in range(4)]
        r = evaluate(cfg, w, dataset, fcfg=FCFG,
                     class_names=("fast", "slow"))
        assert r.accuracy == 1.0
        assert r.confusion.tolist() == [[4, 0], [0, 0]]
        assert r.per_class_recall["slow"] is None

    def test_empty_rejected(self):
        cfg, w = self._constant_predictor()
        with pytest.raises(EmptyDataset):
            evaluate(cfg, w, [], fcfg=FCFG)


class TestDatasetJsonl:
    def test_round_trip(self, tmp_path):
        dataset = separable_dataset(3)
        path = tmp_path / "data.jsonl"
        save_dataset_jsonl(path, dataset)
        loaded = load_dataset_jsonl(path)
        assert len(loaded) == len(dataset)
        for a, b in zip(dataset, loaded):
            assert a.label == b.label
            assert a.window.messages == b.window.messages

    def test_vessel_type_preserved(self, tmp_path):
        msg = AisMessage(entity_id="v", timestamp=100, lat=0.0, lon=0.0,
                         sog=1.0, cog=0.0, vessel_type="trawler")
        ex = LabeledWindow(
            window=TrackWindow(entity_id="v", messages=(msg,),
                               assembled_at=100),
            label="fishing")
        path = tmp_path / "one.jsonl"
        save_dataset_jsonl(path, [ex])
        assert load_dataset_jsonl(path)[0].window.messages[0].vessel_type \
            == "trawler"

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(EmptyDataset):
            load_dataset_jsonl(path)


class TestTrainConfigValidation:
    def test_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(n_epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(val_fraction=1.0)
        with pytest.raises(ValueError):
            TrainConfig(class_weights=(1.0, -2.0))
