import dataclasses
import itertools

import numpy as np
import pytest

from mmvit.config import AugmentConfig, ConfigError, MMViTConfig, RunConfig, TrainConfig
from mmvit.data import DatasetError, DatasetIndex, load_dataset, make_synthetic, weighted_sampler, write_manifest
from mmvit.formats import write_ntc
from mmvit.metrics import average_precision, evaluate, mean_average_precision, top1_accuracy
from mmvit.model import MMViT
from mmvit.optim import MissingGradientError, OptimizerState, adamw_step, clip_grad_norm, warmup_constant
from mmvit.tensor import Tensor
from mmvit.train import TrainingDivergedError, num_workers_from_env, train

from helpers import brute_average_precision


def param(value, grad=None):
    p = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
    if grad is not None:
        p.grad = Tensor(np.asarray(grad, dtype=np.float64))
    return p


class TestAdamW:
    def test_zero_grad_no_decay_is_noop(self):
        p = param([1.0, -2.0, 3.0], [0.0, 0.0, 0.0])
        state = OptimizerState(lr=0.1, weight_decay=0.0)
        for _ in range(5):
            adamw_step({"p": p}, state)
        np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])

    def test_zero_grad_with_decay_scales(self):
        p = param([1.0, -2.0, 3.0], [0.0, 0.0, 0.0])
        adamw_step({"p": p}, OptimizerState(lr=0.1, weight_decay=0.01))
        np.testing.assert_allclose(p.data, np.array([1.0, -2.0, 3.0]) * (1 - 0.1 * 0.01), rtol=1e-15)

    def test_first_step_by_hand(self):
        p = param([1.0], [1.0])
        state = OptimizerState(lr=0.1, weight_decay=0.0)
        adamw_step({"p": p}, state)
        assert abs(p.data[0] - (1 - 0.1 / (1 + 1e-8))) < 1e-15
        assert state.step == 1

    def test_second_step_uses_bias_correction(self):
        p = param([0.0], [2.0])
        state = OptimizerState(lr=1.0, weight_decay=0.0, eps=0.0)
        adamw_step({"p": p}, state)
        p.grad = Tensor(np.array([4.0]))
        adamw_step({"p": p}, state)
        m = (0.9 * 0.1 * 2 + 0.1 * 4) / (1 - 0.9 ** 2)
        v = (0.999 * 0.001 * 4 + 0.001 * 16) / (1 - 0.999 ** 2)
        np.testing.assert_allclose(p.data, [-1.0 - m / np.sqrt(v)], rtol=1e-12)

    def test_missing_gradient_named(self):
        with pytest.raises(MissingGradientError, match="blocks.0.w"):
            adamw_step({"ok": param([1.0], [1.0]), "blocks.0.w": param([1.0])}, OptimizerState())

    def test_finite_stays_finite(self):
        rng = np.random.default_rng(0)
        state = OptimizerState(lr=1e-3)
        p = param(rng.standard_normal(100) * 1e3)
        for _ in range(20):
            p.grad = Tensor(rng.standard_normal(100) * 1e6)
            adamw_step({"p": p}, state)
            assert np.all(np.isfinite(p.data))

    def test_state_roundtrip(self):
        p = param([1.0, 2.0], [0.5, -0.5])
        state = OptimizerState()
        adamw_step({"p": p}, state)
        other = OptimizerState()
        other.load_arrays(state.to_arrays())
        assert other.step == 1
        np.testing.assert_array_equal(other.m["p"], state.m["p"])
        np.testing.assert_array_equal(other.v["p"], state.v["p"])


def test_clip_grad_norm():
    a, b = param([0.0], [3.0]), param([0.0], [4.0])
    assert clip_grad_norm([a, b], 1.0) == 5.0
    np.testing.assert_allclose([a.grad.data[0], b.grad.data[0]], [0.6, 0.8])
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)


def test_warmup_then_constant():
    lrs = [warmup_constant(s, 100, 1.0, 0.05) for s in range(100)]
    assert lrs[:5] == [0.2, 0.4, 0.6, 0.8, 1.0] and set(lrs[5:]) == {1.0}
    assert warmup_constant(0, 100, 1.0, 0.0) == 1.0


def index_of(labels, n_classes):
    return DatasetIndex("mem", [(f"x{i}", tuple(l)) for i, l in enumerate(labels)], [f"c{c}" for c in range(n_classes)])


class TestSampler:
    def test_balanced_classes_within_three_sigma(self):
        idx = index_of([(i % 4,) for i in range(40)], 4)
        draws = weighted_sampler(idx, np.random.default_rng(0), 100_000)
        counts = np.bincount([idx.entries[i][1][0] for i in draws], minlength=4)
        sigma = np.sqrt(100_000 * 0.25 * 0.75)
        assert np.all(np.abs(counts - 25_000) < 3 * sigma)

    def test_imbalanced_classes_equalized(self):
        labels = [(0,)] * 30 + [(1,)] * 9 + [(2,)]
        idx = index_of(labels, 3)
        draws = weighted_sampler(idx, np.random.default_rng(1), 100_000)
        counts = np.bincount([idx.entries[i][1][0] for i in draws], minlength=3)
        sigma = np.sqrt(100_000 * (1 / 3) * (2 / 3))
        assert np.all(np.abs(counts - 100_000 / 3) < 3 * sigma)

    def test_rare_class_weight(self):
        idx = index_of([(0,), (0,), (0, 1), (0,)], 2)
        w = idx.sample_weights()
        np.testing.assert_allclose(w, [0.25, 0.25, 1.25, 0.25])
        assert w[2] - 1.0 == pytest.approx(w[0])

    def test_equal_weights_uniform(self):
        idx = index_of([(i,) for i in range(5)], 5)
        assert np.all(idx.sample_weights() == 1.0)
        draws = weighted_sampler(idx, np.random.default_rng(2), 50_000)
        counts = np.bincount(draws, minlength=5)
        assert np.all(np.abs(counts - 10_000) < 3 * np.sqrt(50_000 * 0.2 * 0.8))

    def test_empty_rejected(self):
        with pytest.raises(DatasetError):
            index_of([], 2)


class TestMAP:
    def test_hand_example(self):
        assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-12)

    def test_perfect_ranking(self):
        labels = np.array([[1, 0], [1, 0], [0, 1], [0, 0]])
        scores = labels + 0.1 * np.arange(4)[:, None] * 0
        report = mean_average_precision(scores.astype(float), labels)
        assert report.value == 1.0 and np.all(report.per_class_ap == 1.0)

    def test_exhaustive_small_instances(self):
        rng = np.random.default_rng(0)
        for n in range(1, 9):
            score_sets = [rng.integers(0, 3, n).astype(float) for _ in range(3)] + [rng.standard_normal(n)]
            for bits in itertools.product([0, 1], repeat=n):
                if not any(bits):
                    continue
                for scores in score_sets:
                    assert average_precision(scores, bits) == brute_average_precision(list(scores), bits)

    def test_multi_class_against_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            n, c = int(rng.integers(1, 9)), int(rng.integers(1, 4))
            labels = rng.integers(0, 2, (n, c))
            if not labels.any():
                continue
            scores = rng.integers(0, 4, (n, c)).astype(float)
            report = mean_average_precision(scores, labels)
            per_class = [brute_average_precision(list(scores[:, j]), labels[:, j]) for j in range(c) if labels[:, j].any()]
            assert report.value == pytest.approx(np.mean(per_class), abs=1e-15)
            assert report.absent_classes == [j for j in range(c) if not labels[:, j].any()]

    def test_monotone_invariance(self):
        rng = np.random.default_rng(2)
        scores = rng.standard_normal((30, 4))
        labels = rng.integers(0, 2, (30, 4))
        base = mean_average_precision(scores, labels).value
        for f in (np.exp, lambda s: 3 * s - 7, lambda s: s ** 3, np.arctan):
            assert mean_average_precision(f(scores), labels).value == base

    def test_no_positives(self):
        with pytest.raises(ValueError):
            mean_average_precision(np.zeros((3, 2)), np.zeros((3, 2)))


class TestTop1:
    def test_one_hot(self):
        labels = np.array([2, 0, 1])
        assert top1_accuracy(np.eye(3)[labels], labels) == 1.0

    def test_ties_go_low(self):
        assert top1_accuracy(np.ones((4, 3)), [1, 2, 1, 2]) == 0.0
        assert top1_accuracy(np.ones((2, 3)), [0, 0]) == 1.0

    def test_three_of_four(self):
        scores = np.eye(4)
        assert top1_accuracy(scores, [0, 1, 2, 0]) == 0.75

    def test_accepts_one_hot_labels(self):
        assert evaluate(np.eye(3), np.eye(3), "single-label").value == 1.0


MICRO = MMViTConfig(input=(1, 16, 8), embed_dim=8, stage_self_counts=(0, 1), heads=(1, 2), num_classes=3, task="single-label")


def micro_run(**train):
    t = dict(lr=1e-3, weight_decay=0.0, batch_size=4, epochs=2, seed=3)
    t.update(train)
    return RunConfig(model=MICRO, aug=AugmentConfig(specaug_max_time=4, specaug_max_freq=2), train=TrainConfig(**t))


@pytest.fixture(scope="module")
def micro_data(tmp_path_factory):
    return make_synthetic(tmp_path_factory.mktemp("micro"), 10, 3, shape=(1, 16, 8), seed=1)


def strip_wall(history):
    return [{k: v for k, v in row.items() if k != "wall_ms"} for row in history]


class TestTrain:
    def test_zero_lr_leaves_parameters(self, micro_data):
        cfg = micro_run(lr=0.0)
        before = MMViT(cfg.model).state_dict()
        result = train(cfg, micro_data, num_workers=1)
        assert result.step == 6
        for name, value in result.model.state_dict().items():
            assert value.tobytes() == before[name].tobytes()

    def test_same_seed_identical(self, micro_data, tmp_path):
        a = train(micro_run(), micro_data, tmp_path / "a", num_workers=1)
        b = train(micro_run(), micro_data, tmp_path / "b", num_workers=1)
        assert strip_wall(a.history) == strip_wall(b.history)
        for name, value in a.model.state_dict().items():
            assert value.tobytes() == b.model.state_dict()[name].tobytes()
        rows_a = [r.split(",")[:5] for r in (tmp_path / "a" / "metrics.csv").read_text().splitlines()]
        rows_b = [r.split(",")[:5] for r in (tmp_path / "b" / "metrics.csv").read_text().splitlines()]
        assert rows_a == rows_b and rows_a[0] == ["epoch", "step", "loss", "metric", "lr"]
        assert (tmp_path / "a" / "best.ckpt").is_file()

    def test_seed_changes_run(self, micro_data):
        a = train(micro_run(seed=1, epochs=1), micro_data, num_workers=1)
        b = train(micro_run(seed=2, epochs=1), micro_data, num_workers=1)
        assert a.history[0]["loss"] != b.history[0]["loss"]

    def test_threaded_loader_matches_single_worker(self, micro_data):
        a = train(micro_run(epochs=1), micro_data, num_workers=1)
        b = train(micro_run(epochs=1), micro_data, num_workers=3)
        assert strip_wall(a.history) == strip_wall(b.history)

    def test_resume_continues(self, micro_data, tmp_path):
        full = train(micro_run(epochs=2), micro_data, tmp_path / "full", num_workers=1)
        train(micro_run(epochs=1), micro_data, tmp_path / "part", num_workers=1)
        resumed = train(micro_run(epochs=2), micro_data, tmp_path / "part", resume=True, num_workers=1)
        assert [r["step"] for r in resumed.history] == [6]
        assert strip_wall(resumed.history) == strip_wall(full.history[1:])
        steps = [int(r.split(",")[1]) for r in (tmp_path / "part" / "metrics.csv").read_text().splitlines()[1:]]
        assert steps == [3, 6]

    def test_divergence_guard(self, tmp_path):
        root = tmp_path / "bad"
        root.mkdir()
        write_ntc(root / "a.ntc", np.full((1, 16, 8), np.inf, dtype=np.float32))
        write_ntc(root / "b.ntc", np.zeros((1, 16, 8), dtype=np.float32))
        write_manifest(root, [("a.ntc", (0,)), ("b.ntc", (1,))], ["a", "b", "c"])
        cfg = dataclasses.replace(micro_run(), aug=AugmentConfig(enabled=False))
        with pytest.raises(TrainingDivergedError, match="step 1"):
            train(cfg, load_dataset(root), num_workers=1)

    def test_multilabel_data_needs_multilabel_task(self, tmp_path):
        data = make_synthetic(tmp_path / "ml", 6, 3, shape=(1, 16, 8), multilabel=True, seed=4)
        assert data.is_multilabel
        with pytest.raises(ConfigError, match="model.task"):
            train(micro_run(), data)
        cfg = dataclasses.replace(micro_run(epochs=1), model=dataclasses.replace(MICRO, task="multilabel"))
        result = train(cfg, data, num_workers=1)
        assert 0.0 <= result.history[0]["metric"] <= 1.0

    def test_class_count_mismatch(self, micro_data):
        cfg = dataclasses.replace(micro_run(), model=dataclasses.replace(MICRO, num_classes=4))
        with pytest.raises(ConfigError, match="num_classes"):
            train(cfg, micro_data)


def test_workers_env(monkeypatch):
    monkeypatch.setenv("MMVIT_NUM_WORKERS", "4")
    assert num_workers_from_env() == 4
    monkeypatch.setenv("MMVIT_NUM_WORKERS", "many")
    with pytest.raises(ConfigError):
        num_workers_from_env()


class TestDatasetFiles:
    def test_manifest_roundtrip(self, tmp_path):
        data = make_synthetic(tmp_path, 4, 2, shape=(1, 8, 4))
        again = load_dataset(tmp_path)
        assert again.entries == data.entries and again.class_names == ["class0", "class1"]
        assert again.features(0).shape == (1, 8, 4)

    def test_bad_class_id(self, tmp_path):
        write_manifest(tmp_path, [("a.ntc", (5,))], ["x"])
        with pytest.raises(DatasetError, match="class id 5"):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest"):
            load_dataset(tmp_path)

    def test_shape_mismatch(self, tmp_path):
        data = make_synthetic(tmp_path, 2, 2, shape=(1, 8, 4))
        with pytest.raises(DatasetError, match="model expects"):
            data.features(0, (1, 16, 8))
