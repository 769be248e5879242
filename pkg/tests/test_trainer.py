import math

import numpy as np
import pytest

from shrinkforge import network as nw
from shrinkforge.data import Dataset, synth_generate
from shrinkforge.errors import CompatibilityError, ConfigError, NumericalError
from shrinkforge.trainer import AdamState, RunMetrics, TrainConfig, adam_step, train


def small_spec(shape=(1, 4, 4), classes=2):
    return nw.NetworkSpec([nw.conv("conv1", 4), nw.bn("bn1"), nw.relu("relu1"), nw.avgpool("pool1"),
                           nw.flatten("flatten"), nw.dense("fc", classes)], shape, classes)


def blobs(n_per_class, seed, shape=(1, 4, 4)):
    """Two classes whose pixel means differ by 0.4 with +-0.15 noise: separable by mean intensity."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n_per_class)
    centre = np.where(labels == 0, 0.3, 0.7)[:, None, None, None]
    images = centre + rng.uniform(-0.15, 0.15, (2 * n_per_class,) + shape)
    perm = rng.permutation(len(labels))
    return Dataset(images[perm], labels[perm], 2)


def logistic_oracle(train_data, test_data, steps=2000, lr=0.5):
    x = train_data.images.reshape(len(train_data), -1)
    mu, sd = x.mean(0), x.std(0)
    x = (x - mu) / sd
    w, b = np.zeros(x.shape[1]), 0.0
    for _ in range(steps):
        p = 1 / (1 + np.exp(-(x @ w + b)))
        g = p - train_data.labels
        w -= lr * x.T @ g / len(g)
        b -= lr * g.mean()
    xt = (test_data.images.reshape(len(test_data), -1) - mu) / sd
    return 100.0 * np.mean(((xt @ w + b) > 0) == test_data.labels)


def test_adam_first_step_is_lr():
    store = nw.ParamStore({"w": np.zeros(1)})
    adam_step(store, {"w": np.ones(1)}, AdamState(), 1e-4)
    assert abs(abs(store["w"][0]) - 1e-4) < 1e-12


def test_adam_zero_gradient_leaves_parameters_and_decays_moments():
    store = nw.ParamStore({"w": np.array([1.0, -2.0])})
    state = AdamState()
    adam_step(store, {"w": np.array([0.5, 0.5])}, state, 1e-3)
    before, m, v = store["w"].copy(), state.m["w"].copy(), state.v["w"].copy()
    state.m["w"][:] = 0.0
    state.v["w"][:] = 0.0
    adam_step(store, {"w": np.zeros(2)}, state, 1e-3)
    np.testing.assert_array_equal(store["w"], before)
    state.m["w"][:], state.v["w"][:] = m, v
    adam_step(store, {"w": np.zeros(2)}, state, 0.0 + 1e-300)
    np.testing.assert_allclose(state.m["w"], 0.9 * m, rtol=1e-15)
    np.testing.assert_allclose(state.v["w"], 0.999 * v, rtol=1e-15)


def test_adam_rejects_nan_and_names_tensor():
    store = nw.ParamStore({"bn1.gamma": np.ones(2)})
    with pytest.raises(NumericalError, match="bn1.gamma"):
        adam_step(store, {"bn1.gamma": np.array([np.nan, 0.0])}, AdamState(), 1e-3)


def test_config_validation_and_teacher_mode():
    cfg = TrainConfig(mode="teacher", alpha=5.0, lam=0.5)
    assert (cfg.alpha, cfg.lam, cfg.temperature) == (0.0, 0.0, 1.0)
    with pytest.raises(ConfigError, match="optimizer"):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError, match="lam"):
        TrainConfig(lam=2.0)
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"alpah": 1})


def test_teacher_on_separable_blobs():
    train_data, test_data = blobs(100, 0), blobs(50, 1)
    assert logistic_oracle(train_data, test_data) == 100.0
    spec = small_spec()
    cfg = TrainConfig(mode="teacher", iterations=500, batch_size=20, lr=1e-2, eval_interval=250, seed=0)
    store, metrics = train(spec, train_data, test_data, cfg)
    assert store.step == 500
    assert [r.step for r in metrics.rows] == [250, 500]
    assert metrics.rows[-1].eval_accuracy >= 99.0


def test_first_loss_near_log_classes():
    train_data, test_data = synth_generate(4, 20, (3, 8, 8), 0.3, seed=0)
    spec = nw.tiny3((3, 8, 8), 4)
    _, metrics = train(spec, train_data, test_data, TrainConfig(mode="teacher", iterations=1, batch_size=20))
    assert abs(metrics.first_loss - math.log(4)) <= 0.2 * math.log(4)


def _short(mode, **kw):
    base = dict(mode=mode, iterations=30, batch_size=10, lr=1e-3, eval_interval=10, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def test_runs_are_deterministic():
    train_data, test_data = blobs(30, 2), blobs(10, 3)
    spec = small_spec()
    a, ma = train(spec, train_data, test_data, _short("teacher", iterations=100, eval_interval=50))
    b, mb = train(spec, train_data, test_data, _short("teacher", iterations=100, eval_interval=50))
    assert a.equals(b)
    assert ma.to_csv() == mb.to_csv()


def test_student_without_distillation_or_penalty_matches_teacher_training():
    train_data, test_data = blobs(30, 2), blobs(10, 3)
    spec = small_spec()
    teacher_run, tm = train(spec, train_data, test_data, _short("teacher"))
    init = nw.build(spec, 4)
    student, sm = train(spec, train_data, test_data, _short("student", alpha=0.0, lam=0.0, temperature=1.0),
                        teacher=(init, spec))
    assert student.equals(teacher_run)
    assert sm.to_csv() == tm.to_csv()
    assert all(r.penalty_value == 0.0 for r in sm.rows)


def test_student_penalty_is_reported_and_teacher_untouched():
    train_data, test_data = blobs(30, 2), blobs(10, 3)
    spec = small_spec()
    teacher = nw.build(spec, 1)
    frozen = teacher.clone()
    _, m = train(spec, train_data, test_data, _short("student", alpha=10.0), teacher=(teacher, spec))
    assert all(r.penalty_value > 0 for r in m.rows)
    assert teacher.equals(frozen)


def test_student_requires_compatible_teacher():
    train_data, test_data = blobs(30, 2), blobs(10, 3)
    spec = small_spec()
    other = small_spec(classes=3)
    with pytest.raises(CompatibilityError):
        train(spec, train_data, test_data, _short("student"))
    with pytest.raises(CompatibilityError, match="classes"):
        train(spec, train_data, test_data, _short("student"), teacher=(nw.build(other, 0), other))


def test_batch_larger_than_data_is_config_error():
    train_data, test_data = blobs(3, 2), blobs(3, 3)
    with pytest.raises(ConfigError, match="batch_size"):
        train(small_spec(), train_data, test_data, _short("teacher", batch_size=100))


def test_outputs_written_and_csv_round_trips(tmp_path):
    train_data, test_data = blobs(30, 2), blobs(10, 3)
    spec = small_spec()
    store, m = train(spec, train_data, test_data, _short("teacher", iterations=25), out_dir=tmp_path)
    assert [r.step for r in m.rows] == [10, 20, 25]
    text = (tmp_path / "metrics.csv").read_text()
    assert text == m.to_csv()
    assert RunMetrics.from_csv(text).rows == m.rows
    loaded, _ = nw.load_checkpoint(tmp_path / "checkpoint")
    assert loaded.equals(store) and loaded.step == 25


@pytest.mark.parametrize("partition, terms", [("half", 2), ("flop", 1), ("param", 1)])
def test_each_regularizer_starts_at_cost_scale(partition, terms):
    # at unit gamma every set's relaxed cost equals its own full-width cost, so each term is 1
    train_data, test_data = synth_generate(2, 10, (3, 8, 8), 0.3, seed=0)
    spec = nw.tiny3((3, 8, 8), 2)
    cfg = TrainConfig(mode="student", alpha=2.0, cost_scale=0.05, partition=partition, iterations=1,
                      batch_size=10, eval_interval=1)
    _, m = train(spec, train_data, test_data, cfg, teacher=(nw.build(spec, 0), spec))
    assert abs(m.rows[0].penalty_value - 2.0 * 0.05 * terms) < 1e-12
