import numpy as np
import pytest

from shrinkforge import autodiff as ad
from shrinkforge.distill import DistillConfig, combined_objective, distill_loss, one_hot, soften

# torch float64 reference from tests/oracles/make_fixtures.py (seed 17, T=10, lam=0.5)
ORACLE_VALUE = 0.7519870659779619


def oracle_inputs():
    rng = np.random.default_rng(17)
    s = rng.normal(0.0, 3.0, size=(5, 2))
    t = rng.normal(0.0, 3.0, size=(5, 2))
    y = rng.integers(0, 2, size=5)
    return s, t, y


def plain_ce(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


def test_soften_examples():
    np.testing.assert_array_equal(soften(np.zeros((1, 2)), 7.0).soft_targets, [[0.5, 0.5]])
    z = np.array([[1.0, -2.0, 0.5]])
    e = np.exp(z - z.max())
    np.testing.assert_allclose(soften(z, 1.0).soft_targets, e / e.sum(), rtol=0, atol=1e-12)
    np.testing.assert_allclose(soften(np.array([[2.0, 0.0]]), 2.0).soft_targets, [[0.7311, 0.2689]], atol=1e-4)


def test_soften_rows_and_shift_invariance():
    z = np.random.default_rng(0).normal(0, 20, (50, 10))
    p = soften(z, 3.0).soft_targets
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p > 0) and np.all(p < 1)
    np.testing.assert_allclose(soften(z + 123.0, 3.0).soft_targets, p, atol=1e-9)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_soften_rejects_nonpositive_temperature(bad):
    with pytest.raises(ValueError):
        soften(np.zeros((1, 2)), bad)


def test_config_validation():
    assert DistillConfig() == DistillConfig(10.0, 0.5)
    with pytest.raises(ValueError):
        DistillConfig(lam=1.5)
    with pytest.raises(ValueError):
        DistillConfig(temperature=0)


def test_lambda_zero_t_one_is_plain_cross_entropy():
    s, t, y = oracle_inputs()
    got = distill_loss(ad.Tensor(s), y, None, DistillConfig(1.0, 0.0)).data
    assert abs(float(got) - plain_ce(s, y)) < 1e-12


def test_branches_agree_when_targets_are_labels():
    s, _, y = oracle_inputs()
    a = float(distill_loss(ad.Tensor(s), y, None, DistillConfig(1.0, 0.0)).data)
    b = float(distill_loss(ad.Tensor(s), y, one_hot(y, 2), DistillConfig(1.0, 1.0)).data)
    assert abs(a - b) < 1e-12


def test_matches_scripted_oracle():
    s, t, y = oracle_inputs()
    cfg = DistillConfig(10.0, 0.5)
    got = float(distill_loss(ad.Tensor(s), y, soften(t, cfg.temperature), cfg).data)
    assert abs(got - ORACLE_VALUE) < 1e-10


def test_affine_in_lambda():
    s, t, y = oracle_inputs()
    z = soften(t, 10.0)
    vals = [float(distill_loss(ad.Tensor(s), y, z, DistillConfig(10.0, lam)).data) for lam in (0.0, 0.5, 1.0)]
    assert abs(vals[1] - (vals[0] + vals[2]) / 2) < 1e-12
    assert min(vals) >= 0


def test_missing_privileged_needs_lambda_zero():
    s, _, y = oracle_inputs()
    with pytest.raises(ValueError, match="soft targets"):
        distill_loss(ad.Tensor(s), y, None, DistillConfig(10.0, 0.5))


def test_distill_gradient_matches_finite_differences():
    s, t, y = oracle_inputs()
    z = soften(t, 10.0)
    cfg = DistillConfig(10.0, 0.3)
    report = ad.check_gradients(lambda tape, p: distill_loss(p["s"], y, z, cfg), {"s": s})
    assert report.passed, report


def test_combined_objective():
    assert combined_objective(1.5, [0.3, 0.2], 10.0) == 6.5
    assert combined_objective(1.5, 0.7, 0.0) == 1.5
    loss = ad.Tensor(np.array(2.0))
    assert combined_objective(loss, [1.0], 0.0) is loss
    assert float(combined_objective(loss, [1.0, 2.0], 0.5).data) == 3.5
    with pytest.raises(ValueError):
        combined_objective(1.0, [1.0], -1.0)


def test_lambda_zero_t_one_with_penalty_is_ce_plus_alpha_cost():
    s, _, y = oracle_inputs()
    loss = distill_loss(ad.Tensor(s), y, None, DistillConfig(1.0, 0.0))
    total = float(combined_objective(loss, [0.25, 0.5], 2.0).data)
    assert abs(total - (plain_ce(s, y) + 2.0 * 0.75)) < 1e-12
