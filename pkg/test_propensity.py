import logging

import numpy as np
import pytest
from sklearn.preprocessing import StandardScaler

from ml.propensity import (
    FeatureExpander, FeatureExpansion, LogisticModel,
    expand_features, fit_logistic, hajek_att, hajek_weights,
)
from strategies.balancing import Sample


def _logit_sample(n, beta, seed=0) -> Sample:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    p = 1.0 / (1.0 + np.exp(-(beta[0] + beta[1] * x)))
    a = (rng.random(n) < p).astype(int)
    return Sample.from_arrays(x[:, None], a, x + rng.standard_normal(n))


def _constant_model(x: np.ndarray, intercept: float) -> LogisticModel:
    names = [f"X{j + 1}" for j in range(x.shape[1])]
    expander = FeatureExpander(FeatureExpansion.RAW).fit(x, names)
    return LogisticModel(
        coefficients=np.r_[intercept, np.zeros(x.shape[1])],
        feature_expansion=FeatureExpansion.RAW,
        converged=True,
        iterations=0,
        feature_names=names,
        scaler=StandardScaler().fit(x),
        expander=expander,
    )


# ─── features ───

def test_quadratic_expansion_drops_binary_squares():
    rng = np.random.default_rng(1)
    values = np.column_stack([rng.standard_normal(50), rng.integers(0, 2, 50)])
    feats, names = expand_features(values, ["c", "b"], FeatureExpansion.QUADRATIC)
    assert names == ["c", "b", "c^2", "c b"]
    assert np.allclose(feats[:, 3], values[:, 0] * values[:, 1])


def test_expander_mask_fixed_at_fit_time():
    rng = np.random.default_rng(2)
    values = np.column_stack([rng.standard_normal(30), rng.standard_normal(30)])
    exp = FeatureExpander(FeatureExpansion.QUADRATIC).fit(values, ["u", "v"])
    # два ряда: каждый столбец выглядит «бинарным», но маска уже зафиксирована
    assert exp.transform(values[:2]).shape == (2, 5)


# ─── fit_logistic ───

def test_null_model():
    rng = np.random.default_rng(3)
    n = 5000
    x = rng.standard_normal((n, 2))
    a = (rng.random(n) < 0.3).astype(int)
    sample = Sample.from_arrays(x, a, rng.standard_normal(n))
    model = fit_logistic(sample, FeatureExpansion.RAW)
    assert model.converged
    assert model.predict_proba(x).mean() == pytest.approx(sample.n_t / n, abs=1e-6)
    assert np.all(np.abs(model.coefficients[1:]) <= 3 * model.standard_errors[1:])


def test_recovers_known_coefficients():
    model = fit_logistic(_logit_sample(100_000, (0.0, 2.0), seed=4), FeatureExpansion.RAW)
    assert model.converged
    assert np.allclose(model.raw_coefficients(), [0.0, 2.0], atol=0.05)


def test_separation_warns(caplog):
    x = np.r_[-np.linspace(0.01, 1.0, 10), np.linspace(0.01, 1.0, 10)]
    a = np.r_[np.zeros(10, dtype=int), np.ones(10, dtype=int)]
    sample = Sample.from_arrays(x[:, None], a, np.zeros(20))
    with caplog.at_level(logging.WARNING):
        model = fit_logistic(sample, FeatureExpansion.RAW)
    assert not model.converged
    assert "⚠️" in caplog.text
    assert np.all(np.isfinite(model.predict_proba(x[:, None])))


def test_too_few_rows_for_expansion():
    rng = np.random.default_rng(5)
    sample = Sample.from_arrays(rng.standard_normal((8, 3)), [1, 0] * 4, np.zeros(8))
    with pytest.raises(ValueError):
        fit_logistic(sample, FeatureExpansion.QUADRATIC)


def test_scoring_subset_matches_full():
    rng = np.random.default_rng(6)
    x = np.column_stack([rng.standard_normal(300), rng.integers(0, 2, 300)])
    a = (rng.random(300) < 1.0 / (1.0 + np.exp(-x[:, 0]))).astype(int)
    sample = Sample.from_arrays(x, a, np.zeros(300))
    model = fit_logistic(sample)
    assert model.feature_names == ["X1", "X2", "X1^2", "X1 X2"]
    assert np.allclose(model.predict_proba(x[:3]), model.predict_proba(x)[:3])


# ─── Hajek ───

def test_constant_propensity_gives_difference_in_means():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((40, 2))
    sample = Sample.from_arrays(x, np.r_[np.ones(15), np.zeros(25)], rng.standard_normal(40))
    att = hajek_att(sample, _constant_model(x, 0.4))
    expected = sample.y[sample.treated_idx].mean() - sample.y[sample.control_idx].mean()
    assert att == pytest.approx(expected, abs=1e-12)


def test_single_control():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((6, 1))
    y = rng.standard_normal(6)
    sample = Sample.from_arrays(x, [1, 1, 1, 0, 1, 1], y)
    model = _constant_model(x, 0.0)
    assert np.array_equal(hajek_weights(sample, model), [1.0])
    assert hajek_att(sample, model) == pytest.approx(y[[0, 1, 2, 4, 5]].mean() - y[3])


def test_hajek_weights_are_a_distribution():
    sample = _logit_sample(2000, (-0.5, 1.0), seed=9)
    w = hajek_weights(sample, fit_logistic(sample, FeatureExpansion.RAW))
    assert np.all(w >= 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_outcome_scale_and_shift():
    sample = _logit_sample(2000, (-0.5, 1.0), seed=10)
    model = fit_logistic(sample, FeatureExpansion.RAW)
    att = hajek_att(sample, model)
    assert hajek_att(sample.with_outcome(3.0 * sample.y), model) == pytest.approx(3.0 * att, rel=1e-10)
    assert hajek_att(sample.with_outcome(sample.y + 5.0), model) == pytest.approx(att, abs=1e-10)


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
