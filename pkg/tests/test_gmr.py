import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecoroute.errors import ValidationError
from ecoroute.gmr import GmrModel, input_weights, predict_mean, predict_variance
from ecoroute.vbgmm import GaussianMixture, VbHyperparams, expected_mixture, fit

KNOWN = GaussianMixture(
    [0.4, 0.6],
    [[-1.0, 2.0], [1.5, -1.0]],
    [[[1.0, 0.6], [0.6, 1.0]], [[0.8, -0.3], [-0.3, 0.5]]],
)


def line_model():
    # population moments of Y = 2X + 1 + N(0, 0.1^2), X ~ N(0, 1)
    return GmrModel(GaussianMixture([1.0], [[0.0, 1.0]], [[[1.0, 2.0], [2.0, 4.0 + 0.01]]]))


def test_single_gaussian_is_the_regression_line():
    g = line_model()
    for x in (-3.0, -0.5, 0.0, 1.0, 7.25):
        assert g.predict_mean([x]) == pytest.approx(2 * x + 1, abs=1e-12)
        assert g.predict_variance([x]) == pytest.approx(0.01, abs=1e-12)
    assert g.input_weights([0.3]).tolist() == [1.0]


def test_symmetric_components_split_evenly():
    g = GmrModel(GaussianMixture([0.5, 0.5], [[-2.0, 0.0], [2.0, 1.0]], [np.eye(2), np.eye(2)]))
    np.testing.assert_allclose(input_weights(g, [0.0]), [0.5, 0.5], atol=1e-15)


def test_far_component_dominates():
    g = GmrModel(GaussianMixture([0.5, 0.5], [[0.0, 0.0], [10.0, 1.0]], [np.eye(2), np.eye(2)]))
    w = input_weights(g, [10.0])
    # scalar evaluation of the two input densities at x = 10
    a, b = math.exp(-0.5 * 100.0), 1.0
    assert w[1] == pytest.approx(b / (a + b), rel=1e-12)
    assert w[1] > 1 - 1e-9


def test_dominant_component_centre():
    g = GmrModel(GaussianMixture([0.98, 0.02], [[0.0, 3.0], [25.0, -4.0]], [np.eye(2), np.eye(2)]))
    assert predict_mean(g, [0.0]) == pytest.approx(3.0, abs=1e-9)


def test_piecewise_clusters():
    rng = np.random.default_rng(7)
    xa = rng.normal(-3.0, 0.5, 2000)
    xb = rng.normal(3.0, 0.5, 2000)
    X = np.concatenate([xa, xb])
    Y = np.concatenate([xa, -xb]) + 0.05 * rng.standard_normal(4000)
    mix = expected_mixture(fit(np.column_stack([X, Y]), VbHyperparams(k_max=6), seed=0))
    assert mix.n_components == 2
    g = GmrModel(mix)
    for lab, xs, sign in ((0, xa, 1.0), (1, xb, -1.0)):
        ys = Y[:2000] if lab == 0 else Y[2000:]
        slope, icept = np.polyfit(xs, ys, 1)
        centre = xs.mean()
        oracle = slope * centre + icept
        assert predict_mean(g, [centre]) == pytest.approx(oracle, rel=0.02)


def test_variance_single_component_constant():
    cov = np.array([[2.0, 0.4, 0.3], [0.4, 1.0, -0.2], [0.3, -0.2, 0.9]])
    g = GmrModel(GaussianMixture([1.0], [[0.0, 0.0, 0.0]], [cov]))
    expected = cov[2, 2] - cov[2, :2] @ np.linalg.solve(cov[:2, :2], cov[:2, 2])
    for x in ([0, 0], [1, -2], [10, 4]):
        assert predict_variance(g, x) == pytest.approx(expected, rel=1e-12)


def test_variance_between_components():
    g = GmrModel(GaussianMixture([0.5, 0.5], [[-1.0, -5.0], [1.0, 5.0]], [np.diag([1.0, 0.3]), np.diag([1.0, 0.2])]))
    assert predict_variance(g, [0.0]) > 0.3


def test_variance_degenerate_output():
    g = GmrModel(GaussianMixture([0.5, 0.5], [[-1.0, -2.0], [1.0, 2.0]], [np.diag([1.0, 1e-10])] * 2))
    x = 0.4
    w = g.input_weights([x])
    between = w[0] * w[1] * (2.0 - -2.0) ** 2
    assert predict_variance(g, [x]) == pytest.approx(between, rel=1e-8)


def test_dimension_mismatch():
    with pytest.raises(ValidationError):
        predict_mean(line_model(), [1.0, 2.0])
    with pytest.raises(ValidationError):
        GmrModel(GaussianMixture([1.0], [[0.0]], [[[1.0]]]))


def test_partitions_recompose():
    cov = KNOWN.covariances
    g = GmrModel(KNOWN)
    for k in range(2):
        rebuilt = np.block([[g.s_xx[k], g.s_xy[k][:, None]], [g.s_xy[k][None, :], np.array([[g.s_yy[k]]])]])
        np.testing.assert_array_equal(rebuilt, cov[k])


def test_batch_matches_single():
    g = GmrModel(KNOWN)
    xs = np.linspace(-4, 4, 17)
    batch = g.predict_mean(xs[:, None])
    assert batch.tolist() == [g.predict_mean([x]) for x in xs]


def test_monte_carlo_bin_means():
    rng = np.random.default_rng(2024)
    Z, _ = KNOWN.sample(1_000_000, rng)
    sd = Z[:, 0].std()
    g = GmrModel(KNOWN)
    for x in (-1.0, 0.25, 1.5):
        inbin = np.abs(Z[:, 0] - x) <= 0.025 * sd
        y = Z[inbin, 1]
        se = y.std(ddof=1) / math.sqrt(y.size)
        assert abs(y.mean() - g.predict_mean([x])) < 3 * se


def _fixed_resp_fit(Z, R):
    post = fit(Z, VbHyperparams(k_max=R.shape[1]), max_iter=1, init_resp=R, merge_moves=False)
    return GmrModel(expected_mixture(post, prune_below=0.0))


@settings(max_examples=20, deadline=None)
@given(angle=st.floats(0, 2 * math.pi), flip=st.booleans(), seed=st.integers(0, 1000))
def test_rotation_invariance(angle, flip, seed):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal([-2, 0], 0.7, (150, 2)), rng.normal([2, 1], 0.7, (150, 2))])
    y = np.sin(X[:, 0]) + 0.3 * X[:, 1] + 0.05 * rng.standard_normal(300)
    R = np.zeros((300, 2))
    R[:150, 0] = R[150:, 1] = 1.0
    c, s = math.cos(angle), math.sin(angle)
    Q = np.array([[c, -s], [s, c]]) @ (np.diag([1.0, -1.0]) if flip else np.eye(2))
    base = _fixed_resp_fit(np.column_stack([X, y]), R)
    turned = _fixed_resp_fit(np.column_stack([X @ Q.T, y]), R)
    q = rng.normal(0, 2, (10, 2))
    np.testing.assert_allclose(turned.predict_mean(q @ Q.T), base.predict_mean(q), atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=5))
def test_weights_and_means_finite(xs):
    g = GmrModel(KNOWN)
    for x in xs:
        w = g.input_weights([x])
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
        m = g.predict_mean([x])
        assert math.isfinite(m)
        lo = min(g._component_means(np.array([[x]]))[0])
        hi = max(g._component_means(np.array([[x]]))[0])
        assert lo - 1e-9 <= m <= hi + 1e-9


def test_roundtrip():
    g = GmrModel(KNOWN)
    again = GmrModel.from_dict(g.to_dict())
    assert again.predict_mean([0.3]) == g.predict_mean([0.3])
