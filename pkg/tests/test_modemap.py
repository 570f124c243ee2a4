import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import multivariate_normal

from hgpmpc.gp import HybridResidualModel, KernelHyperparams, fit_gp, predict
from hgpmpc.modemap import (FeatureSplit, ModeClassifier, PriorDensityStore, TradeoffConfig, alpha_of,
                            compute_likelihoods, compute_posteriors, compute_priors, cross_entropy, hard_label,
                            iterate, kde_density, load_mapping_state, make_residual_tuples, retrain,
                            save_mapping_state)

SPLIT2 = FeatureSplit(yg_idx=(0,), yd_idx=(0, 1))


def const_gp(mean, var, n=60):
    """GP whose predictive distribution is ~N(mean, var) on [0, 1].

    A zero mean uses a vanishing signal variance so the predictive variance
    is exactly the noise variance; otherwise a long-lengthscale fit to
    constant targets reproduces the mean.
    """
    x = np.linspace(0, 1, n)[:, None]
    sf2 = 1e-10 if mean == 0 else 4.0
    return fit_gp(x, np.full(n, mean), KernelHyperparams(sf2, (10.0,), var))


def fixed_classifier(probs, input_dim=2):
    """Constant classifier: zero weights and a log-probability output bias."""
    M = len(probs)
    weights = [(np.zeros((input_dim, 4)), np.zeros(4)), (np.zeros((4, M)), np.log(np.asarray(probs, float)))]
    return ModeClassifier(weights, np.zeros(input_dim), np.ones(input_dim))


# --- residual tuples ------------------------------------------------------

def test_noiseless_nominal_gives_zero_residuals(lti, rng):
    x = [np.array([1.0, 2.0])]
    us = rng.uniform(-1, 1, (10, 2))
    for u in us:
        x.append(lti.nominal(x[-1], u))
    _, _, d = make_residual_tuples(np.array(x), us, lti.nominal, lti.split)
    assert np.array_equal(d, np.zeros((10, 2)))


def test_constant_residual_hand_stepped(lti):
    c = 0.7
    x = [np.array([1.0, 1.0])]
    us = np.full((5, 2), 0.3)
    for u in us:
        # hand-stepped Euler: x1 += dt*(x1 + u1 + c), x2 += dt*(-x2 + u2)
        x1, x2 = x[-1]
        x.append(np.array([x1 + lti.dt * (x1 + u[0] + c), x2 + lti.dt * (-x2 + u[1])]))
    _, _, d = make_residual_tuples(np.array(x), us, lti.nominal, lti.split)
    assert np.allclose(d, np.tile([c * lti.dt, 0.0], (5, 1)), atol=1e-14)


def test_tuple_count_and_minimum_length(lti):
    yg, yd, d = make_residual_tuples(np.zeros((2, 2)), np.zeros((1, 2)), lti.nominal, lti.split)
    assert len(yg) == len(yd) == len(d) == 1
    with pytest.raises(ValueError):
        make_residual_tuples(np.zeros((1, 2)), np.zeros((0, 2)), lti.nominal, lti.split)


# --- likelihoods ----------------------------------------------------------

def test_standard_normal_likelihoods():
    model = HybridResidualModel(((const_gp(0.0, 1.0),),), np.array([[1.0], [0.0]]))
    assert compute_likelihoods(model, [0.5], [0.0])[0] == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-9)
    assert compute_likelihoods(model, [0.5], [1.0])[0] == pytest.approx(math.exp(-0.5) / math.sqrt(2 * math.pi),
                                                                        rel=1e-9)


def test_two_dim_likelihood_factorizes():
    model = HybridResidualModel(((const_gp(0.1, 0.5), const_gp(-0.2, 2.0)),), np.eye(2))
    d = np.array([0.4, 0.3])
    lik = compute_likelihoods(model, [0.5], d)[0]
    g0, g1 = model.bank(0)
    m0, v0 = predict(g0, [0.5], include_noise=True)
    m1, v1 = predict(g1, [0.5], include_noise=True)
    expected = multivariate_normal(m0, v0).pdf(d[0]) * multivariate_normal(m1, v1).pdf(d[1])
    assert lik == pytest.approx(expected, rel=1e-10)


def test_likelihoods_positive_far_out():
    model = HybridResidualModel(((const_gp(0.0, 1e-4),), (const_gp(1.0, 1e-4),)), np.array([[1.0], [0.0]]))
    lik = compute_likelihoods(model, [0.5], [100.0])
    assert np.all(lik > 0)


# --- priors ---------------------------------------------------------------

def test_cold_start_priors_near_uniform(rng):
    clf = ModeClassifier.create(2, 3, [0, 0], [1, 1], seed=3)
    p = compute_priors(clf, rng.uniform(0, 1, (200, 2)))
    assert np.abs(p - 1 / 3).max() < 0.05
    assert np.all((p > 0) & (p < 1))
    assert np.allclose(p.sum(1), 1, atol=1e-12)


def test_priors_dimension_mismatch():
    clf = ModeClassifier.create(2, 3, [0, 0], [1, 1])
    with pytest.raises(ValueError):
        compute_priors(clf, [0.1, 0.2, 0.3])


def separable_set(rng, n=200):
    """Two classes split at x = 0.5 with a 0.05 margin on either side."""
    yd = rng.uniform(0, 1, (n, 2))
    yd[:, 0] = np.where(yd[:, 0] > 0.5, 0.55 + 0.9 * (yd[:, 0] - 0.5), 0.45 - 0.9 * (0.5 - yd[:, 0]))
    lab = (yd[:, 0] > 0.5).astype(int)
    return yd, np.eye(2)[lab], lab


def test_overfit_separable_toy_set(rng):
    yd, labels, lab = separable_set(rng)
    clf = ModeClassifier.create(2, 2, [0, 0], [1, 1], seed=1)
    retrain(clf, yd, labels, epochs=500, step_size=1e-2)
    assert (clf.probs(yd).argmax(1) == lab).mean() == 1.0
    assert np.all(hard_label(clf, yd).argmax(1) == lab)


# --- KDE ------------------------------------------------------------------

def test_kde_single_point_peak():
    s = PriorDensityStore(2, np.array([[0.3, -0.2]]))
    assert kde_density(s, [0.3, -0.2], 0.25) == pytest.approx(1 / (0.25 * math.sqrt(2 * math.pi)), rel=1e-14)


def brute_kde(points, q, h):
    tot = 0.0
    for p in points:
        tot += math.exp(-sum((a - b) ** 2 for a, b in zip(p, q)) / (2 * h * h)) / math.sqrt(2 * math.pi)
    return tot / (h * len(points))


def test_kde_three_points_brute_force():
    pts = np.array([[0.0, 0.0], [0.5, 0.1], [-0.3, 0.4]])
    q = [0.1, 0.2]
    assert kde_density(PriorDensityStore(2, pts), q, 0.3) == pytest.approx(brute_kde(pts, q, 0.3), rel=1e-12)


def test_kde_bandwidth_scaling_and_empty_store():
    s = PriorDensityStore(1, np.array([[0.0]]))
    assert kde_density(s, [0.0], 0.4) == pytest.approx(0.5 * kde_density(s, [0.0], 0.2), rel=1e-14)
    assert kde_density(PriorDensityStore(2), [0.0, 0.0], 0.25) == 0.0


@given(st.integers(0, 10_000), st.integers(1, 40), st.floats(0.05, 2.0))
def test_kde_matches_brute_force(seed, n, h):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(n, 2))
    q = r.normal(size=2)
    assert kde_density(PriorDensityStore(2, pts), q, h) == pytest.approx(brute_kde(pts, q, h), rel=1e-12,
                                                                          abs=1e-300)


# --- trade-off ------------------------------------------------------------

CFG = TradeoffConfig()


def test_alpha_endpoints_and_midpoint():
    assert alpha_of(CFG.kde_min, CFG) == CFG.alpha_max
    assert alpha_of(CFG.kde_max, CFG) == CFG.alpha_min
    mid = alpha_of(0.5 * (CFG.kde_min + CFG.kde_max), CFG)
    assert mid == pytest.approx(0.5 * (CFG.alpha_min + CFG.alpha_max), rel=1e-12)


def test_tradeoff_config_validation():
    with pytest.raises(ValueError):
        TradeoffConfig(kde_min=1.0, kde_max=0.5)
    with pytest.raises(ValueError):
        TradeoffConfig(alpha_min=0.8, alpha_max=0.5)


@given(st.floats(0, 5), st.floats(0, 5))
def test_alpha_monotone_and_bounded(k1, k2):
    a1, a2 = alpha_of(k1, CFG), alpha_of(k2, CFG)
    assert CFG.alpha_min <= a1 <= CFG.alpha_max
    if k1 <= k2:
        assert a1 >= a2


# --- posteriors -----------------------------------------------------------

def test_posterior_examples():
    assert np.allclose(compute_posteriors([0.8, 0.2], [0.5, 0.5], 1.0), [0.8, 0.2])
    assert np.array_equal(compute_posteriors([0.8, 0.2], [0.3, 0.7], 0.0), np.array([0.3, 0.7]) / 1.0)
    assert np.allclose(compute_posteriors([0.8, 0.2], [0.25, 0.75], 1.0), [0.2 / 0.35, 0.15 / 0.35])


def test_posterior_degenerate_prior_falls_back_to_likelihood():
    post = compute_posteriors([0.6, 0.4], [0.0, 0.0], 0.5)
    assert np.allclose(post, [0.6, 0.4])


probs = st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=5).map(lambda v: np.array(v) / sum(v))


@given(probs, st.lists(st.floats(1e-300, 10.0), min_size=5, max_size=5), st.floats(0, 1))
def test_posterior_is_distribution(prior, lik, alpha):
    post = compute_posteriors(np.array(lik[:len(prior)]), prior, alpha)
    assert np.all(post >= 0)
    assert abs(post.sum() - 1) <= 1e-9


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_posterior_prior_mass_decreases_with_alpha(a1, a2):
    lik, prior = np.array([0.05, 0.95]), np.array([0.95, 0.05])
    p1, p2 = compute_posteriors(lik, prior, a1)[0], compute_posteriors(lik, prior, a2)[0]
    if a1 < a2:
        assert p1 >= p2
        if a2 - a1 > 1e-6:
            assert p1 > p2


# --- hard labels ----------------------------------------------------------

def test_hard_label_examples():
    assert np.array_equal(hard_label(fixed_classifier([0.2, 0.5, 0.3]), [0.1, 0.1]), [0, 1, 0])
    assert np.array_equal(hard_label(fixed_classifier([0.5, 0.5]), [0.1, 0.1]), [1, 0])


def test_hard_label_grid_matches_argmax():
    clf = ModeClassifier.create(2, 3, [0, 0], [1, 1], seed=7)
    g = np.stack(np.meshgrid(np.linspace(0, 1, 30), np.linspace(0, 1, 30)), -1).reshape(-1, 2)
    lab = hard_label(clf, g)
    p = clf.probs(g)
    for i in range(len(g)):
        j = max(range(3), key=lambda m: (p[i, m], -m))
        assert lab[i, j] == 1 and lab[i].sum() == 1


# --- retraining -----------------------------------------------------------

def test_retrain_on_own_predictions_keeps_loss(rng):
    clf = ModeClassifier.create(2, 3, [0, 0], [1, 1], seed=2)
    yd = rng.uniform(0, 1, (50, 2))
    labels = clf.probs(yd)
    before = cross_entropy(clf, yd, labels)
    retrain(clf, yd, labels, epochs=100)
    assert cross_entropy(clf, yd, labels) == pytest.approx(before, abs=1e-6)


def test_retrain_zero_epochs_unchanged(rng):
    clf = ModeClassifier.create(2, 3, [0, 0], [1, 1], seed=2)
    ref = clf.copy()
    retrain(clf, rng.uniform(0, 1, (10, 2)), np.full((10, 3), 1 / 3), epochs=0)
    assert all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) for a, b in zip(clf.weights, ref.weights))


def test_retrain_never_increases_loss_and_fine_tunes(rng):
    yd, labels, _ = separable_set(rng, 80)
    clf = ModeClassifier.create(2, 2, [0, 0], [1, 1], seed=4)
    before = cross_entropy(clf, yd, labels)
    first_layer = clf.weights[0][0].copy()
    hist = retrain(clf, yd, labels, epochs=50, step_size=5.0)  # oversized steps
    assert cross_entropy(clf, yd, labels) <= before + 1e-12
    assert min(hist) == pytest.approx(cross_entropy(clf, yd, labels))
    assert not np.array_equal(first_layer, clf.weights[0][0]) or cross_entropy(clf, yd, labels) == before


def test_retrain_rejects_empty():
    clf = ModeClassifier.create(2, 2, [0, 0], [1, 1])
    with pytest.raises(ValueError):
        retrain(clf, np.zeros((0, 2)), np.zeros((0, 2)))


@given(st.integers(0, 1000))
def test_retrain_reproducible(seed):
    r = np.random.default_rng(seed)
    yd, labels, _ = separable_set(r, 30)
    a = ModeClassifier.create(2, 2, [0, 0], [1, 1], seed=seed)
    b = a.copy()
    retrain(a, yd, labels, epochs=20, seed=seed)
    retrain(b, yd, labels, epochs=20, seed=seed)
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a.weights, b.weights))


# --- one full iteration ---------------------------------------------------

def two_mode_setting(rng, n=150):
    """Synthetic system x+ = u + d with mode residual means +1 / -1 (variance 0.05)."""
    model = HybridResidualModel(((const_gp(1.0, 0.05),), (const_gp(-1.0, 0.05),)), np.array([[1.0], [0.0]]))
    states = rng.uniform(0, 1, (n + 1, 2))
    d = np.column_stack([1.0 + rng.normal(0, math.sqrt(0.05), n), np.zeros(n)])
    inputs = states[1:] - d
    nominal = lambda x, u: u
    return model, states, inputs, nominal


def test_iterate_cold_start_learns_single_mode(rng):
    model, states, inputs, nominal = two_mode_setting(rng)
    clf = ModeClassifier.create(2, 2, [0, 0], [1, 1], seed=0)
    store = PriorDensityStore(2)
    clf, store, info = iterate(model, states, inputs, nominal, SPLIT2, clf, store, CFG)
    assert np.all(info.kappa == 0) and np.all(info.alpha == CFG.alpha_max)
    assert (clf.probs(states[:-1]).argmax(1) == 0).mean() >= 0.95
    assert len(store) == len(inputs)


def test_iterate_twice_lowers_alpha(rng):
    model, states, inputs, nominal = two_mode_setting(rng)
    clf = ModeClassifier.create(2, 2, [0, 0], [1, 1], seed=0)
    store = PriorDensityStore(2)
    clf, store, first = iterate(model, states, inputs, nominal, SPLIT2, clf, store, CFG, epochs=10)
    n1 = len(store)
    clf, store, second = iterate(model, states, inputs, nominal, SPLIT2, clf, store, CFG, epochs=10)
    assert np.all(second.kappa >= first.kappa) and np.all(second.alpha <= first.alpha)
    assert np.any(second.alpha < first.alpha)
    assert len(store) == 2 * n1
    clf, store, third = iterate(model, states, inputs, nominal, SPLIT2, clf, store, CFG, epochs=10)
    assert np.all(third.kappa >= second.kappa - 1e-12)


@given(st.integers(0, 1000), st.integers(1, 4))
def test_store_never_shrinks(seed, runs):
    r = np.random.default_rng(seed)
    model, states, inputs, nominal = two_mode_setting(r, 20)
    clf = ModeClassifier.create(2, 2, [0, 0], [1, 1], seed=seed)
    store = PriorDensityStore(2)
    sizes = [0]
    for _ in range(runs):
        clf, store, _ = iterate(model, states, inputs, nominal, SPLIT2, clf, store, CFG, epochs=2)
        sizes.append(len(store))
    assert sizes == sorted(sizes)


def test_mapping_state_round_trip(tmp_path, rng):
    clf = ModeClassifier.create(2, 3, [0, 0], [1, 1], seed=5)
    store = PriorDensityStore(2, rng.normal(size=(7, 2)))
    save_mapping_state(tmp_path / "s.json", clf, store)
    c2, s2 = load_mapping_state(tmp_path / "s.json")
    q = rng.uniform(0, 1, (20, 2))
    assert np.array_equal(c2.probs(q), clf.probs(q))
    assert np.array_equal(s2.points, store.points)
