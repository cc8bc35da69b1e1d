import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decoylink.core import MISSING, Dataset, Schema
from decoylink.errors import InputError, ParameterError
from decoylink.synth import (SynthConfig, content_folds, density_ratio_auc, fit_synthesiser, roc_auc,
                             sample_synthetic, synth_quality_auc, tune_synthesiser)


def _ds(rows, names=None, ids=None):
    rows = np.asarray(rows).reshape(len(rows), -1)
    names = names or [f"v{k}" for k in range(rows.shape[1])]
    return Dataset.from_codes(Schema.from_names(names), rows, ids=ids)


def _joint(s):
    """Exact joint distribution of a fitted synthesiser by enumerating its support."""
    out = {}
    for combo in itertools.product(*[range(len(sup)) for sup in s.supports]):
        p = 1.0
        vals = []
        for pos, k in enumerate(combo):
            p *= s.distribution(pos, tuple(vals))[k]
            vals.append(int(s.supports[pos][k]))
        row = [0] * len(vals)
        for pos, col in enumerate(s.variable_order):
            row[col] = vals[pos]
        out[tuple(row)] = p
    return out


def test_empirical_frequency_gamma0():
    s = fit_synthesiser(_ds([[0], [0], [1]]), SynthConfig(gamma=0))
    np.testing.assert_array_equal(s.distribution(0, ()), [2 / 3, 1 / 3])


def test_laplace_gamma1():
    s = fit_synthesiser(_ds([[0], [0], [1]]), SynthConfig(gamma=1))
    np.testing.assert_allclose(s.distribution(0, ()), [3 / 5, 2 / 5], rtol=0, atol=1e-15)


def test_missing_is_a_category_when_present():
    s = fit_synthesiser(_ds([[0], [MISSING], [1]]), SynthConfig(gamma=0))
    assert s.supports[0].tolist() == [MISSING, 0, 1]
    out = sample_synthetic(s, 3000, 1)
    assert (out.rows[:, 0] == MISSING).mean() == pytest.approx(1 / 3, abs=0.03)


def test_correlated_variables_deterministic():
    rows = [[k % 3, k % 3] for k in range(60)]
    s = fit_synthesiser(_ds(rows), SynthConfig(gamma=0))
    for v in range(3):
        dist = s.distribution(1, (v,))
        assert dist.max() == 1.0
        assert s.supports[1][dist.argmax()] == v


def test_sample_empty_and_deterministic():
    s = fit_synthesiser(_ds([[0, 1], [1, 0], [1, 1]]))
    assert len(sample_synthetic(s, 0, 0)) == 0
    x, y = sample_synthetic(s, 50, 7), sample_synthetic(s, 50, 7)
    np.testing.assert_array_equal(x.rows, y.rows)
    assert x.synthetic.all()
    assert not np.array_equal(x.rows, sample_synthetic(s, 50, 8).rows)


def test_sample_frequency_single_variable():
    s = fit_synthesiser(_ds([[0], [0], [1]]), SynthConfig(gamma=0))
    n = 10 ** 5
    freq = (sample_synthetic(s, n, 3).rows[:, 0] == 0).mean()
    assert abs(freq - 2 / 3) <= 3 * math.sqrt(2 / 9 / n)


def test_fit_empty_raises():
    with pytest.raises(InputError):
        fit_synthesiser(Dataset.from_codes(Schema.from_names(["x"]), np.zeros((0, 1))))


def _random_ds(seed, n=400, cards=(3, 4, 2)):
    rng = np.random.default_rng(seed)
    x0 = rng.integers(0, cards[0], n)
    x1 = (x0 + rng.integers(0, 2, n)) % cards[1]
    x2 = rng.integers(0, cards[2], n)
    return _ds(np.column_stack([x0, x1, x2]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([0.0, 0.3, 2.0]), st.sampled_from([1, 5, 50]))
def test_distributions_normalised(seed, gamma, max_context):
    s = fit_synthesiser(_random_ds(seed, n=120), SynthConfig(gamma, max_context))
    for levels in s.tables:
        for level in levels:
            for dist in level.values():
                assert abs(dist.sum() - 1) <= 1e-12
                if gamma > 0:
                    assert (dist > 0).all()
    total = sum(_joint(s).values())
    assert abs(total - 1) < 1e-12


def test_sampled_frequencies_converge():
    s = fit_synthesiser(_random_ds(0), SynthConfig(gamma=0.5, max_context=10))
    joint = _joint(s)
    n = 10 ** 5
    rows = sample_synthetic(s, n, 11).rows
    for k in range(3):
        for q in range(k, 3):
            cols = (k,) if k == q else (k, q)
            exact: dict = {}
            for combo, p in joint.items():
                key = tuple(combo[c] for c in cols)
                exact[key] = exact.get(key, 0.0) + p
            keys, counts = np.unique(rows[:, cols], axis=0, return_counts=True)
            emp = {tuple(kk.tolist()): c / n for kk, c in zip(keys, counts)}
            tv = 0.5 * sum(abs(emp.get(key, 0) - p) for key, p in exact.items())
            assert tv <= 5 * math.sqrt(len(exact) / n)


def test_smoothing_consistency_full_contexts():
    ds = _random_ds(5, n=300)
    s = fit_synthesiser(ds, SynthConfig(gamma=1e-14, max_context=1))
    order = s.variable_order
    data = ds.rows[:, order]
    for pos in range(1, 3):
        for ctx in {tuple(r[:pos].tolist()) for r in data}:
            sel = (data[:, :pos] == ctx).all(axis=1)
            vals, counts = np.unique(data[sel, pos], return_counts=True)
            dist = s.distribution(pos, ctx)
            emp = np.zeros(len(s.supports[pos]))
            emp[np.searchsorted(s.supports[pos], vals)] = counts / sel.sum()
            np.testing.assert_allclose(dist, emp, atol=1e-12)


def test_back_off_to_shorter_context():
    rows = [[0, 0]] * 20 + [[1, 1]] * 2
    s = fit_synthesiser(_ds(rows), SynthConfig(gamma=0, max_context=10))
    # context (1,) was seen twice, below the threshold, so the root table is used
    np.testing.assert_array_equal(s.distribution(1, (1,)), s.distribution(1, ()))
    np.testing.assert_array_equal(s.distribution(1, (0,)), [1.0, 0.0])


def test_order_rule():
    rows = [[0, k % 5, k % 2, k % 5] for k in range(20)]
    s = fit_synthesiser(_ds(rows))
    assert s.variable_order == (1, 3, 2, 0)
    s = fit_synthesiser(_ds(rows), SynthConfig(variable_order=("v0", "v1", "v2", "v3")))
    assert s.variable_order == (0, 1, 2, 3)
    with pytest.raises(ParameterError):
        fit_synthesiser(_ds(rows), SynthConfig(variable_order=("v0", "v1")))


def test_log_density_matches_joint():
    s = fit_synthesiser(_random_ds(2, n=200))
    joint = _joint(s)
    combos = np.array(list(joint.keys()))
    np.testing.assert_allclose(np.exp(s.log_density(combos)), list(joint.values()), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.booleans()), min_size=2, max_size=30))
def test_roc_auc_matches_pair_count(data):
    scores = [s for s, _ in data]
    labels = [lab for _, lab in data]
    if all(labels) or not any(labels):
        with pytest.raises(ParameterError):
            roc_auc(scores, labels)
        return
    pos = [s for s, lab in data if lab]
    neg = [s for s, lab in data if not lab]
    ref = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg) / (len(pos) * len(neg))
    assert roc_auc(scores, labels) == pytest.approx(ref, abs=1e-12)


def test_content_folds_group_identical_rows():
    rows = np.array([[0, 1], [0, 1], [2, 2], [0, 1], [3, 3]])
    f = content_folds(rows, 2, 0)
    assert f[0] == f[1] == f[3]


def _indep(n, seed, cards=(6, 5, 8, 4, 7)):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.integers(0, c, n) for c in cards])


def test_auc_verbatim_copy():
    real = _ds(_indep(2500, 0))
    copy = _ds(real.rows.copy(), ids=[f"c{k}" for k in range(len(real))])
    q = synth_quality_auc(real, copy)
    assert 0.45 <= q.auc <= 0.55
    assert q.n_real == q.n_synth == 2500


def test_auc_disjoint_support():
    a = _ds(_indep(500, 1))
    b = _ds(_indep(500, 2) + 10, ids=[f"s{k}" for k in range(500)])
    assert synth_quality_auc(a, b).auc >= 0.95


def test_auc_rejects_bad_input():
    a = _ds(_indep(50, 1))
    with pytest.raises(ParameterError):
        synth_quality_auc(a, a, folds=1)
    other = Dataset.from_codes(Schema.from_names(["z"] * 1), np.zeros((5, 1)))
    with pytest.raises(InputError):
        density_ratio_auc(a, other)


def test_tuning_tracks_dependence():
    indep = _ds(_indep(2000, 4))
    assert tune_synthesiser(indep).max_context >= 300
    rng = np.random.default_rng(5)
    x = rng.integers(0, 6, 2000)
    dep = _ds(np.column_stack([x, (x + rng.integers(0, 2, 2000)) % 6, rng.integers(0, 4, 2000)]))
    cfg = tune_synthesiser(dep)
    out = sample_synthetic(fit_synthesiser(dep, cfg), 5000, 1).rows
    assert np.isin((out[:, 1] - out[:, 0]) % 6, [0, 1]).mean() > 0.9
