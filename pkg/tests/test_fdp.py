import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import decoylink.fdp as fdp_mod
from decoylink.core import Dataset, Schema
from decoylink.errors import ConfigError, NumericalError, ParameterError
from decoylink.fdp import (UNDEFINED, FdpConfig, FdpCurve, FdpRow, LinkerConfig, aggregate, augment_b,
                           condition_gap, copied_decoys, fdp_curve, fdp_hat, fdp_hat_synth, prob_fdp,
                           read_curve_csv, run_procedure, write_report)
from decoylink.linker import LinkageResult, PairScores, select_links
from decoylink.simgen import SimulationSpec, generate_population, sample_population
from decoylink.synth import fit_synthesiser

from oracles import greedy_links


# estimator arithmetic

def test_fdp_hat_examples():
    assert fdp_hat(3, 1000, 100, 60) == pytest.approx(0.5, abs=1e-15)
    assert fdp_hat(0, 1000, 100, 60) == 0
    assert fdp_hat(8, 1000, 100, 50) == pytest.approx(1.6, abs=1e-15)
    assert FdpRow(0.5, 50, 8, fdp_hat(8, 1000, 100, 50), None, None).exceeds_one
    assert fdp_hat(3, 1000, 100, 0) is None


def test_fdp_hat_synth_examples():
    assert fdp_hat_synth(3, 1000, 100, 63) == pytest.approx(33 / 63, abs=1e-15)
    assert fdp_hat_synth(0, 1000, 100, 63) == 0
    assert fdp_hat_synth(20, 500, 500, 40) == pytest.approx(1.0, abs=1e-15)
    assert fdp_hat_synth(1, 10, 1, 0) is None


def test_condition_gap_examples():
    assert condition_gap(2, 20, 10, 1000, 100) == pytest.approx(0.0, abs=1e-18)
    assert condition_gap(5, 50, 7, 1000, 100) == 0
    assert condition_gap(3, 20, 10, 1000, 100) == pytest.approx(0.001, abs=1e-15)


def _links(d, synthetic=None, xi=0.5):
    d = np.asarray(d, dtype=np.float64)
    n = len(d)
    syn = np.zeros(n, bool) if synthetic is None else np.asarray(synthetic)
    return LinkageResult(xi, np.arange(n), np.arange(n), d, syn)


def test_prob_fdp_examples():
    assert prob_fdp(None, 0.5, _links([0.9, 0.8, 0.7])) == pytest.approx(0.2, abs=1e-15)
    assert prob_fdp(None, 0.5, _links([1.0, 1.0])) == 0
    assert prob_fdp(None, 0.5, _links([])) is None
    # synthetic links are ignored
    assert prob_fdp(None, 0.5, _links([0.9, 0.6], [False, True])) == pytest.approx(0.1, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40), st.floats(0.5, 0.99))
def test_prob_fdp_bound(d, xi):
    v = prob_fdp(None, xi, _links(d))
    if v is not None:
        assert v < 1 - xi


# augmentation

def _b(n, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset.from_codes(Schema.from_names(["x", "y"]), rng.integers(0, 4, (n, 2)))


def test_augment_sizes():
    b = _b(1000)
    s = fit_synthesiser(b)
    out = augment_b(b, s, 0.10, seed=1)
    assert len(out) == 1100 and out.synthetic.sum() == 100
    assert not out.synthetic[:1000].any()
    small = _b(5)
    assert augment_b(small, fit_synthesiser(small), 0.20, 0).synthetic.sum() == 1


def test_augment_deterministic_and_validated():
    b = _b(200)
    s = fit_synthesiser(b)
    np.testing.assert_array_equal(augment_b(b, s, 0.1, 3).rows, augment_b(b, s, 0.1, 3).rows)
    for alpha in (0, 0.25):
        with pytest.raises(ParameterError):
            augment_b(b, s, alpha, 0)


def test_config_validation():
    with pytest.raises(ParameterError):
        FdpConfig(alpha=0.3)
    with pytest.raises(ParameterError):
        FdpConfig(xi_grid=(0.6, 0.5))
    with pytest.raises(ParameterError):
        FdpConfig(xi_grid=())
    with pytest.raises(ParameterError):
        FdpConfig(xi_grid=(0.4, 0.6))
    with pytest.raises(ParameterError):
        FdpConfig(aggregation_rule="mode")


# curve

def _random_scores(seed, n_a=12, n_b=15, n_synth=3, density=0.5):
    rng = np.random.default_rng(seed)
    entries = [(i, j, float(rng.choice([0.55, 0.7, 0.85, 0.95, rng.random()])))
               for i in range(n_a) for j in range(n_b) if rng.random() < density]
    syn = np.zeros(n_b, bool)
    syn[rng.choice(n_b, n_synth, replace=False)] = True
    return PairScores.from_entries(entries, n_a, n_b, syn), entries, syn


def test_no_synthetic_rows_is_config_error():
    scores = PairScores.from_entries([(0, 0, 0.9)], 1, 1)
    with pytest.raises(ConfigError):
        fdp_curve(scores, [0.5])


def test_undefined_row_marker(tmp_path):
    scores = PairScores.from_entries([(0, 1, 0.9)], 1, 2, np.array([False, True]))
    curve = fdp_curve(scores, [0.5, 0.95])
    assert curve.rows[0].n_real_linked == 0 and curve.rows[0].fdp_hat is None
    assert curve.rows[0].fp_synth == 1 and curve.rows[0].fdp_hat_synth == pytest.approx(2.0)
    assert curve.rows[1].fdp_hat_synth is None
    curve.write_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "xi,n_real_linked,fp_synth,fdp_hat,prob_fdp,fdp_hat_synth,exceeds_one"
    assert lines[1].split(",")[3] == UNDEFINED and lines[1].split(",")[4] == UNDEFINED
    back = read_curve_csv(tmp_path / "c.csv")
    assert back.rows[0].fdp_hat is None and back.rows[0].fdp_hat_synth == pytest.approx(2.0)


def test_curve_small_example():
    # two real links and one decoy link; n_b = 2 real rows, 1 decoy
    entries = [(0, 0, 0.95), (1, 1, 0.8), (2, 2, 0.6)]
    scores = PairScores.from_entries(entries, 3, 3, np.array([False, False, True]))
    c = fdp_curve(scores, [0.5, 0.7, 0.9])
    assert [(r.n_real_linked, r.fp_synth) for r in c.rows] == [(2, 1), (2, 0), (1, 0)]
    assert c.rows[0].fdp_hat == pytest.approx(1 * 2 / 1 / 2)
    assert c.rows[0].prob_fdp == pytest.approx((0.05 + 0.2) / 2)


@pytest.mark.parametrize("seed", range(8))
def test_curve_matches_per_threshold_oracle(seed):
    grid = [0.5, 0.6, 0.7, 0.8, 0.9]
    scores, entries, syn = _random_scores(seed)
    curve = fdp_curve(scores, grid)
    n_b = int((~syn).sum())
    for row, xi in zip(curve.rows, grid):
        ref = greedy_links(entries, xi)
        fp_s = sum(syn[j] for _, j, _ in ref)
        real_d = [d for _, j, d in ref if not syn[j]]
        assert (row.n_real_linked, row.fp_synth) == (len(real_d), fp_s)
        if real_d:
            assert row.fdp_hat == pytest.approx(fp_s * (n_b / syn.sum()) / len(real_d), rel=1e-12)
            assert row.prob_fdp == pytest.approx(np.mean([1 - d for d in real_d]), rel=1e-12)
        sel = select_links(scores, xi)
        assert len(sel) == row.n_real_linked + row.fp_synth


def test_identity_monotonicity_bounds_on_many_rows():
    grid = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
    n_rows = 0
    for seed in range(100):
        scores, _, _ = _random_scores(seed, n_a=10, n_b=12, n_synth=2)
        c = fdp_curve(scores, grid)
        assert (np.diff([r.n_real_linked for r in c.rows]) <= 0).all()
        assert (np.diff([r.fp_synth for r in c.rows]) <= 0).all()
        for r in c.rows:
            n_rows += 1
            if r.n_real_linked:
                assert r.fdp_hat == r.fp_synth * (c.n_b / c.n_synth) / r.n_real_linked
                assert r.exceeds_one == (r.fdp_hat > 1)
                assert r.prob_fdp < 1 - r.xi
            else:
                assert r.fdp_hat is None and not r.exceeds_one
    assert n_rows == 1000


# aggregation

def _curve(values, xi=(0.5, 0.6)):
    rows = tuple(FdpRow(x, 0 if v is None else 10, 0, v, None, None) for x, v in zip(xi, values))
    return FdpCurve(rows, 100, 10)


def test_single_repeat_aggregate():
    agg = aggregate([_curve([0.3, 1.4])])
    assert agg.point_estimate == (0.3, 1.0)
    assert agg.standard_error == (None, None)
    assert agg.n_valid_repeats == (1, 1)
    assert agg.bias_flag_rate == (0.0, 1.0)


def test_aggregation_rules():
    curves = [_curve([v, None]) for v in (0.2, 0.4, 1.6)]
    m = aggregate(curves, "mean_min1")
    assert m.point_estimate[0] == pytest.approx((0.2 + 0.4 + 1.0) / 3)
    sd = np.std([0.2, 0.4, 1.0], ddof=1)
    assert m.standard_error[0] == pytest.approx(sd / math.sqrt(3))
    assert m.bias_flag_rate[0] == pytest.approx(1 / 3)
    assert m.point_estimate[1] is None and m.n_valid_repeats[1] == 0
    t = aggregate(curves, "truncated_mean")
    assert t.point_estimate[0] == pytest.approx(0.3)
    assert t.n_valid_repeats[0] == 3
    assert aggregate(curves, "median").point_estimate[0] == pytest.approx(0.4)
    with pytest.raises(ParameterError):
        aggregate(curves, "mode")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=1, max_size=12), st.sampled_from(["mean_min1", "median"]))
def test_aggregate_bounds(values, rule):
    agg = aggregate([_curve([v, v]) for v in values], rule)
    assert all(0 <= p <= 1 for p in agg.point_estimate)


def test_recommend(tmp_path):
    agg = aggregate([_curve([0.3, 0.05]), _curve([0.2, 0.1])])
    assert agg.recommend(0.1) == 1
    assert agg.recommend(0.01) is None
    agg.write_csv(tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "xi,estimate,stderr,n_valid,bias_flag_rate"


# full procedure on a small simulated instance

@pytest.fixture(scope="module")
def instance():
    spec = SimulationSpec(n_a=300, n_b=800, overlap=0.5, discr_target=0.9, seed=11)
    return generate_population(spec)


def _population_decoys(truth):
    return lambda b, n, seed: sample_population(truth.marginals, n, seed)


GRID = (0.5, 0.7, 0.9)


def test_procedure_deterministic(instance):
    a, b, _ = instance
    cfg = FdpConfig(xi_grid=GRID, repeats=3, seed_base=4)
    r1 = run_procedure(a, b, fdp_cfg=cfg)
    r2 = run_procedure(a, b, fdp_cfg=cfg)
    assert [c.rows for c in r1.curves] == [c.rows for c in r2.curves]
    assert r1.aggregate == r2.aggregate
    assert r1.n_synth == 80 and all(c.n_synth == 80 and c.n_b == 800 for c in r1.curves)


def test_serial_and_parallel_agree(instance):
    a, b, truth = instance
    cfg = FdpConfig(xi_grid=GRID, repeats=3, seed_base=1)
    par = FdpConfig(xi_grid=GRID, repeats=3, seed_base=1, workers=3)
    d = _population_decoys(truth)
    assert run_procedure(a, b, fdp_cfg=cfg, decoys=d).aggregate == run_procedure(
        a, b, fdp_cfg=par, decoys=d).aggregate


def test_links_map_back_to_b(instance):
    a, b, truth = instance
    res = run_procedure(a, b, fdp_cfg=FdpConfig(xi_grid=GRID, repeats=1), decoys=_population_decoys(truth))
    rep = res.repeats[0]
    real = ~rep.links.synthetic
    assert (rep.links.j[real] >= 0).all() and (rep.links.j[~real] == -1).all()
    np.testing.assert_array_equal(b.source_id[rep.links.j[real]], rep.b_ids[real])
    assert rep.curve.rows[0].n_real_linked == real.sum()


def test_failed_repeat_is_excluded(instance, monkeypatch, tmp_path):
    a, b, truth = instance
    real_fit = fdp_mod.fit_fs_model
    calls = []

    def flaky(*args, **kw):
        calls.append(1)
        if len(calls) == 2:
            raise NumericalError("EM diverged")
        return real_fit(*args, **kw)

    monkeypatch.setattr(fdp_mod, "fit_fs_model", flaky)
    cfg = FdpConfig(xi_grid=GRID, repeats=3)
    res = run_procedure(a, b, fdp_cfg=cfg, decoys=_population_decoys(truth))
    assert [r.ok for r in res.repeats] == [True, False, True]
    assert res.aggregate.n_valid_repeats[0] == 2
    text = write_report(res, cfg, tmp_path / "report.txt")
    assert "repeat 2 excluded: EM diverged" in text


def test_corrupted_decoys_raise_bias_flag(instance):
    a, b, truth = instance
    source = a.take(np.flatnonzero(truth.linking_a))
    res = run_procedure(a, b, fdp_cfg=FdpConfig(xi_grid=GRID, repeats=3), decoys=copied_decoys(source))
    assert res.aggregate.bias_flag_rate[0] > 0


def test_population_decoys_track_truth(instance):
    a, b, truth = instance
    res = run_procedure(a, b, fdp_cfg=FdpConfig(xi_grid=GRID, repeats=10), decoys=_population_decoys(truth))
    diffs = []
    for rep in res.repeats:
        real = ~rep.links.synthetic
        i, j = rep.links.i[real], rep.links.j[real]
        keep = rep.links.d[real] > GRID[0]
        fp = np.sum(truth.entity_a[i[keep]] != truth.entity_b[j[keep]])
        diffs.append(rep.curve.rows[0].fdp_hat - fp / keep.sum())
    assert abs(np.mean(diffs)) <= 4 * np.std(diffs, ddof=1) / np.sqrt(len(diffs)) + 1e-3


def test_perfect_information_aggregate_near_zero():
    spec = SimulationSpec(n_a=300, n_b=300, overlap=1.0, discr_target=1.0, seed=3)
    a, b, truth = generate_population(spec)
    res = run_procedure(a, b, LinkerConfig(), fdp_cfg=FdpConfig(xi_grid=GRID, repeats=3),
                        decoys=_population_decoys(truth))
    assert max(res.aggregate.point_estimate) <= 0.05


def test_report_text(instance, tmp_path):
    a, b, truth = instance
    cfg = FdpConfig(xi_grid=GRID, repeats=2, target=1.0)
    res = run_procedure(a, b, fdp_cfg=cfg, decoys=_population_decoys(truth))
    text = write_report(res, cfg, tmp_path / "r.txt")
    assert "recommended xi: 0.50" in text
    cfg0 = FdpConfig(xi_grid=GRID, repeats=2, target=-1.0)
    assert "not reliable" in write_report(res, cfg0, tmp_path / "r0.txt")


def test_too_few_rows_for_decoys():
    b = _b(3)
    with pytest.raises(ConfigError):
        run_procedure(b, b, fdp_cfg=FdpConfig(alpha=0.1, xi_grid=GRID, repeats=1))
