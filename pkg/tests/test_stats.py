import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats as sps

from airwayquant.errors import CohortError, DegenerateStatisticsError, StatisticsError
from airwayquant.quant import GROUPS, SubjectRecord, build_cohort
from airwayquant.stats import (SummaryStat, compare_summaries, demographics, fisher_exact_2x2,
                               fisher_tails, format_p, group_compare, ln_gamma, normal_inverse_cdf,
                               regularized_incomplete_beta, report_rows, shapiro_wilk, t_test_raw,
                               t_test_summary, table_rows, tvalue_rows, welch_t_test_summary)

# -------------------------------------------------------- special functions


def test_ln_gamma_factorial():
    assert ln_gamma(11) == pytest.approx(math.log(3628800), abs=1e-12)
    assert ln_gamma(11) == pytest.approx(15.10441, abs=1e-5)


@pytest.mark.parametrize("x", [0.1, 0.5, 1.0, 1.5, 2.0, 3.7, 10.0, 52.5, 171.3, 1e4])
def test_ln_gamma_vs_reference(x):
    assert abs(ln_gamma(x) - special.gammaln(x)) < 1e-9 * max(1.0, abs(special.gammaln(x)))


def test_incomplete_beta_symmetry_and_reference():
    for a in (0.5, 1.0, 2.5, 52.0):
        assert regularized_incomplete_beta(0.5, a, a) == pytest.approx(0.5, abs=1e-12)
    for x, a, b in itertools.product((0.01, 0.2, 0.5, 0.77, 0.99), (0.5, 2.0, 52.0), (0.5, 3.0, 40.0)):
        assert abs(regularized_incomplete_beta(x, a, b) - special.betainc(a, b, x)) < 1e-9
    assert regularized_incomplete_beta(0.0, 2, 3) == 0.0
    assert regularized_incomplete_beta(1.0, 2, 3) == 1.0
    with pytest.raises(ValueError):
        regularized_incomplete_beta(1.5, 2, 3)


def test_normal_inverse_cdf():
    assert normal_inverse_cdf(0.5) == 0.0
    for q in (1e-10, 1e-4, 0.01, 0.2, 0.5, 0.8, 0.975, 0.9999, 1 - 1e-10):
        assert abs(normal_inverse_cdf(q) - special.ndtri(q)) < 1e-9 * max(1.0, abs(special.ndtri(q)))
    with pytest.raises(ValueError):
        normal_inverse_cdf(1.0)


# ------------------------------------------------------------------ t-tests


def test_t_summary_examples():
    r = t_test_summary(SummaryStat(79, 3815.58, 1389.97), SummaryStat(27, 4683.04, 1657.47))
    assert r.df == 104 and abs(r.p - 0.009) < 0.0015 and r.method == "pooled-t"
    same = t_test_summary(SummaryStat(10, 5.0, 2.0), SummaryStat(10, 5.0, 2.0))
    assert same.statistic == 0 and same.p == pytest.approx(1.0)


def test_t_summary_degenerate_cases():
    eq = t_test_summary(SummaryStat(5, 1.0, 0.0), SummaryStat(5, 1.0, 0.0))
    assert eq.p == 1.0 and eq.degenerate
    ne = t_test_summary(SummaryStat(5, 1.0, 0.0), SummaryStat(5, 2.0, 0.0))
    assert ne.p == 0.0 and ne.degenerate
    with pytest.raises(StatisticsError):
        SummaryStat(1, 0.0, 1.0)


def test_t_raw_against_scipy():
    a = [2.1, 3.4, 1.9, 5.6, 4.4, 3.3, 2.8, 4.0, 3.9, 2.2]
    b = [4.1, 5.0, 3.7, 6.2, 5.9, 4.8, 5.5, 3.1, 6.6, 4.9]
    for variant, equal in (("pooled", True), ("welch", False)):
        ours = t_test_raw(a, b, variant)
        ref = sps.ttest_ind(b, a, equal_var=equal)
        assert abs(ours.statistic - ref.statistic) < 1e-9
        assert abs(ours.p - ref.pvalue) < 1e-6
    assert t_test_raw(a, a).p == pytest.approx(1.0)
    with pytest.raises(StatisticsError):
        t_test_raw([1.0], [1.0, 2.0])


summ = st.builds(SummaryStat, st.integers(2, 200), st.floats(-1e4, 1e4), st.floats(0.01, 1e3))


@settings(max_examples=100, deadline=None)
@given(summ, summ)
def test_t_symmetries(a, b):
    ab, ba = t_test_summary(a, b), t_test_summary(b, a)
    assert ab.statistic == pytest.approx(-ba.statistic, rel=1e-12, abs=1e-12)
    assert ab.p == pytest.approx(ba.p, rel=1e-12, abs=1e-15)
    assert 0.0 <= ab.p <= 1.0


@settings(max_examples=100, deadline=None)
@given(summ, summ, st.floats(1e-3, 1e3))
def test_t_scale_invariance(a, b, c):
    r = t_test_summary(a, b)
    s = t_test_summary(SummaryStat(a.n, a.mean * c, a.sd * c), SummaryStat(b.n, b.mean * c, b.sd * c))
    assert s.statistic == pytest.approx(r.statistic, rel=1e-12, abs=1e-12)
    assert s.df == r.df
    assert s.p == pytest.approx(r.p, rel=1e-12, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30),
       st.lists(st.floats(-100, 100), min_size=2, max_size=30))
def test_pooled_raw_equals_summary(a, b):
    if np.std(a) == 0 and np.std(b) == 0:
        return
    raw = t_test_raw(a, b)
    summary = t_test_summary(SummaryStat.of(a), SummaryStat.of(b))
    assert raw == summary


def test_welch_df_bounds():
    r = welch_t_test_summary(SummaryStat(79, 1.0, 2.0), SummaryStat(27, 2.0, 5.0))
    assert min(78, 26) <= r.df <= 104


# ------------------------------------------------------------------- Fisher


def _brute_force(table):
    (a, b), (c, d) = table
    r1, c1, n = a + b, a + c, a + b + c + d
    ks = range(max(0, r1 + c1 - n), min(r1, c1) + 1)
    pmf = {k: math.comb(c1, k) * math.comb(n - c1, r1 - k) / math.comb(n, r1) for k in ks}
    return pmf, a


def test_fisher_gender_row():
    one, two = fisher_exact_2x2([[4, 75], [2, 25]])
    assert abs(one.p - 0.480) < 0.001
    pmf, a = _brute_force([[4, 75], [2, 25]])
    assert set(pmf) == set(range(0, 7))
    brute = sum(p for p in pmf.values() if p <= pmf[a] * (1 + 1e-7))
    assert two.p == pytest.approx(brute, abs=1e-12)
    assert abs(two.p - 0.643) < 0.001


def test_fisher_degenerate_and_errors():
    one, two = fisher_exact_2x2([[0, 5], [0, 7]])
    assert one.p == pytest.approx(1.0) and two.p == pytest.approx(1.0)
    with pytest.raises(StatisticsError):
        fisher_exact_2x2([[0, 0], [0, 0]])
    with pytest.raises(StatisticsError):
        fisher_exact_2x2([[1, -1], [0, 2]])


cell = st.integers(0, 40)


@settings(max_examples=150, deadline=None)
@given(cell, cell, cell, cell)
def test_fisher_properties(a, b, c, d):
    if a + b + c + d == 0:
        return
    t = [[a, b], [c, d]]
    one, two = fisher_exact_2x2(t)
    lower, upper = fisher_tails(t)
    for p in (one.p, two.p, lower, upper):
        assert 0.0 <= p <= 1.0
    assert one.p == pytest.approx(lower)
    assert two.p >= min(lower, upper) - 1e-12
    # swapping both rows and both columns keeps cell a's distribution up to relabelling
    one_s, two_s = fisher_exact_2x2([[d, c], [b, a]])
    assert two_s.p == pytest.approx(two.p, rel=1e-9, abs=1e-15)
    assert one_s.p == pytest.approx(one.p, rel=1e-9, abs=1e-15)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 15), st.integers(0, 15), st.integers(0, 15), st.integers(0, 15))
def test_fisher_matches_scipy(a, b, c, d):
    if (a + b) * (c + d) * (a + c) * (b + d) == 0:
        return
    t = [[a, b], [c, d]]
    one, two = fisher_exact_2x2(t)
    assert one.p == pytest.approx(sps.fisher_exact(t, alternative="less").pvalue, rel=1e-9, abs=1e-12)
    assert two.p == pytest.approx(sps.fisher_exact(t).pvalue, rel=1e-6, abs=1e-12)


# ------------------------------------------------------------- Shapiro-Wilk


def test_shapiro_against_scipy():
    rng = np.random.default_rng(3)
    for n in (3, 4, 7, 11, 12, 20, 50, 500, 2000):
        x = rng.normal(size=n) if n % 2 else rng.exponential(size=n)
        ours = shapiro_wilk(x)
        ref = sps.shapiro(x)
        assert ours.statistic == pytest.approx(ref.statistic, abs=2e-6)
        assert ours.p == pytest.approx(ref.pvalue, abs=2e-5)
        assert 0 < ours.statistic <= 1


def test_shapiro_errors_and_linear_quantiles():
    with pytest.raises(DegenerateStatisticsError):
        shapiro_wilk([2.0] * 10)
    with pytest.raises(StatisticsError):
        shapiro_wilk([1.0, 2.0])
    q = [normal_inverse_cdf((i - 0.375) / (100 + 0.25)) for i in range(1, 101)]
    assert shapiro_wilk(q).statistic > 0.999


# --------------------------------------------------------- group comparison


def _cohort(v0, v1):
    recs = [SubjectRecord(f"a{i}", GROUPS[0], volumes={"RUL": v}) for i, v in enumerate(v0)]
    recs += [SubjectRecord(f"b{i}", GROUPS[1], volumes={"RUL": v}) for i, v in enumerate(v1)]
    return build_cohort(recs)


def test_group_compare_identical_groups():
    vals = [100.0, 120.0, 90.0, 130.0]
    rows = group_compare(_cohort(vals, vals), ["RUL"])
    assert rows[0].result.p == pytest.approx(1.0)
    assert not any(r.significant for r in rows)
    assert table_rows(rows)[0]["p_value"] == "1.000"


def test_group_compare_errors():
    with pytest.raises(CohortError):
        group_compare(_cohort([1.0, 2.0], []), ["RUL"])
    with pytest.raises(CohortError):
        group_compare(_cohort([1.0, 2.0], [3.0, 4.0]), ["LLL"])


def test_group_compare_sign_and_rows():
    rows = group_compare(_cohort([1.0, 2.0, 3.0], [4.0, 5.0, 7.0]), ["RUL"])
    assert rows[0].result.statistic > 0
    rep = report_rows(rows)[0]
    assert rep["n0"] == 3 and rep["significant"] == "*"
    assert tvalue_rows(rows)[0]["region_code"] == "RUL"
    assert rows[0].normality_p[0] is not None


def test_format_p():
    assert format_p(0.00017) == "< 0.001"
    assert format_p(0.0094) == "0.009"
    assert format_p(1.0) == "1.000"


def test_demographics_rows():
    recs = [SubjectRecord(f"a{i}", GROUPS[0], sex="M" if i < 4 else "F", age=30.0 + i) for i in range(79)]
    recs += [SubjectRecord(f"b{i}", GROUPS[1], sex="M" if i < 2 else "F", age=45.0 + i) for i in range(27)]
    rows = demographics(build_cohort(recs))
    by_method = {r["method"]: float(r["p"]) for r in rows if r["variable"].startswith("sex")}
    assert abs(by_method["fisher-exact-lower"] - 0.480) < 0.001
    assert abs(by_method["fisher-exact-2s"] - 0.643) < 0.001


def test_compare_summaries_preserves_order():
    s = {"LLL": (SummaryStat(5, 1, 1), SummaryStat(5, 2, 1)), "RUL": (SummaryStat(5, 1, 1), SummaryStat(5, 1, 1))}
    assert [r.region for r in compare_summaries(s)] == ["LLL", "RUL"]
