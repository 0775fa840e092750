"""Two-group statistics: special functions, t-tests, Fisher's exact test and
the Shapiro-Wilk normality test (Royston's approximation).

Everything here is pure Python on floats; numpy is used only for sorting and
sums in the sample-based tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateStatisticsError, StatisticsError

SIGNIFICANCE = 0.05

# ------------------------------------------------------- special functions ---

_LANCZOS_G = 7
_LANCZOS = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def ln_gamma(x: float) -> float:
    """Natural log of |Gamma(x)| (Lanczos, g=7, with reflection below 0.5)."""
    x = float(x)
    if x <= 0 and x == math.floor(x):
        raise ValueError(f"ln_gamma has poles at non-positive integers, got {x}")
    if x < 0.5:
        # reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
        return math.log(math.pi / abs(math.sin(math.pi * x))) - ln_gamma(1.0 - x)
    if x in (1.0, 2.0):
        return 0.0
    x -= 1.0
    acc = _LANCZOS[0]
    for i in range(1, _LANCZOS_G + 2):
        acc += _LANCZOS[i] / (x + i)
    t = x + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (x + 0.5) * math.log(t) - t + math.log(acc)


def _betacf(x: float, a: float, b: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise StatisticsError(f"incomplete beta continued fraction did not converge (x={x}, a={a}, b={b})")


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) for ``0 <= x <= 1`` and ``a, b > 0``."""
    if not (a > 0 and b > 0):
        raise ValueError(f"incomplete beta needs a, b > 0, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"incomplete beta needs 0 <= x <= 1, got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(x, a, b) / a
    return 1.0 - front * _betacf(1.0 - x, b, a) / b


_ACKLAM_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
             1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_ACKLAM_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
             6.680131188771972e01, -1.328068155288572e01)
_ACKLAM_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
             -2.549671010381544e00, 4.374664141464968e00, 2.938163982698783e00)
_ACKLAM_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
             3.754408661907416e00)


def normal_cdf(z: float, upper: bool = False) -> float:
    if upper:
        return 0.5 * math.erfc(z / math.sqrt(2.0))
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def normal_inverse_cdf(q: float) -> float:
    """Standard normal quantile for ``0 < q < 1``.

    Acklam's rational approximation followed by Halley refinement steps
    against ``erfc``; accurate to a few ulps over the open interval.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"normal quantile needs 0 < q < 1, got {q}")
    if q == 0.5:
        return 0.0
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    plow = 0.02425
    if q < plow:
        r = math.sqrt(-2.0 * math.log(q))
        z = (((((c[0] * r + c[1]) * r + c[2]) * r + c[3]) * r + c[4]) * r + c[5]) / (
            (((d[0] * r + d[1]) * r + d[2]) * r + d[3]) * r + 1.0)
    elif q > 1.0 - plow:
        r = math.sqrt(-2.0 * math.log1p(-q))
        z = -(((((c[0] * r + c[1]) * r + c[2]) * r + c[3]) * r + c[4]) * r + c[5]) / (
            (((d[0] * r + d[1]) * r + d[2]) * r + d[3]) * r + 1.0)
    else:
        u = q - 0.5
        r = u * u
        z = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * u / (
            ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    for _ in range(2):
        # work in the smaller tail to keep the residual well conditioned
        if z < 0:
            e = normal_cdf(z) - q
        else:
            e = (1.0 - q) - normal_cdf(z, upper=True)
        u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * z * z)
        z = z - u / (1.0 + 0.5 * z * u)
    return z


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) of Student's t."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / (df + t * t), 0.5 * df, 0.5)


# ----------------------------------------------------------------- t-tests ---

@dataclass(frozen=True)
class SummaryStat:
    n: int
    mean: float
    sd: float

    def __post_init__(self):
        if self.n < 2:
            raise StatisticsError(f"a summary needs n >= 2, got n={self.n}")
        if not self.sd >= 0:
            raise StatisticsError(f"standard deviation must be >= 0, got {self.sd}")

    @classmethod
    def of(cls, samples) -> "SummaryStat":
        x = np.asarray(samples, dtype=float)
        if x.size < 2:
            raise StatisticsError(f"need at least 2 samples, got {x.size}")
        return cls(int(x.size), float(x.mean()), float(x.std(ddof=1)))


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: float
    p: float
    method: str
    degenerate: bool = False

    __test__ = False  # not a pytest class

    @property
    def significant(self) -> bool:
        return self.p < SIGNIFICANCE


def t_test_summary(a: SummaryStat, b: SummaryStat) -> TestResult:
    """Pooled-variance two-sample t-test from (n, mean, sd) summaries.

    The statistic is signed ``mean_b - mean_a``.
    """
    n1, n2 = a.n, b.n
    df = n1 + n2 - 2
    sp2 = ((n1 - 1) * a.sd ** 2 + (n2 - 1) * b.sd ** 2) / df
    diff = b.mean - a.mean
    if sp2 == 0:
        if diff == 0:
            return TestResult(0.0, float(df), 1.0, "pooled-t", degenerate=True)
        return TestResult(math.copysign(math.inf, diff), float(df), 0.0, "pooled-t", degenerate=True)
    t = diff / math.sqrt(sp2 * (1.0 / n1 + 1.0 / n2))
    return TestResult(t, float(df), student_t_sf2(t, df), "pooled-t")


def welch_t_test_summary(a: SummaryStat, b: SummaryStat) -> TestResult:
    """Unequal-variance t-test with Satterthwaite degrees of freedom."""
    va, vb = a.sd ** 2 / a.n, b.sd ** 2 / b.n
    diff = b.mean - a.mean
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return TestResult(0.0, float(a.n + b.n - 2), 1.0, "welch-t", degenerate=True)
        return TestResult(math.copysign(math.inf, diff), float(a.n + b.n - 2), 0.0, "welch-t", degenerate=True)
    df = se2 ** 2 / (va ** 2 / (a.n - 1) + vb ** 2 / (b.n - 1))
    t = diff / math.sqrt(se2)
    return TestResult(t, df, student_t_sf2(t, df), "welch-t")


def t_test_raw(a, b, variant: str = "pooled") -> TestResult:
    sa, sb = SummaryStat.of(a), SummaryStat.of(b)
    if variant == "pooled":
        return t_test_summary(sa, sb)
    if variant == "welch":
        return welch_t_test_summary(sa, sb)
    raise ValueError(f"unknown t-test variant {variant!r}; use 'pooled' or 'welch'")


# ---------------------------------------------------------- Fisher's exact ---

def _hypergeom_logpmf(k: int, row1: int, col1: int, total: int) -> float:
    # P(X = k) with X the top-left cell given fixed margins
    def lchoose(n, r):
        return ln_gamma(n + 1) - ln_gamma(r + 1) - ln_gamma(n - r + 1)

    return lchoose(col1, k) + lchoose(total - col1, row1 - k) - lchoose(total, row1)


def fisher_distribution(table) -> tuple[int, list[tuple[int, float]]]:
    """Observed top-left count and the full conditional distribution [(k, P(k))]."""
    (a, b), (c, d) = [[int(v) for v in row] for row in table]
    if min(a, b, c, d) < 0:
        raise StatisticsError(f"contingency counts must be >= 0, got {table}")
    total = a + b + c + d
    if total == 0:
        raise StatisticsError("all-zero contingency table")
    row1, col1 = a + b, a + c
    lo, hi = max(0, row1 + col1 - total), min(row1, col1)
    dist = [(k, math.exp(_hypergeom_logpmf(k, row1, col1, total))) for k in range(lo, hi + 1)]
    return a, dist


def fisher_exact_2x2(table) -> tuple[TestResult, TestResult]:
    """Fisher's exact test on ``[[a, b], [c, d]]``.

    Returns ``(one_sided, two_sided)``: the lower tail P(X <= a) on cell ``a``
    and the two-sided minimum-likelihood p-value (sum of all tables no more
    probable than the observed one). The statistic is the sample odds ratio.
    """
    a, dist = fisher_distribution(table)
    (_, b), (c, d) = table[0], table[1]
    odds = math.inf if b * c == 0 and a * d > 0 else (a * d / (b * c) if b * c else math.nan)
    p_obs = dict(dist)[a]
    lower = min(1.0, sum(p for k, p in dist if k <= a))
    two = min(1.0, sum(p for _, p in dist if p <= p_obs * (1.0 + 1e-7)))
    return (
        TestResult(odds, 1.0, lower, "fisher-exact-1s"),
        TestResult(odds, 1.0, two, "fisher-exact-2s"),
    )


def fisher_tails(table) -> tuple[float, float]:
    """Lower P(X <= a) and upper P(X >= a) tails on cell ``a``."""
    a, dist = fisher_distribution(table)
    lower = min(1.0, sum(p for k, p in dist if k <= a))
    upper = min(1.0, sum(p for k, p in dist if k >= a))
    return lower, upper


# ------------------------------------------------------------ Shapiro-Wilk ---

def _poly(coeffs: Sequence[float], x: float) -> float:
    out = 0.0
    for c in reversed(coeffs):
        out = out * x + c
    return out


_SW_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_SW_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_SW_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_SW_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_SW_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_SW_C6 = (-0.4803, -0.082676, 0.0030302)
_SW_G = (-2.273, 0.459)


def shapiro_wilk_coefficients(n: int) -> np.ndarray:
    """Royston's approximation to the Shapiro-Wilk weights, ascending order."""
    if n < 3:
        raise StatisticsError(f"Shapiro-Wilk needs n >= 3, got {n}")
    if n == 3:
        return np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    m = np.array([normal_inverse_cdf((i - 0.375) / (n + 0.25)) for i in range(1, n + 1)])
    summ2 = float(np.sum(m * m))
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a = m / ssumm2
    an = _poly(_SW_C1, rsn) + m[-1] / ssumm2
    if n > 5:
        an1 = _poly(_SW_C2, rsn) + m[-2] / ssumm2
        fac = math.sqrt((summ2 - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * an ** 2 - 2 * an1 ** 2))
        a = m / fac
        a[-1], a[0] = an, -an
        a[-2], a[1] = an1, -an1
    else:
        fac = math.sqrt((summ2 - 2 * m[-1] ** 2) / (1 - 2 * an ** 2))
        a = m / fac
        a[-1], a[0] = an, -an
    return a


def shapiro_wilk(samples) -> TestResult:
    """Shapiro-Wilk W and its p-value (Royston 1995, AS R94)."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if not 3 <= n <= 5000:
        raise StatisticsError(f"Shapiro-Wilk supports 3 <= n <= 5000, got n={n}")
    ssq = float(np.sum((x - x.mean()) ** 2))
    if ssq <= 0 or x[-1] - x[0] < 1e-12 * max(1.0, abs(x[0])):
        raise DegenerateStatisticsError("Shapiro-Wilk is undefined for a zero-variance sample")
    a = shapiro_wilk_coefficients(n)
    w = float(np.dot(a, x)) ** 2 / ssq
    w = min(w, 1.0)
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return TestResult(w, float(n), min(1.0, max(0.0, p)), "shapiro-wilk")
    y = math.log1p(-w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_SW_G, n)
        if y >= gamma:
            return TestResult(w, float(n), 1e-99, "shapiro-wilk")
        y = -math.log(gamma - y)
        mu = _poly(_SW_C3, n)
        sigma = math.exp(_poly(_SW_C4, n))
    else:
        ln_n = math.log(n)
        mu = _poly(_SW_C5, ln_n)
        sigma = math.exp(_poly(_SW_C6, ln_n))
    if math.isinf(y):
        return TestResult(w, float(n), 1.0, "shapiro-wilk")
    p = normal_cdf((y - mu) / sigma, upper=True)
    return TestResult(w, float(n), p, "shapiro-wilk")


# --------------------------------------------------------------- reporting ---

def format_p(p: float) -> str:
    """Three decimals, with ``< 0.001`` below the reporting floor."""
    if p < 0.001:
        return "< 0.001"
    return f"{p:.3f}"


# -------------------------------------------------------- group comparison ---

@dataclass(frozen=True)
class CompareRow:
    region: str
    a: SummaryStat
    b: SummaryStat
    result: TestResult
    normality_p: tuple = (None, None)  # Shapiro-Wilk p per group when raw data exist

    @property
    def significant(self) -> bool:
        return self.result.significant


def _t_test(a: SummaryStat, b: SummaryStat, variant: str) -> TestResult:
    if variant == "pooled":
        return t_test_summary(a, b)
    if variant == "welch":
        return welch_t_test_summary(a, b)
    raise ValueError(f"unknown t-test variant {variant!r}; use 'pooled' or 'welch'")


def _normality(values) -> float | None:
    if not 3 <= len(values) <= 5000:
        return None
    try:
        return shapiro_wilk(values).p
    except DegenerateStatisticsError:
        return None


def compare_summaries(summaries, variant: str = "pooled") -> list[CompareRow]:
    """Rows for ``{region: (SummaryStat group0, SummaryStat group1)}``, in the
    mapping's order."""
    return [CompareRow(region, a, b, _t_test(a, b, variant)) for region, (a, b) in summaries.items()]


def group_compare(cohort, regions: Sequence[str], normalized: bool = False,
                  variant: str = "pooled") -> list[CompareRow]:
    """Per-region two-group t-tests over a :class:`~airwayquant.quant.CohortTable`.

    The t statistic is signed group1 minus group0 (SLE-ILD minus SLE-non-ILD).
    Shapiro-Wilk p-values are attached as annotations only.
    """
    from .errors import CohortError
    from .quant import GROUPS

    sizes = cohort.group_sizes
    empty = [g for g in GROUPS if sizes.get(g, 0) == 0]
    if empty:
        raise CohortError(f"group comparison needs both groups; no subjects in {empty}")
    rows = []
    for region in regions:
        x0 = cohort.values(GROUPS[0], region, normalized)
        x1 = cohort.values(GROUPS[1], region, normalized)
        if not x0 and not x1:
            raise CohortError(f"region {region!r} is absent from the cohort")
        if len(x0) < 2 or len(x1) < 2:
            raise StatisticsError(f"region {region!r}: each group needs >= 2 values, got {len(x0)} and {len(x1)}")
        a, b = SummaryStat.of(x0), SummaryStat.of(x1)
        rows.append(CompareRow(region, a, b, _t_test(a, b, variant), (_normality(x0), _normality(x1))))
    return rows


REPORT_COLUMNS = ("region", "n0", "mean0", "sd0", "n1", "mean1", "sd1", "t", "df", "p",
                  "p_formatted", "significant", "normality_p0", "normality_p1")
TABLE_COLUMNS = ("region", "mean_sd_group0", "mean_sd_group1", "p_value", "method")
TVALUE_COLUMNS = ("region_code", "t_value")


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def report_rows(rows: Sequence[CompareRow]) -> list[dict]:
    out = []
    for r in rows:
        out.append({
            "region": r.region,
            "n0": r.a.n, "mean0": _num(r.a.mean), "sd0": _num(r.a.sd),
            "n1": r.b.n, "mean1": _num(r.b.mean), "sd1": _num(r.b.sd),
            "t": _num(r.result.statistic), "df": _num(r.result.df), "p": _num(r.result.p),
            "p_formatted": format_p(r.result.p), "significant": "*" if r.significant else "",
            "normality_p0": _num(r.normality_p[0]), "normality_p1": _num(r.normality_p[1]),
        })
    return out


def table_rows(rows: Sequence[CompareRow]) -> list[dict]:
    """Publication layout: ``mean±sd`` per group and a starred formatted p."""
    return [{
        "region": r.region,
        "mean_sd_group0": f"{r.a.mean:.2f}±{r.a.sd:.2f}",
        "mean_sd_group1": f"{r.b.mean:.2f}±{r.b.sd:.2f}",
        "p_value": format_p(r.result.p) + ("*" if r.significant else ""),
        "method": r.result.method,
    } for r in rows]


def tvalue_rows(rows: Sequence[CompareRow]) -> list[dict]:
    return [{"region_code": r.region, "t_value": _num(r.result.statistic)} for r in rows]


def demographics(cohort) -> list[dict]:
    """Age by pooled t-test and sex (M/F) by Fisher's exact test, both tails reported."""
    from .quant import GROUPS

    out = []
    ages = [[r.age for r in cohort.by_group(g) if r.age is not None] for g in GROUPS]
    if all(len(x) >= 2 for x in ages):
        a, b = SummaryStat.of(ages[0]), SummaryStat.of(ages[1])
        res = t_test_summary(a, b)
        out.append({"variable": "age", "group0": f"{a.mean:.2f}±{a.sd:.2f}", "group1": f"{b.mean:.2f}±{b.sd:.2f}",
                    "p": _num(res.p), "p_formatted": format_p(res.p), "method": res.method})
    counts = []
    for g in GROUPS:
        sexes = [(r.sex or "").upper()[:1] for r in cohort.by_group(g)]
        counts.append([sexes.count("M"), sexes.count("F")])
    if sum(map(sum, counts)) > 0:
        lower, upper = fisher_tails(counts)
        _, two = fisher_exact_2x2(counts)
        for method, p in (("fisher-exact-2s", two.p), ("fisher-exact-lower", lower), ("fisher-exact-upper", upper)):
            out.append({"variable": "sex (M/F)", "group0": f"{counts[0][0]}/{counts[0][1]}",
                        "group1": f"{counts[1][0]}/{counts[1][1]}", "p": _num(p),
                        "p_formatted": format_p(p), "method": method})
    return out
