import json

import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm
import statsmodels.formula.api as smf
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from statsmodels.stats.anova import anova_lm

from indoorpl.anova import (
    INTERCEPT,
    anova,
    format_p,
    hc3_covariance,
    nested_partial_f,
    ols_fit,
    partial_eta2,
    partial_f,
    vif,
)
from indoorpl.exceptions import (
    InputError,
    LeverageOne,
    NotNested,
    PenalizedModelRejected,
    PerfectCollinearity,
    RankDeficient,
)
from indoorpl.regression import BayesianPathLossRegressor, LinearPathLossRegressor


def _hetero_data(n=400, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=n)
    b = rng.normal(size=n) + 0.3 * a
    c = rng.normal(size=n)
    y = 1 + 0.5 * a - 0.2 * b + 0.3 * a * b + rng.normal(size=n) * (1 + np.abs(a))
    return pd.DataFrame({"a": a, "b": b, "c": c, "y": y})


# ---------------------------------------------------------------- HC3

def test_hc3_matches_statsmodels():
    df = _hetero_data()
    X = sm.add_constant(df[["a", "b", "c"]].to_numpy())
    ref = sm.OLS(df["y"].to_numpy(), X).fit(cov_type="HC3")
    fit = ols_fit(df[["a", "b", "c"]], df["y"])
    np.testing.assert_allclose(fit.hc3_cov(), ref.cov_params(), rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(hc3_covariance(X, fit.resid), ref.cov_params(), rtol=1e-10)


def test_hc3_close_to_classical_under_homoscedasticity():
    rng = np.random.default_rng(1)
    n = 10_000
    X = rng.normal(size=(n, 3))
    y = X @ [1.0, -2.0, 0.5] + 2.0 * rng.normal(size=n)
    fit = ols_fit(X, y)
    sigma2_xtx = 4.0 * fit.xtx_inv
    diag_ratio = np.diag(fit.hc3_cov()) / np.diag(sigma2_xtx)
    np.testing.assert_allclose(diag_ratio, 1.0, atol=0.05)


def test_hc3_saturated_design_raises():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(4, 4))
    with pytest.raises(LeverageOne):
        hc3_covariance(X, np.zeros(4))


def test_hc3_exceeds_classical_for_heteroscedastic_slope():
    rng = np.random.default_rng(3)
    n = 5000
    x = rng.normal(size=n)
    y = 1.0 + 2.0 * x + np.abs(x) * rng.normal(size=n) * 2.0
    fit = ols_fit(x, y)
    se_hc3 = np.sqrt(np.diag(fit.hc3_cov()))
    se_cls = np.sqrt(np.diag(fit.classical_cov()))
    assert se_hc3[1] > 1.2 * se_cls[1]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(8, 60), p=st.integers(1, 4))
def test_hc3_symmetric_psd(seed, n, p):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    y = rng.normal(size=n) * rng.uniform(0.1, 3, size=n)
    fit = ols_fit(X, y)
    cov = fit.hc3_cov()
    np.testing.assert_array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-12 * max(1.0, np.abs(cov).max())


# ---------------------------------------------------------------- anova

@pytest.mark.parametrize("robust", [False, True])
@pytest.mark.parametrize("typ", [2, 3])
def test_anova_matches_statsmodels(robust, typ):
    df = _hetero_data(seed=4)
    X = pd.DataFrame({"a": df.a, "b": df.b, "c": df.c, "a*b": df.a * df.b})
    reg = LinearPathLossRegressor().fit(X, df.y)
    ours = anova(reg, X, df.y, type=typ, robust=robust).table
    ref = anova_lm(smf.ols("y ~ a + b + c + a:b", df).fit(), typ=typ,
                   robust="hc3" if robust else None).iloc[:-1]
    np.testing.assert_allclose(ours["F"].to_numpy(), ref["F"].to_numpy(), rtol=1e-9)
    np.testing.assert_allclose(ours["p"].to_numpy(), ref["PR(>F)"].to_numpy(), rtol=1e-7)


def test_anova_type3_has_intercept_type2_does_not():
    df = _hetero_data(seed=5)
    X = df[["a", "b", "c"]]
    reg = LinearPathLossRegressor().fit(X, df.y)
    t2 = anova(reg, X, df.y, type="II")
    t3 = anova(reg, X, df.y, type="III")
    assert INTERCEPT not in set(t2.table.term)
    assert t3.table.term.iloc[0] == INTERCEPT
    assert t3[INTERCEPT]["F"] > 0


def test_type2_equals_type3_without_interactions():
    # balanced orthogonal +-1 factorial design
    levels = np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1])).reshape(3, -1).T
    X = np.tile(levels, (25, 1)).astype(float)
    rng = np.random.default_rng(6)
    y = X @ [1.0, 0.0, -0.3] + rng.normal(size=len(X))
    reg = LinearPathLossRegressor().fit(X, y)
    for robust in (False, True):
        t2 = anova(reg, X, y, type=2, robust=robust).table
        t3 = anova(reg, X, y, type=3, robust=robust).table.iloc[1:]
        np.testing.assert_array_equal(t2["F"].to_numpy(), t3["F"].to_numpy())


def test_anova_rows_and_signs():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(300, 2))
    y = 3.0 * X[:, 0] - 3.0 * X[:, 1] + rng.normal(size=300)
    reg = LinearPathLossRegressor().fit(X, y)
    tab = anova(reg, X, y).table
    assert list(tab.sign) == ["+", "-"]
    np.testing.assert_allclose(tab.partial_eta2, tab.F * tab.df1 / (tab.F * tab.df1 + tab.df2))
    assert ((tab.p >= 0) & (tab.p <= 1)).all()
    assert (tab.df2 == 297).all()


def test_anova_rejects_penalized_fits():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(50, 2))
    y = rng.normal(size=50)
    for reg in (LinearPathLossRegressor(penalty="ridge", lam=0.1).fit(X, y),
                BayesianPathLossRegressor().fit(X, y)):
        with pytest.raises(PenalizedModelRejected):
            anova(reg, X, y)
    with pytest.raises(InputError):
        anova(LinearPathLossRegressor().fit(X, y), X, y, type=1)


@pytest.mark.parametrize("robust,n", [(False, 120), (True, 600)])
def test_anova_null_term_p_uniform(robust, n):
    # HC3 is mildly conservative in small samples, so the robust case uses more rows
    rng = np.random.default_rng(9)
    pvals = []
    for _ in range(200):
        X = rng.normal(size=(n, 3))
        y = 1.0 + X[:, 0] - X[:, 1] + rng.normal(size=n)
        reg = LinearPathLossRegressor().fit(X, y)
        pvals.append(anova(reg, X, y, robust=robust)["x2"]["p"])
    assert stats.kstest(pvals, "uniform").pvalue > 0.05


def test_anova_serialization_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    X = rng.normal(size=(100, 2))
    y = 50 * X[:, 0] + 0.1 * rng.normal(size=100)
    tab = anova(LinearPathLossRegressor().fit(X, y), X, y, type=3)
    tab.to_csv(tmp_path / "a.csv")
    back = pd.read_csv(tmp_path / "a.csv")
    np.testing.assert_allclose(back.F, tab.table.F)
    assert json.loads(json.dumps(tab.to_dict()))["type"] == 3
    assert format_p(1e-320) == "<1e-300"
    assert format_p(0.0123) == "0.0123"


# ---------------------------------------------------------------- partial F

def test_partial_f_equals_t_squared():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(200, 4))
    y = X @ [1.0, 0.5, 0.0, -0.2] + rng.normal(size=200)
    names = ["a", "b", "c", "d"]
    for j, name in enumerate(names):
        rest = [c for c in names if c != name]
        cmp = nested_partial_f(X, y, names, rest, names)
        t = ols_fit(X, y, names).t_values()[j + 1]
        assert abs(cmp.F - t ** 2) <= 1e-8 * max(1.0, t ** 2)
        assert cmp.df1 == 1 and cmp.df2 == 195


def test_partial_f_against_formula_and_fits():
    rng = np.random.default_rng(12)
    X = pd.DataFrame(rng.normal(size=(150, 3)), columns=["a", "b", "c"])
    y = X.a + 0.3 * X.b + rng.normal(size=150)
    small = LinearPathLossRegressor().fit(X[["a"]], y)
    big = LinearPathLossRegressor().fit(X, y)
    cmp = partial_f(small, big)
    rss0, rss1 = small.rss_, big.rss_
    F = ((rss0 - rss1) / 2) / (rss1 / (150 - 4))
    assert cmp.F == pytest.approx(F, rel=1e-12)
    assert cmp.p == pytest.approx(stats.f.sf(F, 2, 146), rel=1e-10)
    assert cmp.partial_eta2 == pytest.approx(partial_eta2(F, 2, 146))
    assert cmp.restricted_terms == ["a"] and cmp.full_terms == ["a", "b", "c"]
    with pytest.raises(NotNested):
        partial_f(big, small)
    with pytest.raises(NotNested):
        partial_f(LinearPathLossRegressor().fit(X[["a"]].iloc[:100], y[:100]), big)


def test_partial_f_noise_column_mean_one():
    rng = np.random.default_rng(13)
    Fs = []
    for _ in range(200):
        X = rng.normal(size=(200, 3))
        y = X[:, 0] + rng.normal(size=200)
        Fs.append(nested_partial_f(X, y, ["a", "b", "noise"], ["a", "b"], ["a", "b", "noise"]).F)
    assert abs(np.mean(Fs) - 1.0) <= 0.2


def test_partial_f_duplicate_column_surfaces_error():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(60, 2))
    X = np.column_stack([x, x[:, 0]])
    y = rng.normal(size=60)
    with pytest.raises((NotNested, RankDeficient)):
        nested_partial_f(X, y, ["a", "b", "a_copy"], ["a", "b"], ["a", "b", "a_copy"])
    with pytest.raises(NotNested):
        nested_partial_f(X, y, ["a", "b", "a_copy"], ["a", "b"], ["a", "b"])


@settings(max_examples=50, deadline=None)
@given(F=st.floats(0, 1e12), df1=st.integers(1, 40), df2=st.integers(1, 10**6))
def test_partial_eta2_in_unit_interval(F, df1, df2):
    e = partial_eta2(F, df1, df2)
    assert 0.0 <= e <= 1.0
    if F * df1 < 1e6 * df2:
        assert e < 1.0


# ---------------------------------------------------------------- VIF

def test_vif_orthogonal_is_one():
    H = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], float)
    X = np.tile(H[:, 1:], (5, 1))
    np.testing.assert_allclose(vif(X), 1.0, atol=1e-12)


def test_vif_near_collinear_large():
    rng = np.random.default_rng(15)
    x1 = rng.normal(size=500)
    X = np.column_stack([x1, x1 + 1e-3 * rng.normal(size=500), rng.normal(size=500)])
    v = vif(X)
    assert v[0] > 100 and v[1] > 100 and v[2] < 1.1


def test_vif_matches_statsmodels_and_edges():
    from statsmodels.stats.outliers_influence import variance_inflation_factor
    rng = np.random.default_rng(16)
    X = rng.normal(size=(80, 3))
    X[:, 2] += 0.7 * X[:, 0]
    Xc = sm.add_constant(X)
    ref = [variance_inflation_factor(Xc, j) for j in range(1, 4)]
    np.testing.assert_allclose(vif(X), ref, rtol=1e-10)
    np.testing.assert_array_equal(vif(rng.normal(size=(10, 1))), [1.0])
    with pytest.raises(PerfectCollinearity) as exc:
        vif(np.column_stack([X, X[:, 0] * 2]), names=["a", "b", "c", "d"])
    assert exc.value.args
    with pytest.raises(PerfectCollinearity):
        vif(np.column_stack([X, np.ones(80)]))
