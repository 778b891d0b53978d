"""Robust Type II/III ANOVA, nested partial-F tests and variance inflation factors.

Per-term tests are Wald F tests on coefficient blocks using either the
classical or the HC3 covariance. Nested block comparisons use the classical
RSS partial-F statistic.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .exceptions import (
    InputError,
    LeverageOne,
    NotNested,
    PenalizedModelRejected,
    PerfectCollinearity,
    RankDeficient,
)
from .regression import (
    BayesianPathLossRegressor,
    LinearPathLossRegressor,
    PathLossModel,
    ols_solve,
)

P_FLOOR = 1e-300
INTERCEPT = "Intercept"


def partial_eta2(F, df1, df2):
    return F * df1 / (F * df1 + df2)


def format_p(p):
    return f"<{P_FLOOR:.0e}" if p < P_FLOOR else f"{p:.4g}"


@dataclass
class OLSFit:
    """Unpenalized least squares with an explicit intercept column first."""

    names: list
    X: np.ndarray
    coef: np.ndarray
    resid: np.ndarray
    xtx_inv: np.ndarray
    leverage: np.ndarray

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def rss(self):
        return float(self.resid @ self.resid)

    @property
    def df_resid(self):
        return self.n - self.p

    def classical_cov(self):
        return self.rss / self.df_resid * self.xtx_inv

    def hc3_cov(self):
        return hc3_covariance(self.X, self.resid, self.xtx_inv, self.leverage)

    def t_values(self):
        return self.coef / np.sqrt(np.diag(self.classical_cov()))


def ols_fit(X, y, names=None, add_intercept=True):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    if add_intercept:
        X = np.column_stack([np.ones(len(y)), X])
        names = [INTERCEPT, *names]
    n, p = X.shape
    if n <= p:
        raise RankDeficient(f"need n > p (n={n}, p={p})")
    Q, R = np.linalg.qr(X)
    d = np.abs(np.diag(R))
    if d.min() <= 1e-10 * d.max():
        raise RankDeficient("design is rank deficient")
    coef = linalg.solve_triangular(R, Q.T @ y)
    Rinv = linalg.solve_triangular(R, np.eye(p))
    xtx_inv = Rinv @ Rinv.T
    leverage = np.einsum("ij,ij->i", Q, Q)
    return OLSFit(names, X, coef, y - X @ coef, xtx_inv, leverage)


def hc3_covariance(X, resid, xtx_inv=None, leverage=None):
    """HC3 sandwich ``(X'X)^-1 X' diag(r^2 / (1-h)^2) X (X'X)^-1``."""
    X = np.asarray(X, dtype=float)
    resid = np.asarray(resid, dtype=float)
    if xtx_inv is None or leverage is None:
        Q, R = np.linalg.qr(X)
        Rinv = linalg.solve_triangular(R, np.eye(X.shape[1]))
        xtx_inv = Rinv @ Rinv.T
        leverage = np.einsum("ij,ij->i", Q, Q)
    bad = np.flatnonzero(leverage >= 1.0 - 1e-10)
    if bad.size:
        raise LeverageOne(int(bad[0]))
    w = (resid / (1.0 - leverage)) ** 2
    meat = (X * w[:, None]).T @ X
    cov = xtx_inv @ meat @ xtx_inv
    return 0.5 * (cov + cov.T)


def wald_f(coef, cov, idx, df2):
    """Wald F for ``coef[idx] = 0``; ``idx`` may also be a contrast matrix."""
    L = np.asarray(idx)
    if L.ndim == 1:
        L = np.eye(len(coef))[L]
    b = L @ coef
    V = L @ cov @ L.T
    stat = float(b @ linalg.solve(V, b, assume_a="sym"))
    df1 = L.shape[0]
    F = stat / df1
    return F, float(stats.f.sf(F, df1, df2))


def _type2_contrast(cov, term_idx, higher_idx, p):
    """Rows of the term hypothesis uncorrelated (under ``cov``) with the higher-order terms.

    With the classical covariance this reproduces the sequential Type II sum
    of squares; with HC3 it is its heteroscedasticity-robust counterpart.
    """
    eye = np.eye(p)
    L1 = eye[list(term_idx) + list(higher_idx)]
    if not higher_idx:
        return L1
    L2 = eye[list(higher_idx)]
    Q, _ = linalg.qr(L1 @ cov @ L2.T)
    r = len(term_idx)
    return Q[:, -r:].T @ L1


def _multiset(name):
    if "*" in name:
        return Counter(name.split("*"))
    if name.endswith("^2"):
        return Counter({name[:-2]: 2})
    return Counter({name: 1})


def _contains(big, small):
    """True when term ``big`` is a strictly higher-order term containing ``small``."""
    return big != small and all(big[k] >= v for k, v in small.items())


@dataclass
class AnovaTable:
    table: pd.DataFrame
    type: int
    robust: bool

    def to_csv(self, path_or_buf=None, **kw):
        out = self.table.copy()
        out["p_display"] = [format_p(p) for p in out["p"]]
        return out.to_csv(path_or_buf, index=False, **kw)

    def to_dict(self):
        rows = self.table.to_dict(orient="records")
        for r in rows:
            r["p_display"] = format_p(r["p"])
        return {"type": self.type, "robust": self.robust, "rows": rows}

    def __getitem__(self, term):
        return self.table.set_index("term").loc[term]


def _check_unpenalized(fit):
    reg = fit.regressor_ if isinstance(fit, PathLossModel) else fit
    if isinstance(reg, BayesianPathLossRegressor):
        raise PenalizedModelRejected("ANOVA requires an unpenalized least-squares fit")
    if isinstance(reg, LinearPathLossRegressor) and reg.penalty != "none":
        raise PenalizedModelRejected(
            f"ANOVA requires an unpenalized fit, got penalty={reg.penalty!r}")


def _design_from(fit, X, y):
    if isinstance(fit, PathLossModel):
        D = fit.features_.transform(X)
        yy = fit.features_.response(X) if y is None else y
        return D, np.asarray(yy, dtype=float), list(fit.feature_names_)
    if isinstance(X, pd.DataFrame):
        return X.to_numpy(dtype=float), np.asarray(y, dtype=float), [str(c) for c in X.columns]
    X = np.asarray(X, dtype=float)
    names = getattr(fit, "feature_names_in_", None)
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    return X, np.asarray(y, dtype=float), names


def anova(fit, X, y=None, type=2, robust=True, terms=None):
    """Per-term Wald F tests.

    Parameters
    ----------
    fit : LinearPathLossRegressor or PathLossModel
        Must be unpenalized; used to identify the design and reject
        penalized fits.
    X : array, DataFrame or campaign frame (for ``PathLossModel``)
    type : {2, 3}
        Type II tests each term after the other terms but ignoring the
        higher-order terms that contain it (a projected Wald test in the
        full model); Type III tests it given everything and adds the
        intercept.
    robust : bool
        HC3 covariance when true, classical otherwise.
    terms : dict, optional
        ``{term_name: [column names]}``; defaults to one term per column.
    """
    if type not in (2, 3, "II", "III"):
        raise InputError("type must be 2 or 3")
    type = {"II": 2, "III": 3}.get(type, type)
    _check_unpenalized(fit)
    D, yy, names = _design_from(fit, X, y)
    terms = terms or {n: [n] for n in names}
    full = ols_fit(D, yy, names)
    df2 = full.df_resid
    rows = []

    cov = full.hc3_cov() if robust else full.classical_cov()
    col = {c: i for i, c in enumerate(full.names)}

    def row(term, cols, higher=()):
        idx = [col[c] for c in cols]
        L = _type2_contrast(cov, idx, [col[c] for c in higher], full.p)
        F, p = wald_f(full.coef, cov, L, df2)
        sign = np.sign(full.coef[idx[0]]) if len(idx) == 1 else np.nan
        rows.append({"term": term, "df1": len(idx), "df2": df2, "F": F, "p": p,
                     "partial_eta2": partial_eta2(F, len(idx), df2),
                     "sign": {1.0: "+", -1.0: "-", 0.0: "0"}.get(sign, "")})

    if type == 3:
        row(INTERCEPT, [INTERCEPT])
    sets = {t: Counter() for t in terms}
    for t, cols in terms.items():
        for c in cols:
            sets[t] += _multiset(c)
    for t, cols in terms.items():
        if type == 3:
            row(t, cols)
            continue
        higher = [c for u in terms if _contains(sets[u], sets[t]) for c in terms[u]]
        row(t, cols, higher)
    return AnovaTable(pd.DataFrame(rows), type, robust)


@dataclass
class NestedComparison:
    restricted_terms: list
    full_terms: list
    df1: int
    df2: int
    F: float
    p: float
    partial_eta2: float

    def to_dict(self):
        d = dict(self.__dict__)
        d["p_display"] = format_p(self.p)
        return d


def _rss_names(fit):
    reg = fit.regressor_ if isinstance(fit, PathLossModel) else fit
    if isinstance(fit, PathLossModel):
        names = list(fit.feature_names_)
    else:
        names = getattr(reg, "feature_names_in_", None)
        names = list(names) if names is not None else None
    return reg.rss_, reg.n_obs_, len(reg.coef_) + 1, names


def partial_f(restricted, full):
    """Classical RSS partial-F between two nested unpenalized fits on the same rows."""
    for f in (restricted, full):
        _check_unpenalized(f)
    rss0, n0, p0, names0 = _rss_names(restricted)
    rss1, n1, p1, names1 = _rss_names(full)
    if n0 != n1:
        raise NotNested("models were fit on different numbers of rows")
    if names0 is not None and names1 is not None:
        if not set(names0) < set(names1):
            raise NotNested("restricted terms are not a strict subset of the full terms")
    elif p0 >= p1:
        raise NotNested("restricted model must have fewer parameters")
    return nested_f_from_rss(rss0, rss1, p0, p1, n1, names0, names1)


def nested_f_from_rss(rss0, rss1, p0, p1, n, names0=None, names1=None):
    df1 = p1 - p0
    df2 = n - p1
    if df1 <= 0 or df2 <= 0:
        raise NotNested(f"invalid degrees of freedom ({df1}, {df2})")
    F = ((rss0 - rss1) / df1) / (rss1 / df2)
    p = float(stats.f.sf(F, df1, df2))
    return NestedComparison(list(names0 or []), list(names1 or []), df1, df2, float(F), p,
                            float(partial_eta2(F, df1, df2)))


def nested_partial_f(X, y, names, restricted_cols, full_cols):
    """Fit both nested OLS models on columns of ``X`` and compare them."""
    names = list(names)
    if not set(restricted_cols) < set(full_cols):
        raise NotNested("restricted columns must be a strict subset of full columns")
    X = np.asarray(X, dtype=float)
    fits = []
    for cols in (restricted_cols, full_cols):
        fits.append(ols_fit(X[:, [names.index(c) for c in cols]], y, cols))
    return nested_f_from_rss(fits[0].rss, fits[1].rss, fits[0].p, fits[1].p, fits[1].n,
                             list(restricted_cols), list(full_cols))


def vif(X, names=None):
    """Variance inflation factor of every column (regressed on the rest with an intercept)."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if p == 1:
        return np.ones(1)
    if n <= p:
        raise InputError(f"need n > p for VIFs (n={n}, p={p})")
    out = np.empty(p)
    for j in range(p):
        target = X[:, j] - X[:, j].mean()
        tss = float(target @ target)
        if tss == 0.0:
            raise PerfectCollinearity(names[j])
        others = np.delete(X, j, axis=1)
        oc = others - others.mean(axis=0)
        try:
            beta = ols_solve(oc, target)
        except RankDeficient as exc:
            raise PerfectCollinearity(names[j]) from exc
        r = target - oc @ beta
        frac = float(r @ r) / tss
        if frac <= 1e-13:
            raise PerfectCollinearity(names[j])
        out[j] = 1.0 / frac
    return out
