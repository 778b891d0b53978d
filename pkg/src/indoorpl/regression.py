"""Mean-model estimators: least squares, ridge, lasso, elastic net and conjugate BLR.

All penalized objectives use the per-sample normalisation

    1/(2n) ||y - b0 - X b||^2 + lam * P(b)

with ``P = ||b||^2`` (ridge), ``||b||_1`` (lasso) and
``(1 - alpha)/2 ||b||^2 + alpha ||b||_1`` (elastic net). The intercept is never
penalized. Under this convention ``enet(alpha=0, lam)`` equals ``ridge(lam / 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import linalg, stats
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    ColumnMismatch,
    InputError,
    NotConverged,
    RankDeficient,
    SingularGram,
    SingularPrior,
)
from .features import FeatureSpec, PathLossFeatures, Standardizer, free_space_offset
from .campaign import FREQ

PENALTIES = ("none", "ridge", "lasso", "enet")


@dataclass(frozen=True)
class PenaltySpec:
    kind: str = "none"
    lam: float = 0.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in PENALTIES:
            raise InputError(f"penalty kind must be one of {PENALTIES}, got {self.kind!r}")
        if self.lam < 0:
            raise InputError(f"lam must be >= 0, got {self.lam}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError(f"alpha must lie in [0, 1], got {self.alpha}")


# ---------------------------------------------------------------------------
# solvers on centred data

def _center(X, y):
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    return X - x_mean, y - y_mean, x_mean, y_mean


def ols_solve(Xc, yc, rcond=1e-10):
    """Least squares through a pivoted QR factorisation; raises on rank deficiency."""
    n, p = Xc.shape
    if p == 0:
        return np.zeros(0)
    if n <= p:
        raise RankDeficient(f"need n > p for least squares (n={n}, p={p})")
    Q, R, piv = linalg.qr(Xc, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d[0] == 0 or d[-1] <= rcond * d[0]:
        raise RankDeficient(f"design has numerical rank < {p} (|R_pp|/|R_11| = {d[-1] / max(d[0], 1e-300):.3g})")
    z = linalg.solve_triangular(R, Q.T @ yc)
    beta = np.empty(p)
    beta[piv] = z
    return beta


def ridge_solve(Xc, yc, lam):
    n, p = Xc.shape
    A = Xc.T @ Xc / n + 2.0 * lam * np.eye(p)
    b = Xc.T @ yc / n
    try:
        return linalg.solve(A, b, assume_a="pos")
    except linalg.LinAlgError as exc:
        raise RankDeficient("ridge system is singular; use lam > 0") from exc


def soft_threshold(z, t):
    return np.sign(z) * max(abs(z) - t, 0.0)


def enet_coordinate_descent(gram, xty, lam, alpha, tol=1e-7, max_iter=100_000, beta0=None):
    """Cyclic coordinate descent on the covariance form of the elastic-net problem.

    ``gram`` is ``Xc.T @ Xc / n`` and ``xty`` is ``Xc.T @ yc / n``. Stops when
    the largest absolute coefficient change in a sweep falls below ``tol``.

    Returns
    -------
    beta : ndarray
    n_iter : int
    """
    p = len(xty)
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    grad = xty - gram @ beta
    l1 = lam * alpha
    l2 = lam * (1.0 - alpha)
    diag = np.diag(gram).copy()
    for it in range(1, max_iter + 1):
        max_delta = 0.0
        for j in range(p):
            old = beta[j]
            denom = diag[j] + l2
            if denom <= 0.0:
                new = 0.0
            else:
                new = soft_threshold(grad[j] + diag[j] * old, l1) / denom
            delta = new - old
            if delta != 0.0:
                beta[j] = new
                grad -= gram[:, j] * delta
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if max_delta < tol:
            return beta, it
    raise NotConverged(f"coordinate descent did not converge in {max_iter} sweeps")


def lambda_max(Xc, yc, alpha=1.0):
    """Smallest lam at which every lasso/enet coefficient is exactly zero."""
    n = Xc.shape[0]
    if alpha <= 0:
        return np.inf
    return float(np.max(np.abs(Xc.T @ yc)) / (n * alpha))


# ---------------------------------------------------------------------------
# estimators

def _as_matrix(X):
    if isinstance(X, pd.DataFrame):
        return X.to_numpy(dtype=float), [str(c) for c in X.columns]
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X, None


class _NamedInputMixin:
    """Name-based column alignment for DataFrame inputs."""

    def _store_names(self, names, p):
        self.n_features_in_ = p
        if names is not None:
            self.feature_names_in_ = np.asarray(names, dtype=object)

    def _aligned(self, X):
        M, names = _as_matrix(X)
        known = getattr(self, "feature_names_in_", None)
        if names is not None and known is not None:
            missing = [c for c in known if c not in names]
            if missing:
                raise ColumnMismatch(f"columns missing at predict time: {missing}")
            pos = [names.index(c) for c in known]
            return M[:, pos]
        if M.shape[1] != self.n_features_in_:
            raise ColumnMismatch(f"expected {self.n_features_in_} columns, got {M.shape[1]}")
        return M


class LinearPathLossRegressor(_NamedInputMixin, RegressorMixin, BaseEstimator):
    """Least squares with an optional ridge, lasso or elastic-net penalty.

    Parameters
    ----------
    penalty : {"none", "ridge", "lasso", "enet"}
    lam : float
        Overall penalty strength under the 1/(2n) loss normalisation.
    alpha : float
        l1/l2 mixing for ``penalty="enet"`` (1 = lasso, 0 = pure l2).
    tol : float
        Coordinate-descent stopping threshold on the largest coefficient change.
    max_iter : int
        Maximum number of coordinate-descent sweeps.
    """

    def __init__(self, penalty="none", lam=0.0, alpha=1.0, tol=1e-7, max_iter=100_000):
        self.penalty = penalty
        self.lam = lam
        self.alpha = alpha
        self.tol = tol
        self.max_iter = max_iter

    @property
    def penalty_spec(self):
        return PenaltySpec(self.penalty, float(self.lam), float(self.alpha))

    def fit(self, X, y, warm_start_coef=None):
        spec = self.penalty_spec
        M, names = _as_matrix(X)
        y = np.asarray(y, dtype=float).ravel()
        if M.shape[0] != y.shape[0]:
            raise InputError("X and y have different numbers of rows")
        if M.shape[0] < 2:
            raise InputError("need at least two rows")
        Xc, yc, x_mean, y_mean = _center(M, y)
        n = M.shape[0]
        self.n_iter_ = 0
        if spec.kind == "none":
            coef = ols_solve(Xc, yc)
        elif spec.kind == "ridge":
            coef = ridge_solve(Xc, yc, spec.lam)
        else:
            alpha = 1.0 if spec.kind == "lasso" else spec.alpha
            gram = Xc.T @ Xc / n
            xty = Xc.T @ yc / n
            coef, self.n_iter_ = enet_coordinate_descent(
                gram, xty, spec.lam, alpha, self.tol, self.max_iter, warm_start_coef)
        self.coef_ = coef
        self.intercept_ = y_mean - float(x_mean @ coef)
        self._store_names(names, M.shape[1])
        resid = y - self.intercept_ - M @ coef
        self.rss_ = float(resid @ resid)
        self.tss_ = float(yc @ yc)
        self.r2_ = 1.0 - self.rss_ / self.tss_ if self.tss_ > 0 else float("nan")
        self.n_obs_ = n
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return self.intercept_ + self._aligned(X) @ self.coef_

    @property
    def n_params_(self):
        """Estimated parameters including the intercept."""
        return len(self.coef_) + 1


def fit_linear(X, y, penalty=None, tol=1e-7, max_iter=100_000):
    penalty = penalty or PenaltySpec()
    return LinearPathLossRegressor(penalty.kind, penalty.lam, penalty.alpha, tol,
                                   max_iter).fit(X, y)


# ---------------------------------------------------------------------------
# conjugate Bayesian linear regression

@dataclass(frozen=True)
class NIGPosterior:
    """Normal-inverse-gamma posterior ``beta | s2 ~ N(mean, s2 V)``, ``s2 ~ IG(shape, scale)``.

    When ``x_mean`` is set the coefficients refer to centred columns and the
    intercept ``y_mean - x_mean @ mean`` carries a flat prior.
    """

    mean: np.ndarray
    cov_factor: np.ndarray
    shape: float
    scale: float
    x_mean: np.ndarray | None = None
    y_mean: float = 0.0
    n_obs: int = 0

    @property
    def intercept(self):
        if self.x_mean is None:
            return 0.0
        return self.y_mean - float(self.x_mean @ self.mean)

    @property
    def sigma2_mean(self):
        return self.scale / (self.shape - 1.0) if self.shape > 1 else np.inf


def _chol_inverse(P, err):
    try:
        c = linalg.cho_factor(P, lower=True)
    except linalg.LinAlgError as exc:
        raise err from exc
    return linalg.cho_solve(c, np.eye(P.shape[0]))


def fit_blr_nig(X, y, prior_mean=None, prior_cov=None, a0=1e-3, b0=1e-3,
                prior_precision=None):
    """Closed-form conjugate update.

    Either ``prior_cov`` (V0) or ``prior_precision`` (V0^-1, may be singular,
    e.g. zero for a diffuse prior) must describe the coefficient prior.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    beta0 = np.zeros(p) if prior_mean is None else np.asarray(prior_mean, dtype=float)
    if prior_precision is None:
        V0 = np.eye(p) * 1e6 if prior_cov is None else np.asarray(prior_cov, dtype=float)
        if not np.allclose(V0, V0.T):
            raise SingularPrior("prior covariance must be symmetric")
        P0 = _chol_inverse(V0, SingularPrior("prior covariance is not positive definite"))
    else:
        P0 = np.asarray(prior_precision, dtype=float)
    if a0 <= 0 or b0 <= 0:
        raise SingularPrior("a0 and b0 must be positive")
    Pn = P0 + X.T @ X
    Pn = 0.5 * (Pn + Pn.T)
    Vn = _chol_inverse(Pn, SingularPrior("posterior precision is singular"))
    beta_n = Vn @ (P0 @ beta0 + X.T @ y)
    resid = y - X @ beta_n
    dev = beta_n - beta0
    # same as yTy + b0T P0 b0 - bnT Pn bn, without the cancellation
    bn = b0 + 0.5 * (float(resid @ resid) + float(dev @ P0 @ dev))
    return NIGPosterior(beta_n, Vn, a0 + 0.5 * n, bn)


def fit_blr_zellner(X, y, g, a0=1e-3, b0=1e-3):
    """g-prior ``beta | s2 ~ N(0, g s2 (X^T X)^-1)``; the posterior mean is ``g/(1+g)`` times OLS."""
    if not g > 0:
        raise InputError(f"g must be positive, got {g}")
    X = np.asarray(X, dtype=float)
    gram = X.T @ X
    try:
        linalg.cho_factor(gram, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularGram("X^T X is not invertible") from exc
    return fit_blr_nig(X, y, a0=a0, b0=b0, prior_precision=gram / g)


def blr_predictive(post, X):
    """Student-t predictive per row: ``(location, scale, dof)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if post.x_mean is None:
        Z = X
        loc = Z @ post.mean
        extra = 0.0
    else:
        Z = X - post.x_mean
        loc = post.y_mean + Z @ post.mean
        # flat-prior intercept contributes s2 / n
        extra = 1.0 / post.n_obs
    quad = np.einsum("ij,jk,ik->i", Z, post.cov_factor, Z)
    scale = np.sqrt(post.scale / post.shape * (1.0 + extra + quad))
    dof = np.full(len(loc), 2.0 * post.shape)
    return loc, scale, dof


class BayesianPathLossRegressor(_NamedInputMixin, RegressorMixin, BaseEstimator):
    """Conjugate BLR on centred columns with a flat intercept.

    Parameters
    ----------
    prior : {"nig", "zellner"}
    prior_scale : float
        NIG prior covariance is ``prior_scale * I`` with zero mean.
    g : float or None
        Zellner scale; ``None`` uses the unit-information choice ``g = n``.
    a0, b0 : float
        Inverse-gamma shape and scale.
    """

    def __init__(self, prior="nig", prior_scale=1e6, g=None, a0=1e-3, b0=1e-3):
        self.prior = prior
        self.prior_scale = prior_scale
        self.g = g
        self.a0 = a0
        self.b0 = b0

    def fit(self, X, y):
        M, names = _as_matrix(X)
        y = np.asarray(y, dtype=float).ravel()
        Xc, yc, x_mean, y_mean = _center(M, y)
        n, p = M.shape
        if self.prior == "nig":
            post = fit_blr_nig(Xc, yc, prior_cov=np.eye(p) * self.prior_scale,
                               a0=self.a0, b0=self.b0)
        elif self.prior == "zellner":
            g = float(n if self.g is None else self.g)
            post = fit_blr_zellner(Xc, yc, g, a0=self.a0, b0=self.b0)
            self.g_ = g
        else:
            raise InputError(f"prior must be 'nig' or 'zellner', got {self.prior!r}")
        self.posterior_ = NIGPosterior(post.mean, post.cov_factor, post.shape, post.scale,
                                       x_mean, y_mean, n)
        self.coef_ = post.mean
        self.intercept_ = self.posterior_.intercept
        self._store_names(names, p)
        resid = y - self.intercept_ - M @ self.coef_
        self.rss_ = float(resid @ resid)
        self.n_obs_ = n
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "posterior_")
        loc, scale, dof = blr_predictive(self.posterior_, self._aligned(X))
        if return_std:
            return loc, scale * np.sqrt(dof / (dof - 2.0))
        return loc

    def predictive(self, X):
        check_is_fitted(self, "posterior_")
        return blr_predictive(self.posterior_, self._aligned(X))

    def predictive_interval(self, X, level=0.95):
        loc, scale, dof = self.predictive(X)
        t = stats.t.ppf(0.5 + level / 2.0, dof)
        return loc - t * scale, loc + t * scale


# ---------------------------------------------------------------------------
# full mean model: features -> standardizer -> regressor

class PathLossModel(RegressorMixin, BaseEstimator):
    """Path-loss mean model operating directly on campaign frames.

    Feature mapping and scaling are refit inside every call to :meth:`fit`, so
    cloning this object per cross-validation fold keeps preprocessing
    leakage-safe.

    Parameters
    ----------
    features : PathLossFeatures
    regressor : LinearPathLossRegressor or BayesianPathLossRegressor
    """

    def __init__(self, features=None, regressor=None):
        self.features = features
        self.regressor = regressor

    def _parts(self):
        feats = clone(self.features) if self.features is not None else PathLossFeatures()
        reg = clone(self.regressor) if self.regressor is not None else LinearPathLossRegressor()
        return feats, reg

    def fit(self, X, y=None):
        feats, reg = self._parts()
        feats.fit(X)
        raw = feats.transform(X)
        if y is None:
            y = feats.response(X)
        scaler = Standardizer().fit(raw)
        reg.fit(pd.DataFrame(scaler.transform(raw), columns=feats.feature_names_out_), y)
        self.features_, self.scaler_, self.regressor_ = feats, scaler, reg
        self.feature_names_ = list(feats.feature_names_out_)
        return self

    def design(self, X):
        check_is_fitted(self, "regressor_")
        raw = self.features_.transform(X)
        return pd.DataFrame(self.scaler_.transform(raw), columns=self.feature_names_)

    def predict(self, X):
        """Predicted path loss in dB (frequency offset restored when explicit)."""
        yhat = self.regressor_.predict(self.design(X))
        if self.features_.freq_handling == "explicit_offset":
            yhat = yhat + free_space_offset(X[FREQ].to_numpy(dtype=float))
        return yhat

    def response(self, X):
        return X["path_loss_db"].to_numpy(dtype=float)

    def natural_coefficients(self):
        """Intercept and slopes on the raw (unstandardized) design columns."""
        check_is_fitted(self, "regressor_")
        coef = self.regressor_.coef_ / self.scaler_.scale_
        intercept = self.regressor_.intercept_ - float(coef @ self.scaler_.mean_)
        return intercept, dict(zip(self.feature_names_, coef))

    def to_dict(self):
        check_is_fitted(self, "regressor_")
        intercept, nat = self.natural_coefficients()
        reg = self.regressor_
        out = {
            "features": self.features_.get_params(),
            "regressor": {"class": type(reg).__name__, **reg.get_params()},
            "columns": self.feature_names_,
            "standardized": {"intercept": float(reg.intercept_),
                             "coefficients": [float(c) for c in reg.coef_]},
            "scaler": {"mean": self.scaler_.mean_.tolist(), "scale": self.scaler_.scale_.tolist(),
                       "constant": [bool(c) for c in self.scaler_.constant_]},
            "natural": {"intercept": intercept, "coefficients": {k: float(v) for k, v in nat.items()}},
            "train": {"rss": float(reg.rss_), "n": int(reg.n_obs_)},
        }
        if isinstance(reg, BayesianPathLossRegressor):
            post = reg.posterior_
            out["posterior"] = {"shape": post.shape, "scale": post.scale,
                                "cov_factor_diag": np.diag(post.cov_factor).tolist()}
        return out


def make_model(kind="linear", penalty="none", lam=0.0, alpha=1.0, prior=None,
               include_snr=True, d0_m=1.0, freq_handling="absorb_into_intercept", **reg_kw):
    """Convenience constructor for the standard model families."""
    feats = PathLossFeatures(kind=kind, d0_m=d0_m, include_snr=include_snr,
                             freq_handling=freq_handling)
    if prior is not None:
        reg = BayesianPathLossRegressor(prior=prior, **reg_kw)
    else:
        reg = LinearPathLossRegressor(penalty=penalty, lam=lam, alpha=alpha, **reg_kw)
    return PathLossModel(feats, reg)


# ---------------------------------------------------------------------------
# hyperparameter selection

def select_hyperparameters(X, y, folds, penalty, lambda_grid, alpha_grid=(1.0,), tol=1e-7,
                           max_iter=100_000, rtol=1e-10):
    """Grid search by mean validation RMSE over ``folds``.

    ``X`` is the raw design; the standardizer is refit on each fold's training
    rows. Ties (relative difference below ``rtol``) go to the larger ``lam``,
    then the larger ``alpha``.

    Returns
    -------
    PenaltySpec
    table : list of dict
        One row per grid point with the mean validation RMSE.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    lambdas = sorted({float(v) for v in lambda_grid}, reverse=True)
    alphas = sorted({float(v) for v in alpha_grid}) if penalty == "enet" else [1.0]
    if not lambdas or not alphas:
        raise InputError("hyperparameter grids must be non-empty")
    if not folds:
        raise InputError("need at least one inner fold")
    scores = {}
    for train, val in folds:
        scaler = Standardizer().fit(X[train])
        Xt, Xv = scaler.transform(X[train]), scaler.transform(X[val])
        for a in alphas:
            warm = None
            for lam in lambdas:  # descending: warm starts follow the path
                reg = LinearPathLossRegressor(penalty, lam, a, tol, max_iter)
                reg.fit(Xt, y[train], warm_start_coef=warm)
                if penalty in ("lasso", "enet"):
                    warm = reg.coef_
                r = y[val] - reg.predict(Xv)
                scores.setdefault((lam, a), []).append(float(np.sqrt(np.mean(r * r))))
    table = [{"lam": lam, "alpha": a, "rmse": float(np.mean(v))} for (lam, a), v in scores.items()]
    best = min(row["rmse"] for row in table)
    tied = [row for row in table if row["rmse"] - best <= rtol * max(best, 1e-300)]
    pick = max(tied, key=lambda row: (row["lam"], row["alpha"]))
    return PenaltySpec(penalty, pick["lam"], pick["alpha"]), table
