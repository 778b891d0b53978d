"""Residual-law fitting: parametric families, 1-D Gaussian mixtures, KS distance, selection."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize, special, stats

from ._numba import njit

from ._validation import check_sample
from .exceptions import (
    BracketFailure,
    DegenerateSample,
    EMNotConverged,
    InputError,
    OptimizerDiverged,
)

FAMILIES = ("normal", "skew_normal", "student_t", "cauchy", "gmm")
_FAMILY_RANK = {f: i for i, f in enumerate(FAMILIES)}
_K_PARAMS = {"normal": 2, "skew_normal": 3, "student_t": 3, "cauchy": 2}
WEIGHT_DROP = 1e-4
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class GaussianMixture1D:
    """Univariate Gaussian mixture with components sorted by mean."""

    def __init__(self, weights, means, sds):
        w = np.asarray(weights, dtype=float).ravel()
        m = np.asarray(means, dtype=float).ravel()
        s = np.asarray(sds, dtype=float).ravel()
        if not (w.shape == m.shape == s.shape) or w.size == 0:
            raise InputError("weights, means and sds must be equal-length and non-empty")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-9):
            raise InputError("mixture weights must be non-negative and sum to 1")
        if np.any(~(s > 0)) or not np.all(np.isfinite(m)):
            raise InputError("component sds must be > 0 and means finite")
        order = np.argsort(m, kind="stable")
        self.weights = w[order] / w.sum()
        self.means = m[order]
        self.sds = s[order]

    @property
    def K(self):
        return self.weights.size

    @property
    def n_params(self):
        return 3 * self.K - 1

    def _component_logpdf(self, x):
        z = (np.asarray(x, dtype=float)[..., None] - self.means) / self.sds
        return -0.5 * z * z - np.log(self.sds) - _LOG_SQRT_2PI + np.log(self.weights)

    def logpdf(self, x):
        return special.logsumexp(self._component_logpdf(x), axis=-1)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        z = (np.asarray(x, dtype=float)[..., None] - self.means) / self.sds
        return np.clip(special.ndtr(z) @ self.weights, 0.0, 1.0)

    def sf(self, x):
        z = (np.asarray(x, dtype=float)[..., None] - self.means) / self.sds
        return np.clip(special.ndtr(-z) @ self.weights, 0.0, 1.0)

    def mean(self):
        return float(self.weights @ self.means)

    def std(self):
        second = self.weights @ (self.sds ** 2 + self.means ** 2)
        return float(np.sqrt(second - self.mean() ** 2))

    def ppf(self, q, tol=1e-10, max_iter=400):
        """Quantile by bisection on the mixture cdf, bracket expanded geometrically."""
        q_arr = np.asarray(q, dtype=float)
        out = np.array([self._ppf_scalar(float(v), tol, max_iter) for v in q_arr.ravel()])
        return float(out[0]) if q_arr.ndim == 0 else out.reshape(q_arr.shape)

    def _ppf_scalar(self, q, tol, max_iter):
        if not 0.0 < q < 1.0:
            raise InputError(f"quantile level must be in (0, 1), got {q}")
        centre = self.mean()
        step = max(float(self.sds.max()), 1e-12)
        lo, hi = centre - step, centre + step
        for _ in range(200):
            if self.cdf(lo) <= q:
                break
            step *= 2.0
            lo = centre - step
        else:
            raise BracketFailure(f"could not bracket q={q} from below")
        step = max(float(self.sds.max()), 1e-12)
        for _ in range(200):
            if self.cdf(hi) >= q:
                break
            step *= 2.0
            hi = centre + step
        else:
            raise BracketFailure(f"could not bracket q={q} from above")
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            c = self.cdf(mid)
            if abs(c - q) < tol or hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(mid)):
                return mid
            if c < q:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def sample(self, n, rng):
        rng = np.random.default_rng(rng)
        comp = rng.choice(self.K, size=n, p=self.weights)
        return self.means[comp] + self.sds[comp] * rng.standard_normal(n)

    def to_dict(self):
        return {"K": self.K, "weights": self.weights.tolist(), "means": self.means.tolist(),
                "sds": self.sds.tolist()}

    def __repr__(self):
        return (f"GaussianMixture1D(weights={self.weights.round(4).tolist()}, "
                f"means={self.means.round(4).tolist()}, sds={self.sds.round(4).tolist()})")


@dataclass
class ResidualFit:
    """Fitted residual law with likelihood-based summaries.

    ``params`` holds the natural parameters. For ``gmm`` the mixture object
    lives in ``mixture``.
    """

    family: str
    params: dict
    loglik: float
    k_params: int
    n: int
    ks_stat: float = float("nan")
    mixture: GaussianMixture1D | None = None
    converged: bool = True
    n_iter: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def aic(self):
        return 2 * self.k_params - 2 * self.loglik

    @property
    def bic(self):
        return self.k_params * math.log(self.n) - 2 * self.loglik

    @property
    def label(self):
        return f"gmm_k{self.mixture.K}" if self.family == "gmm" else self.family

    def _frozen(self):
        p = self.params
        if self.family == "normal":
            return stats.norm(p["mu"], p["sigma"])
        if self.family == "skew_normal":
            return stats.skewnorm(p["alpha"], p["xi"], p["omega"])
        if self.family == "student_t":
            return stats.t(p["nu"], p["loc"], p["scale"])
        if self.family == "cauchy":
            return stats.cauchy(p["loc"], p["scale"])
        return self.mixture

    def cdf(self, x):
        return self._frozen().cdf(x)

    def ppf(self, q):
        return self._frozen().ppf(q)

    def logpdf(self, x):
        return self._frozen().logpdf(x)

    def to_dict(self):
        return {"family": self.family, "label": self.label, "params": _jsonable(self.params),
                "loglik": self.loglik, "k_params": self.k_params, "n": self.n,
                "aic": self.aic, "bic": self.bic, "ks_stat": self.ks_stat,
                "converged": self.converged}


def _jsonable(d):
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}


def ks_statistic(x, cdf):
    """Two-sided Kolmogorov-Smirnov distance between the sample and ``cdf``."""
    x = np.sort(np.asarray(x, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise InputError("ks_statistic needs at least one observation")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - F)
    d_minus = np.max(F - (i - 1) / n)
    return float(np.clip(max(d_plus, d_minus), 0.0, 1.0))


# ---------------------------------------------------------------- families


def _skewnorm_moment_start(z):
    g = stats.skew(z)
    g = float(np.clip(g, -0.99, 0.99))
    a = abs(g) ** (2.0 / 3.0)
    delta = math.copysign(math.sqrt(math.pi / 2 * a / (a + ((4 - math.pi) / 2) ** (2.0 / 3.0))), g)
    delta = float(np.clip(delta, -0.995, 0.995))
    alpha = delta / math.sqrt(1 - delta * delta)
    omega = float(np.std(z)) / math.sqrt(1 - 2 * delta * delta / math.pi)
    xi = float(np.mean(z)) - omega * delta * math.sqrt(2 / math.pi)
    return np.array([xi, math.log(omega), alpha])


def _nll_factory(family, z):
    if family == "skew_normal":
        def nll(t):
            return -np.mean(stats.skewnorm.logpdf(z, t[2], t[0], math.exp(t[1])))
        return nll
    if family == "student_t":
        def nll(t):
            return -np.mean(stats.t.logpdf(z, math.exp(t[2]), t[0], math.exp(t[1])))
        return nll

    def nll(t):
        return -np.mean(stats.cauchy.logpdf(z, t[0], math.exp(t[1])))
    return nll


def _starts(family, z):
    med = float(np.median(z))
    if family == "skew_normal":
        return [_skewnorm_moment_start(z), np.array([float(np.mean(z)), math.log(np.std(z)), 0.0])]
    if family == "student_t":
        s = float(stats.median_abs_deviation(z, scale="normal")) or float(np.std(z))
        return [np.array([med, math.log(s), math.log(nu)]) for nu in (4.0, 30.0)]
    q25, q75 = np.percentile(z, [25, 75])
    s = max(float(q75 - q25) / 2.0, 1e-6)
    return [np.array([med, math.log(s)])]


def _bounds(family):
    log_scale = (-12.0, 6.0)
    if family == "skew_normal":
        return [(-50.0, 50.0), log_scale, (-50.0, 50.0)]
    if family == "student_t":
        return [(-50.0, 50.0), log_scale, (math.log(0.05), math.log(1e4))]
    return [(-50.0, 50.0), log_scale]


def fit_distribution(residuals, family):
    """Maximum-likelihood fit of one parametric family.

    The normal law is closed form. The other families maximize the mean
    log-likelihood with L-BFGS-B on standardized data, with log-transformed
    and bounded scale parameters, from a couple of deterministic starts.
    """
    if family == "gmm":
        return fit_gmm(residuals, 1)
    if family not in _K_PARAMS:
        raise InputError(f"unknown family {family!r}; choose from {FAMILIES}")
    x = check_sample(residuals, min_n=10, name="residuals")
    n = x.size
    centre = float(np.median(x))
    spread = float(np.std(x))
    if spread == 0.0:
        raise DegenerateSample("residuals have zero variance")
    if family == "normal":
        mu = float(x.mean())
        ll = float(np.sum(stats.norm.logpdf(x, mu, spread)))
        fit = ResidualFit("normal", {"mu": mu, "sigma": spread}, ll, 2, n)
        fit.ks_stat = ks_statistic(x, fit.cdf)
        return fit
    z = (x - centre) / spread
    nll = _nll_factory(family, z)
    best = None
    for start in _starts(family, z):
        with np.errstate(all="ignore"):
            res = optimize.minimize(nll, start, method="L-BFGS-B", bounds=_bounds(family),
                                    options={"gtol": 1e-8, "ftol": 1e-14, "maxiter": 5000})
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise OptimizerDiverged(f"{family} likelihood is not finite at any start")
    t = best.x
    if family == "skew_normal":
        params = {"xi": centre + spread * t[0], "omega": spread * math.exp(t[1]), "alpha": float(t[2])}
    elif family == "student_t":
        params = {"nu": math.exp(t[2]), "loc": centre + spread * t[0], "scale": spread * math.exp(t[1])}
    else:
        params = {"loc": centre + spread * t[0], "scale": spread * math.exp(t[1])}
    params = {k: float(v) for k, v in params.items()}
    fit = ResidualFit(family, params, 0.0, _K_PARAMS[family], n, converged=bool(best.success),
                      n_iter=int(best.nit))
    fit.loglik = float(np.sum(fit.logpdf(x)))
    if not np.isfinite(fit.loglik):
        raise OptimizerDiverged(f"{family} fit produced a non-finite log-likelihood")
    fit.ks_stat = ks_statistic(x, fit.cdf)
    return fit


# ---------------------------------------------------------------- mixtures


@njit(cache=True)
def _em_kernel(x, w, m, v, var_floor, tol, max_iter):
    n = x.size
    K = w.size
    p = np.empty(K)
    nk = np.empty(K)
    sx = np.empty(K)
    sxx = np.empty(K)
    a = np.empty(K)
    b = np.empty(K)
    prev = -np.inf
    ll = -np.inf
    for it in range(1, max_iter + 1):
        for k in range(K):
            a[k] = -0.5 / v[k]
            b[k] = np.log(max(w[k], 1e-300)) - 0.5 * np.log(v[k])
            nk[k] = 0.0
            sx[k] = 0.0
            sxx[k] = 0.0
        ll = 0.0
        for i in range(n):
            xi = x[i]
            mx = -np.inf
            top = 0
            for k in range(K):
                d = xi - m[k]
                p[k] = a[k] * d * d + b[k]
                if p[k] > mx:
                    mx = p[k]
                    top = k
            s = 0.0
            for k in range(K):
                p[k] = 1.0 if k == top else np.exp(p[k] - mx)
                s += p[k]
            ll += mx + np.log(s)
            inv = 1.0 / s
            for k in range(K):
                r = p[k] * inv
                rx = r * xi
                nk[k] += r
                sx[k] += rx
                sxx[k] += rx * xi
        ll -= n * 0.9189385332046727
        if ll < prev - 1e-9 * abs(prev):
            return w, m, v, ll, it, 2
        if np.isfinite(prev) and abs(ll - prev) <= tol * abs(prev):
            return w, m, v, ll, it, 1
        prev = ll
        w = nk / n
        m_new = np.empty(K)
        v_new = np.empty(K)
        for k in range(K):
            if nk[k] > 0:
                m_new[k] = sx[k] / nk[k]
                v_new[k] = max(sxx[k] / nk[k] - m_new[k] * m_new[k], var_floor)
            else:
                m_new[k] = m[k]
                v_new[k] = v[k]
        m = m_new
        v = v_new
    return w, m, v, ll, max_iter, 0


def _em(x, w, m, v, var_floor, tol, max_iter):
    """EM from the given start. Returns (w, m, v, loglik, n_iter, converged).

    The log-likelihood is checked to be non-decreasing at every iteration;
    the value returned is recomputed at the returned parameters.
    """
    shift = float(np.median(x))  # centring keeps the one-pass variance update accurate
    w, m, v, _, it, status = _em_kernel(x - shift, np.array(w, dtype=float),
                                        np.array(m, dtype=float) - shift,
                                        np.array(v, dtype=float), float(var_floor), float(tol),
                                        int(max_iter))
    if status == 2:
        raise AssertionError("EM log-likelihood decreased")
    m = m + shift
    return w, m, v, _gmm_loglik(x, w, m, v), it, status == 1


def _gmm_loglik(x, w, m, v):
    logp = (-0.5 * (x[:, None] - m) ** 2 / v - 0.5 * np.log(v) - _LOG_SQRT_2PI
            + np.log(np.maximum(w, 1e-300)))
    return float(special.logsumexp(logp, axis=1).sum())


def _initial_params(x, K, rng, var_floor):
    sd = float(np.std(x))
    m = np.quantile(x, (np.arange(K) + 0.5) / K)
    m = m + rng.normal(0.0, 0.25 * sd / K, size=K)
    return np.full(K, 1.0 / K), m, np.full(K, max(float(np.var(x)), var_floor))


def _finite_or_minus_inf(v):
    return v if np.isfinite(v) else -np.inf


def fit_gmm(residuals, K, n_init=5, var_floor=1e-3, seed=0, tol=1e-8, max_iter=500,
            init=None, screen_iter=30):
    """EM fit of a ``K``-component 1-D Gaussian mixture.

    Runs ``n_init`` seeded starts for ``screen_iter`` EM iterations each and
    continues the one with the best log-likelihood (short-run EM screening).
    EM stops when the relative log-likelihood change drops below ``tol`` or
    after ``max_iter`` iterations; the latter is recorded in ``converged``.
    Components whose weight falls below 1e-4 are dropped and the reduced
    mixture is refit, so ``result.mixture.K`` may be smaller than ``K``.
    ``var_floor`` bounds every component variance (dB^2) from below.
    ``init`` optionally supplies one extra ``(weights, means, sds)`` start.
    """
    if not (isinstance(K, (int, np.integer)) and 1 <= K <= 5):
        raise InputError(f"K must be an integer in 1..5, got {K!r}")
    if n_init < (0 if init is not None else 1):
        raise InputError("n_init must be >= 1 (or >= 0 when init is given)")
    if screen_iter < 1:
        raise InputError(f"screen_iter must be >= 1, got {screen_iter}")
    x = check_sample(residuals, min_n=max(10, K), name="residuals", allow_constant=True)
    rng = np.random.default_rng(seed)
    starts = [_initial_params(x, K, rng, var_floor) for _ in range(n_init)]
    if init is not None:
        w0, m0, s0 = (np.asarray(a, dtype=float) for a in init)
        starts.insert(0, (w0, m0, np.maximum(s0 ** 2, var_floor)))
    # short runs from every start, then only the leader is run to convergence
    first = min(screen_iter, max_iter) if len(starts) > 1 else max_iter
    runs = [_em(x, w, m, v, var_floor, tol, first) for w, m, v in starts]
    out = runs[max(range(len(runs)), key=lambda i: _finite_or_minus_inf(runs[i][3]))]
    if not out[5] and out[4] < max_iter:
        more = _em(x, *out[:3], var_floor, tol, max_iter - out[4])
        out = (*more[:4], out[4] + more[4], more[5])
    while True:
        w, m, v = out[:3]
        keep = w >= WEIGHT_DROP
        if keep.all() or keep.sum() == 0:
            break
        w = w[keep] / w[keep].sum()
        out = _em(x, w, m[keep], v[keep], var_floor, tol, max_iter)
    if not np.isfinite(out[3]):
        raise EMNotConverged(f"EM produced no finite log-likelihood (K={K})")
    w, m, v, ll, n_iter, converged = out
    mix = GaussianMixture1D(w, m, np.sqrt(v))
    fit = ResidualFit("gmm", mix.to_dict(), ll, mix.n_params, x.size, mixture=mix,
                      converged=converged, n_iter=n_iter, extra={"K_requested": K})
    fit.ks_stat = ks_statistic(x, mix.cdf)
    return fit


# ---------------------------------------------------------------- selection


def fit_all(residuals, families=("normal", "skew_normal", "student_t", "cauchy"),
            gmm_ks=(1, 2, 3, 4, 5), n_init=5, var_floor=1e-3, seed=0):
    """Fit every candidate family and mixture order; returns a list of fits."""
    fits = [fit_distribution(residuals, f) for f in families]
    for K in gmm_ks:
        fits.append(fit_gmm(residuals, K, n_init=n_init, var_floor=var_floor, seed=seed))
    return fits


def fit_table(fits):
    """Fit summary in the layout family, K, k, loglik, AIC, BIC, KS."""
    return pd.DataFrame([{
        "family": f.label, "k_params": f.k_params, "n": f.n, "loglik": f.loglik,
        "aic": f.aic, "bic": f.bic, "ks_stat": f.ks_stat} for f in fits])


def _sort_key(f):
    K = f.mixture.K if f.mixture is not None else 0
    return (f.k_params, _FAMILY_RANK.get(f.family, len(FAMILIES)), K, f.bic, f.ks_stat)


def select_residual_model(fits, bic_tie_tol=10.0, ks_tie_tol=0.002):
    """Minimum BIC; near-ties by KS distance; remaining ties by fewest parameters.

    Residual ties are broken by family order (normal, skew-normal, t, Cauchy,
    mixture) and mixture size, so the result never depends on input order.
    """
    fits = list(fits)
    if not fits:
        raise InputError("need at least one fit")
    if len({f.n for f in fits}) > 1:
        raise InputError("all fits must be on the same sample")
    b_min = min(f.bic for f in fits)
    near = [f for f in fits if f.bic - b_min <= bic_tie_tol]
    ks_min = min(f.ks_stat for f in near)
    tied = [f for f in near if f.ks_stat - ks_min <= ks_tie_tol]
    return min(tied, key=_sort_key)


def qq_points(residuals, fit):
    """Theoretical versus empirical quantiles at plotting positions ``(i - 0.5) / n``."""
    x = np.sort(np.asarray(residuals, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise InputError("qq_points needs at least one residual")
    p = (np.arange(1, n + 1) - 0.5) / n
    return pd.DataFrame({"p": p, "theoretical": np.asarray(fit.ppf(p), dtype=float), "empirical": x})


def durbin_watson(r):
    r = np.asarray(r, dtype=float).ravel()
    denom = float(r @ r)
    if denom == 0.0:
        raise DegenerateSample("Durbin-Watson undefined for all-zero residuals")
    d = np.diff(r)
    return float(d @ d) / denom


def normality_tests(residuals):
    """Jarque-Bera, D'Agostino-Pearson omnibus and Durbin-Watson (sequence order)."""
    x = check_sample(residuals, min_n=20, name="residuals")
    jb = stats.jarque_bera(x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        dp = stats.normaltest(x)
    return {"jarque_bera": (float(jb.statistic), float(jb.pvalue)),
            "dagostino": (float(dp.statistic), float(dp.pvalue)),
            "durbin_watson": durbin_watson(x)}
