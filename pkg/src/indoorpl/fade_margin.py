"""Fade-margin prescription from out-of-fold residual tails, with bootstrap CIs and hold-out PDR."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy import special

from ._validation import check_open_unit
from .diagnostics import acf
from .exceptions import EmptySample, InputError, InsufficientReplicates
from .residuals import GaussianMixture1D, ResidualFit, fit_gmm

CONSERVATIVE_P = 0.02
DEFAULT_TARGETS = (0.05, 0.02, 0.01)


def _sample(x):
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise EmptySample("empty residual sample")
    if not np.all(np.isfinite(x)):
        raise InputError("residuals contain NaN or infinite values")
    return x


def empirical_quantile(residuals, q):
    """Linear interpolation between order statistics at zero-based position ``(n - 1) q``."""
    x = _sample(residuals)
    q = check_open_unit(q)
    return float(np.quantile(x, q, method="linear"))


def _mixture(gmm):
    if isinstance(gmm, ResidualFit):
        if gmm.mixture is None:
            raise InputError("fit is not a Gaussian mixture")
        return gmm.mixture
    if isinstance(gmm, GaussianMixture1D):
        return gmm
    raise InputError("expected a GaussianMixture1D or a mixture ResidualFit")


def gmm_tail_quantile(gmm, q):
    """Mixture quantile by bisection to ``|cdf - q| < 1e-10``."""
    return float(_mixture(gmm).ppf(check_open_unit(q), tol=1e-10))


def prescribe_fm(oof_residuals, gmm_fit, p, conservative_p=CONSERVATIVE_P):
    """Fade margin for outage ``p`` and the estimator that produced it.

    Above ``conservative_p`` the empirical ``(1 - p)`` quantile is used.
    At or below it the margin is the larger of the empirical and mixture
    quantiles and the tag names the larger one.
    """
    p = check_open_unit(p, "p")
    r = _sample(oof_residuals)
    emp = empirical_quantile(r, 1.0 - p)
    # a mixture fit to a constant sample only reflects the variance floor
    if p > conservative_p or np.ptp(r) == 0:
        return emp, "empirical"
    if gmm_fit is None:
        raise InputError(f"a mixture fit is required for p <= {conservative_p}")
    tail = gmm_tail_quantile(gmm_fit, 1.0 - p)
    return (emp, "empirical") if emp >= tail else (tail, "gmm_tail")


def achieved_pdr(test_true_pl, test_pred_pl, fm):
    """``1 - mean(true > pred + FM)``; the outage indicator is strict."""
    t = np.asarray(test_true_pl, dtype=float).ravel()
    y = np.asarray(test_pred_pl, dtype=float).ravel()
    if t.shape != y.shape:
        raise InputError("true and predicted path loss must have equal length")
    if t.size == 0:
        raise EmptySample("empty test set")
    return 1.0 - float(np.mean(t > y + fm))


def pdr_curve(test_true_pl, test_pred_pl, fm_grid):
    eps = np.sort(np.asarray(test_true_pl, float) - np.asarray(test_pred_pl, float))
    fm_grid = np.asarray(fm_grid, dtype=float)
    # outages are residuals strictly above the margin
    exceed = eps.size - np.searchsorted(eps, fm_grid, side="right")
    return pd.DataFrame({"fm_db": fm_grid, "pdr": 1.0 - exceed / eps.size})


# ---------------------------------------------------------------- bootstrap helpers


def _interp_quantile_sorted(vals, q):
    pos = (vals.shape[-1] - 1) * q
    lo = int(math.floor(pos))
    frac = pos - lo
    hi = min(lo + 1, vals.shape[-1] - 1)
    return (1.0 - frac) * vals[..., lo] + frac * vals[..., hi]


def _iid_quantile_replicates(xs, q, B, rng):
    """Quantiles of ``B`` i.i.d. resamples of the sorted sample ``xs``.

    Only the two order statistics straddling position ``(n - 1) q`` matter.
    For a lower-tail position ``k``, the number of resampled draws that land
    among the ``m`` smallest originals is Binomial(n, m/n) and, given that
    count, those draws are uniform on the ``m`` smallest. Sampling just that
    window is exact whenever the count exceeds ``k + 1``; replicates where
    it does not are redrawn in full. Upper tails are handled by reflection.
    """
    n = xs.size
    pos = (n - 1) * q
    if q > 0.5:
        return -_iid_quantile_replicates(-xs[::-1], 1.0 - q, B, rng)
    k = int(math.floor(pos))
    frac = pos - k
    k2 = min(k + 1, n - 1)
    m = min(n, k2 + 1 + int(10 * math.sqrt(n)) + 50)
    out = np.empty(B)
    for b in range(B):
        T = rng.binomial(n, m / n) if m < n else n
        if T >= k2 + 1:
            draw = np.sort(xs[rng.integers(0, m, T)])
        else:
            draw = np.sort(xs[rng.integers(0, n, n)])
        out[b] = (1.0 - frac) * draw[k] + frac * draw[k2]
    return out


def _jackknife_quantile(xs, q):
    """Leave-one-out quantiles of the sorted sample (one value per deleted rank)."""
    n = xs.size
    pos = (n - 2) * q
    lo = int(math.floor(pos))
    frac = pos - lo
    hi = min(lo + 1, n - 2)
    j = np.arange(n)
    v_lo = np.where(lo < j, xs[lo], xs[min(lo + 1, n - 1)])
    v_hi = np.where(hi < j, xs[hi], xs[min(hi + 1, n - 1)])
    return (1.0 - frac) * v_lo + frac * v_hi


def _jackknife_blocks(xs_rank, xs, q, L):
    """Delete-one-block quantiles for the non-overlapping blocks of length ``L``."""
    n = xs.size
    nb = n // L
    if nb < 2:
        return np.full(1, _interp_quantile_sorted(xs, q))
    D = np.sort(xs_rank[: nb * L].reshape(nb, L), axis=1)
    m = n - L
    pos = (m - 1) * q
    lo = int(math.floor(pos))
    frac = pos - lo
    hi = min(lo + 1, m - 1)

    def order_stat(r):
        # smallest t with t - #(D <= t) == r
        t = np.full(nb, r)
        for _ in range(L + 1):
            c = (D <= t[:, None]).sum(axis=1)
            t_new = r + c
            if np.array_equal(t_new, t):
                break
            t = t_new
        return xs[t]

    return (1.0 - frac) * order_stat(lo) + frac * order_stat(hi)


def _bca(theta_hat, reps, jack, level):
    B = reps.size
    below = np.sum(reps < theta_hat) + 0.5 * np.sum(reps == theta_hat)
    frac = min(max(below / B, 0.5 / B), 1.0 - 0.5 / B)
    z0 = special.ndtri(frac)
    dev = jack.mean() - jack
    denom = float(np.sum(dev ** 2))
    a = float(np.sum(dev ** 3)) / (6.0 * denom ** 1.5) if denom > 0 else 0.0
    alpha = (1.0 - level) / 2.0
    out = []
    for z in (special.ndtri(alpha), special.ndtri(1.0 - alpha)):
        adj = special.ndtr(z0 + (z0 + z) / (1.0 - a * (z0 + z)))
        out.append(float(np.quantile(reps, adj, method="linear")))
    return out[0], out[1], {"z0": float(z0), "acceleration": a}


def auto_block_length(residuals, max_lag=None):
    """First lag where ``|acf| < 2/sqrt(n)``, clamped to ``[10, n/50]``."""
    x = np.asarray(residuals, dtype=float)
    n = x.size
    max_lag = max_lag or min(n - 1, max(10, n // 50) + 1)
    band = 2.0 / math.sqrt(n)
    L = max_lag
    if np.ptp(x) > 0:
        rho = acf(x, max_lag)
        below = np.flatnonzero(np.abs(rho[1:]) < band)
        if below.size:
            L = int(below[0]) + 1
    upper = max(10, n // 50)
    return int(min(max(L, 10), upper, n))


def _moving_block_replicates(x, q, L, B, rng):
    n = x.size
    nblocks = math.ceil(n / L)
    offsets = np.arange(L)
    out = np.empty(B)
    for b in range(B):
        starts = rng.integers(0, n - L + 1, nblocks)
        idx = (starts[:, None] + offsets).ravel()[:n]
        out[b] = np.quantile(x[idx], q, method="linear")
    return out


def bootstrap_ci(residuals, p, method="bca_iid", B=2000, seed=0, block_len=None, level=0.95,
                 return_details=False):
    """Bootstrap CI for the empirical ``(1 - p)`` quantile of the residuals.

    ``bca_iid`` resamples observations; ``moving_block`` resamples
    overlapping blocks of length ``block_len`` (automatic when ``None``) and
    takes the acceleration from a delete-one-block jackknife. Both apply the
    BCa correction to the bootstrap percentiles.
    """
    x = _sample(residuals)
    p = check_open_unit(p, "p")
    if B < 200:
        raise InsufficientReplicates(f"need B >= 200 replicates, got {B}")
    if method not in ("bca_iid", "moving_block"):
        raise InputError("method must be 'bca_iid' or 'moving_block'")
    q = 1.0 - p
    theta = float(np.quantile(x, q, method="linear"))
    if np.ptp(x) == 0:
        out = (theta, theta)
        return (out, {"z0": 0.0, "acceleration": 0.0}) if return_details else out
    rng = np.random.default_rng(seed)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    if method == "bca_iid":
        reps = _iid_quantile_replicates(xs, q, B, rng)
        jack = _jackknife_quantile(xs, q)
        info = {}
    else:
        L = int(block_len) if block_len else auto_block_length(x)
        if not 1 <= L <= x.size:
            raise InputError(f"block length must be in [1, n], got {L}")
        reps = _moving_block_replicates(x, q, L, B, rng)
        rank = np.empty(x.size, dtype=int)
        rank[order] = np.arange(x.size)
        jack = _jackknife_blocks(rank, xs, q, L)
        info = {"block_len": L}
    lo, hi, det = _bca(theta, reps, jack, level)
    det.update(info)
    return ((lo, hi), det) if return_details else (lo, hi)


def gmm_parametric_ci(gmm_fit, p, n, B=1000, seed=0, level=0.95, var_floor=1e-3):
    """Percentile CI of the mixture ``(1 - p)`` quantile by parametric bootstrap.

    Each replicate draws ``n`` values from the fitted mixture, refits a
    mixture of the same size from the fitted parameters and re-takes the
    quantile.
    """
    mix = _mixture(gmm_fit)
    p = check_open_unit(p, "p")
    if B < 200:
        raise InsufficientReplicates(f"need B >= 200 replicates, got {B}")
    reps = np.empty(B)
    start = (mix.weights, mix.means, mix.sds)
    for b in range(B):
        rng = np.random.default_rng([seed, b])
        draw = mix.sample(n, rng)
        refit = fit_gmm(draw, mix.K, n_init=0, init=start, var_floor=var_floor)
        reps[b] = refit.mixture.ppf(1.0 - p, tol=1e-10)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(reps, [alpha, 1.0 - alpha], method="linear")
    return float(lo), float(hi)


# ---------------------------------------------------------------- reports


@dataclass
class FadeMarginReport:
    p: float
    estimator: str
    fm_db: float
    ci_lo: float
    ci_hi: float
    achieved_pdr: float
    fold_fm_std: float
    empirical_db: float
    gmm_tail_db: float = float("nan")
    model: str = ""

    @property
    def target_pdr(self):
        return 1.0 - self.p

    def to_dict(self):
        d = asdict(self)
        d["target_pdr"] = self.target_pdr
        return d


def fold_dispersion(oof_residuals, folds, p):
    """Standard deviation across folds of the per-fold empirical ``(1 - p)`` quantile."""
    r = np.asarray(oof_residuals, dtype=float)
    f = np.asarray(folds)
    vals = [empirical_quantile(r[f == k], 1.0 - p) for k in np.unique(f) if np.any(f == k)]
    return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def calibrate(oof_residuals, test_true_pl, test_pred_pl, gmm_fit=None, targets=DEFAULT_TARGETS,
              folds=None, ci_method="bca_iid", B=2000, gmm_B=1000, seed=0, model="",
              conservative_p=CONSERVATIVE_P, block_len=None):
    """Prescribe, bound and validate a fade margin for every target outage.

    Margins and CIs come from the out-of-fold residuals only; achieved PDR
    is measured on the hold-out predictions.
    """
    r = _sample(oof_residuals)
    reports = []
    for i, p in enumerate(sorted(targets, reverse=True)):
        fm, tag = prescribe_fm(r, gmm_fit, p, conservative_p)
        emp = empirical_quantile(r, 1.0 - p)
        tail = gmm_tail_quantile(gmm_fit, 1.0 - p) if gmm_fit is not None else float("nan")
        if tag == "gmm_tail":
            lo, hi = gmm_parametric_ci(gmm_fit, p, r.size, gmm_B, seed + i)
        else:
            lo, hi = bootstrap_ci(r, p, ci_method, B, seed + i, block_len)
        disp = fold_dispersion(r, folds, p) if folds is not None else float("nan")
        reports.append(FadeMarginReport(
            p=p, estimator=tag, fm_db=fm, ci_lo=lo, ci_hi=hi,
            achieved_pdr=achieved_pdr(test_true_pl, test_pred_pl, fm),
            fold_fm_std=disp, empirical_db=emp, gmm_tail_db=tail, model=model))
    return reports


def pdr_sweep(models, targets=DEFAULT_TARGETS, heuristic_fm=10.0, **calibrate_kw):
    """Calibration table over several models plus a fixed-margin heuristic row per model.

    ``models`` maps a name to a dict with keys ``oof_residuals``,
    ``test_true``, ``test_pred`` and optionally ``gmm_fit`` and ``folds``.
    """
    rows = []
    for name, m in models.items():
        reps = calibrate(m["oof_residuals"], m["test_true"], m["test_pred"], m.get("gmm_fit"),
                         targets, m.get("folds"), model=name, **calibrate_kw)
        rows.extend(r.to_dict() for r in reps)
        rows.append({"model": name, "p": float("nan"), "estimator": "heuristic",
                     "fm_db": float(heuristic_fm), "ci_lo": float("nan"), "ci_hi": float("nan"),
                     "achieved_pdr": achieved_pdr(m["test_true"], m["test_pred"], heuristic_fm),
                     "fold_fm_std": float("nan"), "empirical_db": float("nan"),
                     "gmm_tail_db": float("nan"), "target_pdr": float("nan")})
    cols = ["model", "p", "target_pdr", "estimator", "fm_db", "ci_lo", "ci_hi", "achieved_pdr",
            "fold_fm_std", "empirical_db", "gmm_tail_db"]
    return pd.DataFrame(rows)[cols]
