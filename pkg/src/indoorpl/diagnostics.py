"""Nonparametric residual diagnostics.

Gaussian-kernel density estimates on a uniform grid, bandwidth selectors,
modality evidence (mode counts, Hartigan's dip, Silverman's critical
bandwidth), group location/scale tests and serial-correlation summaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy import signal, stats

from ._numba import njit
from ._validation import check_sample
from .campaign import WALL_COLUMNS
from .exceptions import (
    AllBandwidthsDegenerate,
    BandwidthNonPositive,
    BisectionFailed,
    DegenerateSample,
    GroupTooSmall,
    InputError,
)

DEFAULT_GRID = 2 ** 14
DEFAULT_PAD = 8.0
# exp(-w^2 h^2 / 2) < 1e-17 beyond this value of w*h
_KERNEL_CUTOFF = math.sqrt(2.0 * math.log(1e17))
_ECF_CHUNK = 4_000_000


@dataclass
class DensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    kernel: str = "gaussian"
    method: str = "exact"

    @property
    def step(self):
        return float(self.grid[1] - self.grid[0])

    def integral(self):
        return _trapz(self.density, self.grid)

    def __call__(self, x):
        return np.interp(x, self.grid, self.density, left=0.0, right=0.0)

    def to_frame(self):
        return pd.DataFrame({"grid": self.grid, "density": self.density})


def _grid(x, h, grid_size, pad):
    lo = float(x.min()) - pad * h
    hi = float(x.max()) + pad * h
    return np.linspace(lo, hi, grid_size)


def _trapz(y, x):
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0)


def _kde_spectral(x, h, grid):
    """Sum of Gaussian kernels at the grid nodes via the empirical characteristic function.

    The grid is embedded in a zero-padded period of twice its length, so the
    periodic sum differs from the plain kernel sum only by kernel mass more
    than the grid width away (below 1e-15 with 8h padding). The ECF is formed
    at the DFT frequencies where the kernel transform is not negligible and
    inverted with one FFT. Returns ``None`` if the grid cannot resolve ``h``.
    """
    M = grid.size
    L = 2 * M
    delta = grid[1] - grid[0]
    period = L * delta
    k_max = int(math.ceil(_KERNEL_CUTOFF * period / (2.0 * math.pi * h)))
    if k_max >= L // 2:
        return None
    omega = 2.0 * math.pi * np.arange(k_max + 1) / period
    u = x - grid[0]
    ecf = np.zeros(k_max + 1, dtype=complex)
    chunk = max(1, _ECF_CHUNK // (k_max + 1))
    for s in range(0, u.size, chunk):
        ecf += np.exp(-1j * np.outer(omega, u[s:s + chunk])).sum(axis=1)
    ecf /= u.size
    coef = np.zeros(L, dtype=complex)
    coef[:k_max + 1] = ecf * np.exp(-0.5 * (omega * h) ** 2) / period
    coef[L - k_max:] = np.conj(coef[1:k_max + 1][::-1])
    vals = np.fft.ifft(coef).real * L
    return np.maximum(vals[:M], 0.0)


def _kde_binned(x, h, grid):
    """Linear binning followed by FFT convolution with the sampled kernel."""
    M = grid.size
    delta = grid[1] - grid[0]
    pos = (x - grid[0]) / delta
    left = np.clip(np.floor(pos).astype(int), 0, M - 2)
    frac = pos - left
    counts = np.bincount(left, weights=1.0 - frac, minlength=M)
    counts += np.bincount(left + 1, weights=frac, minlength=M)
    L = 2 * M
    lag = np.arange(L)
    lag = np.where(lag < M, lag, lag - L) * delta
    kern = np.exp(-0.5 * (lag / h) ** 2) / (h * math.sqrt(2.0 * math.pi))
    dens = np.fft.irfft(np.fft.rfft(counts, L) * np.fft.rfft(kern), L)[:M] / x.size
    return np.maximum(dens, 0.0)


def kde_direct(x, h, grid, chunk=2048):
    """Plain O(n * grid) kernel sum; the reference the fast paths are checked against."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(len(grid))
    for s in range(0, len(grid), chunk):
        g = grid[s:s + chunk]
        z = (g[:, None] - x[None, :]) / h
        out[s:s + chunk] = np.exp(-0.5 * z * z).sum(axis=1)
    return out / (x.size * h * math.sqrt(2.0 * math.pi))


def kde_fft(residuals, h, grid_size=DEFAULT_GRID, pad=DEFAULT_PAD, method="exact"):
    """Gaussian KDE on ``grid_size`` uniform nodes over ``[min - pad*h, max + pad*h]``.

    ``method="exact"`` reproduces the kernel sum at the nodes to rounding
    error; ``"binned"`` uses linear binning and is faster for large samples
    when only the shape matters (mode counting). The density is normalized
    to unit trapezoid integral on the grid.
    """
    x = check_sample(residuals, min_n=1)
    h = float(h)
    if not h > 0 or not math.isfinite(h):
        raise BandwidthNonPositive(f"bandwidth must be > 0, got {h}")
    if grid_size < 256:
        raise InputError("grid_size must be >= 256")
    if method not in ("exact", "binned"):
        raise InputError("method must be 'exact' or 'binned'")
    grid = _grid(x, h, int(grid_size), float(pad))
    dens = _kde_spectral(x, h, grid) if method == "exact" else _kde_binned(x, h, grid)
    if dens is None:  # grid too coarse for h; fall back to the plain sum
        dens = kde_direct(x, h, grid)
    total = _trapz(dens, grid)
    if total > 0:
        dens = dens / total
    return DensityEstimate(grid, dens, h, method=method)


def silverman_bandwidth(residuals):
    """``0.9 * min(sd, IQR / 1.34) * n^(-1/5)``."""
    x = check_sample(residuals, min_n=2)
    sd = float(np.std(x, ddof=1))
    if sd == 0.0:
        raise DegenerateSample("residuals have zero variance")
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    return 0.9 * spread * x.size ** -0.2


def cv_loglik_bandwidth(residuals, h_grid=None, folds=5, seed=0, max_points=100_000,
                        grid_size=DEFAULT_GRID, return_scores=False):
    """Bandwidth maximizing the held-out log density over random folds.

    Each training fold's KDE is evaluated at the held-out points by linear
    interpolation on the grid. Samples larger than ``max_points`` are
    subsampled (seeded). ``h_grid`` defaults to 40 log-spaced multiples of
    the Silverman bandwidth between 0.2 and 10.
    """
    x = check_sample(residuals, min_n=2 * max(folds, 2))
    if folds < 2:
        raise InputError("folds must be >= 2")
    rng = np.random.default_rng(seed)
    if x.size > max_points:
        x = rng.choice(x, size=max_points, replace=False)
    if h_grid is None:
        h_grid = silverman_bandwidth(x) * np.geomspace(0.2, 10.0, 40)
    h_grid = np.asarray(h_grid, dtype=float)
    if np.any(~(h_grid > 0)):
        raise BandwidthNonPositive("all bandwidths must be > 0")
    if np.any(np.diff(h_grid) < 0):
        raise InputError("h_grid must be ascending")
    assign = rng.permutation(x.size) % folds
    lo, hi = float(x.min()), float(x.max())
    scores = np.empty(h_grid.size)
    for j, h in enumerate(h_grid):
        total = 0.0
        grid = np.linspace(lo - DEFAULT_PAD * h, hi + DEFAULT_PAD * h, grid_size)
        for f in range(folds):
            train, test = x[assign != f], x[assign == f]
            dens = _kde_binned(train, h, grid)
            val = np.interp(test, grid, dens)
            if np.any(val <= 0):
                total = -np.inf
                break
            total += float(np.log(val).sum())
        scores[j] = total
    if not np.any(np.isfinite(scores)):
        raise AllBandwidthsDegenerate("held-out log-likelihood is -inf for every bandwidth")
    best = float(h_grid[int(np.argmax(scores))])
    if return_scores:
        return best, pd.DataFrame({"h": h_grid, "cv_loglik": scores})
    return best


def mode_count(density, prominence_frac=0.01):
    """Number of local maxima with prominence at least ``prominence_frac * max(density)``."""
    if not 0 < prominence_frac < 1:
        raise InputError("prominence_frac must lie in (0, 1)")
    d = density.density if isinstance(density, DensityEstimate) else np.asarray(density, float)
    top = float(d.max())
    if top <= 0:
        return 0
    # pad with zeros so a maximum at the grid edge still counts
    peaks, _ = signal.find_peaks(np.concatenate([[0.0], d, [0.0]]),
                                 prominence=prominence_frac * top)
    return int(peaks.size)


def modes_at(x, h, prominence_frac=0.01, grid_size=DEFAULT_GRID, method="binned"):
    return mode_count(kde_fft(x, h, grid_size=grid_size, method=method), prominence_frac)


def mode_count_curve(residuals, h_grid=None, prominence_frac=0.01, grid_size=DEFAULT_GRID,
                     method="binned"):
    """Mode count over a bandwidth sweep (default 60 log-spaced values in [0.05, 5] dB).

    The ``monotone`` attribute of the returned frame records whether the
    count is non-increasing in ``h``.
    """
    x = check_sample(residuals, min_n=2)
    h_grid = np.geomspace(0.05, 5.0, 60) if h_grid is None else np.asarray(h_grid, float)
    modes = [modes_at(x, h, prominence_frac, grid_size, method) for h in h_grid]
    out = pd.DataFrame({"h": h_grid, "modes": modes})
    out.attrs["monotone"] = bool(np.all(np.diff(out["modes"].to_numpy()) <= 0))
    return out


# ---------------------------------------------------------------- dip test


@njit(cache=True)
def _dip_sorted(x):
    """Hartigan's dip of a sorted sample (greatest convex minorant / least concave majorant)."""
    n = x.size
    if n < 2 or x[n - 1] == x[0]:
        return 0.5 / n
    # 1-based working arrays, index 0 unused
    xs = np.empty(n + 1)
    xs[1:] = x
    mn = np.zeros(n + 1, dtype=np.int64)
    mj = np.zeros(n + 1, dtype=np.int64)
    gcm = np.zeros(n + 1, dtype=np.int64)
    lcm = np.zeros(n + 1, dtype=np.int64)
    mn[1] = 1
    for j in range(2, n + 1):
        mn[j] = j - 1
        while True:
            mnj = mn[j]
            mnmnj = mn[mnj]
            if mnj == 1 or (xs[j] - xs[mnj]) * (mnj - mnmnj) < (xs[mnj] - xs[mnmnj]) * (j - mnj):
                break
            mn[j] = mnmnj
    mj[n] = n
    for k in range(n - 1, 0, -1):
        mj[k] = k + 1
        while True:
            mjk = mj[k]
            mjmjk = mj[mjk]
            if mjk == n or (xs[k] - xs[mjk]) * (mjk - mjmjk) < (xs[mjk] - xs[mjmjk]) * (k - mjk):
                break
            mj[k] = mjmjk
    dip = 1.0
    low = 1
    high = n
    while True:
        ic = 1
        gcm[1] = high
        while gcm[ic] > low:
            i = gcm[ic]
            ic += 1
            gcm[ic] = mn[i]
        l_gcm = ic
        ig = ic
        ih = 1
        lcm[1] = low
        while lcm[ih] < high:
            i = lcm[ih]
            ih += 1
            lcm[ih] = mj[i]
        l_lcm = ih
        ix = l_gcm - 1
        iv = 2
        d = 0.0
        if l_gcm != 2 or l_lcm != 2:
            while True:
                gcmix = gcm[ix]
                lcmiv = lcm[iv]
                if gcmix > lcmiv:
                    gcmi1 = gcm[ix + 1]
                    dx = (lcmiv - gcmi1 + 1) - (xs[lcmiv] - xs[gcmi1]) * (gcmix - gcmi1) / (
                        xs[gcmix] - xs[gcmi1])
                    iv += 1
                    if dx >= d:
                        d = dx
                        ig = ix + 1
                        ih = iv - 1
                else:
                    lcmiv1 = lcm[iv - 1]
                    dx = (xs[gcmix] - xs[lcmiv1]) * (lcmiv - lcmiv1) / (
                        xs[lcmiv] - xs[lcmiv1]) - (gcmix - lcmiv1 - 1)
                    ix -= 1
                    if dx >= d:
                        d = dx
                        ig = ix + 1
                        ih = iv
                if ix < 1:
                    ix = 1
                if iv > l_lcm:
                    iv = l_lcm
                if gcm[ix] == lcm[iv]:
                    break
        else:
            d = 1.0
        if d < dip:
            break
        dip_l = 0.0
        for j in range(ig, l_gcm):
            max_t = 1.0
            jb = gcm[j + 1]
            je = gcm[j]
            if je - jb > 1 and xs[je] != xs[jb]:
                C = (je - jb) / (xs[je] - xs[jb])
                for jj in range(jb, je + 1):
                    t = (jj - jb + 1) - (xs[jj] - xs[jb]) * C
                    if max_t < t:
                        max_t = t
            if dip_l < max_t:
                dip_l = max_t
        dip_u = 0.0
        for j in range(ih, l_lcm):
            max_t = 1.0
            jb = lcm[j]
            je = lcm[j + 1]
            if je - jb > 1 and xs[je] != xs[jb]:
                C = (je - jb) / (xs[je] - xs[jb])
                for jj in range(jb, je + 1):
                    t = (xs[jj] - xs[jb]) * C - (jj - jb - 1)
                    if max_t < t:
                        max_t = t
            if dip_u < max_t:
                dip_u = max_t
        dipnew = max(dip_u, dip_l)
        if dip < dipnew:
            dip = dipnew
        if low == gcm[ig] and high == lcm[ih]:
            break
        low = gcm[ig]
        high = lcm[ih]
    return dip / (2.0 * n)


def dip_statistic(x):
    """Hartigan's dip: sup-distance from the empirical cdf to the closest unimodal cdf."""
    return float(_dip_sorted(np.sort(np.asarray(x, dtype=float).ravel())))


@njit(cache=True)
def _uniform_dips(u_sorted_rows):
    out = np.empty(u_sorted_rows.shape[0])
    for b in range(u_sorted_rows.shape[0]):
        out[b] = _dip_sorted(u_sorted_rows[b])
    return out


@lru_cache(maxsize=32)
def dip_null(n, n_boot=2000, seed=0):
    """Dips of ``n_boot`` uniform samples of size ``n``; replicate ``b`` uses seed ``(seed, b)``."""
    out = np.empty(n_boot)
    for b in range(n_boot):
        u = np.sort(np.random.default_rng([seed, b]).random(n))
        out[b] = _dip_sorted(u)
    out.setflags(write=False)
    return out


def dip_test(residuals, n_boot=2000, seed=0):
    """Dip statistic and its p-value under the uniform null (share of null dips >= observed)."""
    x = check_sample(residuals, min_n=10)
    if n_boot < 1:
        raise InputError("n_boot must be >= 1")
    d = dip_statistic(x)
    null = dip_null(x.size, int(n_boot), int(seed))
    return d, float(np.mean(null >= d))


# ---------------------------------------------------------------- critical bandwidth


def critical_bandwidth(x, k_modes=1, prominence_frac=0.01, grid_size=DEFAULT_GRID, rtol=1e-3,
                       method="binned"):
    """Smallest ``h`` (to relative tolerance ``rtol``) whose KDE has at most ``k_modes`` modes."""
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x))
    if sd == 0:
        raise DegenerateSample("zero-variance sample")

    def count(h):
        return modes_at(x, h, prominence_frac, grid_size, method)

    hi = sd
    for _ in range(60):
        if count(hi) <= k_modes:
            break
        hi *= 2.0
    else:
        raise BisectionFailed("no bandwidth gives few enough modes")
    # resolution floor: a few grid steps at the smallest admissible h
    floor = 4.0 * float(np.ptp(x)) / grid_size
    lo = hi / 2.0
    while count(lo) <= k_modes:
        hi = lo
        lo /= 2.0
        if lo < floor:
            raise BisectionFailed(f"mode count stays <= {k_modes} down to h={lo:.3g}")
    while hi / lo > 1.0 + rtol:
        mid = math.sqrt(lo * hi)
        if count(mid) <= k_modes:
            hi = mid
        else:
            lo = mid
    return hi


def silverman_critical_bandwidth(residuals, k_modes=1, n_boot=500, seed=0,
                                 prominence_frac=0.01, grid_size=DEFAULT_GRID, rtol=1e-3):
    """Critical bandwidth ``h*`` and Silverman's smoothed-bootstrap p-value.

    Each replicate resamples the data, adds ``h*`` Gaussian jitter and
    rescales by ``1 / sqrt(1 + h*^2 / var)`` so the variance matches the
    sample. The p-value is the share of replicates that still show more
    than ``k_modes`` modes at ``h*``, i.e. whose own critical bandwidth
    exceeds ``h*``.
    """
    if k_modes < 1:
        raise InputError("k_modes must be >= 1")
    x = check_sample(residuals, min_n=3, allow_constant=False)
    h_star = critical_bandwidth(x, k_modes, prominence_frac, grid_size, rtol)
    var = float(np.var(x))
    shrink = 1.0 / math.sqrt(1.0 + h_star ** 2 / var)
    exceed = 0
    for b in range(n_boot):
        rng = np.random.default_rng([seed, b])
        y = x[rng.integers(0, x.size, x.size)]
        ybar = y.mean()
        xb = ybar + (y - ybar + h_star * rng.standard_normal(x.size)) * shrink
        if modes_at(xb, h_star, prominence_frac, grid_size) > k_modes:
            exceed += 1
    p = exceed / n_boot if n_boot else float("nan")
    return h_star, p


@dataclass
class ModalityReport:
    curve: pd.DataFrame
    dip: float
    dip_p: float
    h_critical: float
    critical_p: float
    k_modes: int = 1

    def to_dict(self):
        return {"dip": self.dip, "dip_p": self.dip_p, "h_critical": self.h_critical,
                "critical_p": self.critical_p, "k_modes": self.k_modes,
                "mode_curve_monotone": bool(self.curve.attrs.get("monotone", True))}


def modality_report(residuals, k_modes=1, dip_boot=2000, crit_boot=500, seed=0,
                    prominence_frac=0.01, h_grid=None):
    curve = mode_count_curve(residuals, h_grid, prominence_frac)
    d, p = dip_test(residuals, dip_boot, seed)
    h, cp = silverman_critical_bandwidth(residuals, k_modes, crit_boot, seed, prominence_frac)
    return ModalityReport(curve, d, p, h, cp, k_modes)


# ---------------------------------------------------------------- groups


def los_labels(frame):
    """``"LoS"`` where every wall count is zero, ``"NLoS"`` otherwise."""
    walls = frame[list(WALL_COLUMNS)].to_numpy(dtype=float)
    return np.where(np.all(walls == 0, axis=1), "LoS", "NLoS")


def tercile_labels(values):
    """Pooled terciles labelled low / mid / high."""
    return pd.qcut(np.asarray(values, dtype=float), 3, labels=["low", "mid", "high"]).astype(str)


def group_tests(residuals, group_labels):
    """Kruskal-Wallis location test and Brown-Forsythe scale test across groups.

    Returns a dict with ``kruskal_wallis: (H, p, epsilon2)``,
    ``brown_forsythe: (F, p, eta2)`` and a per-group table of size, median,
    MAD and ``1.4826 * MAD``.
    """
    x = check_sample(residuals, min_n=2)
    labels = np.asarray(group_labels)
    if labels.shape != x.shape:
        raise InputError("group_labels must match residuals in length")
    keys = sorted(pd.unique(labels), key=str)
    if len(keys) < 2:
        raise GroupTooSmall("need at least two groups")
    groups = [x[labels == k] for k in keys]
    for k, g in zip(keys, groups):
        if g.size < 2:
            raise GroupTooSmall(f"group {k!r} has {g.size} member(s); need >= 2")
    n, k = x.size, len(groups)
    if np.ptp(x) == 0:
        H, p_kw = 0.0, 1.0
    else:
        H, p_kw = stats.kruskal(*groups)
    eps2 = (H - k + 1) / (n - k)
    meds = [np.median(g) for g in groups]
    z = [np.abs(g - m) for g, m in zip(groups, meds)]
    F, p_bf = stats.levene(*groups, center="median")
    zall = np.concatenate(z)
    sst = float(((zall - zall.mean()) ** 2).sum())
    ssb = float(sum(zi.size * (zi.mean() - zall.mean()) ** 2 for zi in z))
    eta2 = ssb / sst if sst > 0 else float("nan")
    table = pd.DataFrame({
        "group": [str(k_) for k_ in keys],
        "n": [g.size for g in groups],
        "median": meds,
        "mad": [float(np.median(zi)) for zi in z],
    })
    table["mad_sigma"] = 1.4826 * table["mad"]
    return {"kruskal_wallis": (float(H), float(p_kw), float(eps2)),
            "brown_forsythe": (float(F), float(p_bf), float(eta2)),
            "groups": table}


# ---------------------------------------------------------------- serial


def acf(x, max_lag):
    x = np.asarray(x, dtype=float)
    d = x - x.mean()
    g0 = float(d @ d)
    if g0 == 0:
        raise DegenerateSample("autocorrelation undefined for a constant series")
    n = x.size
    L = 1 << int(math.ceil(math.log2(2 * n)))
    f = np.fft.rfft(d, L)
    full = np.fft.irfft(f * np.conj(f), L)[:max_lag + 1]
    out = full / g0
    out[0] = 1.0
    return out


def pacf_durbin_levinson(rho):
    """Partial autocorrelations from autocorrelations ``rho[0..m]`` (``rho[0] = 1``)."""
    m = len(rho) - 1
    out = np.empty(m + 1)
    out[0] = 1.0
    phi = np.zeros(m + 1)
    v = 1.0
    for k in range(1, m + 1):
        a = (rho[k] - phi[1:k] @ rho[1:k][::-1]) / v
        new = phi.copy()
        new[k] = a
        new[1:k] = phi[1:k] - a * phi[1:k][::-1]
        phi = new
        v *= 1.0 - a * a
        out[k] = a
    return out


def ljung_box(rho, n, max_lag):
    k = np.arange(1, max_lag + 1)
    Q = n * (n + 2) * float(np.sum(rho[1:max_lag + 1] ** 2 / (n - k)))
    return Q, float(stats.chi2.sf(Q, max_lag))


def serial_diagnostics(residuals, max_lag=40):
    """Sample ACF and PACF up to ``max_lag`` plus the Ljung-Box portmanteau test."""
    x = check_sample(residuals, min_n=2)
    if not 1 <= max_lag < x.size:
        raise InputError(f"need 1 <= max_lag < n (max_lag={max_lag}, n={x.size})")
    rho = acf(x, max_lag)
    return {"acf": rho, "pacf": pacf_durbin_levinson(rho), "ljung_box": ljung_box(rho, x.size, max_lag)}
