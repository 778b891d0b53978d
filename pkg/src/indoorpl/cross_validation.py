"""Device-aware, time-blocked cross-validation with embargo gaps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import clone

from .campaign import DEVICE, PATH_LOSS, RECORD_ID, TIME
from .exceptions import DeviceSpanTooShort, FoldError, InputError, ZeroVariance
from .regression import LinearPathLossRegressor, select_hyperparameters

HOUR = 3600.0


def metrics(y, yhat):
    """RMSE (dB) and coefficient of determination."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise InputError("y and yhat must have equal length")
    if y.size < 2:
        raise InputError("need at least two observations")
    r = y - yhat
    sse = float(r @ r)
    dev = y - y.mean()
    sst = float(dev @ dev)
    if sst == 0.0:
        raise ZeroVariance("R^2 undefined for a constant response")
    return {"rmse": float(np.sqrt(sse / y.size)), "r2": 1.0 - sse / sst}


@dataclass
class FoldPlan:
    """Fold assignment for every row of the frame it was built from.

    ``fold[i]`` is the validation fold of row ``i`` (positional); ``train[j]``
    is the boolean training mask of fold ``j`` after the embargo.
    """

    k: int
    gap_hours: float
    fold: np.ndarray
    train: list
    edges: dict = field(default_factory=dict)

    def split(self):
        for j in range(self.k):
            yield np.flatnonzero(self.train[j]), np.flatnonzero(self.fold == j)

    def __iter__(self):
        return self.split()

    def __len__(self):
        return self.k


def make_time_blocked_folds(frame, k=5, gap_hours=24.0):
    """Cut each device timeline into ``k`` equal-duration blocks.

    Block ``j`` of every device forms validation fold ``j``. Training rows for
    fold ``j`` exclude, per device, anything within ``gap_hours`` (inclusive)
    of that device's block-``j`` interval. Every device must keep at least one
    training row in every fold.
    """
    if k < 2:
        raise InputError(f"k must be >= 2, got {k}")
    if gap_hours < 0:
        raise InputError("gap_hours must be >= 0")
    gap = gap_hours * HOUR
    times = frame[TIME].to_numpy(dtype=float)
    fold = np.full(len(frame), -1, dtype=int)
    train = [np.ones(len(frame), dtype=bool) for _ in range(k)]
    edges = {}
    for dev, idx in frame.groupby(DEVICE, sort=True).indices.items():
        t = times[idx]
        t0, t1 = float(t.min()), float(t.max())
        span = t1 - t0
        if len(idx) < k:
            raise DeviceSpanTooShort(dev, f"{len(idx)} records < k={k}")
        if not span > 0:
            raise DeviceSpanTooShort(dev, "all records share one timestamp")
        e = t0 + span * np.arange(k + 1) / k
        edges[dev] = e
        width = span / k
        block = np.minimum(np.floor((t - t0) / width).astype(int), k - 1)
        fold[idx] = block
        for j in range(k):
            near = (t >= e[j] - gap) & (t <= e[j + 1] + gap)
            if near.all():
                raise DeviceSpanTooShort(
                    dev, f"span {span / HOUR:.3g} h leaves no training rows for fold {j} "
                         f"with a {gap_hours:g} h embargo")
            train[j][idx[near]] = False
    return FoldPlan(k=k, gap_hours=gap_hours, fold=fold, train=train, edges=edges)


class TimeBlockedSplit:
    """Splitter wrapper with the scikit-learn ``split`` / ``get_n_splits`` protocol.

    ``X`` passed to :meth:`split` must be a campaign frame (device and
    timestamp columns are read from it).
    """

    def __init__(self, n_splits=5, gap_hours=24.0):
        self.n_splits = n_splits
        self.gap_hours = gap_hours

    def split(self, X, y=None, groups=None):
        yield from make_time_blocked_folds(X, self.n_splits, self.gap_hours).split()

    def get_n_splits(self, X=None, y=None, groups=None):
        return self.n_splits


@dataclass
class CVResult:
    folds: pd.DataFrame
    residuals: pd.DataFrame
    models: list

    def summary(self):
        """Mean and sample standard deviation of the per-fold metrics."""
        out = {}
        for col in ("train_rmse", "train_r2", "val_rmse", "val_r2"):
            v = self.folds[col].to_numpy()
            out[col] = {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0}
        oof = self.residuals
        out["oof"] = metrics(oof["y_true"], oof["y_pred"])
        return out

    @property
    def oof_residuals(self):
        return self.residuals["residual"].to_numpy()


def _fold_design(model, train_frame):
    feats = clone(model.features)
    feats.fit(train_frame)
    return feats.transform(train_frame), feats.response(train_frame)


def run_cv(frame, model, plan=None, select=None):
    """Fit ``model`` per fold and collect out-of-fold residuals.

    Parameters
    ----------
    frame : DataFrame
        Campaign rows (the training portion of the hold-out split).
    model : PathLossModel
        Unfitted template, cloned per fold.
    plan : FoldPlan, optional
        Defaults to five blocks with a 24 h embargo.
    select : dict, optional
        ``{"lambda_grid": [...], "alpha_grid": [...]}``; enables nested
        selection on ``k - 1`` time-blocked sub-folds of each fold's training rows.

    Returns
    -------
    CVResult
        Residuals ``true - predicted`` in the row order of ``frame``.
    """
    plan = plan or make_time_blocked_folds(frame)
    if len(plan.fold) != len(frame):
        raise InputError("fold plan was built for a different frame")
    y_all = frame[PATH_LOSS].to_numpy(dtype=float)
    pred = np.full(len(frame), np.nan)
    rows, models = [], []
    for j, (tr, va) in enumerate(plan.split()):
        try:
            train_frame = frame.iloc[tr]
            fold_model = clone(model)
            lam = alpha = None
            if select and isinstance(model.regressor, LinearPathLossRegressor) \
                    and model.regressor.penalty != "none":
                inner = make_time_blocked_folds(train_frame, plan.k - 1, plan.gap_hours)
                Xr, yr = _fold_design(model, train_frame)
                spec, _ = select_hyperparameters(
                    Xr, yr, list(inner.split()), model.regressor.penalty,
                    select.get("lambda_grid", [model.regressor.lam]),
                    select.get("alpha_grid", [model.regressor.alpha]),
                    tol=model.regressor.tol, max_iter=model.regressor.max_iter)
                fold_model.set_params(regressor__lam=spec.lam, regressor__alpha=spec.alpha)
                lam, alpha = spec.lam, spec.alpha
            fold_model.fit(train_frame)
            p_va = fold_model.predict(frame.iloc[va])
            p_tr = fold_model.predict(train_frame)
        except FoldError:
            raise
        except Exception as exc:  # annotate with the fold id
            raise FoldError(j, exc) from exc
        pred[va] = p_va
        m_tr = metrics(y_all[tr], p_tr)
        m_va = metrics(y_all[va], p_va)
        rows.append({"fold": j, "n_train": len(tr), "n_val": len(va),
                     "train_rmse": m_tr["rmse"], "train_r2": m_tr["r2"],
                     "val_rmse": m_va["rmse"], "val_r2": m_va["r2"],
                     "lam": lam, "alpha": alpha})
        models.append(fold_model)
    resid = pd.DataFrame({
        RECORD_ID: frame[RECORD_ID].to_numpy() if RECORD_ID in frame else np.arange(len(frame)),
        DEVICE: frame[DEVICE].to_numpy(),
        TIME: frame[TIME].to_numpy(dtype=float),
        "fold": plan.fold,
        "y_true": y_all,
        "y_pred": pred,
    })
    resid["residual"] = resid["y_true"] - resid["y_pred"]
    return CVResult(pd.DataFrame(rows), resid, models)
