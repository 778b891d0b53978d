"""Design matrices for the multi-wall mean and its second-order extension."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .campaign import DISTANCE, ENV_COLUMNS, FREQ, PATH_LOSS, SNR, WALL_COLUMNS
from .exceptions import InconsistentFrequency, InputError, NonPositiveDistance

KINDS = ("linear", "poly2")
FREQ_HANDLING = ("absorb_into_intercept", "explicit_offset")
BLOCKS = ("structure", "walls", "environment", "snr", "interaction")

Z_D = "z_d"
_BLOCK_OF = {Z_D: "structure", SNR: "snr", **{c: "walls" for c in WALL_COLUMNS},
             **{c: "environment" for c in ENV_COLUMNS}}
_SHORT = {SNR: "snr"}


def linearize_distance(d, d0=1.0):
    """``10 * log10(d / d0)``, elementwise."""
    d = np.asarray(d, dtype=float)
    if d0 <= 0 or np.any(~(d > 0)):
        raise NonPositiveDistance("distances and the reference distance must be > 0")
    out = 10.0 * np.log10(d / d0)
    return float(out) if out.ndim == 0 else out


def free_space_offset(freq_mhz):
    return 20.0 * np.log10(np.asarray(freq_mhz, dtype=float))


@dataclass(frozen=True)
class FeatureSpec:
    kind: str = "linear"
    d0_m: float = 1.0
    include_snr: bool = True
    freq_handling: str = "absorb_into_intercept"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.freq_handling not in FREQ_HANDLING:
            raise InputError(f"freq_handling must be one of {FREQ_HANDLING}")
        if not self.d0_m > 0:
            raise NonPositiveDistance(f"d0_m must be > 0, got {self.d0_m}")

    @property
    def n_columns(self):
        q = len(ENV_COLUMNS) + (2 if self.include_snr else 1)
        if self.kind == "linear":
            return q + len(WALL_COLUMNS)
        return len(WALL_COLUMNS) + q * (q + 3) // 2


@dataclass
class DesignMatrix:
    columns: list
    blocks: list
    values: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.response = np.asarray(self.response, dtype=float)
        if self.values.shape != (len(self.response), len(self.columns)):
            raise InputError("values shape does not match response/columns")
        if not (np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.response))):
            raise InputError("design contains NaN or infinite entries")

    @property
    def shape(self):
        return self.values.shape

    def take(self, rows):
        return DesignMatrix(list(self.columns), list(self.blocks), self.values[rows],
                            self.response[rows])

    def select(self, names):
        idx = [self.columns.index(n) for n in names]
        return DesignMatrix(list(names), [self.blocks[i] for i in idx], self.values[:, idx],
                            self.response)

    def to_frame(self):
        df = pd.DataFrame(self.values, columns=self.columns)
        df["response"] = self.response
        return df

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.10g")


def _drivers(include_snr):
    return [Z_D, *ENV_COLUMNS] + ([SNR] if include_snr else [])


def feature_layout(spec):
    """Column names and block tags, in the canonical order used everywhere.

    The linear columns come first, so a linear design is always a prefix of
    the matching second-order design.
    """
    linear = [Z_D, *WALL_COLUMNS, *ENV_COLUMNS] + ([SNR] if spec.include_snr else [])
    names = list(linear)
    blocks = [_BLOCK_OF[c] for c in linear]
    if spec.kind == "poly2":
        for a, b in combinations_with_replacement(_drivers(spec.include_snr), 2):
            if a == b:
                names.append(f"{_SHORT.get(a, a)}^2")
                blocks.append(_BLOCK_OF[a])
            else:
                names.append(f"{_SHORT.get(a, a)}*{_SHORT.get(b, b)}")
                blocks.append("interaction")
    return names, blocks


def _linear_block(frame, spec):
    cols = {Z_D: linearize_distance(frame[DISTANCE].to_numpy(dtype=float), spec.d0_m)}
    for c in (*WALL_COLUMNS, *ENV_COLUMNS):
        cols[c] = frame[c].to_numpy(dtype=float)
    if spec.include_snr:
        cols[SNR] = frame[SNR].to_numpy(dtype=float)
    return cols


def design_values(frame, spec):
    cols = _linear_block(frame, spec)
    parts = [cols[c] for c in (Z_D, *WALL_COLUMNS, *ENV_COLUMNS)]
    if spec.include_snr:
        parts.append(cols[SNR])
    if spec.kind == "poly2":
        for a, b in combinations_with_replacement(_drivers(spec.include_snr), 2):
            parts.append(cols[a] * cols[b])
    return np.column_stack(parts) if parts else np.empty((len(frame), 0))


def response_values(frame, spec):
    y = frame[PATH_LOSS].to_numpy(dtype=float)
    if spec.freq_handling == "explicit_offset":
        return y - free_space_offset(frame[FREQ].to_numpy(dtype=float))
    return y


def check_frequency(frame, spec):
    if spec.freq_handling == "absorb_into_intercept":
        f = frame[FREQ].to_numpy(dtype=float)
        if f.size and np.ptp(f) > 0:
            raise InconsistentFrequency(
                "mixed carrier frequencies cannot be absorbed into the intercept; "
                "use freq_handling='explicit_offset'")


def build_design(frame, spec=None):
    """Raw (unstandardized) design matrix and response for a campaign frame."""
    spec = spec or FeatureSpec()
    check_frequency(frame, spec)
    names, blocks = feature_layout(spec)
    return DesignMatrix(names, blocks, design_values(frame, spec), response_values(frame, spec))


class PathLossFeatures(TransformerMixin, BaseEstimator):
    """Map campaign records to the linear or second-order design.

    Parameters
    ----------
    kind : {"linear", "poly2"}
    d0_m : float
        Reference distance in metres.
    include_snr : bool
    freq_handling : {"absorb_into_intercept", "explicit_offset"}
    """

    def __init__(self, kind="linear", d0_m=1.0, include_snr=True,
                 freq_handling="absorb_into_intercept"):
        self.kind = kind
        self.d0_m = d0_m
        self.include_snr = include_snr
        self.freq_handling = freq_handling

    @property
    def spec(self):
        return FeatureSpec(self.kind, self.d0_m, self.include_snr, self.freq_handling)

    def fit(self, X, y=None):
        spec = self.spec
        check_frequency(X, spec)
        self.feature_names_out_, self.blocks_ = feature_layout(spec)
        self.n_features_out_ = len(self.feature_names_out_)
        return self

    def transform(self, X):
        check_is_fitted(self, "feature_names_out_")
        return design_values(X, self.spec)

    def response(self, X):
        return response_values(X, self.spec)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "feature_names_out_")
        return np.asarray(self.feature_names_out_, dtype=object)


class Standardizer(TransformerMixin, BaseEstimator):
    """Per-column centring and scaling with the population (1/n) standard deviation.

    Columns that are constant on the fitting rows are recorded in
    ``constant_`` and passed through unchanged.
    """

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] == 0:
            raise InputError("Standardizer needs a non-empty 2-D array")
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        # relative test: products of large env values are never exactly constant in float
        const = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        self.constant_ = const
        self.mean_ = np.where(const, 0.0, mean)
        self.scale_ = np.where(const, 1.0, std)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=float)
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return np.asarray(X, dtype=float) * self.scale_ + self.mean_

    def constant_columns(self, names):
        return [n for n, c in zip(names, self.constant_) if c]


def fit_standardizer(design, rows=None):
    X = design.values if rows is None else design.values[rows]
    if X.shape[0] == 0:
        raise InputError("cannot fit a standardizer on zero rows")
    return Standardizer().fit(X)


def apply_standardizer(std, design):
    return DesignMatrix(list(design.columns), list(design.blocks), std.transform(design.values),
                        design.response)
