"""Synthetic campaigns drawn from a known mean model plus mixture shadow fading."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import signal

from .campaign import (
    CAMPAIGN_COLUMNS,
    DEVICE,
    DISTANCE,
    ENV_COLUMNS,
    FREQ,
    PATH_LOSS,
    RECORD_ID,
    SF,
    SNR,
    TIME,
)
from .exceptions import InputError, InvalidTruth
from .features import FeatureSpec, design_values, feature_layout, free_space_offset
from .residuals import GaussianMixture1D

DEFAULT_NOISE = GaussianMixture1D([0.45, 0.45, 0.10], [-1.0, 0.5, 6.0], [2.0, 2.0, 6.0])
# components far enough apart to be recoverable from a few thousand draws
SEPARATED_NOISE = GaussianMixture1D([0.45, 0.45, 0.10], [-3.0, 2.0, 10.0], [1.5, 1.5, 4.0])


def gaussian_noise(sigma):
    return GaussianMixture1D([1.0], [0.0], [float(sigma)])


@dataclass(frozen=True)
class Device:
    device_id: str
    distance_m: float
    walls_brick: int = 0
    walls_wood: int = 0
    sf: int = 7


# (distance m, brick walls, wood walls); ED0 is the only line-of-sight link. Twelve
# devices keep the exponent and wall losses well determined from between-device contrasts.
_LAYOUT = ((4, 0, 0), (6, 0, 1), (8, 1, 0), (11, 0, 2), (14, 2, 0), (18, 1, 1),
           (22, 0, 3), (27, 3, 0), (33, 1, 2), (40, 2, 3), (50, 4, 1), (60, 2, 4))
DEFAULT_DEVICES = tuple(Device(f"ED{i}", float(d), b, w, 7 + i % 4)
                        for i, (d, b, w) in enumerate(_LAYOUT))


@dataclass(frozen=True)
class EnvProcess:
    """Daily sinusoid plus a stationary AR(1) term, one draw per device."""

    mean: float
    amplitude: float
    ar_phi: float
    ar_sd: float
    lower: float = -math.inf

    def stationary_sd(self):
        return self.ar_sd / math.sqrt(1.0 - self.ar_phi ** 2)


DEFAULT_ENV = {
    "co2": EnvProcess(650.0, 200.0, 0.95, 30.0, lower=380.0),
    "rh": EnvProcess(45.0, 10.0, 0.95, 2.5),
    "temperature": EnvProcess(22.0, 4.0, 0.98, 0.6),
    "pressure": EnvProcess(1013.0, 6.0, 0.99, 0.7),
    "pm25": EnvProcess(25.0, 10.0, 0.9, 3.5, lower=0.0),
}

TABLE5_THETA = {"co2": -0.0024, "rh": -0.0874, "temperature": -0.1468, "pressure": -0.0095,
                "pm25": -0.1007}


@dataclass(frozen=True)
class GroundTruth:
    """Generative mean model and noise law.

    Path loss is ``20 log10(f) + intercept + exponent * 10 log10(d / d0)
    + L_brick * brick + L_wood * wood + theta . env + k_snr * snr
    + sum(quadratic[c] * column c of the second-order design) + noise``.
    The free-space term is dropped when ``include_fspl`` is false.
    """

    intercept: float = 2.98
    exponent: float = 3.85
    l_brick: float = 6.87
    l_wood: float = 2.01
    theta: dict = field(default_factory=lambda: dict(TABLE5_THETA))
    k_snr: float = -2.0347
    quadratic: dict = field(default_factory=dict)
    noise: GaussianMixture1D | None = DEFAULT_NOISE
    devices: tuple = DEFAULT_DEVICES
    env: dict = field(default_factory=lambda: dict(DEFAULT_ENV))
    freq_mhz: float = 868.0
    include_fspl: bool = True
    d0_m: float = 1.0
    period_s: float = 600.0
    start_time: float = 1_704_067_200.0
    snr_at_d0: float = 20.0
    snr_per_decade: float = 15.0
    snr_per_wall: float = 1.0
    snr_sd: float = 3.0

    def validate(self):
        if not self.devices:
            raise InvalidTruth("at least one device is required")
        if len({d.device_id for d in self.devices}) != len(self.devices):
            raise InvalidTruth("device ids must be unique")
        for d in self.devices:
            if not d.distance_m > 0:
                raise InvalidTruth(f"device {d.device_id}: distance must be > 0")
            if d.walls_brick < 0 or d.walls_wood < 0:
                raise InvalidTruth(f"device {d.device_id}: wall counts must be >= 0")
            if d.sf not in range(7, 13):
                raise InvalidTruth(f"device {d.device_id}: sf must be in 7..12")
        if set(self.env) != set(ENV_COLUMNS) or set(self.theta) != set(ENV_COLUMNS):
            raise InvalidTruth(f"env processes and theta must cover {ENV_COLUMNS}")
        for name, proc in self.env.items():
            if not abs(proc.ar_phi) < 1:
                raise InvalidTruth(f"{name}: AR coefficient must satisfy |phi| < 1")
            if proc.ar_sd < 0 or proc.amplitude < 0:
                raise InvalidTruth(f"{name}: amplitude and AR sd must be >= 0")
        if self.noise is not None and not isinstance(self.noise, GaussianMixture1D):
            raise InvalidTruth("noise must be a GaussianMixture1D or None")
        if not (self.freq_mhz > 0 and self.d0_m > 0 and self.period_s > 0 and self.snr_sd >= 0):
            raise InvalidTruth("frequency, d0, sampling period must be > 0 and snr_sd >= 0")
        if self.quadratic:
            names, _ = feature_layout(FeatureSpec(kind="poly2"))
            unknown = set(self.quadratic) - set(names[len(names) - 28:])
            if unknown:
                raise InvalidTruth(f"unknown quadratic terms {sorted(unknown)}")
        return self

    def with_noise(self, noise):
        return replace(self, noise=noise)

    def mean_path_loss(self, frame):
        """Noise-free path loss for the rows of ``frame``."""
        d = frame[DISTANCE].to_numpy(dtype=float)
        out = (self.intercept + self.exponent * 10.0 * np.log10(d / self.d0_m)
               + self.l_brick * frame["walls_brick"].to_numpy(dtype=float)
               + self.l_wood * frame["walls_wood"].to_numpy(dtype=float)
               + self.k_snr * frame[SNR].to_numpy(dtype=float))
        for c in ENV_COLUMNS:
            out = out + self.theta[c] * frame[c].to_numpy(dtype=float)
        if self.include_fspl:
            out = out + free_space_offset(frame[FREQ].to_numpy(dtype=float))
        if self.quadratic:
            spec = FeatureSpec(kind="poly2", d0_m=self.d0_m)
            names, _ = feature_layout(spec)
            vals = design_values(frame, spec)
            for name, coef in self.quadratic.items():
                out = out + coef * vals[:, names.index(name)]
        return out

    def natural_coefficients(self):
        """Coefficients in the order of the linear design columns."""
        return {"z_d": self.exponent, "walls_brick": self.l_brick, "walls_wood": self.l_wood,
                **{c: self.theta[c] for c in ENV_COLUMNS}, SNR: self.k_snr}


def _env_path(proc, n, t, rng):
    phase = rng.uniform(0.0, 2.0 * math.pi)
    daily = proc.amplitude * np.sin(2.0 * math.pi * t / 86_400.0 + phase)
    eps = rng.standard_normal(n) * proc.ar_sd
    start = rng.standard_normal() * proc.stationary_sd()
    ar, _ = signal.lfilter([1.0], [1.0, -proc.ar_phi], eps, zi=[proc.ar_phi * start])
    return np.maximum(proc.mean + daily + ar, proc.lower)


def generate_campaign(truth=None, n_per_device=1000, seed=0, return_components=False):
    """Draw a campaign frame from ``truth``; identical for a given seed.

    With ``return_components`` the mean path loss and the noise draw are
    returned too; the response equals their sum exactly.
    """
    truth = (truth or GroundTruth()).validate()
    if n_per_device < 1:
        raise InputError("n_per_device must be >= 1")
    env_ss, snr_ss, noise_ss = np.random.SeedSequence(seed).spawn(3)
    env_rng = np.random.default_rng(env_ss)
    snr_rng = np.random.default_rng(snr_ss)
    noise_rng = np.random.default_rng(noise_ss)
    t = truth.start_time + truth.period_s * np.arange(n_per_device)
    parts = []
    for dev in truth.devices:
        block = {DEVICE: dev.device_id, TIME: t, DISTANCE: dev.distance_m,
                 "walls_brick": dev.walls_brick, "walls_wood": dev.walls_wood}
        for c in ENV_COLUMNS:
            block[c] = _env_path(truth.env[c], n_per_device, t, env_rng)
        snr_mean = (truth.snr_at_d0 - truth.snr_per_decade * math.log10(dev.distance_m / truth.d0_m)
                    - truth.snr_per_wall * (dev.walls_brick + dev.walls_wood))
        block[SNR] = snr_mean + truth.snr_sd * snr_rng.standard_normal(n_per_device)
        block[SF] = dev.sf
        block[FREQ] = truth.freq_mhz
        parts.append(pd.DataFrame(block))
    frame = pd.concat(parts, ignore_index=True)
    mean = truth.mean_path_loss(frame)
    if truth.noise is None:
        noise = np.zeros(len(frame))
    else:
        noise = truth.noise.sample(len(frame), noise_rng)
    frame[PATH_LOSS] = mean + noise
    frame.insert(0, RECORD_ID, np.arange(len(frame)))
    frame = frame[[RECORD_ID, *CAMPAIGN_COLUMNS]]
    frame[SF] = frame[SF].astype(int)
    if return_components:
        return frame, mean, noise
    return frame
