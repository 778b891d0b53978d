import numpy as np
import pandas as pd
import pytest

from indoorpl.campaign import CAMPAIGN_COLUMNS, ENV_COLUMNS, RECORD_ID
from indoorpl.synthetic import GroundTruth, gaussian_noise, generate_campaign


def make_frame(n=20, device="A", start=0.0, step=3600.0, seed=0, **overrides):
    """Small well-formed campaign frame with random but valid values."""
    rng = np.random.default_rng(seed)
    data = {
        "device_id": device,
        "timestamp": start + step * np.arange(n),
        "distance_m": rng.uniform(2, 50, n),
        "walls_brick": rng.integers(0, 3, n),
        "walls_wood": rng.integers(0, 3, n),
        "co2": rng.uniform(400, 900, n),
        "rh": rng.uniform(30, 60, n),
        "temperature": rng.uniform(18, 26, n),
        "pressure": rng.uniform(1000, 1020, n),
        "pm25": rng.uniform(5, 40, n),
        "snr_db": rng.uniform(-5, 10, n),
        "sf": 7,
        "freq_mhz": 868.0,
        "path_loss_db": rng.uniform(80, 130, n),
    }
    data.update(overrides)
    frame = pd.DataFrame(data)[list(CAMPAIGN_COLUMNS)]
    frame.insert(0, RECORD_ID, np.arange(n))
    return frame


def write_csv(path, frame, columns=None):
    frame = frame.drop(columns=[RECORD_ID], errors="ignore")
    if columns:
        frame = frame.rename(columns=columns)
    frame.to_csv(path, index=False)
    return path


@pytest.fixture
def small_frame():
    return make_frame()


@pytest.fixture(scope="session")
def gaussian_campaign():
    """Synthetic campaign with 2 dB Gaussian noise, 12 devices x 400 rows."""
    truth = GroundTruth(noise=gaussian_noise(2.0))
    return truth, generate_campaign(truth, n_per_device=400, seed=11)


@pytest.fixture(scope="session")
def noiseless_campaign():
    truth = GroundTruth(noise=None)
    return truth, generate_campaign(truth, n_per_device=200, seed=3)


ENV = ENV_COLUMNS
