import filecmp
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from indoorpl.campaign import CAMPAIGN_COLUMNS, RECORD_ID, parse_campaign_csv, write_campaign_csv
from indoorpl.exceptions import InputError, InvalidTruth
from indoorpl.regression import make_model
from indoorpl.residuals import GaussianMixture1D
from indoorpl.synthetic import (
    DEFAULT_DEVICES,
    DEFAULT_ENV,
    DEFAULT_NOISE,
    Device,
    EnvProcess,
    GroundTruth,
    gaussian_noise,
    generate_campaign,
)


def test_default_noise_is_documented_mixture():
    np.testing.assert_allclose(DEFAULT_NOISE.weights, [0.45, 0.45, 0.10])
    np.testing.assert_allclose(DEFAULT_NOISE.means, [-1.0, 0.5, 6.0])
    np.testing.assert_allclose(DEFAULT_NOISE.sds, [2.0, 2.0, 6.0])
    assert GroundTruth().noise is DEFAULT_NOISE


def test_same_seed_byte_identical(tmp_path):
    a = generate_campaign(n_per_device=50, seed=4)
    b = generate_campaign(n_per_device=50, seed=4)
    write_campaign_csv(a, tmp_path / "a.csv")
    write_campaign_csv(b, tmp_path / "b.csv")
    assert filecmp.cmp(tmp_path / "a.csv", tmp_path / "b.csv", shallow=False)
    c = generate_campaign(n_per_device=50, seed=5)
    assert not np.array_equal(a.path_loss_db, c.path_loss_db)


def test_layout_and_regular_grid():
    truth = GroundTruth()
    frame = generate_campaign(truth, n_per_device=30, seed=0)
    assert list(frame.columns) == [RECORD_ID, *CAMPAIGN_COLUMNS]
    assert len(frame) == 30 * len(truth.devices)
    for dev, g in frame.groupby("device_id"):
        np.testing.assert_allclose(np.diff(g.timestamp), truth.period_s)
        assert g.distance_m.nunique() == 1
    assert (frame.co2 >= DEFAULT_ENV["co2"].lower).all()
    assert (frame.pm25 >= 0).all()
    assert set(frame.sf) <= set(range(7, 13))
    assert (frame[frame.device_id == "ED0"][["walls_brick", "walls_wood"]] == 0).all().all()


def test_bookkeeping_identity():
    frame, mean, noise = generate_campaign(n_per_device=100, seed=1, return_components=True)
    np.testing.assert_array_equal(frame.path_loss_db.to_numpy(), mean + noise)
    np.testing.assert_allclose(frame.path_loss_db.to_numpy() - mean, noise, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(mean, GroundTruth().mean_path_loss(frame))


def test_noise_converges_to_configured_mixture():
    _, _, noise = generate_campaign(n_per_device=8334, seed=2, return_components=True)
    assert noise.size >= 100_000
    assert stats.kstest(noise, DEFAULT_NOISE.cdf).statistic < 0.01


def test_snr_decreases_with_distance():
    frame = generate_campaign(n_per_device=200, seed=3)
    per_dev = frame.groupby("device_id")[["distance_m", "snr_db"]].mean()
    assert stats.spearmanr(per_dev.distance_m, per_dev.snr_db).statistic < -0.8
    flat = replace(GroundTruth(), snr_per_decade=0.0, snr_per_wall=0.0, snr_sd=0.0)
    f2 = generate_campaign(flat, n_per_device=10, seed=3)
    assert f2.snr_db.nunique() == 1


def test_env_process_stationary_moments():
    proc = EnvProcess(0.0, 0.0, 0.9, 1.0)
    truth = GroundTruth(env={**DEFAULT_ENV, "rh": proc}, devices=(Device("A", 5.0),), noise=None)
    frame = generate_campaign(truth, n_per_device=50_000, seed=6)
    assert frame.rh.std() == pytest.approx(proc.stationary_sd(), rel=0.05)
    assert np.corrcoef(frame.rh[1:], frame.rh[:-1])[0, 1] == pytest.approx(0.9, abs=0.02)


def test_noiseless_linear_truth_recovered_exactly(noiseless_campaign):
    truth, frame = noiseless_campaign
    model = make_model("linear").fit(frame)
    _, coef = model.natural_coefficients()
    for name, value in truth.natural_coefficients().items():
        key = "snr" if name == "snr_db" else name
        assert coef.get(key, coef.get(name)) == pytest.approx(value, abs=1e-8)


def test_quadratic_truth_fitted_by_poly2_model():
    truth = GroundTruth(noise=None, quadratic={"z_d*co2": 0.001, "snr^2": -0.05, "rh*pm25": 0.01})
    frame = generate_campaign(truth, n_per_device=150, seed=7)
    poly = make_model("poly2").fit(frame)
    np.testing.assert_allclose(poly.predict(frame), frame.path_loss_db, atol=1e-6)
    lin = make_model("linear").fit(frame)
    assert np.max(np.abs(lin.predict(frame) - frame.path_loss_db)) > 0.1


def test_gaussian_truth_coefficients_close(gaussian_campaign):
    truth, frame = gaussian_campaign
    _, coef = make_model("linear").fit(frame).natural_coefficients()
    assert coef["z_d"] == pytest.approx(truth.exponent, abs=0.15)
    assert coef["walls_brick"] == pytest.approx(truth.l_brick, abs=1.0)


def test_csv_round_trip(tmp_path):
    frame = generate_campaign(n_per_device=20, seed=8)
    write_campaign_csv(frame, tmp_path / "c.csv", comment="seed=8")
    back = parse_campaign_csv(tmp_path / "c.csv").frame
    assert list(back.device_id) == list(frame.device_id)
    for c in CAMPAIGN_COLUMNS[1:]:
        np.testing.assert_allclose(back[c].astype(float), frame[c].astype(float), rtol=1e-9)


@pytest.mark.parametrize("change", [
    {"devices": ()},
    {"devices": (Device("A", 1.0), Device("A", 2.0))},
    {"devices": (Device("A", 0.0),)},
    {"devices": (Device("A", 1.0, walls_brick=-1),)},
    {"devices": (Device("A", 1.0, sf=13),)},
    {"env": {**DEFAULT_ENV, "co2": EnvProcess(650.0, 1.0, 1.0, 1.0)}},
    {"env": {k: v for k, v in DEFAULT_ENV.items() if k != "pm25"}},
    {"quadratic": {"not_a_term": 1.0}},
    {"noise": "gaussian"},
    {"period_s": 0.0},
])
def test_invalid_truth(change):
    with pytest.raises(InvalidTruth):
        generate_campaign(replace(GroundTruth(), **change), n_per_device=5)


def test_generate_input_errors_and_noise_helpers():
    with pytest.raises(InputError):
        generate_campaign(n_per_device=0)
    g = gaussian_noise(2.0)
    assert isinstance(g, GaussianMixture1D) and g.K == 1 and g.sds[0] == 2.0
    assert len(DEFAULT_DEVICES) == 12
    assert sum(d.walls_brick + d.walls_wood == 0 for d in DEFAULT_DEVICES) == 1
    assert math.isclose(GroundTruth().with_noise(None).exponent, 3.85)
