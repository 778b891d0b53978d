import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_frame, write_csv
from indoorpl.campaign import (
    CampaignRecord,
    CleaningConfig,
    DropLedger,
    chronological_split,
    clean,
    deduplicate,
    frame_to_records,
    isolation_forest_scores,
    parse_campaign_csv,
    read_campaign_frame,
    records_to_frame,
    write_campaign_csv,
)
from indoorpl.exceptions import (
    AllRowsDropped,
    DeviceTooSmall,
    EmptyFile,
    InputError,
    MissingColumn,
)


# ---------------------------------------------------------------- parsing


def test_parse_three_rows(tmp_path):
    p = write_csv(tmp_path / "c.csv", make_frame(3))
    res = parse_campaign_csv(p)
    assert len(res.frame) == 3
    assert res.errors == []
    assert list(res.frame["record_id"]) == [0, 1, 2]


def test_negative_distance_is_a_row_error(tmp_path):
    f = make_frame(4)
    f.loc[2, "distance_m"] = -4
    p = write_csv(tmp_path / "c.csv", f)
    res = parse_campaign_csv(p)
    assert len(res.frame) == 3
    assert len(res.errors) == 1
    assert res.errors[0].line == 4  # header is line 1, row index 2 is line 4
    assert "distance_m" in res.errors[0].reason


def test_duplicated_header_is_ambiguous(tmp_path):
    p = tmp_path / "dup.csv"
    f = make_frame(2).drop(columns=["record_id"])
    text = f.to_csv(index=False).splitlines()
    text[0] = text[0].replace("rh", "co2")
    p.write_text("\n".join(text) + "\n")
    with pytest.raises(MissingColumn) as err:
        parse_campaign_csv(p)
    assert err.value.name == "co2"


def test_missing_column_names_it(tmp_path):
    p = write_csv(tmp_path / "c.csv", make_frame(3).drop(columns=["snr_db"]))
    with pytest.raises(MissingColumn, match="snr_db"):
        parse_campaign_csv(p)


def test_schema_mapping_and_iso_timestamps(tmp_path):
    f = make_frame(3)
    f["timestamp"] = ["2024-01-01T00:00:00Z", "2024-01-01T01:00:00Z", "2024-01-01T02:00:00Z"]
    p = write_csv(tmp_path / "c.csv", f, columns={"distance_m": "dist", "snr_db": "SNR"})
    res = parse_campaign_csv(p, schema={"distance_m": "dist", "snr_db": "SNR"})
    assert np.allclose(res.frame["timestamp"], 1704067200 + 3600 * np.arange(3))


def test_empty_files(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(EmptyFile):
        parse_campaign_csv(p)
    p.write_text(",".join(make_frame(1).columns[1:]) + "\n")
    with pytest.raises(EmptyFile):
        parse_campaign_csv(p)


def test_comment_lines_and_round_trip(tmp_path):
    f = make_frame(5)
    p = tmp_path / "c.csv"
    write_campaign_csv(f, p, comment="config_hash=abc; seed=1")
    assert p.read_text().startswith("# config_hash=abc")
    res = parse_campaign_csv(p)
    assert res.errors == []
    back = read_campaign_frame(p)
    pd.testing.assert_frame_equal(back[f.columns], f, check_dtype=False, atol=1e-8)


def test_bad_rows_report_physical_lines(tmp_path):
    f = make_frame(3)
    p = tmp_path / "c.csv"
    write_campaign_csv(f, p, comment="provenance")
    lines = p.read_text().splitlines()
    lines[3] = lines[3].replace(",7,", ",13,")  # sf out of range on physical line 4
    p.write_text("\n".join(lines) + "\n")
    res = parse_campaign_csv(p)
    assert [e.line for e in res.errors] == [4]


def test_records_round_trip():
    f = make_frame(4)
    recs = frame_to_records(f)
    assert isinstance(recs[0], CampaignRecord)
    back = records_to_frame(recs)
    pd.testing.assert_frame_equal(back, f, check_dtype=False)


def test_record_validation():
    with pytest.raises(InputError):
        CampaignRecord("a", 0.0, 0.0, {}, (1, 2, 3, 4, 5), 0.0, 7, 868.0, 100.0)
    with pytest.raises(InputError):
        CampaignRecord("a", 0.0, 1.0, {"glass": 1}, (1, 2, 3, 4, 5), 0.0, 7, 868.0, 100.0)


# ---------------------------------------------------------------- cleaning


def test_identical_rows_deduplicated():
    f = pd.concat([make_frame(1)] * 10, ignore_index=True)
    f["record_id"] = range(10)
    kept, n_dup = deduplicate(f)
    assert (len(kept), n_dup) == (1, 9)
    # the forest stage still flags ceil(0.01 * 1) = 1 row, so nothing survives clean()
    with pytest.raises(AllRowsDropped, match="'duplicate': 9"):
        clean(f, CleaningConfig(contamination=0.01))


def test_dedup_counts_without_forest_effect():
    base = make_frame(50)
    f = pd.concat([base, base.iloc[:10]], ignore_index=True)
    f["record_id"] = range(len(f))
    kept, led = clean(f, CleaningConfig(contamination=0.01))
    assert led.duplicate == 10
    assert led.isolation_forest == 1
    assert len(kept) == 49


def test_sf_filter():
    f = make_frame(100)
    f.loc[:19, "sf"] = 12
    kept, led = clean(f, CleaningConfig(contamination=0.01))
    assert led.sf_filter == 20
    assert set(kept["sf"]) == {7}
    assert led.isolation_forest == 1  # ceil(0.01 * 80)


def test_planted_outliers_are_flagged():
    rng = np.random.default_rng(0)
    n = 1000
    f = make_frame(n + 10, seed=1)
    cols = ["distance_m", "co2", "rh", "temperature", "pressure", "pm25", "snr_db", "path_loss_db"]
    for c in cols:
        f[c] = 50 + rng.normal(0, 1, n + 10)
    f[["walls_brick", "walls_wood"]] = 0
    f.loc[n:, cols] = 50 + 15 * rng.choice([-1, 1], size=(10, len(cols)))
    kept, led = clean(f, CleaningConfig(contamination=0.01, seed=4))
    assert led.isolation_forest == math.ceil(0.01 * (n + 10)) == 11
    assert not set(range(n, n + 10)) & set(kept["record_id"])
    # Mahalanobis oracle ranks the same rows at the top
    X = f[cols].to_numpy()
    d = X - X[:n].mean(axis=0)
    md = np.einsum("ij,jk,ik->i", d, np.linalg.inv(np.cov(X[:n].T)), d)
    assert set(np.argsort(-md)[:10]) == set(range(n, n + 10))


def test_all_rows_dropped():
    f = make_frame(4)
    f.loc[:2, "sf"] = 12
    with pytest.raises(AllRowsDropped):
        clean(f, CleaningConfig(contamination=0.49))


def test_clean_rejects_empty_and_bad_config():
    with pytest.raises(InputError):
        clean(make_frame(3).iloc[:0])
    with pytest.raises(InputError):
        CleaningConfig(contamination=0.6)
    with pytest.raises(InputError):
        CleaningConfig(sf_keep={13})


def test_ledger_json():
    led = DropLedger(10, duplicate=1, sf_filter=2, isolation_forest=1)
    assert led.n_kept == 6
    assert '"n_kept": 6' in led.to_json()


@settings(max_examples=15, deadline=None)
@given(n=st.integers(5, 120), n_dup=st.integers(0, 20), n_bad_sf=st.integers(0, 4),
       contamination=st.floats(0.001, 0.3))
def test_ledger_partitions_input(n, n_dup, n_bad_sf, contamination):
    base = make_frame(n, seed=n)
    base.loc[: n_bad_sf - 1, "sf"] = 11
    dup = base.sample(min(n_dup, n), random_state=0)
    f = pd.concat([base, dup], ignore_index=True)
    f["record_id"] = range(len(f))
    try:
        kept, led = clean(f, CleaningConfig(contamination=contamination))
    except AllRowsDropped:
        return
    assert len(kept) + led.n_dropped == len(f)
    after_filters = len(f) - led.duplicate - led.sf_filter
    assert led.isolation_forest == math.ceil(round(contamination * after_filters, 9))
    # dedup is idempotent
    assert deduplicate(kept)[1] == 0
    assert list(kept["record_id"]) == sorted(kept["record_id"])


def test_isolation_forest_scores():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(500, 3))
    X[17] = 100.0
    s = isolation_forest_scores(X, seed=1)
    assert np.all((s > 0) & (s < 1))
    assert int(np.argmax(s)) == 17 == int(np.argmax(np.linalg.norm(X - X.mean(0), axis=1)))
    assert np.array_equal(s, isolation_forest_scores(X, seed=1))
    same = isolation_forest_scores(np.ones((50, 4)), subsample=32, seed=0)
    assert np.all(same == same[0])


# ---------------------------------------------------------------- split


def test_split_one_device():
    f = make_frame(10)
    tr, te = chronological_split(f, 0.2)
    assert list(tr["record_id"]) == list(range(8))
    assert list(te["record_id"]) == [8, 9]


def test_split_is_per_device():
    a = make_frame(10, device="A", start=0, step=10)
    b = make_frame(10, device="B", start=5, step=10)
    f = pd.concat([a, b], ignore_index=True).sort_values("timestamp", kind="stable")
    f["record_id"] = range(20)
    tr, te = chronological_split(f, 0.2)
    for dev in "AB":
        assert (tr["device_id"] == dev).sum() == 8
        assert (te["device_id"] == dev).sum() == 2
        assert tr.loc[tr.device_id == dev, "timestamp"].max() < te.loc[te.device_id == dev, "timestamp"].min()


def test_split_ceiling_to_train():
    tr, te = chronological_split(make_frame(3), 0.5)
    assert (len(tr), len(te)) == (2, 1)


def test_split_errors():
    with pytest.raises(DeviceTooSmall):
        chronological_split(make_frame(1), 0.2)
    with pytest.raises(InputError):
        chronological_split(make_frame(5), 1.0)


@settings(max_examples=30, deadline=None)
@given(sizes=st.lists(st.integers(2, 30), min_size=1, max_size=4),
       frac=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
def test_split_properties(sizes, frac, seed):
    rng = np.random.default_rng(seed)
    parts = [make_frame(n, device=f"D{i}", start=float(rng.integers(0, 1000)))
             for i, n in enumerate(sizes)]
    f = pd.concat(parts, ignore_index=True).sample(frac=1, random_state=seed)
    f["record_id"] = range(len(f))
    tr, te = chronological_split(f, frac)
    assert len(tr) + len(te) == len(f)
    for dev, n in zip((f"D{i}" for i in range(len(sizes))), sizes):
        t_tr = tr.loc[tr.device_id == dev, "timestamp"]
        t_te = te.loc[te.device_id == dev, "timestamp"]
        assert t_tr.max() < t_te.min()
        assert len(t_tr) == min(max(math.ceil(round((1 - frac) * n, 9)), 1), n - 1)
