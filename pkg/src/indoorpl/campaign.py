"""Campaign ingestion, cleaning and chronological hold-out.

Records travel through the package as a :class:`pandas.DataFrame` with the
canonical columns listed in :data:`CAMPAIGN_COLUMNS`; :class:`CampaignRecord`
is the row-level view used for small hand-built inputs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.ensemble import IsolationForest

from .exceptions import (
    AllRowsDropped,
    DeviceTooSmall,
    EmptyFile,
    InputError,
    MissingColumn,
)

DEVICE = "device_id"
TIME = "timestamp"
DISTANCE = "distance_m"
WALL_COLUMNS = ("walls_brick", "walls_wood")
ENV_COLUMNS = ("co2", "rh", "temperature", "pressure", "pm25")
SNR = "snr_db"
SF = "sf"
FREQ = "freq_mhz"
PATH_LOSS = "path_loss_db"
RECORD_ID = "record_id"

CAMPAIGN_COLUMNS = (DEVICE, TIME, DISTANCE, *WALL_COLUMNS, *ENV_COLUMNS, SNR, SF, FREQ,
                    PATH_LOSS)
NUMERIC_COLUMNS = CAMPAIGN_COLUMNS[2:]
# variables of the multi-wall mean model, screened jointly for anomalies
SCREEN_COLUMNS = (DISTANCE, *WALL_COLUMNS, *ENV_COLUMNS, SNR, FREQ, PATH_LOSS)
DEDUP_KEY = (DEVICE, TIME, PATH_LOSS, SNR)


@dataclass(frozen=True)
class CampaignRecord:
    """One uplink observation.

    ``env`` is ordered (CO2 ppm, relative humidity %, temperature degC,
    pressure hPa, PM2.5 ug/m3).
    """

    device_id: str
    timestamp: float
    distance_m: float
    walls: dict
    env: tuple
    snr_db: float
    sf: int
    freq_mhz: float
    path_loss_db: float

    def __post_init__(self):
        if not self.distance_m > 0:
            raise InputError(f"distance_m must be > 0, got {self.distance_m}")
        if self.sf not in range(7, 13):
            raise InputError(f"sf must be in 7..12, got {self.sf}")
        if len(self.env) != len(ENV_COLUMNS):
            raise InputError(f"env must have {len(ENV_COLUMNS)} entries, got {len(self.env)}")
        for k, v in self.walls.items():
            if k not in ("brick", "wood"):
                raise InputError(f"unknown wall type {k!r}")
            if int(v) != v or v < 0:
                raise InputError(f"wall count for {k} must be a non-negative integer")


def records_to_frame(records):
    rows = []
    for i, r in enumerate(records):
        row = {RECORD_ID: i, DEVICE: str(r.device_id), TIME: float(r.timestamp),
               DISTANCE: float(r.distance_m),
               "walls_brick": int(r.walls.get("brick", 0)),
               "walls_wood": int(r.walls.get("wood", 0)),
               SNR: float(r.snr_db), SF: int(r.sf), FREQ: float(r.freq_mhz),
               PATH_LOSS: float(r.path_loss_db)}
        row.update(dict(zip(ENV_COLUMNS, map(float, r.env))))
        rows.append(row)
    return pd.DataFrame(rows, columns=[RECORD_ID, *CAMPAIGN_COLUMNS])


def frame_to_records(frame):
    out = []
    for row in frame.itertuples(index=False):
        d = row._asdict()
        out.append(CampaignRecord(
            device_id=str(d[DEVICE]), timestamp=float(d[TIME]),
            distance_m=float(d[DISTANCE]),
            walls={"brick": int(d["walls_brick"]), "wood": int(d["walls_wood"])},
            env=tuple(float(d[c]) for c in ENV_COLUMNS), snr_db=float(d[SNR]),
            sf=int(d[SF]), freq_mhz=float(d[FREQ]), path_loss_db=float(d[PATH_LOSS])))
    return out


# ---------------------------------------------------------------------------
# parsing

@dataclass
class RowError:
    line: int
    reason: str


@dataclass
class ParseResult:
    frame: pd.DataFrame
    errors: list = field(default_factory=list)


def _parse_timestamps(raw, time_format):
    """Return float UNIX seconds (NaN where unparsable)."""
    numeric = pd.to_numeric(raw, errors="coerce")
    if time_format == "unix" or (time_format == "auto" and numeric.notna().all()):
        return numeric.to_numpy(dtype=float)
    if time_format not in ("auto", "iso"):
        raise InputError(f"time_format must be 'auto', 'unix' or 'iso', got {time_format!r}")
    parsed = pd.to_datetime(raw, utc=True, errors="coerce", format="ISO8601")
    secs = (parsed - pd.Timestamp(0, tz="UTC")) / pd.Timedelta(seconds=1)
    return secs.to_numpy(dtype=float)


def parse_campaign_csv(path, schema=None, time_format="auto"):
    """Read a campaign CSV into the canonical frame.

    Parameters
    ----------
    path : path-like
        UTF-8 CSV with a header row.
    schema : dict, optional
        Maps canonical column names to the header names used in the file.
        Unmapped canonical names are looked up verbatim.
    time_format : {"auto", "unix", "iso"}
        ``auto`` treats the column as UNIX seconds when every value is
        numeric and as ISO-8601 otherwise.

    Returns
    -------
    ParseResult
        Valid rows in file order plus one :class:`RowError` per rejected row,
        identified by its 1-based physical line number.
    """
    schema = dict(schema or {})
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        # leading "#" lines (provenance comments) are skipped
        skipped = 0
        while True:
            pos = fh.tell()
            first = fh.readline()
            if not first.startswith("#"):
                fh.seek(pos)
                break
            skipped += 1
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or all(not h.strip() for h in header):
            raise EmptyFile(f"{path}: no header row")
        body, body_lines = [], []
        for row in reader:
            if row and any(c.strip() for c in row):
                body.append(row)
                body_lines.append(skipped + reader.line_num)
    if not body:
        raise EmptyFile(f"{path}: header present but no data rows")

    header = [h.strip() for h in header]
    positions = {}
    for canon in CAMPAIGN_COLUMNS:
        name = schema.get(canon, canon)
        hits = [i for i, h in enumerate(header) if h == name]
        if not hits:
            raise MissingColumn(canon, f"expected header {name!r}")
        if len(hits) > 1:
            raise MissingColumn(canon, f"header {name!r} appears {len(hits)} times")
        positions[canon] = hits[0]

    width = len(header)
    errors = []
    good_lines = []
    cells = {c: [] for c in CAMPAIGN_COLUMNS}
    for line, row in zip(body_lines, body):
        if len(row) != width:
            errors.append(RowError(line, f"expected {width} fields, got {len(row)}"))
            continue
        good_lines.append(line)
        for c in CAMPAIGN_COLUMNS:
            cells[c].append(row[positions[c]].strip())

    raw = pd.DataFrame(cells)
    lines = np.asarray(good_lines, dtype=int)
    frame = pd.DataFrame({DEVICE: raw[DEVICE].astype(str)})
    frame[TIME] = _parse_timestamps(raw[TIME], time_format)
    for c in NUMERIC_COLUMNS:
        frame[c] = pd.to_numeric(raw[c], errors="coerce")

    reasons = pd.Series("", index=frame.index, dtype=object)

    def flag(mask, why):
        mask = np.asarray(mask, dtype=bool) & (reasons.to_numpy() == "")
        reasons[mask] = why

    flag(frame[DEVICE].str.len() == 0, "empty device_id")
    flag(frame[TIME].isna(), "unparsable timestamp")
    for c in NUMERIC_COLUMNS:
        flag(~np.isfinite(frame[c].to_numpy(dtype=float)), f"non-numeric {c}")
    flag(frame[DISTANCE] <= 0, f"{DISTANCE} must be > 0")
    for c in WALL_COLUMNS:
        v = frame[c]
        flag((v < 0) | (v != np.round(v)), f"{c} must be a non-negative integer")
    flag(~frame[SF].isin(range(7, 13)), "sf outside 7..12")

    bad = reasons.to_numpy() != ""
    errors.extend(RowError(int(ln), r) for ln, r in zip(lines[bad], reasons.to_numpy()[bad]))
    errors.sort(key=lambda e: e.line)

    frame = frame.loc[~bad].copy()
    for c in (*WALL_COLUMNS, SF):
        frame[c] = frame[c].astype(np.int64)
    frame.insert(0, RECORD_ID, np.arange(len(frame), dtype=np.int64))
    frame = frame.reset_index(drop=True)
    return ParseResult(frame=frame, errors=errors)


def write_campaign_csv(frame, path, comment=None):
    cols = [c for c in (RECORD_ID, *CAMPAIGN_COLUMNS) if c in frame.columns]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        frame.to_csv(fh, columns=cols, index=False, float_format="%.10g")


def read_campaign_frame(path):
    """Read a canonical CSV written by :func:`write_campaign_csv`."""
    frame = pd.read_csv(path, comment="#", dtype={DEVICE: str})
    missing = [c for c in CAMPAIGN_COLUMNS if c not in frame.columns]
    if missing:
        raise MissingColumn(missing[0])
    if RECORD_ID not in frame.columns:
        frame.insert(0, RECORD_ID, np.arange(len(frame), dtype=np.int64))
    return frame


# ---------------------------------------------------------------------------
# cleaning

@dataclass(frozen=True)
class CleaningConfig:
    sf_keep: frozenset = frozenset({7, 8, 9, 10})
    contamination: float = 0.01
    iforest_trees: int = 100
    iforest_subsample: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sf_keep", frozenset(int(s) for s in self.sf_keep))
        if not self.sf_keep or not self.sf_keep <= set(range(7, 13)):
            raise InputError(f"sf_keep must be a non-empty subset of 7..12, got {sorted(self.sf_keep)}")
        if not 0.0 < self.contamination < 0.5:
            raise InputError(f"contamination must lie in (0, 0.5), got {self.contamination}")
        if self.iforest_trees < 1 or self.iforest_subsample < 2:
            raise InputError("iforest_trees must be >= 1 and iforest_subsample >= 2")


@dataclass
class DropLedger:
    n_input: int
    duplicate: int = 0
    sf_filter: int = 0
    isolation_forest: int = 0

    @property
    def n_dropped(self):
        return self.duplicate + self.sf_filter + self.isolation_forest

    @property
    def n_kept(self):
        return self.n_input - self.n_dropped

    def to_dict(self):
        return {"n_input": self.n_input, "n_kept": self.n_kept,
                "dropped": {"duplicate": self.duplicate, "sf_filter": self.sf_filter,
                            "isolation_forest": self.isolation_forest}}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def isolation_forest_scores(matrix, trees=100, subsample=256, seed=0):
    """Anomaly score ``2**(-E[h(x)] / c(subsample))`` per row; higher is more anomalous.

    Constant columns are allowed: a split on them is never chosen, so they do
    not contribute to isolation.
    """
    X = np.asarray(matrix, dtype=float)
    if X.ndim != 2:
        raise InputError("matrix must be 2-D")
    n = X.shape[0]
    if not n >= subsample >= 2:
        raise InputError(f"need n >= subsample >= 2, got n={n}, subsample={subsample}")
    forest = IsolationForest(n_estimators=int(trees), max_samples=int(subsample),
                             contamination="auto", random_state=int(seed), n_jobs=1)
    forest.fit(X)
    return -forest.score_samples(X)


def _flag_count(contamination, n):
    # round away representation noise such as 0.01 * 300 = 3.0000000000000004
    return min(n, math.ceil(round(contamination * n, 9)))


def deduplicate(frame):
    """Drop repeats of ``(device_id, timestamp, path_loss_db, snr_db)``, keeping the first.

    Returns ``(kept, n_dropped)``.
    """
    dup = frame.duplicated(subset=list(DEDUP_KEY), keep="first").to_numpy()
    return frame.loc[~dup], int(dup.sum())


def clean(frame, config=None):
    """Deduplicate, filter spreading factors, and drop isolation-forest outliers.

    Returns ``(kept, ledger)``; ``kept`` preserves input order.
    """
    config = config or CleaningConfig()
    if len(frame) == 0:
        raise InputError("no records to clean")
    ledger = DropLedger(n_input=len(frame))

    work, ledger.duplicate = deduplicate(frame)

    sf_ok = work[SF].isin(config.sf_keep).to_numpy()
    ledger.sf_filter = int((~sf_ok).sum())
    work = work.loc[sf_ok]

    n = len(work)
    k = _flag_count(config.contamination, n) if n else 0
    if k:
        if n >= 2:
            X = work.loc[:, list(SCREEN_COLUMNS)].to_numpy(dtype=float)
            scores = isolation_forest_scores(X, config.iforest_trees,
                                             min(config.iforest_subsample, n), config.seed)
        else:
            scores = np.zeros(n)
        order = np.argsort(-scores, kind="stable")
        keep = np.ones(n, dtype=bool)
        keep[order[:k]] = False
        work = work.loc[keep]
    ledger.isolation_forest = k

    if len(work) == 0:
        raise AllRowsDropped(f"all {ledger.n_input} rows dropped: {ledger.to_dict()['dropped']}")
    return work.copy(), ledger


def chronological_split(frame, test_fraction=0.2):
    """Per-device chronological hold-out; the training share is rounded up.

    Every device with at least two records contributes at least one test row.
    """
    if not 0.0 < test_fraction < 1.0:
        raise InputError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    is_train = np.zeros(len(frame), dtype=bool)
    positions = np.arange(len(frame))
    for dev, idx in frame.groupby(DEVICE, sort=True).indices.items():
        if len(idx) < 2:
            raise DeviceTooSmall(dev, len(idx))
        times = frame[TIME].to_numpy()[idx]
        ordered = idx[np.argsort(times, kind="stable")]
        n_train = math.ceil(round((1.0 - test_fraction) * len(idx), 9))
        n_train = min(max(n_train, 1), len(idx) - 1)
        is_train[ordered[:n_train]] = True
    return frame.iloc[positions[is_train]].copy(), frame.iloc[positions[~is_train]].copy()
