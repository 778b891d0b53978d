"""Command-line pipeline: ingest, fit, anova, residuals, calibrate, synth, report.

State is passed between commands through files in ``--out-dir``. Every
JSON report carries ``provenance: {config_hash, seed}`` and every CSV starts
with a ``# config_hash=...; seed=...`` comment line.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import sys
import zlib
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .anova import anova, format_p, nested_partial_f, vif
from .campaign import (
    CAMPAIGN_COLUMNS,
    DEVICE,
    RECORD_ID,
    TIME,
    CleaningConfig,
    chronological_split,
    clean,
    parse_campaign_csv,
    read_campaign_frame,
    write_campaign_csv,
)
from .cross_validation import make_time_blocked_folds, metrics, run_cv
from .diagnostics import (
    cv_loglik_bandwidth,
    dip_test,
    group_tests,
    kde_fft,
    los_labels,
    mode_count_curve,
    serial_diagnostics,
    silverman_bandwidth,
    silverman_critical_bandwidth,
    tercile_labels,
)
from .exceptions import (
    AllRowsDropped,
    EmptySample,
    InputError,
    MissingColumn,
    PenalizedModelRejected,
    PerfectCollinearity,
)
from .fade_margin import pdr_curve, pdr_sweep
from .features import FeatureSpec, build_design
from .regression import make_model, select_hyperparameters
from .residuals import fit_all, fit_gmm, normality_tests, qq_points, select_residual_model
from .synthetic import DEFAULT_NOISE, SEPARATED_NOISE, GroundTruth, gaussian_noise, generate_campaign

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_EMPTY = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "input": {"path": None, "time_format": "auto", "schema": {}},
    "cleaning": {"sf_keep": [7, 8, 9, 10], "contamination": 0.01, "iforest_trees": 100,
                 "iforest_subsample": 256},
    "split": {"test_fraction": 0.2},
    "features": {"d0_m": 1.0, "include_snr": True, "freq_handling": "absorb_into_intercept"},
    "models": [
        {"name": "linear", "kind": "linear", "penalty": "none", "lam": 0.0, "alpha": 1.0},
        {"name": "poly2", "kind": "poly2", "penalty": "none", "lam": 0.0, "alpha": 1.0},
    ],
    "cv": {"k": 5, "gap_hours": 24.0, "lambda_grid": [1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001],
           "alpha_grid": [0.1, 0.5, 0.9, 1.0]},
    "residuals": {"model": "poly2", "families": ["normal", "skew_normal", "student_t", "cauchy"],
                  "gmm_ks": [1, 2, 3, 4, 5], "n_init": 5, "var_floor": 1e-3,
                  "bic_tie_tol": 10.0, "ks_tie_tol": 0.002, "dip_boot": 2000,
                  "crit_boot": 200, "prominence_frac": 0.01, "max_lag": 40,
                  "diag_max_points": 20000},
    "calibrate": {"targets": [0.05, 0.02, 0.01], "ci_method": "moving_block", "B": 2000,
                  "gmm_B": 1000, "gmm_k": 3, "heuristic_fm": 10.0, "conservative_p": 0.02,
                  "block_len": None},
    "synth": {"n_per_device": 2000, "noise": "default", "sigma": 2.0},
}

_COLUMN_ALIASES = {"device_id": "device", "distance_m": "distance", "snr_db": "snr",
                   "freq_mhz": "freq", "path_loss_db": "path-loss", "timestamp": "time"}

MODULE_SEEDS = ("cleaning", "cv", "residuals", "diagnostics", "calibrate", "synth")


def derive_seed(root, module):
    """Per-module seed: first word of ``SeedSequence([root, crc32(module)])``."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(module.encode())])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------- configuration


def _merge(base, extra, path=""):
    out = copy.deepcopy(base)
    for key, val in extra.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise InputError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "schema":
            if not isinstance(val, dict):
                raise InputError(f"config key {where!r} must be a table")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path):
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    p = Path(path)
    if not p.exists():
        raise InputError(f"config file {p} does not exist")
    text = p.read_bytes()
    try:
        user = json.loads(text) if p.suffix.lower() == ".json" else tomllib.loads(text.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise InputError(f"cannot parse config {p}: {exc}") from exc
    return validate_config(_merge(DEFAULT_CONFIG, user))


def validate_config(cfg):
    CleaningConfig(sf_keep=frozenset(cfg["cleaning"]["sf_keep"]),
                   contamination=cfg["cleaning"]["contamination"])
    f = cfg["features"]
    FeatureSpec("linear", f["d0_m"], f["include_snr"], f["freq_handling"])
    names = [m.get("name") for m in cfg["models"]]
    if not names or len(set(names)) != len(names) or None in names:
        raise InputError("models need unique names")
    for m in cfg["models"]:
        if m.get("kind") not in ("linear", "poly2"):
            raise InputError(f"model {m['name']!r}: kind must be linear or poly2")
        if m.get("penalty", "none") not in ("none", "ridge", "lasso", "enet"):
            raise InputError(f"model {m['name']!r}: unknown penalty")
    if cfg["cv"]["k"] < 2 or cfg["cv"]["gap_hours"] < 0:
        raise InputError("cv.k must be >= 2 and cv.gap_hours >= 0")
    if not 0 < cfg["split"]["test_fraction"] < 1:
        raise InputError("split.test_fraction must lie in (0, 1)")
    for p in cfg["calibrate"]["targets"]:
        if not 0 < p < 1:
            raise InputError("calibrate.targets must lie in (0, 1)")
    if cfg["calibrate"]["ci_method"] not in ("bca_iid", "moving_block"):
        raise InputError("calibrate.ci_method must be bca_iid or moving_block")
    return cfg


def config_hash(cfg):
    blob = json.dumps(_jsonable(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------- output helpers


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, pd.DataFrame):
        return _jsonable(obj.to_dict(orient="records"))
    return obj


class Run:
    """Resolved configuration, seeds and output directory of one invocation."""

    def __init__(self, cfg, seed, out_dir):
        self.cfg = cfg
        self.seed = int(seed)
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(cfg)

    @property
    def provenance(self):
        return {"config_hash": self.hash, "seed": self.seed, "version": __version__}

    def seed_for(self, module):
        return derive_seed(self.seed, module)

    def path(self, name):
        return self.out / name

    def write_json(self, name, payload):
        body = {"provenance": self.provenance, **_jsonable(payload)}
        self.path(name).write_text(json.dumps(body, sort_keys=True, indent=2) + "\n",
                                   encoding="utf-8")
        return self.path(name)

    def write_csv(self, name, frame):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# config_hash={self.hash}; seed={self.seed}\n")
            frame.to_csv(fh, index=False, float_format="%.10g", lineterminator="\n")
        return self.path(name)

    def read_csv(self, name):
        p = self.path(name)
        if not p.exists():
            raise InputError(f"missing upstream artifact {p}; run the earlier command first")
        return pd.read_csv(p, comment="#", dtype={DEVICE: str})

    def read_json(self, name):
        p = self.path(name)
        if not p.exists():
            raise InputError(f"missing upstream artifact {p}; run the earlier command first")
        return json.loads(p.read_text(encoding="utf-8"))

    def cleaned(self, override=None):
        p = Path(override) if override else self.path("cleaned.csv")
        if not p.exists():
            raise InputError(f"missing cleaned dataset {p}; run 'ingest' first")
        return read_campaign_frame(p)

    def split(self, frame):
        return chronological_split(frame, self.cfg["split"]["test_fraction"])

    def model_specs(self):
        return self.cfg["models"]

    def build_model(self, spec):
        f = self.cfg["features"]
        return make_model(kind=spec["kind"], penalty=spec.get("penalty", "none"),
                          lam=spec.get("lam", 0.0), alpha=spec.get("alpha", 1.0),
                          include_snr=f["include_snr"], d0_m=f["d0_m"],
                          freq_handling=f["freq_handling"])


# ---------------------------------------------------------------- commands


def cmd_synth(run, args):
    s = run.cfg["synth"]
    n = args.n_per_device or s["n_per_device"]
    noise_name = args.noise or s["noise"]
    sigma = args.sigma if args.sigma is not None else s["sigma"]
    noise = {"default": DEFAULT_NOISE, "separated": SEPARATED_NOISE,
             "gaussian": gaussian_noise(sigma), "none": None}.get(noise_name)
    if noise_name not in ("default", "separated", "gaussian", "none"):
        raise InputError(f"unknown noise {noise_name!r}")
    truth = GroundTruth(noise=noise)
    frame = generate_campaign(truth, n, run.seed_for("synth"))
    target = Path(args.output) if args.output else run.path("synthetic_campaign.csv")
    write_campaign_csv(frame.drop(columns=[RECORD_ID]), target,
                       comment=f"config_hash={run.hash}; seed={run.seed}")
    info = {"n_per_device": n, "n_records": len(frame), "noise": noise_name,
            "noise_params": noise.to_dict() if noise is not None else None,
            "truth": {"intercept": truth.intercept, **truth.natural_coefficients(),
                      "freq_mhz": truth.freq_mhz},
            "devices": [d.__dict__ for d in truth.devices], "output": target.name}
    run.write_json("synthetic_truth.json", info)
    return {"records": len(frame), "output": str(target)}


def cmd_ingest(run, args):
    icfg = run.cfg["input"]
    path = args.input or icfg["path"]
    if not path:
        raise InputError("no input file given (positional argument or input.path in config)")
    if not Path(path).exists():
        raise InputError(f"input file {path} does not exist")
    schema = dict(icfg["schema"])
    for canon in CAMPAIGN_COLUMNS:
        v = getattr(args, "col_" + canon, None)
        if v:
            schema[canon] = v
    parsed = parse_campaign_csv(path, schema, args.time_format or icfg["time_format"])
    errors = [{"line": e.line, "reason": e.reason} for e in parsed.errors]
    if len(parsed.frame) == 0:
        raise AllRowsDropped(f"no valid rows in {path} ({len(errors)} rejected)")
    c = run.cfg["cleaning"]
    ccfg = CleaningConfig(sf_keep=frozenset(c["sf_keep"]), contamination=c["contamination"],
                          iforest_trees=c["iforest_trees"],
                          iforest_subsample=c["iforest_subsample"], seed=run.seed_for("cleaning"))
    kept, ledger = clean(parsed.frame, ccfg)
    write_campaign_csv(kept, run.path("cleaned.csv"),
                       comment=f"config_hash={run.hash}; seed={run.seed}")
    report = {"input": Path(path).name, "n_rows_read": len(parsed.frame) + len(errors),
              "n_parse_rejected": len(errors), "parse_errors": errors[:200],
              "ledger": ledger.to_dict(), "n_kept": ledger.n_kept}
    run.write_json("drop_ledger.json", report)
    return {"kept": ledger.n_kept, "dropped": ledger.to_dict()["dropped"],
            "parse_rejected": len(errors)}


def _penalized(spec):
    return spec.get("penalty", "none") != "none"


def cmd_fit(run, args):
    frame = run.cleaned(args.input)
    train, test = run.split(frame)
    cv = run.cfg["cv"]
    split = pd.DataFrame({RECORD_ID: frame[RECORD_ID],
                          "split": np.where(frame[RECORD_ID].isin(train[RECORD_ID]), "train", "test")})
    run.write_csv("split.csv", split)
    plan = make_time_blocked_folds(train, cv["k"], cv["gap_hours"])
    report, fold_rows = {}, []
    for spec in run.model_specs():
        name = spec["name"]
        model = run.build_model(spec)
        select = ({"lambda_grid": cv["lambda_grid"], "alpha_grid": cv["alpha_grid"]}
                  if _penalized(spec) else None)
        res = run_cv(train, model, plan, select)
        chosen = None
        if select:
            Xr = model.features.fit(train).transform(train)
            yr = model.features.response(train)
            pen, _ = select_hyperparameters(Xr, yr, list(plan.split()), spec["penalty"],
                                            cv["lambda_grid"], cv["alpha_grid"])
            model.set_params(regressor__lam=pen.lam, regressor__alpha=pen.alpha)
            chosen = {"lam": pen.lam, "alpha": pen.alpha}
        model.fit(train)
        pred = model.predict(test)
        y = test["path_loss_db"].to_numpy(dtype=float)
        hold = pd.DataFrame({RECORD_ID: test[RECORD_ID].to_numpy(), DEVICE: test[DEVICE].to_numpy(),
                             TIME: test[TIME].to_numpy(), "y_true": y, "y_pred": pred})
        hold["residual"] = hold["y_true"] - hold["y_pred"]
        oof = res.residuals.sort_values([DEVICE, TIME], kind="stable")
        run.write_csv(f"oof_{name}.csv", oof)
        run.write_csv(f"holdout_{name}.csv", hold)
        folds = res.folds.copy()
        folds.insert(0, "model", name)
        fold_rows.append(folds)
        report[name] = {"spec": spec, "n_columns": len(model.feature_names_),
                        "cv": res.summary(), "holdout": metrics(y, pred),
                        "selected_hyperparameters": chosen, "model": model.to_dict()}
    run.write_csv("cv_folds.csv", pd.concat(fold_rows, ignore_index=True))
    run.write_json("fit_report.json", {"n_train": len(train), "n_test": len(test),
                                        "cv_plan": {"k": cv["k"], "gap_hours": cv["gap_hours"]},
                                        "models": report})
    return {name: {"cv_rmse": r["cv"]["val_rmse"]["mean"], "holdout_rmse": r["holdout"]["rmse"]}
            for name, r in report.items()}


def cmd_anova(run, args):
    frame = run.cleaned(args.input)
    train, _ = run.split(frame)
    types = sorted(set(args.types or (2, 3)))
    out, designs = {}, {}
    for spec in run.model_specs():
        name = spec["name"]
        if _penalized(spec):
            out[name] = {"skipped": str(PenalizedModelRejected(
                f"penalty={spec['penalty']!r}; ANOVA needs an unpenalized fit"))}
            continue
        model = run.build_model(spec).fit(train)
        entry = {"robust": args.robust}
        for t in types:
            table = anova(model, train, type=t, robust=args.robust)
            run.write_csv(f"anova_{name}_type{t}.csv", _anova_frame(table))
            entry[f"type{t}"] = table.to_dict()
        design = build_design(train, FeatureSpec(spec["kind"], **run.cfg["features"]))
        designs[name] = design
        try:
            entry["vif"] = dict(zip(design.columns, vif(design.values, design.columns)))
        except PerfectCollinearity as exc:
            entry["vif"] = {"error": str(exc)}
        # block-wise partial F tests: drop one block at a time from the full design
        blocks = {}
        for blk in dict.fromkeys(design.blocks):
            keep = [c for c, b in zip(design.columns, design.blocks) if b != blk]
            res = nested_partial_f(design.values, design.response, design.columns, keep,
                                   design.columns)
            blocks[blk] = {k: v for k, v in res.to_dict().items() if not k.endswith("_terms")}
        entry["block_tests"] = blocks
        out[name] = entry
    nested = None
    kinds = {s["name"]: s["kind"] for s in run.model_specs() if s["name"] in designs}
    lin = [n for n, k in kinds.items() if k == "linear"]
    quad = [n for n, k in kinds.items() if k == "poly2"]
    if lin and quad:
        big = designs[quad[0]]
        cmp_ = nested_partial_f(big.values, big.response, big.columns,
                                designs[lin[0]].columns, big.columns)
        nested = {"restricted": lin[0], "full": quad[0], "df1": cmp_.df1, "df2": cmp_.df2,
                  "F": cmp_.F, "p": cmp_.p, "partial_eta2": cmp_.partial_eta2}
    run.write_json("anova_report.json", {"models": out, "nested_linear_vs_poly2": nested})
    return {n: ("skipped" if "skipped" in e else "ok") for n, e in out.items()}


def _anova_frame(table):
    df = table.table.copy()
    df["p_display"] = [format_p(p) for p in df["p"]]
    return df


def _oof(run, name):
    oof = run.read_csv(f"oof_{name}.csv")
    return oof


def cmd_residuals(run, args):
    rc = run.cfg["residuals"]
    name = args.model or rc["model"]
    oof = _oof(run, name)
    r = oof["residual"].to_numpy(dtype=float)
    seed = run.seed_for("residuals")
    fits = fit_all(r, rc["families"], rc["gmm_ks"], rc["n_init"], rc["var_floor"], seed)
    best = select_residual_model(fits, rc["bic_tie_tol"], rc["ks_tie_tol"])
    table = pd.DataFrame([{"family": f.label, "k_params": f.k_params, "loglik": f.loglik,
                           "aic": f.aic, "bic": f.bic, "ks_stat": f.ks_stat,
                           "selected": f is best} for f in fits])
    run.write_csv(f"residual_fits_{name}.csv", table)
    run.write_csv(f"qq_{name}.csv", qq_points(r, best))

    dseed = run.seed_for("diagnostics")
    rng = np.random.default_rng(dseed)
    sub = r if r.size <= rc["diag_max_points"] else rng.choice(r, rc["diag_max_points"], replace=False)
    h_s = silverman_bandwidth(r)
    h_cv = cv_loglik_bandwidth(r, seed=dseed)
    kde = kde_fft(r, h_s)
    run.write_csv(f"kde_{name}.csv", kde.to_frame())
    curve = mode_count_curve(r, prominence_frac=rc["prominence_frac"])
    run.write_csv(f"mode_curve_{name}.csv", curve)
    dip, dip_p = dip_test(sub, rc["dip_boot"], dseed)
    h_crit, crit_p = silverman_critical_bandwidth(sub, 1, rc["crit_boot"], dseed,
                                                  rc["prominence_frac"])
    frame = run.cleaned(args.input)
    joined = oof.merge(frame[[RECORD_ID, "walls_brick", "walls_wood", "co2"]],
                       on=RECORD_ID, how="left", validate="one_to_one")
    groups = {"los": los_labels(joined), "device": joined[DEVICE].to_numpy(),
              "co2_tercile": tercile_labels(joined["co2"])}
    group_out = {}
    for gname, lab in groups.items():
        try:
            g = group_tests(r, lab)
            group_out[gname] = {"kruskal_wallis": g["kruskal_wallis"],
                                "brown_forsythe": g["brown_forsythe"], "groups": g["groups"]}
        except InputError as exc:
            group_out[gname] = {"error": str(exc)}
    max_lag = min(rc["max_lag"], r.size - 1)
    serial = serial_diagnostics(r, max_lag)
    gmm_k = run.cfg["calibrate"]["gmm_k"]
    tail = next((f for f in fits if f.family == "gmm" and f.extra.get("K_requested") == gmm_k), None)
    report = {
        "model": name, "n": int(r.size),
        "selected": best.to_dict(), "fits": [f.to_dict() for f in fits],
        "normality": normality_tests(r),
        "bandwidth": {"silverman": h_s, "cv_loglik": h_cv},
        "modality": {"dip": dip, "dip_p": dip_p, "h_critical": h_crit, "critical_p": crit_p,
                     "mode_curve_monotone": curve.attrs["monotone"],
                     "n_used": int(sub.size)},
        "groups": group_out,
        "serial": {"acf": serial["acf"], "pacf": serial["pacf"],
                   "ljung_box": serial["ljung_box"], "max_lag": max_lag},
        "tail_gmm": tail.to_dict() if tail is not None else None,
    }
    run.write_json(f"residual_report_{name}.json", report)
    return {"model": name, "selected": best.label, "bic": best.bic, "ks": best.ks_stat}


def cmd_calibrate(run, args):
    cc = run.cfg["calibrate"]
    rc = run.cfg["residuals"]
    seed = run.seed_for("calibrate")
    models, curves = {}, []
    for spec in run.model_specs():
        name = spec["name"]
        oof = _oof(run, name)
        hold = run.read_csv(f"holdout_{name}.csv")
        r = oof["residual"].to_numpy(dtype=float)
        gmm = fit_gmm(r, cc["gmm_k"], n_init=rc["n_init"], var_floor=rc["var_floor"],
                      seed=run.seed_for("residuals"))
        models[name] = {"oof_residuals": r, "test_true": hold["y_true"].to_numpy(float),
                        "test_pred": hold["y_pred"].to_numpy(float), "gmm_fit": gmm,
                        "folds": oof["fold"].to_numpy()}
    table = pdr_sweep(models, cc["targets"], cc["heuristic_fm"], ci_method=cc["ci_method"],
                      B=cc["B"], gmm_B=cc["gmm_B"], seed=seed, conservative_p=cc["conservative_p"],
                      block_len=cc["block_len"])
    run.write_csv("fade_margin.csv", table)
    grid = np.round(np.arange(0.0, 40.0 + 1e-9, 0.1), 10)
    for name, m in models.items():
        c = pdr_curve(m["test_true"], m["test_pred"], grid)
        c.insert(0, "model", name)
        c["p_target"] = np.nan
        c["ci_lo"] = np.nan
        c["ci_hi"] = np.nan
        curves.append(c)
    pts = table.rename(columns={"p": "p_target", "achieved_pdr": "pdr"})
    pts = pts[["model", "fm_db", "pdr", "p_target", "ci_lo", "ci_hi"]]
    sweep = pd.concat([pts, *curves], ignore_index=True)[
        ["model", "fm_db", "pdr", "p_target", "ci_lo", "ci_hi"]]
    run.write_csv("pdr_sweep.csv", sweep)
    run.write_json("fade_margin.json", {"rows": table, "settings": cc})
    return {f"{r.model}@{r.p if not pd.isna(r.p) else 'heuristic'}":
            {"fm_db": r.fm_db, "pdr": r.achieved_pdr, "estimator": r.estimator}
            for r in table.itertuples()}


def cmd_report(run, args):
    parts = {}
    for name in sorted(p.name for p in run.out.glob("*.json")):
        if name in ("report.json", "error.json"):
            continue
        body = json.loads(run.path(name).read_text(encoding="utf-8"))
        body.pop("provenance", None)
        parts[name] = body
    if not parts:
        raise EmptySample(f"no reports found in {run.out}")
    summary = {}
    fit = parts.get("fit_report.json")
    if fit:
        summary["cv_rmse"] = {n: m["cv"]["val_rmse"]["mean"] for n, m in fit["models"].items()}
        summary["holdout_rmse"] = {n: m["holdout"]["rmse"] for n, m in fit["models"].items()}
    fm = parts.get("fade_margin.json")
    if fm:
        summary["fade_margin"] = [
            {k: row[k] for k in ("model", "p", "estimator", "fm_db", "ci_lo", "ci_hi",
                                 "achieved_pdr")} for row in fm["rows"]]
    for name, body in parts.items():
        if name.startswith("residual_report_"):
            summary.setdefault("residual_law", {})[body["model"]] = body["selected"]["label"]
    run.write_json("report.json", {"summary": summary, "artifacts": sorted(parts)})
    return summary


COMMANDS = {"ingest": cmd_ingest, "fit": cmd_fit, "anova": cmd_anova, "residuals": cmd_residuals,
            "calibrate": cmd_calibrate, "synth": cmd_synth, "report": cmd_report}


def build_parser():
    def global_flags(default):
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=default, help="root seed (default 0)")
        g.add_argument("--out-dir", default=default, help="output directory (default ./indoorpl_out)")
        g.add_argument("--config", default=default, help="TOML or JSON run configuration")
        return g

    # Sub-parsers copy their values over the top-level namespace, so their
    # copies of the global flags must not carry defaults of their own.
    common = global_flags(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="indoorpl", parents=[global_flags(None)],
                                     description="Indoor path-loss modelling and fade-margin calibration.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="parse and clean a campaign CSV")
    p.add_argument("input", nargs="?", help="campaign CSV (overrides input.path)")
    p.add_argument("--time-format", choices=["auto", "unix", "iso"], default=None)
    for canon in CAMPAIGN_COLUMNS:
        flags = ["--col-" + canon.replace("_", "-")]
        short = _COLUMN_ALIASES.get(canon)
        if short:
            flags.insert(0, "--col-" + short)
        p.add_argument(*flags, dest="col_" + canon, default=None, metavar="NAME",
                       help=f"source header for {canon}")

    for name, helptext in (("fit", "time-blocked CV, hold-out evaluation"),
                           ("anova", "robust ANOVA, block partial-F tests, VIF"),
                           ("residuals", "residual-law fits and diagnostics")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--input", default=None, help="cleaned CSV (default OUT_DIR/cleaned.csv)")
        if name == "residuals":
            p.add_argument("--model", default=None, help="model whose OOF residuals to analyse")
        if name == "anova":
            p.add_argument("--type", type=int, choices=[2, 3], action="append", dest="types",
                           help="sum-of-squares type; repeatable (default: both)")
            p.add_argument("--robust", action=argparse.BooleanOptionalAction, default=True,
                           help="HC3 Wald tests (default) or classical F tests")

    sub.add_parser("calibrate", parents=[common], help="fade margins, CIs and hold-out PDR")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic campaign CSV")
    p.add_argument("--n-per-device", type=int, default=None)
    p.add_argument("--noise", choices=["default", "separated", "gaussian", "none"], default=None)
    p.add_argument("--sigma", type=float, default=None, help="sd for --noise gaussian")
    p.add_argument("--output", default=None, help="CSV path (default OUT_DIR/synthetic_campaign.csv)")

    sub.add_parser("report", parents=[common], help="collect all reports into report.json")
    return parser


def _exit_code(exc):
    if isinstance(exc, (AllRowsDropped, EmptySample)):
        return EXIT_EMPTY
    if isinstance(exc, (InputError, FileNotFoundError)):
        return EXIT_INPUT
    return EXIT_INTERNAL


def _resolve(args):
    """Global flags may appear before or after the subcommand; the later one wins."""
    ns = vars(args)
    return ns.get("seed"), ns.get("out_dir"), ns.get("config")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        seed, out_dir, cfg_path = _resolve(args)
        cfg = load_config(cfg_path)
        run = Run(cfg, 0 if seed is None else seed, out_dir or "indoorpl_out")
        result = COMMANDS[args.command](run, args)
        sys.stdout.write(json.dumps({"command": args.command, "status": "ok",
                                     "provenance": run.provenance,
                                     "result": _jsonable(result)}, sort_keys=True) + "\n")
        return EXIT_OK
    except Exception as exc:  # every failure becomes a machine-readable error
        code = _exit_code(exc)
        err = {"command": args.command, "status": "error", "exit_code": code,
               "error": {"type": type(exc).__name__, "message": str(exc)}}
        if isinstance(exc, MissingColumn):
            err["error"]["column"] = exc.name
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
