"""Command-line driver: ``csiloc simulate|crlb|train|eval|sweep --config C --seed S --out DIR``.

Exit codes: 0 success, 1 validation error (bad flags, bad config, config
mismatch against earlier outputs), 2 runtime error (missing artifacts, I/O,
numerical failure).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import (
    ExperimentConfig,
    config_from_dict,
    config_schema,
    load_config,
    save_config,
)
from .dataset import load_dataset, save_dataset
from .errors import ConfigMismatchError, CsilocError, InvalidConfigError
from .localization import evaluate
from .neural import load_network, save_network

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
DATA_SECTIONS = ("seed", "scene", "array", "ofdm", "measurement", "dataset")
MODEL_SECTIONS = ("train", "augmentation")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _section_hash(cfg: ExperimentConfig, sections) -> str:
    d = cfg.to_dict()
    sub = {k: d[k] for k in sections}
    sub["feature_kinds"] = ex.feature_kinds(cfg.methods)
    return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()


def data_hash(cfg: ExperimentConfig) -> str:
    """Hash of the sections that determine simulated datasets."""
    return _section_hash(cfg, DATA_SECTIONS)


def model_hash(cfg: ExperimentConfig) -> str:
    """Hash of the sections that determine trained models."""
    return _section_hash(cfg, DATA_SECTIONS + MODEL_SECTIONS)


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, files, extra=None):
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "data_hash": data_hash(cfg),
        "model_hash": model_hash(cfg),
        "files": {f: sha256_file(out / f) for f in sorted(files)},
    }
    manifest.update(extra or {})
    (out / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True)
                                                  + "\n")
    return manifest


def read_manifest(out: Path, command: str) -> dict:
    path = out / f"manifest_{command}.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `csiloc {command}` first")
    return json.loads(path.read_text())


def _check_data(out: Path, cfg: ExperimentConfig):
    manifest = read_manifest(out, "simulate")
    if manifest["data_hash"] != data_hash(cfg):
        raise ConfigMismatchError("datasets in the output directory were simulated with a "
                                  "different scene/dataset config or seed; rerun simulate")
    return manifest


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _ds_name(split, kind, ap, augmented=False):
    return f"{split}_{kind}_ap{ap}{'_augmented' if augmented else ''}.csids"


def _model_name(method, ap):
    return f"model_{method}_ap{ap}.csnn"


# -- commands -----------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    fx = ex.make_fixture(cfg)
    files = []
    for ap in range(fx.n_aps):
        for kind in ex.feature_kinds(cfg.methods):
            tr, te = ex.simulate_ap(fx, ap, kind)
            for split, ds in (("train", tr), ("test", te)):
                name = _ds_name(split, kind, ap)
                save_dataset(ds, out / name)
                files.append(name)
    _write_csv(out / "test_points.csv", ["index", "x", "y"],
               [(n, float(x), float(y)) for n, (x, y) in enumerate(fx.test_points)])
    _write_csv(out / "rp_grid.csv", ["rp_index", "x", "y"],
               [(n, float(p.x), float(p.y)) for n, p in enumerate(fx.grid.rp_locations)])
    files += ["test_points.csv", "rp_grid.csv"]
    return write_manifest(out, "simulate", cfg, files,
                          {"n_rp": fx.grid.n_rp, "n_test_points": len(fx.test_points),
                           "n_aps": fx.n_aps})


def cmd_crlb(cfg: ExperimentConfig, out: Path) -> dict:
    rows = ex.crlb_rows(cfg)
    header = ["scene_id", "snr_db", "sigma_p", "epsilon", "epsilon_p", "flagged"]
    _write_csv(out / "crlb.csv", header, [[r[h] for h in header] for r in rows])
    return write_manifest(out, "crlb", cfg, ["crlb.csv"],
                          {"n_rows": len(rows), "n_flagged": sum(r["flagged"] for r in rows)})


def cmd_train(cfg: ExperimentConfig, out: Path) -> dict:
    _check_data(out, cfg)
    fx = ex.make_fixture(cfg)
    files = []
    for ap in range(fx.n_aps):
        augmented = {}
        for method in cfg.methods:
            if method not in ex.NETWORK_METHODS:
                continue
            kind = ex.feature_kind(method)
            if kind not in augmented:
                ds = load_dataset(out / _ds_name("train", kind, ap))
                aug = ex.maybe_augment(fx, ap, ds)
                if aug is not ds:
                    name = _ds_name("train", kind, ap, augmented=True)
                    save_dataset(aug, out / name)
                    files.append(name)
                augmented[kind] = aug
            net, history = ex.train_method(method, augmented[kind], cfg)
            save_network(net, out / _model_name(method, ap))
            hist = f"history_{method}_ap{ap}.csv"
            _write_csv(out / hist, ["epoch", "loss"], [(e, float(v)) for e, v in enumerate(history)])
            files += [_model_name(method, ap), hist]
    return write_manifest(out, "train", cfg, files)


def _train_set_for(out: Path, cfg, method, ap):
    kind = ex.feature_kind(method)
    if method in ex.NETWORK_METHODS and cfg.augmentation.enabled \
            and cfg.augmentation.copies_per_sample > 0:
        return load_dataset(out / _ds_name("train", kind, ap, augmented=True))
    return load_dataset(out / _ds_name("train", kind, ap))


def cmd_eval(cfg: ExperimentConfig, out: Path) -> dict:
    fx = ex.make_fixture(cfg)
    needs_data = any(m in ("knn",) + ex.NETWORK_METHODS for m in cfg.methods)
    if needs_data:
        _check_data(out, cfg)
    if any(m in ex.NETWORK_METHODS for m in cfg.methods):
        trained = read_manifest(out, "train")
        if trained["model_hash"] != model_hash(cfg):
            raise ConfigMismatchError("models were trained with a different config; rerun train")
    files, summary = [], []
    for method in cfg.methods:
        per_ap = []
        for ap in range(fx.n_aps):
            tr = te = net = None
            if method in ("knn",) + ex.NETWORK_METHODS:
                tr = _train_set_for(out, cfg, method, ap)
                te = load_dataset(out / _ds_name("test", ex.feature_kind(method), ap))
            if method in ex.NETWORK_METHODS:
                net = load_network(out / _model_name(method, ap))
            est = ex.window_estimates(method, fx, tr, te, net, ap)
            per_ap.append(ex.fuse_windows(est, cfg.outliers.enabled, cfg.outliers.delta_th))
        report = evaluate(ex.average_aps(per_ap), fx.test_points)
        names = [f"report_{method}.json", f"errors_{method}.csv", f"cdf_{method}.csv"]
        report.to_json(out / names[0])
        report.to_csv(out / names[1])
        report.cdf_to_csv(out / names[2])
        files += names
        summary.append((method, report.mean_distance_error, report.median_distance_error))
    _write_csv(out / "summary.csv", ["method", "mean_distance_error", "median_distance_error"],
               summary)
    files.append("summary.csv")
    return write_manifest(out, "eval", cfg, files)


def sweep_cells(cfg: ExperimentConfig) -> list[dict]:
    """Sweep matrix in fixed order; methods share the datasets of a cell."""
    cells = []
    for spacing in cfg.sweep.grid_spacings:
        for n_aps in cfg.sweep.ap_counts:
            for aug in cfg.sweep.augmentation:
                cells.append({"grid_spacing": spacing, "n_aps": n_aps, "augmentation": bool(aug)})
    return cells


def _run_cell(args):
    cfg_dict, cell, cell_dir = args
    cfg = config_from_dict(cfg_dict)
    cfg = cfg.replace(**{"scene.grid_spacing": cell["grid_spacing"],
                         "scene.n_aps": cell["n_aps"],
                         "augmentation.enabled": cell["augmentation"],
                         "methods": list(cfg.sweep.methods)})
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, cell_dir / "config.json")
    rows = []
    try:
        res = ex.run_experiment(cfg)
        n_rp = ex.make_fixture(cfg).grid.n_rp
        for m in cfg.methods:
            r = res.reports[m]
            r.to_json(cell_dir / f"report_{m}.json")
            r.cdf_to_csv(cell_dir / f"cdf_{m}.csv")
            rows.append([m, n_rp, r.mean_distance_error, r.median_distance_error, "ok"])
    except Exception as exc:  # a failed cell is reported, the sweep carries on
        for m in cfg.methods:
            rows.append([m, "", math.nan, math.nan, f"error: {exc}"])
    return rows


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> dict:
    cells = sweep_cells(cfg)
    jobs = [(cfg.to_dict(), c, str(out / f"cell_{i:02d}")) for i, c in enumerate(cells)]
    if cfg.sweep.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(cfg.sweep.jobs) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    header = ["cell", "method", "grid_spacing", "n_aps", "augmentation", "n_rp",
              "mean_distance_error", "median_distance_error", "status"]
    rows = []
    for i, (cell, cell_rows) in enumerate(zip(cells, results)):
        for m, n_rp, mean, median, status in cell_rows:
            rows.append([i, m, float(cell["grid_spacing"]), cell["n_aps"],
                         int(cell["augmentation"]), n_rp, mean, median, status])
    _write_csv(out / "sweep_summary.csv", header, rows)
    files = ["sweep_summary.csv"]
    for i in range(len(cells)):
        d = out / f"cell_{i:02d}"
        files += sorted(str(p.relative_to(out)) for p in d.iterdir() if p.is_file())
    return write_manifest(out, "sweep", cfg, files,
                          {"n_cells": len(cells),
                           "n_failed_rows": sum(r[-1] != "ok" for r in rows)})


COMMANDS = {"simulate": cmd_simulate, "crlb": cmd_crlb, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="csiloc", description="CSI fingerprint localization experiments")
    p.add_argument("command", choices=sorted(COMMANDS) + ["schema"])
    p.add_argument("--config", help="JSON experiment config (defaults apply to omitted keys)")
    p.add_argument("--seed", type=int, help="overrides the config seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory")
    return p


def resolve_config(config_path, seed) -> ExperimentConfig:
    cfg = load_config(config_path) if config_path else ExperimentConfig().validate()
    if seed is not None:
        if not 0 <= seed < 2 ** 64:
            raise InvalidConfigError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.replace(seed=seed)
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "schema":
            print(json.dumps(config_schema(), indent=2, sort_keys=True))
            return EXIT_OK
        if not args.out:
            raise UsageError("--out is required")
        cfg = resolve_config(args.config, args.seed)
    except (UsageError, InvalidConfigError, FileNotFoundError) as exc:
        print(f"csiloc: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / f"config_{args.command}.json")
        manifest = COMMANDS[args.command](cfg, out)
    except (InvalidConfigError, ConfigMismatchError) as exc:
        print(f"csiloc: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CsilocError, OSError, ValueError, ArithmeticError) as exc:
        print(f"csiloc: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"command": args.command, "config_hash": manifest["config_hash"],
                      "files": len(manifest["files"])}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
