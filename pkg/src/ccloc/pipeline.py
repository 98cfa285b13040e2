"""File-level pipeline stages shared by the command line and the test-suite.

Every artefact written here carries the hash of the configuration that
produced it: JSON files under a ``config_hash`` key, CSV files in a leading
``# config_hash=...`` comment, checkpoints in their header.
"""
import json
import os
import subprocess
import time
import warnings

import numpy as np

from . import __version__, charting, metrics
from . import dataset as ds_mod
from . import scene as scene_mod
from .config import config_hash, pilot_config, scene_config, train_config


class IntegrityError(RuntimeError):
    """An artefact does not match the manifest it claims to derive from."""


def version_string():
    """``<version>-g<commit>[-dirty]`` when run from a git checkout, else the package version."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return __version__
    if out.returncode != 0 or not out.stdout.strip():
        return __version__
    return f"{__version__}-g{out.stdout.strip()}"


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_summary(out_dir, cfg, command, started, extra=None):
    summary = {"command": command, "config_hash": config_hash(cfg), "version": version_string(),
               "wall_time_s": round(time.perf_counter() - started, 3)}
    summary.update(extra or {})
    _write_json(summary, os.path.join(out_dir, "run_summary.json"))
    return summary


# ------------------------------------------------------------------ stages

def run_scene(cfg, out_dir, bs_mode=None):
    os.makedirs(out_dir, exist_ok=True)
    sc = scene_mod.build_scene(scene_config(cfg, bs_mode))
    doc = sc.to_dict()
    doc["config_hash"] = config_hash(cfg)
    doc["scene_hash"] = sc.hash()
    path = os.path.join(out_dir, "scene.json")
    _write_json(doc, path)
    return path


def load_scene(path):
    with open(path) as fh:
        doc = json.load(fh)
    sc = scene_mod.Scene.from_dict(doc)
    if "scene_hash" in doc and doc["scene_hash"] != sc.hash():
        raise IntegrityError(f"{path}: scene content does not match its recorded hash")
    return sc


def run_dataset(cfg, scene_path, out_dir, jobs=1):
    sc = load_scene(scene_path)
    d = cfg["dataset"]
    data = ds_mod.build_dataset(sc, d["n_labeled"], d["n_unlabeled"], pilot_config(cfg),
                                seed=cfg["seed"], jobs=jobs)
    data = ds_mod.fit_scaler(ds_mod.split(data, d["train_fraction"], seed=d["split_seed"]))
    data.manifest["config_hash"] = config_hash(cfg)
    ds_mod.save(data, out_dir)
    return out_dir


def load_dataset_checked(path):
    """Load a dataset, turning a content/manifest hash mismatch into :class:`IntegrityError`."""
    with warnings.catch_warnings():
        warnings.simplefilter("error", ds_mod.IntegrityWarning)
        try:
            return ds_mod.load(path)
        except ds_mod.IntegrityWarning as exc:
            raise IntegrityError(str(exc)) from exc


def run_train(cfg, dataset_dir, mode, seed, out_dir):
    if mode not in charting.TRAINERS:
        raise ValueError(f"unknown training mode {mode!r}")
    os.makedirs(out_dir, exist_ok=True)
    data = load_dataset_checked(dataset_dir)
    model, log = charting.TRAINERS[mode](data, train_config(cfg, seed, mode))
    h = config_hash(cfg)
    ckpt = os.path.join(out_dir, "model.ckpt")
    charting.save_model(model, ckpt, extra={
        "config_hash": h, "mode": mode, "seed": int(seed), "step": len(log.series("E_e")) or len(log.series("E")),
        "dataset_sha256": ds_mod.data_hash(dataset_dir), "scene_hash": data.manifest["scene_hash"]})
    log.write_csv(os.path.join(out_dir, "losses.csv"), header_comment=f"config_hash={h}")
    return ckpt


def evaluate(model, data, ks, threshold=2.0):
    """CT/TW on the unlabeled test rows, localisation error on all test rows."""
    ut = data.rows("unlabeled", "test")
    rows = np.concatenate([data.rows("labeled", "test"), ut])
    X, _ = ds_mod.apply_scaler(data, ut)
    chart = charting.encode(model, X)
    ct, tw = metrics.ct_tw_curves(data.positions[ut], chart, ks)
    pred = charting.predict_location(model, data.features[rows])
    cdf = metrics.error_cdf(pred, data.positions[rows], threshold)
    return metrics.chart_report(ct, tw, cdf, {
        "n_chart": int(len(ut)), "n_localized": int(len(rows)),
        "ct": dict((str(k), v) for k, v in ct), "tw": dict((str(k), v) for k, v in tw)})


def run_eval(cfg, ckpt, dataset_dir, out_dir):
    model, header = charting.load_model(ckpt)
    manifest = ds_mod.read_manifest(dataset_dir)
    if header.get("dataset_sha256") != manifest.get("data_sha256"):
        raise IntegrityError(
            f"checkpoint was trained on dataset {header.get('dataset_sha256')}, "
            f"but {dataset_dir} has {manifest.get('data_sha256')}")
    data = load_dataset_checked(dataset_dir)
    os.makedirs(out_dir, exist_ok=True)
    rep = evaluate(model, data, cfg["eval"]["ks"], cfg["eval"]["error_threshold"])
    h = config_hash(cfg)
    rep.update(config_hash=h, mode=header.get("mode"), seed=header.get("seed"),
               bs_mode=manifest.get("bs_mode"), dataset_sha256=manifest["data_sha256"],
               checkpoint_config_hash=header.get("config_hash"))
    metrics.write_report(rep, os.path.join(out_dir, "report.json"))
    metrics.write_curves_csv(rep, os.path.join(out_dir, "ct_tw.csv"), comment=f"config_hash={h}")
    metrics.write_cdf_csv(rep, os.path.join(out_dir, "error_cdf.csv"), comment=f"config_hash={h}")
    return rep


SUMMARY_K = 10


def _summarise(reports):
    keys = {"ct10": lambda r: r["ct"][str(SUMMARY_K)], "tw10": lambda r: r["tw"][str(SUMMARY_K)],
            "median_m": lambda r: r["error_cdf"]["median"], "p90_m": lambda r: r["error_cdf"]["p90"],
            "p_below": lambda r: r["error_cdf"]["p_below"]}
    return {k: float(np.mean([f(r) for r in reports])) for k, f in keys.items()}


def run_repro(cfg, out_dir, jobs=1, log=print):
    """Both scenes, every training mode, every seed; one aggregate report per (scene, mode)."""
    os.makedirs(out_dir, exist_ok=True)
    h = config_hash(cfg)
    rep_cfg = cfg["repro"]
    table = []
    for bs_mode in rep_cfg["scenes"]:
        sdir = os.path.join(out_dir, bs_mode)
        scene_path = run_scene(cfg, sdir, bs_mode)
        data_dir = os.path.join(sdir, "dataset")
        log(f"[{bs_mode}] dataset")
        run_dataset(cfg, scene_path, data_dir, jobs)
        for mode in rep_cfg["modes"]:
            reports = []
            for seed in rep_cfg["seeds"]:
                log(f"[{bs_mode}] train {mode} seed {seed}")
                rdir = os.path.join(sdir, f"{mode}_seed{seed}")
                ckpt = run_train(cfg, data_dir, mode, seed, rdir)
                reports.append(run_eval(cfg, ckpt, data_dir, rdir))
            agg = {"config_hash": h, "bs_mode": bs_mode, "mode": mode, "seeds": list(rep_cfg["seeds"]),
                   "mean": _summarise(reports),
                   "per_seed": [dict(seed=s, **_summarise([r])) for s, r in zip(rep_cfg["seeds"], reports)]}
            _write_json(agg, os.path.join(out_dir, f"report_{bs_mode}_{mode}.json"))
            table.append({"scene": bs_mode, "mode": mode, **agg["mean"]})
    write_comparison(table, out_dir, h)
    return table


def write_comparison(table, out_dir, h):
    cols = ["scene", "mode", "ct10", "tw10", "median_m", "p90_m", "p_below"]
    with open(os.path.join(out_dir, "comparison.csv"), "w") as fh:
        fh.write(f"# config_hash={h}\n")
        fh.write(",".join(cols) + "\n")
        for row in table:
            fh.write(",".join(str(row[c]) if isinstance(row[c], str) else repr(row[c]) for c in cols) + "\n")
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for row in table:
        lines.append("| " + " | ".join(row[c] if isinstance(row[c], str) else f"{row[c]:.3f}" for c in cols) + " |")
    with open(os.path.join(out_dir, "comparison.md"), "w") as fh:
        fh.write(f"<!-- config_hash={h} -->\n")
        fh.write("\n".join(lines) + "\n")
    return lines
