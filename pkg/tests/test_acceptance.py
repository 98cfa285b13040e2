"""Acceptance criteria, one test per criterion.

Each test records a verdict in ``conftest.CRITERIA``; the terminal summary
prints one PASS/FAIL line per criterion. Criteria 4, 5 and 7 share one
desk-scale run of the full experiment (both scenes, three training modes,
three seeds) using the bundled desk configuration.
"""
import csv
import filecmp
import json
import os
import time

import numpy as np
import pytest

from ccloc import charting, cli, metrics, nn, pipeline
from ccloc.array_model import SPEED_OF_LIGHT, ArrayConfig, codebook, codeword_to_aod, default_grid, steering_vector
from ccloc.config import bundled, load_config
from ccloc.csi import PilotConfig, estimate_aoa, estimate_covariance, estimate_gains, measure_link
from ccloc.dataset import apply_scaler
from ccloc.scene import PathSet
from conftest import CRITERIA
from test_metrics import oracle


def record(key, ok, detail):
    CRITERIA[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1

def test_criterion_1_gradients(small_dataset):
    t0 = time.perf_counter()
    X, y = apply_scaler(small_dataset, small_dataset.rows("labeled", "train")[:15])
    cfg = charting.TrainConfig(batch_unlabeled=5, batch_labeled=5, epochs=10, seed=0)
    snapshot = {}

    def grab(model, step):
        if step == 100:
            snapshot["model"] = charting.ChartModel(model.encoder, model.decoder, model.enc_params.copy(),
                                                    model.dec_params.copy(), model.scaler)

    charting.train_semisupervised(small_dataset, cfg, callback=grab)
    models = {"init": charting.init_model(4, 25, seed=0, scaler=small_dataset.scaler),
              "step 100": snapshot["model"]}
    worst, n_min = 0.0, np.inf
    for m in models.values():
        def e_enc(p):
            E, ge, _, sig = charting.loss_unsupervised(m, X, 1e-4, with_signature=True)
            return E, ge, sig

        def e_dec(p):
            E, _, gd, sig = charting.loss_unsupervised(m, X, 1e-4, with_signature=True)
            return E, gd, sig

        checks = [(m.enc_params, e_enc), (m.dec_params, e_dec),
                  (m.enc_params, lambda p: charting.loss_encoder(m, X, y, 1e-4, with_signature=True)),
                  (m.dec_params, lambda p: charting.loss_decoder(m, X, y, with_signature=True))]
        for params, fn in checks:
            err, n = nn.gradient_check(params, fn, eps=1e-3, seed=1, fraction=0.0, min_coords=60)
            worst, n_min = max(worst, err), min(n_min, n)
    dt = time.perf_counter() - t0
    record(1, worst < 1e-5 and n_min >= 50 and dt < 60,
           f"max rel err {worst:.2e} over >= {n_min} coords per loss/param set, {dt:.0f} s")


# ---------------------------------------------------------------- 2

def test_criterion_2_estimation_oracle():
    t0 = time.perf_counter()
    wl = SPEED_OF_LIGHT / 28e9
    bs, ue = ArrayConfig(64, wl), ArrayConfig(16, wl)
    grid = default_grid(512)
    step = np.pi / 512
    rng = np.random.default_rng(2024)

    # noiseless, on-grid single path through the full link estimator
    worst_aoa, worst_beta = 0.0, 0.0
    for _ in range(10):
        phi = grid[rng.integers(64, 448)]
        psi = codeword_to_aod(int(rng.integers(0, 32)), 32)
        beta = rng.uniform(1e-7, 1e-5) * np.exp(2j * np.pi * rng.random())
        ps = PathSet(aod=np.array([psi]), aoa=np.array([phi]), toa=np.array([1e-7]), gain=np.array([beta]), los=True)
        f = measure_link(ps, bs, ue, PilotConfig(noise_var=0.0, sigma_toa=0.0), seed=0)
        worst_aoa = max(worst_aoa, abs(f.aoa[0] - phi))
        est = f.gain_mag[0] * np.exp(1j * f.gain_phase[0])
        worst_beta = max(worst_beta, abs(est - beta) / abs(beta))

    # LS gains against an independent normal-equations solve on noisy data
    W = codebook(32, 16).columns
    s = np.exp(2j * np.pi * rng.random(32))
    aoas, aods = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
    Q = steering_vector(bs, rng.uniform(-1, 1, 32)) / 64
    v = rng.standard_normal(32) + 1j * rng.standard_normal(32)
    Ar, At = steering_vector(bs, aoas), steering_vector(ue, aods)
    F = np.array([[s[k] * (Q[:, k].conj() @ Ar[:, l]) * (At[:, l].conj() @ W[:, k]) for l in range(3)]
                  for k in range(32)])
    ref = np.linalg.solve(F.conj().T @ F, F.conj().T @ v)
    got, _ = estimate_gains(v, W, Q, s, 1.0, aods, aoas, bs, ue)
    ls_err = np.max(np.abs(got - ref) / np.abs(ref))

    # 20 dB per-element SNR, 256 snapshots, 100 seeded trials
    hits = 0
    for trial in range(100):
        r = np.random.default_rng([7, trial])
        phi = grid[r.integers(32, 480)]
        sym = np.exp(2j * np.pi * r.random(256))
        noise = np.sqrt(0.01 / 2) * (r.standard_normal((64, 256)) + 1j * r.standard_normal((64, 256)))
        R = estimate_covariance(np.outer(steering_vector(bs, phi), sym) + noise)
        hits += abs(estimate_aoa(R, grid, 1, bs)[0] - phi) <= step + 1e-12
    dt = time.perf_counter() - t0
    ok = worst_aoa <= step and worst_beta < 1e-8 and ls_err < 1e-8 and hits >= 95 and dt < 120
    record(2, ok, f"noiseless AoA err {worst_aoa:.1e} rad, beta rel err {worst_beta:.1e}, "
                  f"LS vs normal equations {ls_err:.1e}, 20 dB hits {hits}/100, {dt:.0f} s")


# ---------------------------------------------------------------- 3

def test_criterion_3_ct_tw_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = done = 0
    while done < 1000:
        n, k = int(rng.integers(3, 11)), int(rng.integers(1, 4))
        if 2 * n - 3 * k - 1 <= 0:
            continue
        if rng.random() < 0.5:
            true, latent = rng.standard_normal((n, 3)), rng.standard_normal((n, 2))
        else:
            true, latent = rng.integers(0, 3, (n, 3)).astype(float), rng.integers(0, 3, (n, 2)).astype(float)
        ct, tw = oracle(true, latent, k)
        mismatches += metrics.continuity(true, latent, k) != ct or metrics.trustworthiness(true, latent, k) != tw
        done += 1
    dt = time.perf_counter() - t0
    record(3, mismatches == 0 and dt < 60, f"{mismatches} mismatches in {done} instances, {dt:.0f} s")


# ------------------------------------------------------------ 4, 5, 7

@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    out = os.environ.get("CCLOC_ACCEPTANCE_OUT") or str(tmp_path_factory.mktemp("repro"))
    cfg = load_config(bundled("desk"))
    t0 = time.perf_counter()
    table = pipeline.run_repro(cfg, out, jobs=1, log=lambda msg: None)
    dt = time.perf_counter() - t0
    rows = {(r["scene"], r["mode"]): r for r in table}
    return out, cfg, rows, dt


def test_criterion_4_chart_quality(desk_run):
    _, cfg, rows, dt = desk_run
    gaps = []
    for scene in ("los_dominant", "nlos_dominant"):
        semi, unsup = rows[(scene, "semi")], rows[(scene, "unsup")]
        gaps += [(scene, "CT", semi["ct10"] - unsup["ct10"]), (scene, "TW", semi["tw10"] - unsup["tw10"])]
    ok = all(g >= 0.02 for _, _, g in gaps) and dt < 30 * 60
    record(4, ok, ", ".join(f"{s.split('_')[0]} {m} gap {g:+.3f}" for s, m, g in gaps) + f"; repro {dt / 60:.1f} min")


def test_criterion_5_localization(desk_run):
    _, _, rows, _ = desk_run
    los_semi, los_sup = rows[("los_dominant", "semi")]["median_m"], rows[("los_dominant", "sup")]["median_m"]
    ratio = los_semi / los_sup
    nlos_worse = {m: rows[("nlos_dominant", m)]["median_m"] > rows[("los_dominant", m)]["median_m"]
                  for m in ("semi", "sup")}
    p2 = rows[("los_dominant", "semi")]["p_below"]
    ok = ratio <= 0.9 and all(nlos_worse.values())
    record(5, ok, f"LoS median semi {los_semi:.2f} m / sup {los_sup:.2f} m = {ratio:.3f} (need <= 0.9); "
                  f"NLoS > LoS: {nlos_worse}; LoS semi P(err < 2 m) = {p2:.2f} (not gated)")


def test_criterion_7_metric_sanity(desk_run):
    out, _, _, _ = desk_run
    values = []
    for scene in ("los_dominant", "nlos_dominant"):
        for name in sorted(os.listdir(os.path.join(out, scene))):
            path = os.path.join(out, scene, name, "report.json")
            if os.path.exists(path):
                with open(path) as fh:
                    rep = json.load(fh)
                values += [v for _, v in rep["ct_curve"] + rep["tw_curve"]]
    pts = np.random.default_rng(0).uniform(0, 100, (300, 3))
    ct, tw = metrics.ct_tw_curves(pts, pts, [1, 5, 10, 50, 99])
    identity = [v for _, v in ct + tw]
    ok = len(values) > 0 and all(0.0 <= v <= 1.0 for v in values) and all(v == 1.0 for v in identity)
    record(7, ok, f"{len(values)} trained CT/TW values in [{min(values):.3f}, {max(values):.3f}]; "
                  f"identity control {set(identity)}")


def _smoothed(x, w=20):
    return np.convolve(x, np.ones(w) / w, mode="valid")


def test_training_curves_decrease(desk_run):
    out, cfg, _, _ = desk_run
    for scene in ("los_dominant", "nlos_dominant"):
        for seed in cfg["repro"]["seeds"]:
            with open(os.path.join(out, scene, f"semi_seed{seed}", "losses.csv")) as fh:
                rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
            for stage in ("E", "E_e", "E_d"):
                s = _smoothed(np.array([float(r["loss"]) for r in rows if r["stage"] == stage]))
                tenth = len(s) // 10
                assert s[-tenth:].mean() < s[:tenth].mean(), (scene, seed, stage)


def test_repro_outputs(desk_run):
    out, _, rows, _ = desk_run
    for scene in ("los_dominant", "nlos_dominant"):
        for mode in ("semi", "unsup", "sup"):
            with open(os.path.join(out, f"report_{scene}_{mode}.json")) as fh:
                rep = json.load(fh)
            assert len(rep["per_seed"]) == 3
    with open(os.path.join(out, "comparison.md")) as fh:
        assert fh.read().count("\n") == 2 + 1 + len(rows)


# ---------------------------------------------------------------- 6

TINY = ["--set", "dataset.n_labeled=12", "--set", "dataset.n_unlabeled=20", "--set", "train.epochs=2",
        "--set", "train.batch_unlabeled=5", "--set", "train.batch_labeled=3", "--set", "eval.ks=[1,2,3]"]


def _pipeline(out, jobs):
    steps = [["scene", "--bs-mode", "nlos_dominant"], ["dataset", "--scene", f"{out}/scene/scene.json"],
             ["train", "--dataset", f"{out}/dataset", "--mode", "semi", "--seed", "4"],
             ["eval", "--checkpoint", f"{out}/train/model.ckpt", "--dataset", f"{out}/dataset"]]
    for name, args in zip(("scene", "dataset", "train", "eval"), steps):
        assert cli.main([args[0], *args[1:], "--out", f"{out}/{name}", "--jobs", str(jobs), *TINY]) == 0


def test_criterion_6_determinism(tmp_path):
    _pipeline(tmp_path / "a", jobs=1)
    _pipeline(tmp_path / "b", jobs=2)
    compared, differ = 0, []
    for stage in ("scene", "dataset", "train", "eval"):
        names = sorted(os.listdir(tmp_path / "a" / stage))
        assert names == sorted(os.listdir(tmp_path / "b" / stage))
        for name in names:
            if name == "run_summary.json":  # wall-clock time only
                continue
            compared += 1
            if not filecmp.cmp(tmp_path / "a" / stage / name, tmp_path / "b" / stage / name, shallow=False):
                differ.append(f"{stage}/{name}")
    record(6, compared == 8 and not differ, f"{compared} artifacts byte-identical across reruns"
                                            + (f"; differ: {differ}" if differ else ""))
