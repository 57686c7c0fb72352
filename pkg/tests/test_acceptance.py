"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

Criteria 8 to 10 and part of 12 share a desk-scale end-to-end run through the
CLI (nside 16, 200 instances, about fifteen minutes on one core).
"""

import csv
import json
import time

import numpy as np
import pytest

from bayescmb import graph as gr
from bayescmb import harmonics as hm
from bayescmb import ilc, mapio, skysim, training, uq
from bayescmb import autodiff as ad
from bayescmb.autodiff import Tensor
from bayescmb.cli import main
from bayescmb.config import RunConfig
from bayescmb.healpix import Resolution, SkyMap
from bayescmb.layers import BatchNorm, ChebConv, ConcreteDropout
from bayescmb.unet import UNet, UNetConfig, file_sha256, load_checkpoint, loss_heteroscedastic, loss_mse

from gradutil import check_attr, directional_check, micro, param_errors, smooth_point, weighted_sum

E2E_TOML = """
[resolution]
nside = 16
[simulation]
fwhm_arcmin = 600.0
noise_modulation = 4.0
[architecture]
depth = 2
widths = [16, 32]
[training]
deterministic_epochs = 40
bayesian_epochs = 40
bayesian_lr = 1e-3
[inference]
T = 25
"""

TINY_TOML = """
[resolution]
nside = 4
[architecture]
depth = 1
widths = [4]
K = 2
[training]
deterministic_epochs = 3
bayesian_epochs = 3
deterministic_lr = 0.01
bayesian_lr = 0.001
deterministic_batch = 4
bayesian_batch = 4
"""


def rel_err(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


# ---------------------------------------------------------------------------
# 1, 2: graph


def test_c01_chebyshev_matches_eigendecomposition(criterion):
    t0 = time.perf_counter()
    Lhat = gr.scaled_laplacian(2)
    lam, U = np.linalg.eigh(Lhat.dense())
    r = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        theta = r.standard_normal(4)  # K = 3
        f = r.standard_normal(48)
        response = np.polynomial.chebyshev.chebval(lam, theta)
        ref = U @ (response * (U.T @ f))
        worst = max(worst, rel_err(gr.cheb_apply(Lhat, theta, f), ref))
    elapsed = time.perf_counter() - t0
    ok = criterion(1, worst <= 1e-10 and elapsed < 5, f"max rel err {worst:.2e} (<= 1e-10), {elapsed:.2f} s (< 5 s)")
    assert ok


def test_c02_laplacian_properties(criterion):
    details, ok = [], True
    for nside in (1, 2):
        L = gr.laplacian(gr.build_graph(nside)).dense()
        asym = float(np.max(np.abs(L - L.T)))
        rows = float(np.max(np.abs(L.sum(axis=1))))
        lam_min = float(np.linalg.eigvalsh(L).min())
        mu = np.linalg.eigvalsh(gr.scaled_laplacian(nside).dense())
        good = asym == 0 and rows <= 1e-12 and lam_min >= -1e-10 and mu.min() >= -1 - 1e-12 and mu.max() <= 1.01
        ok &= good
        details.append(f"nside {nside}: asym {asym:.1e} row sum {rows:.1e} min eig {lam_min:.1e} "
                       f"scaled [{mu.min():.4f}, {mu.max():.4f}]")
    assert criterion(2, ok, "; ".join(details))


# ---------------------------------------------------------------------------
# 3: gradients


def _layer_errors(seed: int) -> dict:
    r = np.random.default_rng(seed)
    lhat = gr.scaled_laplacian(2)
    err = {}

    conv = ChebConv(2, 3, K=3, rng=r)
    x = r.standard_normal((2, 2, 48))
    w = r.standard_normal((2, 3, 48))
    loss = lambda: weighted_sum(conv(Tensor(x), lhat), w)  # noqa: E731
    err["chebconv"] = max(ad.gradient_check(lambda t: weighted_sum(conv(t, lhat), w), x),
                          check_attr(conv, "theta", loss), check_attr(conv, "bias", loss))

    for training_mode in (True, False):
        bn = BatchNorm(3)
        bn.gamma.data[:] = r.uniform(0.5, 2.0, 3)
        bn.beta.data[:] = r.standard_normal(3)
        bn.running_var = r.uniform(0.5, 2.0, 3)
        bn.training = training_mode
        x = r.standard_normal((2, 3, 12))
        w = r.standard_normal((2, 3, 12))
        loss = lambda: weighted_sum(bn(Tensor(x)), w)  # noqa: E731
        err[f"batchnorm train={training_mode}"] = max(
            ad.gradient_check(lambda t: weighted_sum(bn(t), w), x),
            check_attr(bn, "gamma", loss), check_attr(bn, "beta", loss))

    d = ConcreteDropout(3, p_init=r.uniform(0.05, 0.5))
    x = r.standard_normal((2, 3, 12))
    w = r.standard_normal((2, 3, 12))
    u = r.uniform(size=(2, 3))
    stochastic = max(directional_check(lambda t: weighted_sum(d(t, u=u), w), x, r),
                     check_attr(d, "p_logit", lambda: weighted_sum(d(Tensor(x), u=u), w)))
    d.mode = "frozen"
    d.frozen_mask = r.uniform(0.0, 0.9, 3)
    err["dropout"] = max(stochastic, ad.gradient_check(lambda t: weighted_sum(d(t), w), x))

    y = Tensor(r.standard_normal((2, 1, 12)))
    mu = r.standard_normal((2, 1, 12))
    s = r.normal(0, 0.5, (2, 1, 12))
    err["mse loss"] = ad.gradient_check(lambda t: loss_mse(t, y), mu)
    err["heteroscedastic loss"] = max(
        ad.gradient_check(lambda t: loss_heteroscedastic(t, Tensor(s), y), mu),
        ad.gradient_check(lambda t: loss_heteroscedastic(Tensor(mu), t, y), s))

    for bayesian in (False, True):
        model = micro(bayesian, seed)
        if bayesian:
            model.set_dropout_mode("frozen", r.uniform(0.0, 0.5, 4))
        y = Tensor(r.standard_normal((2, 1, 48)))
        x = smooth_point(lambda: r.standard_normal((2, 9, 48)), lambda v: model(Tensor(v)))

        def loss_of(inp, model=model, y=y, bayesian=bayesian):
            mu, s = model(inp)
            return loss_heteroscedastic(mu, s, y, model.kl(1e-2, 10)) if bayesian else loss_mse(mu, y)

        worst = max(param_errors(model, lambda: loss_of(Tensor(x)), r).values())
        err[f"unet bayesian={bayesian}"] = max(worst, directional_check(loss_of, x, r))
    return err


def test_c03_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(10):
        for name, e in _layer_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), e)
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = criterion(3, top <= 1e-4 and elapsed < 60,
                   f"worst rel err {top:.1e} over {len(worst)} checks x 10 points (<= 1e-4), "
                   f"{elapsed:.1f} s (< 60 s)")
    assert ok, worst


# ---------------------------------------------------------------------------
# 4, 5: harmonics and variance decomposition


def test_c04_sht_fidelity(criterion):
    r = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        n = hm.n_alm(8)
        alm = hm.AlmSet(8, r.standard_normal(n) + 1j * r.standard_normal(n))
        back = hm.analyze(hm.synthesize(alm, 16), 8)
        nz = np.abs(alm.coeffs) > 0
        worst = max(worst, float(np.max(np.abs(back.coeffs - alm.coeffs)[nz] / np.abs(alm.coeffs)[nz])))

    # a fixed seed for a statistical check; 31 multipoles at 3 sigma fail by chance ~8% of the time
    r = np.random.default_rng(2024)
    lmax, n = 32, 100
    spec = hm.placeholder_spectrum(lmax)
    acc = np.zeros(lmax + 1)
    for _ in range(n):
        acc += hm.spectrum_from_alm(hm.analyze(hm.synthesize(hm.sample_alm(spec, r), 16), lmax)).cl
    ell = np.arange(2, lmax + 1)
    sigma = np.sqrt(2.0 / (2 * ell + 1)) * spec.cl[2:] / np.sqrt(n)
    pulls = np.abs(acc[2:] / n - spec.cl[2:]) / sigma
    ok = criterion(4, worst <= 1e-2 and pulls.max() <= 3,
                   f"round trip max rel err {worst:.1e} (<= 1e-2); max spectrum pull {pulls.max():.2f} sigma (<= 3)")
    assert ok


def test_c05_variance_identity(criterion):
    hand = uq.combine_samples(np.array([[1.0], [3.0]]), np.array([[0.5], [1.5]]))
    hand_ok = (hand.mean[0], hand.epistemic[0], hand.aleatoric[0], hand.total[0]) == (2.0, 1.0, 1.0, 2.0)
    r = np.random.default_rng(5)
    worst = 0.0
    for T in (2, 5, 25, 50):
        res = uq.combine_samples(r.normal(0, 10, (T, 3, 100)), r.uniform(0.1, 5, (T, 3, 100)))
        worst = max(worst, rel_err(res.epistemic + res.aleatoric, res.total))
    ok = criterion(5, hand_ok and worst <= 1e-12,
                   f"T=2 hand case exact: {hand_ok}; identity max rel err {worst:.1e} (<= 1e-12)")
    assert ok


# ---------------------------------------------------------------------------
# 6, 7: transfer and ILC


def test_c06_weight_transfer(criterion):
    cfg = UNetConfig(nside=4, depth=2, widths=(4, 6), K=2)
    r = np.random.default_rng(6)
    det = UNet(cfg, seed=3)
    det.train()(Tensor(r.standard_normal((4, 9, 192))))  # non-trivial running statistics
    for p in det.parameters().values():
        p.data = p.data + r.normal(0, 0.1, p.data.shape)
    bayes = training.transfer_weights(det, UNet(cfg.replace(bayesian=True), seed=4), seed=1)
    det.eval()
    bayes.eval().set_dropout_mode("frozen")
    worst = 0.0
    for _ in range(5):
        x = r.standard_normal((3, 9, 192))
        worst = max(worst, rel_err(bayes(Tensor(x))[0].data, det(Tensor(x))[0].data))
    assert criterion(6, worst <= 1e-10, f"frozen-mask Bayesian vs deterministic max rel diff {worst:.1e} (<= 1e-10)")


def test_c07_ilc_optimality(criterion):
    cfg = skysim.SimConfig(nside=16)
    x = skysim.simulate_instance(cfg, 7, 0).x
    w = ilc.ilc_weights(x)
    v_opt = float(np.var(ilc.ilc_clean(x, w).values[0]))
    r = np.random.default_rng(7)
    # unit-sum candidates at several distances from the optimum, plus simplex draws
    scales = 10.0 ** r.uniform(-4, 0, 5000)
    u = r.standard_normal((5000, 9)) * scales[:, None]
    near = w + u - u.mean(axis=1, keepdims=True)
    simplex = r.dirichlet(np.ones(9), 5000)
    cands = np.vstack([near, simplex])
    v = np.var(cands @ x.values, axis=1)
    better = float(np.max((v_opt - v) / v_opt))
    sum_err = abs(float(w.sum()) - 1.0)
    ok = criterion(7, better <= 1e-9 and sum_err <= 1e-12,
                   f"best candidate improvement {better:.1e} relative (<= 1e-9) over {len(cands)}; "
                   f"|sum w - 1| = {sum_err:.1e} (<= 1e-12)")
    assert ok


# ---------------------------------------------------------------------------
# 8 to 12: end-to-end run through the CLI


def _run(argv):
    code = main([str(a) for a in argv])
    assert code == 0, argv


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    cfg = root / "e2e.toml"
    cfg.write_text(E2E_TOML)
    ds, det, bayes = root / "ds", root / "det", root / "bayes"
    _run(["simulate", "--config", cfg, "--n", 200, "--seed", 1, "--out", ds])
    _run(["train", "--stage", "deterministic", "--data", ds, "--config", cfg, "--out", det])
    _run(["train", "--stage", "bayesian", "--data", ds, "--config", cfg, "--init", det / "selected.ckpt",
          "--out", bayes])
    _run(["predict", "--model", bayes / "selected.ckpt", "--data", ds, "--config", cfg, "--seed", 3,
          "--out", root / "pred"])
    _run(["ilc", "--data", ds, "--config", cfg, "--out", root / "ilc"])
    common = ["--pred", root / "pred", "--data", ds, "--ilc", root / "ilc", "--config", cfg]
    _run(["evaluate", *common, "--out", root / "report.json"])
    _run(["spectrum", *common, "--out", root / "spectra.csv"])
    return root


@pytest.mark.slow
def test_c08_end_to_end_beats_ilc(e2e, criterion):
    rep = json.loads((e2e / "report.json").read_text())
    ok = (rep["rmse_cnn"] < rep["rmse_ilc"] and rep["pearson_cnn"] >= rep["pearson_ilc"]
          and rep["pearson_cnn"] >= 0.9)
    assert criterion(8, ok, f"RMSE cnn {rep['rmse_cnn']:.3f} < ilc {rep['rmse_ilc']:.3f}; "
                            f"r cnn {rep['pearson_cnn']:.4f} >= ilc {rep['pearson_ilc']:.4f} and >= 0.9 "
                            f"({rep['n_instances']} test maps, {rep['cut_deg']:g} deg cut)")


@pytest.mark.slow
def test_c09_spectral_signatures(e2e, criterion):
    s = uq.SpectralReport.read_csv(e2e / "spectra.csv")
    # D_ell = l(l+1) C_ell / 2 pi, the usual plotting convention; white noise rises as l^2
    ilc_lo, ilc_hi = uq.decile_means(uq.to_dl(s.diff_ilc))
    _, cnn_hi = uq.decile_means(uq.to_dl(s.cnn))
    _, truth_hi = uq.decile_means(uq.to_dl(s.truth))
    ok = ilc_hi > ilc_lo and cnn_hi < truth_hi
    assert criterion(9, ok, f"ILC difference D_l top decile {ilc_hi:.3g} > bottom {ilc_lo:.3g}; "
                            f"CNN D_l top decile {cnn_hi:.4g} < truth {truth_hi:.4g}")


@pytest.mark.slow
def test_c10_calibration(e2e, criterion):
    rep = json.loads((e2e / "report.json").read_text())
    c = rep["calibration_full_sky"]
    cov, corr = c["coverage_1sigma"], c["corr_abs_error_sigma"]
    ok = 0.60 <= cov <= 0.95 and corr > 0.2
    cut = rep["calibration"]
    assert criterion(10, ok, f"full sky: 1 sigma coverage {cov:.3f} in [0.60, 0.95], corr(|err|, sigma) "
                             f"{corr:.3f} > 0.2 (outside the cut: {cut['coverage_1sigma']:.3f}, "
                             f"{cut['corr_abs_error_sigma']:.3f})")


def _chain(root, cfg):
    ds = root / "ds"
    _run(["simulate", "--config", cfg, "--n", 12, "--seed", 11, "--out", ds])
    _run(["train", "--stage", "deterministic", "--data", ds, "--config", cfg, "--out", root / "det"])
    _run(["train", "--stage", "bayesian", "--data", ds, "--config", cfg, "--init", root / "det" / "selected.ckpt",
          "--out", root / "bayes"])
    _run(["predict", "--model", root / "bayes" / "selected.ckpt", "--data", ds, "--T", 4, "--out", root / "pred"])
    _run(["evaluate", "--pred", root / "pred", "--data", ds, "--config", cfg, "--out", root / "report.json"])
    return {name: mapio.directory_hash(root / name) for name in ("ds", "det", "bayes", "pred")} | {
        "report": file_sha256(root / "report.json")}


def test_c11_reproducibility(tmp_path, criterion):
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(TINY_TOML)
    a = _chain(tmp_path / "a", cfg)
    b = _chain(tmp_path / "b", cfg)
    rerun_ok = a == b

    # interrupted after one epoch, then resumed through the CLI
    rc = RunConfig.load(cfg)
    ds = mapio.Dataset(tmp_path / "a" / "ds")
    det = tmp_path / "r_det"
    training.train_deterministic(ds, rc.unet_config(False), rc.train_config("deterministic"), det, stop_after=1)
    _run(["train", "--stage", "deterministic", "--data", ds.root, "--config", cfg, "--out", det, "--resume"])
    bayes = tmp_path / "r_bayes"
    training.train_bayesian(ds, det / "selected.ckpt", rc.train_config("bayesian"), bayes,
                            model_cfg=rc.unet_config(True), logvar_std=rc["training"]["logvar_init_std"],
                            stop_after=2)
    _run(["train", "--stage", "bayesian", "--data", ds.root, "--config", cfg, "--init", det / "selected.ckpt",
          "--out", bayes, "--resume"])
    resume_ok = (mapio.directory_hash(det) == a["det"] and mapio.directory_hash(bayes) == a["bayes"])
    assert criterion(11, rerun_ok and resume_ok,
                     f"rerun hashes identical for {', '.join(a)}: {rerun_ok}; "
                     f"resumed deterministic and Bayesian runs bitwise equal to uninterrupted: {resume_ok}")


@pytest.mark.slow
def test_c11_end_to_end_rerun(e2e, tmp_path, criterion):
    cfg = e2e / "e2e.toml"
    _run(["predict", "--model", e2e / "bayes" / "selected.ckpt", "--data", e2e / "ds", "--config", cfg,
          "--seed", 3, "--out", tmp_path / "pred"])
    _run(["evaluate", "--pred", tmp_path / "pred", "--data", e2e / "ds", "--ilc", e2e / "ilc", "--config", cfg,
          "--out", tmp_path / "report.json"])
    same_pred = mapio.directory_hash(tmp_path / "pred") == mapio.directory_hash(e2e / "pred")
    same_report = (tmp_path / "report.json").read_bytes() == (e2e / "report.json").read_bytes()
    assert criterion(11, same_pred and same_report,
                     f"end-to-end predict rerun identical: {same_pred}, evaluate rerun identical: {same_report}")


def _independent_argmin(path) -> int:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    scores = [0.8 * float(r["val_loss"]) + 0.2 * float(r["train_loss"]) for r in rows]
    best = min(range(len(scores)), key=lambda i: (scores[i], i))
    return int(rows[best]["epoch"])


@pytest.mark.slow
def test_c12_model_selection(e2e, criterion):
    details, ok = [], True
    for stage in ("det", "bayes"):
        d = e2e / stage
        expected = _independent_argmin(d / "history.csv")
        chosen = load_checkpoint(d / "selected.ckpt").meta["epoch"]
        same_bytes = (d / "selected.ckpt").read_bytes() == (d / f"epoch_{expected}.ckpt").read_bytes()
        ok &= chosen == expected and same_bytes
        details.append(f"{stage}: selected epoch {chosen}, independent argmin {expected}")
    assert criterion(12, ok, "; ".join(details))
