"""Command-line entry point: ``bayescmb <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or contract violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import harmonics as hm
from . import ilc as ilcmod
from . import mapio, skysim, training, uq
from .healpix import Resolution, SkyMap, latitude_mask
from .unet import file_sha256, load_checkpoint, model_from_checkpoint

log = logging.getLogger("bayescmb")

QUANTITIES = ("mean", "epistemic", "aleatoric", "total")


class UsageError(Exception):
    """Contract violation by the caller; exit code 2."""


# ---------------------------------------------------------------------------
# helpers


def _load_config(path) -> cfgmod.RunConfig:
    try:
        return cfgmod.RunConfig.load(path)
    except cfgmod.ConfigError as exc:
        raise UsageError(f"config: {exc}") from exc


def _out_dir(path, force: bool) -> Path:
    try:
        return mapio.ensure_output_dir(path, force)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from exc


def _prediction_ids(pred_dir: Path) -> list[int]:
    meta_path = pred_dir / "predictions.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{pred_dir} has no predictions.json")
    return [int(i) for i in mapio.read_json(meta_path)["ids"]]


def _aligned_ids(pred_dir: Path, ds: mapio.Dataset) -> list[int]:
    ids = _prediction_ids(pred_dir)
    known = set(ds.manifest.ids)
    missing = [i for i in ids if i not in known]
    if missing:
        raise UsageError(f"prediction ids {missing[:5]} are not in the dataset")
    return ids


def _load_quantity(pred_dir: Path, name: str, inst_id: int) -> np.ndarray:
    return mapio.load_map(pred_dir / f"{name}_{inst_id}.hmap").values[0]


def _ilc_map(ds: mapio.Dataset, inst_id: int, mask) -> np.ndarray:
    x = SkyMap(Resolution(ds.nside), ds.observation(inst_id))
    return ilcmod.ilc_clean(x, ilcmod.ilc_weights(x, mask)).values[0]


def _ilc_maps(args, ds, ids, rc) -> np.ndarray:
    if getattr(args, "ilc", None):
        d = Path(args.ilc)
        return np.stack([_load_quantity(d, "ilc", i) for i in ids])
    mask = latitude_mask(Resolution(ds.nside), rc["evaluation"]["cut_deg"]) if rc["evaluation"]["ilc_mask"] else None
    return np.stack([_ilc_map(ds, i, mask) for i in ids])


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    rc = _load_config(args.config)
    if args.n < 10:
        raise UsageError(f"--n {args.n}: need at least 10 instances to split 80/10/10")
    out = _out_dir(args.out, args.force)
    instances, manifest = skysim.build_dataset(args.n, rc.sim_config(), args.seed)
    mapio.write_dataset(out, instances, manifest)
    sizes = {k: len(v) for k, v in manifest.splits.items()}
    log.info("wrote %d instances to %s (splits %s)", args.n, out, sizes)
    return 0


def cmd_train(args) -> int:
    rc = _load_config(args.config)
    if args.stage == "bayesian" and not args.init:
        raise UsageError(
            "the bayesian stage needs --init <checkpoint> from the deterministic stage: "
            "run `bayescmb train --stage deterministic` first and pass its selected.ckpt")
    ds = mapio.Dataset(args.data)
    if ds.nside != rc["resolution"]["nside"]:
        raise UsageError(f"dataset nside {ds.nside} != config nside {rc['resolution']['nside']}")
    out = Path(args.out) if args.resume else _out_dir(args.out, args.force)
    tc = rc.train_config(args.stage)
    kw = {"resume": args.resume, "log": log.info}
    if args.stage == "deterministic":
        _, result = training.train_deterministic(ds, rc.unet_config(False), tc, out, **kw)
    else:
        init = load_checkpoint(args.init)
        if init.config.get("bayesian"):
            raise UsageError(f"--init {args.init} is a Bayesian checkpoint; pass a deterministic one")
        _, result = training.train_bayesian(ds, init, tc, out, model_cfg=rc.unet_config(True),
                                            logvar_std=rc["training"]["logvar_init_std"], **kw)
    log.info("selected epoch %d -> %s", result.selected_epoch, result.selected_path)
    return 0


def cmd_predict(args) -> int:
    rc = _load_config(args.config)
    T = rc["inference"]["T"] if args.T is None else args.T
    if T < 2:
        raise UsageError(f"--T {T}: need at least 2 Monte Carlo samples")
    ckpt = load_checkpoint(args.model)
    model = model_from_checkpoint(ckpt)
    ds = mapio.Dataset(args.data)
    if ds.nside != model.cfg.nside:
        raise UsageError(f"model nside {model.cfg.nside} != dataset nside {ds.nside}")
    ids = ds.ids(args.split)
    out = _out_dir(args.out, args.force)
    res = Resolution(ds.nside)
    for k, inst_id in enumerate(ids):
        # one derived seed per instance keeps results independent of batching
        r = uq.mc_predict(model, ds.inputs([inst_id]), T, seed=args.seed * 1_000_003 + inst_id)
        for name in QUANTITIES:
            units = "uK_CMB" if name == "mean" else "uK_CMB^2"
            mapio.save_map(out / f"{name}_{inst_id}.hmap", SkyMap(res, getattr(r, name)[0:1], units=units))
    mapio.write_json(out / "predictions.json", {
        "ids": ids, "split": args.split, "T": T, "seed": args.seed,
        "model_sha256": file_sha256(args.model), "bayesian": bool(model.cfg.bayesian),
    })
    log.info("wrote predictions for %d instances to %s", len(ids), out)
    return 0


def cmd_ilc(args) -> int:
    rc = _load_config(args.config)
    ds = mapio.Dataset(args.data)
    ids = ds.ids(args.split)
    out = _out_dir(args.out, args.force)
    res = Resolution(ds.nside)
    mask = latitude_mask(res, rc["evaluation"]["cut_deg"]) if rc["evaluation"]["ilc_mask"] else None
    weights = {}
    for inst_id in ids:
        x = SkyMap(res, ds.observation(inst_id))
        w = ilcmod.ilc_weights(x, mask)
        weights[str(inst_id)] = [float(v) for v in w]
        mapio.save_map(out / f"ilc_{inst_id}.hmap", ilcmod.ilc_clean(x, w))
    mapio.write_json(out / "weights.json", weights)
    mapio.write_json(out / "predictions.json", {"ids": ids, "split": args.split, "method": "ilc"})
    log.info("wrote ILC maps for %d instances to %s", len(ids), out)
    return 0


def _evaluate(args, rc):
    ds = mapio.Dataset(args.data)
    pred_dir = Path(args.pred)
    ids = _aligned_ids(pred_dir, ds)
    res = Resolution(ds.nside)
    mask = latitude_mask(res, args.cut)
    truths = np.stack([ds.target(i) for i in ids])
    means = np.stack([_load_quantity(pred_dir, "mean", i) for i in ids])
    ilcs = _ilc_maps(args, ds, ids, rc)
    return ds, ids, mask, truths, means, ilcs


def cmd_evaluate(args) -> int:
    rc = _load_config(args.config)
    ds, ids, mask, truths, means, ilcs = _evaluate(args, rc)
    pred_dir = Path(args.pred)
    per, calib, calib_full = [], [], []
    for k, inst_id in enumerate(ids):
        row = {"id": inst_id,
               "rmse_cnn": uq.rmse(means[k], truths[k], mask),
               "rmse_ilc": uq.rmse(ilcs[k], truths[k], mask)}
        try:
            row["pearson_cnn"] = uq.pearson_r(means[k], truths[k], mask)
            row["pearson_ilc"] = uq.pearson_r(ilcs[k], truths[k], mask)
        except ValueError as exc:
            raise UsageError(f"instance {inst_id}: {exc}") from exc
        total = _load_quantity(pred_dir, "total", inst_id)
        if np.all(total[mask.keep] > 0):
            calib.append(uq.calibration(means[k], total, truths[k], mask))
        if np.all(total > 0):
            calib_full.append(uq.calibration(means[k], total, truths[k]))
        per.append(row)

    def averaged(tables):
        return {key: float(np.mean([c[key] for c in tables])) for key in tables[0]} if len(tables) == len(ids) else None

    lmax = args.lmax or rc.spectrum_lmax()
    spectra = uq.spectral_report(means, truths, ilcs, mask, lmax)
    report = uq.EvalReport(
        rmse_cnn=float(np.mean([r["rmse_cnn"] for r in per])),
        pearson_cnn=float(np.mean([r["pearson_cnn"] for r in per])),
        rmse_ilc=float(np.mean([r["rmse_ilc"] for r in per])),
        pearson_ilc=float(np.mean([r["pearson_ilc"] for r in per])),
        calibration=averaged(calib),
        calibration_full_sky=averaged(calib_full),
        cut_deg=float(args.cut),
        n_instances=len(ids),
        per_instance=per,
        spectra=spectra.to_dict(),
    )
    Path(args.out).write_text(report.to_json() + "\n")
    log.info("rmse cnn %.4g ilc %.4g | r cnn %.6f ilc %.6f", report.rmse_cnn, report.rmse_ilc,
             report.pearson_cnn, report.pearson_ilc)
    return 0


def cmd_spectrum(args) -> int:
    rc = _load_config(args.config)
    _, _, mask, truths, means, ilcs = _evaluate(args, rc)
    lmax = args.lmax or rc.spectrum_lmax()
    uq.spectral_report(means, truths, ilcs, mask, lmax).write_csv(args.out)
    log.info("wrote spectra up to lmax=%d to %s", lmax, args.out)
    return 0


def cmd_defaults(args) -> int:
    sys.stdout.write(cfgmod.defaults_text())
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    epilog = "configuration defaults (TOML, override with --config):\n\n" + cfgmod.defaults_text()
    p = argparse.ArgumentParser(
        prog="bayescmb",
        description="Bayesian graph U-Net for CMB recovery on HEALPix maps.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=fn)
        return sp

    s = add("simulate", cmd_simulate, "simulate a dataset of observation/target pairs")
    s.add_argument("--config", help="TOML run config")
    s.add_argument("--n", type=int, required=True, help="number of instances (>= 10)")
    s.add_argument("--seed", type=int, required=True, help="master seed")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--force", action="store_true", help="allow a non-empty output directory")

    s = add("train", cmd_train, "train the deterministic or Bayesian network")
    s.add_argument("--stage", choices=training.STAGES, required=True)
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--config", help="TOML run config")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--init", help="deterministic checkpoint (required for --stage bayesian)")
    s.add_argument("--resume", action="store_true", help="continue from the newest epoch checkpoint in --out")
    s.add_argument("--force", action="store_true", help="allow a non-empty output directory")

    s = add("predict", cmd_predict, "Monte Carlo predictions with uncertainty maps")
    s.add_argument("--model", required=True, help="checkpoint file")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--split", default="test", choices=("train", "validation", "test"))
    s.add_argument("--config", help="TOML run config (inference.T)")
    s.add_argument("--T", type=int, help="MC samples (default: inference.T, 50)")
    s.add_argument("--seed", type=int, default=0, help="dropout sampling seed")
    s.add_argument("--out", required=True, help="prediction directory")
    s.add_argument("--force", action="store_true", help="allow a non-empty output directory")

    s = add("ilc", cmd_ilc, "internal linear combination baseline")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--split", default="test", choices=("train", "validation", "test"))
    s.add_argument("--config", help="TOML run config")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--force", action="store_true", help="allow a non-empty output directory")

    for name, fn, help_ in (("evaluate", cmd_evaluate, "RMSE, correlation, calibration and spectra report (JSON)"),
                            ("spectrum", cmd_spectrum, "mean masked spectra CSV: ell,truth,cnn,ilc,diff_cnn,diff_ilc")):
        s = add(name, fn, help_)
        s.add_argument("--pred", required=True, help="prediction directory")
        s.add_argument("--data", required=True, help="dataset directory")
        s.add_argument("--ilc", help="ILC directory (computed on the fly when omitted)")
        s.add_argument("--config", help="TOML run config")
        s.add_argument("--cut", type=float, default=cfgmod.SCHEMA["evaluation"]["cut_deg"][0],
                       help="galactic cut in degrees (default 30)")
        s.add_argument("--lmax", type=int, default=0, help="spectrum band limit (default 2 * nside)")
        s.add_argument("--out", required=True, help="output file")

    add("defaults", cmd_defaults, "print the default configuration as TOML")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except (training.TrainingDivergedError, FileNotFoundError, OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
