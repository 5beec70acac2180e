"""``udapose`` command-line entry point.

Exit codes: 0 success, 2 usage or input error, 1 internal error.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from .config import ConfigError, default_ini, load_config

logger = logging.getLogger("udapose")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2

LCIM_FIELDS = ["epoch", "total", "l_mse", "l_freq", "lr"]
AE_FIELDS = ["epoch", "mse"]
POSE_FIELDS = ["step", "epoch", "L_total", "L_h", "L_c", "L_k", "matched_count"]
PROBE_FIELDS = ["image", "layer", "instance", "keypoint", "w_pose", "w_image", "norm_ratio",
                "undefined"]


class UsageError(Exception):
    """Bad input from the operator; reported with exit code 2."""


# ------------------------------------------------------------------ helpers

def _resolve(args):
    cfg = load_config(args.config, args.set or (), os.environ)
    if args.seed is not None:
        cfg.set("run", "seed", str(args.seed))
    return cfg.validate()


def _echo_config(cfg, out_dir=None):
    text = cfg.to_ini()
    if out_dir is not None:
        (Path(out_dir) / "config.ini").write_text(text)
    logger.info("resolved config:\n%s", text.rstrip())


def _out_dir(path):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory {p} does not exist")
    return p


def _need_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _load_split(data, split):
    from .synthesis import load_split

    try:
        samples = load_split(data, split)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    if not samples:
        raise UsageError(f"split {split!r} under {data} is empty")
    return samples


def _atomic_save(est, path, extra):
    tmp = Path(str(path) + ".tmp")
    est.save(tmp, extra=extra)
    os.replace(tmp, path)


def _append_rows(path, rows, fields):
    from .experiments import _fmt

    new = not path.exists()
    with open(path, "a") as fh:
        if new:
            fh.write(",".join(fields) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[f]) for f in fields) + "\n")


def _truncate_rows(path, key, last):
    """Drop CSV rows whose ``key`` column exceeds ``last`` (an interrupted epoch)."""
    from .experiments import read_csv, write_csv

    if not path.exists():
        return
    with open(path) as fh:
        fields = fh.readline().strip().split(",")
    rows = [r for r in read_csv(path) if int(r[key]) <= last]
    write_csv(path, rows, fields)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ----------------------------------------------------------------- commands

def cmd_build_data(args, cfg):
    from .estimators import LowLightSynthesizer
    from .synthesis import build_dataset

    out = _out_dir(args.out)
    params = None
    if args.lcim:
        params = LowLightSynthesizer.load(_need_file(args.lcim, "checkpoint")).net_
    _echo_config(cfg, out)
    manifest = build_dataset(cfg.dataset(), out, params)
    print(f"wrote {sum(manifest['counts'].values())} images to {out}")
    print(f"manifest sha256 {_sha256(out / 'manifest.json')}")
    return EXIT_OK


def cmd_train_lcim(args, cfg):
    import numpy as np

    from .estimators import LowLightSynthesizer
    from .experiments import make_synthesizer, write_csv

    data = _need_dir(args.data, "data")
    out = _out_dir(args.out)
    refs = np.stack([s.image for s in _load_split(data, "references")])
    ckpt, loss_csv = out / "lcim.ckpt", out / "lcim_loss.csv"
    est = make_synthesizer(cfg)
    _echo_config(cfg, out)

    def on_epoch(row, net, opt):
        est.optimizer_ = opt
        _append_rows(loss_csv, [row], LCIM_FIELDS)
        _atomic_save(est, ckpt, {"epoch": row["epoch"]})

    t0 = time.perf_counter()
    if args.resume:
        if not ckpt.exists():
            raise UsageError(f"--resume given but {ckpt} does not exist")
        loaded = LowLightSynthesizer.load(ckpt)
        last = int(loaded.header_["extra"]["epoch"])
        _truncate_rows(loss_csv, "epoch", last)
        est.net_, est.references_ = loaded.net_, refs
        if last >= est.epochs:
            print(f"{ckpt} already trained for {last} epochs")
            return EXIT_OK
        logger.info("resuming LCIM training at epoch %d", last + 1)
        est.resume(last + 1, loaded.optimizer_state_, callback=on_epoch)
    else:
        loss_csv.unlink(missing_ok=True)
        well_lit = np.stack([s.image for s in _load_split(data, "well_lit")])
        est.fit_backbone(well_lit)
        write_csv(out / "autoencoder_loss.csv", est.ae_history_, AE_FIELDS)
        est.fit(refs, callback=on_epoch)
    print(f"LCIM trained in {time.perf_counter() - t0:.1f}s; checkpoint {ckpt}")
    return EXIT_OK


def cmd_synthesize(args, cfg):
    import numpy as np

    from .estimators import LowLightSynthesizer
    from .synthesis import write_synthetic

    data = _need_dir(args.data, "data")
    est = LowLightSynthesizer.load(_need_file(args.lcim, "checkpoint"))
    out = _out_dir(args.out or data)
    _echo_config(cfg, out)
    well_lit = _load_split(data, "well_lit")
    refs = np.stack([s.image for s in _load_split(data, "references")])
    d = cfg["data"]
    samples = est.synthesize(well_lit, references=refs, repeats=d["repeats"], seed=cfg.seed,
                             injection=d["injection"], jobs=args.jobs)
    write_synthetic(out, samples, cfg.seed, d["bit_depth"])
    manifest = out / "manifest.json"
    if manifest.exists():
        doc = json.loads(manifest.read_text())
        doc["counts"]["synthetic"] = len(samples)
        manifest.write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(f"wrote {len(samples)} synthetic images to {out / 'synthetic'}")
    return EXIT_OK


def cmd_train_pose(args, cfg):
    from .estimators import PoseEstimator
    from .experiments import make_pose

    data = _need_dir(args.data, "data")
    out = _out_dir(args.out)
    samples = _load_split(data, args.split)
    ckpt, loss_csv = out / "pose.ckpt", out / "pose_loss.csv"
    est = make_pose(cfg)
    _echo_config(cfg, out)

    def on_epoch(rows, model, opt):
        est.optimizer_ = opt
        _append_rows(loss_csv, rows, POSE_FIELDS)
        _atomic_save(est, ckpt, {"epoch": rows[-1]["epoch"], "split": args.split})

    t0 = time.perf_counter()
    if args.resume:
        if not ckpt.exists():
            raise UsageError(f"--resume given but {ckpt} does not exist")
        loaded = PoseEstimator.load(ckpt)
        last = int(loaded.header_["extra"]["epoch"])
        _truncate_rows(loss_csv, "epoch", last)
        est.model_ = loaded.model_
        if last >= est.epochs:
            print(f"{ckpt} already trained for {last} epochs")
            return EXIT_OK
        logger.info("resuming pose training at epoch %d", last + 1)
        est.resume(samples, last + 1, loaded.optimizer_state_, callback=on_epoch)
    else:
        loss_csv.unlink(missing_ok=True)
        est.fit(samples, callback=on_epoch)
    print(f"pose model trained in {time.perf_counter() - t0:.1f}s; checkpoint {ckpt}")
    return EXIT_OK


def _read_predictions(path, samples):
    """COCO-style result list keyed by ``image_id`` (the split's annotation image ids)."""
    from .structures import PoseInstance

    try:
        doc = json.loads(Path(path).read_text())
        preds = [[] for _ in samples]
        for det in doc:
            i = int(det["image_id"])
            if not 0 <= i < len(samples):
                raise UsageError(f"prediction for unknown image_id {det['image_id']}")
            s = samples[i]
            inst = PoseInstance.from_json(det, s.width, s.height)
            inst.visibility = None
            inst.score = float(det["score"])
            preds[i].append(inst)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"malformed predictions file {path}: {exc}") from None
    return preds


def _write_predictions(path, preds, samples):
    out = []
    for i, (pl, s) in enumerate(zip(preds, samples)):
        for p in pl:
            rec = p.to_json(s.width, s.height)
            rec.pop("num_keypoints")
            out.append({"image_id": i, **rec})
    Path(path).write_text(json.dumps(out))


def cmd_eval(args, cfg):
    from .estimators import PoseEstimator
    from .experiments import write_csv

    data = _need_dir(args.data, "data")
    samples = _load_split(data, args.split)
    if (args.model is None) == (args.predictions is None):
        raise UsageError("give exactly one of --model or --predictions")
    if args.model:
        est = PoseEstimator.load(_need_file(args.model, "checkpoint"))
        preds = est.predict(samples)
    else:
        preds = _read_predictions(_need_file(args.predictions, "predictions file"), samples)
    from .eval_harness import evaluate_samples

    report = evaluate_samples(preds, samples)
    if args.out:
        out = _out_dir(args.out)
        _echo_config(cfg, out)
        write_csv(out / "eval_thresholds.csv", report.per_threshold, ["threshold", "ap", "ar"])
        write_csv(out / "eval_summary.csv", [report.summary()])
        (out / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=1))
        if args.model:
            _write_predictions(out / "predictions.json", preds, samples)
    s = report.summary()
    print(" ".join(f"{k} {s[k]:.4f}" for k in ("ap_mean", "ap_50", "ap_75", "ar_mean")))
    print(f"AP {report.ap_mean}")
    return EXIT_OK


def cmd_probe(args, cfg):
    from . import pose_model
    from .estimators import PoseEstimator
    from .experiments import write_csv

    data = _need_dir(args.data, "data")
    samples = _load_split(data, args.split)[:args.images]
    est = PoseEstimator.load(_need_file(args.model, "checkpoint"))
    out = _out_dir(args.out)
    _echo_config(cfg, out)
    rows, summary = [], []
    for i, s in enumerate(samples):
        _, tables = pose_model.forward(s.image, est.model_)
        rows += [{"image": i, **r} for r in tables["rows"]]
        summary += [{"image": i, **r} for r in tables["summary"]]
    write_csv(out / "probe.csv", rows, PROBE_FIELDS)
    write_csv(out / "probe_summary.csv", summary,
              ["image", "layer", "keypoint", "w_pose", "w_image", "norm_ratio"])
    print(f"wrote {len(rows)} probe rows to {out / 'probe.csv'}")
    return EXIT_OK


def cmd_experiment(args, cfg):
    from . import eval_harness, experiments as ex

    out = _out_dir(args.out)
    _echo_config(cfg, out)
    t0 = time.perf_counter()
    timings = {}
    if args.which in ("ablation", "mask"):
        variants = (tuple(ex.ABLATION_VARIANTS) if args.which == "ablation"
                    else ("full", "full_residual"))
        rows, ctx = ex.ablation_benchmark(cfg, variants=variants, jobs=args.jobs)
        timings = dict(ctx["timings"])
        ex.write_csv(out / "ablation.csv", rows)
        for r in rows:
            print(f"{r['variant']:>14s}  AP {r['ap']:.4f}  AP50 {r['ap_50']:.4f}")
        if args.which == "mask":
            models = {"dca": ctx["models"]["full"], "residual": ctx["models"]["full_residual"]}
            raw, curve = ex.mask_benchmark(cfg, models, ctx["tests"])
            ex.write_csv(out / "mask_raw.csv", raw)
            ex.write_csv(out / "mask_curve.csv", curve)
            trend = []
            for name in models:
                rho, p = eval_harness.masking_trend(raw, name)
                trend.append({"variant": name, "spearman_rho": rho, "p_value": p})
            ex.write_csv(out / "mask_trend.csv", trend)
            ex.plot_curves(out / "mask.png", curve)
            for r in curve:
                print(f"{r['variant']:>9s} k={r['k']:2d}  AP {r['ap_mean']:.4f}")
    elif args.which == "scale":
        ctx = ex.prepare_data(cfg, ("full",), jobs=args.jobs)
        table = ex.scale_benchmark(cfg, ctx["sets"]["full"], ctx["tests"])
        ex.write_csv(out / "scale.csv", table)
        ex.plot_xy(out / "scale.png", table, "size", ["ap"], xlabel="synthetic images",
                   ylabel="AP")
        for r in table:
            print(f"size {r['size']:4d}  AP {r['ap']:.4f}")
    elif args.which == "lambda":
        table = ex.lambda_sweep(cfg, downstream=not args.no_downstream, jobs=args.jobs)
        ex.write_csv(out / "lambda.csv", table)
        ex.plot_xy(out / "lambda.png", table, "lambda", ["psnr"], ylabel="PSNR (dB)", logx=True)
        for r in table:
            print(f"lambda {r['lambda']:g}  PSNR {r['psnr']:.3f}  AP {r['ap']:.4f}")
    timings["total"] = time.perf_counter() - t0
    (out / "timings.json").write_text(json.dumps(timings, indent=1))
    return EXIT_OK


def cmd_config(args, cfg):
    print(default_ini() if args.defaults else cfg.to_ini(), end="")
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run options")
    g.add_argument("--config", metavar="PATH", help="INI config file (defaults when omitted)")
    g.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable; wins over the file")
    g.add_argument("--seed", type=int, help="run seed; wins over UDAPOSE_SEED and the file")
    g.add_argument("--jobs", type=int, default=1, metavar="N",
                   help="worker threads for per-sample work (default 1)")
    g.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    g.add_argument("-q", "--quiet", action="store_true", help="warnings only")

    parser = argparse.ArgumentParser(
        prog="udapose",
        description="Low-light pose data synthesis, pose training and evaluation on toy scenes. "
                    "UDAPOSE_SEED overrides the config seed.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("build-data", parents=[common], help="render the toy dataset splits",
                       description="Write well-lit, reference and test splits plus manifest.json. "
                                   "With --lcim also write the synthetic split.")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--lcim", metavar="CKPT", help="fitted synthesizer checkpoint (optional)")
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train-lcim", parents=[common], help="pre-train the autoencoder and fit LCIM",
                       description="Writes lcim.ckpt, lcim_loss.csv and autoencoder_loss.csv.")
    p.add_argument("--data", required=True, help="dataset directory from build-data")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true",
                   help="continue from OUT/lcim.ckpt, appending to the loss CSV")
    p.set_defaults(func=cmd_train_lcim)

    p = sub.add_parser("synthesize", parents=[common], help="write the synthetic low-light split",
                       description="Pairs every well-lit image with data.repeats drawn references.")
    p.add_argument("--data", required=True, help="dataset directory from build-data")
    p.add_argument("--lcim", required=True, metavar="CKPT", help="synthesizer checkpoint")
    p.add_argument("--out", help="dataset directory to write into (default: --data)")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train-pose", parents=[common], help="train the pose model",
                       description="Writes pose.ckpt and pose_loss.csv (one row per step).")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--split", default="synthetic", choices=["synthetic", "well_lit"],
                   help="training split (default synthetic)")
    p.add_argument("--resume", action="store_true",
                   help="continue from OUT/pose.ckpt, appending to the loss CSV")
    p.set_defaults(func=cmd_train_pose)

    p = sub.add_parser("eval", parents=[common], help="OKS AP/AR on a split",
                       description="Evaluate a pose checkpoint or a COCO-style predictions file.")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", help="split to evaluate (default test)")
    p.add_argument("--model", metavar="CKPT", help="pose checkpoint")
    p.add_argument("--predictions", metavar="JSON",
                   help="COCO-style results: image_id, bbox, keypoints, score")
    p.add_argument("--out", help="report directory (optional)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", parents=[common], help="gate-weight and norm-ratio tables",
                       description="Per layer, instance and keypoint token: DCA gate weights "
                                   "and the image/pose query norm ratio.")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", help="split to probe (default test)")
    p.add_argument("--model", required=True, metavar="CKPT", help="pose checkpoint")
    p.add_argument("--images", type=int, default=1, help="number of images (default 1)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("experiment", parents=[common], help="run a seeded experiment end to end",
                       description="ablation: well-lit / z0 / full / full-residual AP. "
                                   "mask: keypoint masking curves with and without the gate. "
                                   "scale: AP vs synthetic set size. "
                                   "lambda: frequency-loss weight sweep.")
    p.add_argument("which", choices=["ablation", "mask", "scale", "lambda"])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-downstream", action="store_true",
                   help="lambda: skip pose training, report reconstruction PSNR only")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("config", parents=[common], help="print the resolved config",
                       description="Print the resolved config, or the documented defaults.")
    p.add_argument("--defaults", action="store_true", help="documented default config")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else
                                                logging.INFO if args.verbose else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = _resolve(args)
        import torch

        torch.set_num_threads(1)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"udapose {stage}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"udapose {stage}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print(f"udapose {stage}: interrupted", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        logger.debug("internal error", exc_info=True)
        print(f"udapose {stage}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
