"""End-to-end experiment drivers shared by the CLI and the acceptance suite.

Each driver takes a :class:`~udapose.config.RunConfig` and returns plain
row dicts; writers turn them into CSV and PNG artifacts.
"""
import copy
import csv
import logging
import time

import numpy as np
import torch

from . import eval_harness, lcim, synthesis
from .estimators import LowLightSynthesizer, PoseEstimator, substream

logger = logging.getLogger(__name__)


# ------------------------------------------------------------------ factories

def make_synthesizer(cfg, lambda_freq=None, injection=None):
    lc, d = cfg["lcim"], cfg["data"]
    return LowLightSynthesizer(
        strides=tuple(lc["strides"]), ae_epochs=lc["ae_epochs"], ae_lr=lc["ae_lr"],
        ae_batch_size=lc["ae_batch_size"], epochs=lc["epochs"], lr_initial=lc["lr_initial"],
        lr_late=lc["lr_late"], lr_drop_epoch=lc["lr_drop_epoch"], batch_size=lc["batch_size"],
        lambda_freq=lc["lambda_freq"] if lambda_freq is None else lambda_freq,
        cutoff_radius=d["cutoff_radius"], normalization=d["normalization"],
        injection=d["injection"] if injection is None else injection, random_state=cfg.seed)


def make_pose(cfg, **overrides):
    p = cfg["pose"]
    kw = {k: p[k] for k in ("d_model", "n_heads", "n_layers", "n_queries", "n_points", "stride",
                            "ffn_dim", "use_dca", "batch_norm", "epochs", "lr", "lr_drop_epoch",
                            "weight_decay", "batch_size", "grad_clip", "hflip")}
    kw.update(loss_weights=cfg.loss_weights(), oks_constants=cfg.oks(), random_state=cfg.seed)
    kw.update(overrides)
    return PoseEstimator(**kw)


def predict_fn(est, images):
    return est.predict(images)


def _report_row(name, rep, n_train):
    return {"variant": name, "n_train": n_train, "ap": rep.ap_mean, "ap_50": rep.ap_50,
            "ap_75": rep.ap_75, "ar": rep.ar_mean}


# ----------------------------------------------------------------- ablations

ABLATION_VARIANTS = {
    # name: (training set, DCA on)
    "well_lit": ("well_lit", True),
    "z0": ("z0", True),
    "full": ("full", True),
    "full_residual": ("full", False),
}


def prepare_data(cfg, injections=("full",), jobs=1):
    """Scenes plus synthetic training sets for the requested injection modes.

    ``sets`` always holds ``well_lit`` (each image repeated as often as the
    synthetic set repeats it, so every set has the same size). The
    synthesizer is only fitted when an injection mode is requested.
    """
    dcfg = cfg.dataset()
    well_lit, refs, tests = synthesis.make_scenes(dcfg)
    ctx = {"well_lit": well_lit, "refs": refs, "tests": tests, "synthesizer": None,
           "sets": {"well_lit": [s for s in well_lit for _ in range(dcfg.repeats)]},
           "timings": {}}
    if injections:
        t = time.perf_counter()
        syn = make_synthesizer(cfg).fit(np.stack([r.image for r in refs]),
                                        well_lit=np.stack([s.image for s in well_lit]))
        for inj in injections:
            ctx["sets"][inj] = syn.synthesize(well_lit, repeats=dcfg.repeats, seed=cfg.seed,
                                              injection=inj, jobs=jobs)
        ctx["synthesizer"] = syn
        ctx["timings"]["synthesizer"] = time.perf_counter() - t
    return ctx


def ablation_benchmark(cfg, variants=tuple(ABLATION_VARIANTS), jobs=1):
    """Train one pose model per variant and evaluate each on the held-out
    low-light test split.

    ``well_lit`` trains on the well-lit images, ``z0`` on synthesis from the
    style latent alone, ``full`` on synthesis with all four injected levels,
    and ``full_residual`` on the same data with the plain residual fusion in
    place of the gate. All variants share the pose seed.

    Returns ``(rows, context)``; ``context`` keeps the data, the fitted
    estimators and wall-clock timings.
    """
    unknown = set(variants) - set(ABLATION_VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants {sorted(unknown)}")
    t0 = time.perf_counter()
    needed = [d for d in ("z0", "full") if any(ABLATION_VARIANTS[v][0] == d for v in variants)]
    ctx = prepare_data(cfg, needed, jobs=jobs)
    rows, ctx["models"] = [], {}
    for name in variants:
        data, dca = ABLATION_VARIANTS[name]
        t = time.perf_counter()
        est = make_pose(cfg, use_dca=dca).fit(ctx["sets"][data])
        rep = est.evaluate(ctx["tests"])
        ctx["timings"][name] = time.perf_counter() - t
        rows.append(_report_row(name, rep, len(ctx["sets"][data])))
        ctx["models"][name] = est
        logger.info("ablation %s: AP %.4f", name, rep.ap_mean)
    ctx["timings"]["total"] = time.perf_counter() - t0
    return rows, ctx


def mask_benchmark(cfg, models, tests):
    """Masking curves for named fitted estimators; returns (rows, curve)."""
    e = cfg["eval"]
    return eval_harness.mask_experiment(models, tests, predict_fn, k_values=e["mask_k"],
                                        trials=e["mask_trials"],
                                        seed=substream(cfg.seed, "eval", "mask"),
                                        sigma_mask=e["sigma_mask"])


def scale_benchmark(cfg, synthetic, tests, sizes=None):
    sizes = cfg["eval"]["scale_sizes"] if sizes is None else sizes
    return eval_harness.scaling_experiment(
        synthetic, tests, sizes, fit_fn=lambda smp: make_pose(cfg).fit(smp), predict_fn=predict_fn)


def _reconstruction_psnr(net, images, cfg):
    """Mean PSNR between normalised captures and their LCIM reconstructions."""
    targets, hps = lcim.prepare_lowlight(images, cfg["data"]["cutoff_radius"],
                                         cfg["data"]["normalization"])
    with torch.no_grad():
        f = lcim.lcim_transform(lcim.encode_multiscale(lcim.to_tensor(hps), net), net)
        out = lcim.to_images(lcim.decode_with_injection(
            lcim.encode_latent(lcim.to_tensor(targets), net), f, net))
    return float(np.mean([eval_harness.psnr(a, b) for a, b in zip(targets, out)]))


def lambda_sweep(cfg, downstream=True, jobs=1):
    """For each frequency-loss weight: LCIM reconstruction PSNR on the
    held-out low-light captures and, when ``downstream``, pose AP after
    training on the resulting synthetic set."""
    dcfg = cfg.dataset()
    well_lit, refs, tests = synthesis.make_scenes(dcfg)
    base = make_synthesizer(cfg).fit_backbone(np.stack([s.image for s in well_lit]))
    rows = []
    test_imgs = np.stack([s.image for s in tests])
    for lam in cfg["eval"]["lambda_values"]:
        syn = copy.deepcopy(base).set_params(lambda_freq=float(lam))
        syn.fit(np.stack([r.image for r in refs]))
        row = {"lambda": float(lam), "l_mse": syn.history_[-1]["l_mse"],
               "l_freq": syn.history_[-1]["l_freq"],
               "psnr": _reconstruction_psnr(syn.net_, test_imgs, cfg), "ap": float("nan")}
        if downstream:
            synthetic = syn.synthesize(well_lit, repeats=dcfg.repeats, seed=cfg.seed, jobs=jobs)
            row["ap"] = make_pose(cfg).fit(synthetic).evaluate(tests).ap_mean
        rows.append(row)
        logger.info("lambda %g: %s", lam, row)
    return rows


# ------------------------------------------------------------------- writers

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, rows, fields=None):
    """CSV with repr-formatted floats (byte-stable across reruns)."""
    fields = fields or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(f, "")) for f in fields])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_curves(path, curve, x="k", y="ap_mean", group="variant", xlabel="masked keypoints",
                ylabel="AP"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for name in dict.fromkeys(r[group] for r in curve):
        pts = [(r[x], r[y]) for r in curve if r[group] == name]
        ax.plot(*zip(*pts), marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_xy(path, rows, x, ys, xlabel=None, ylabel=None, logx=False):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for y in ys:
        ax.plot([r[x] for r in rows], [r[y] for r in rows], marker="o", label=y)
    if logx:
        ax.set_xscale("symlog", linthresh=1e-5)
    ax.set_xlabel(xlabel or x)
    ax.set_ylabel(ylabel or "")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
