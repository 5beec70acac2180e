"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

Lines are printed as each test runs and again in the terminal summary.
Criteria 9 and 10 share one seeded benchmark run on the default config.
"""
import itertools
import time

import numpy as np
import pytest
import torch
import torch.nn as nn

from conftest import record
from oracles import brute_force_assignment_cost, naive_centered_dft2, naive_frequency_loss
from oracles import naive_heatmap_kl
from udapose import eval_harness as ev
from udapose import experiments as ex
from udapose import freq_ops as fo
from udapose import lcim
from udapose import pose_losses as pl
from udapose import pose_model as pm
from udapose.cli import main
from udapose.config import RunConfig
from udapose.structures import NUM_KEYPOINTS, PoseInstance
from udapose.synthesis import DatasetConfig, make_scenes


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# ---------------------------------------------------------------- 1

def test_acceptance_01_frequency_oracles():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {"spectrum": 0.0, "frequency_loss": 0.0, "heatmap_kl": 0.0}
    for _ in range(20):
        m, n = rng.integers(2, 9, size=2)
        x = rng.random((m, n))
        got, want = fo.spectrum(x).coeffs, naive_centered_dft2(x)
        scale = np.max(np.abs(want))
        worst["spectrum"] = max(worst["spectrum"], np.max(np.abs(got - want)) / scale)

        a, b = rng.random((m, n, 3)), rng.random((m, n, 3))
        worst["frequency_loss"] = max(worst["frequency_loss"],
                                      _rel(fo.frequency_loss(a, b), naive_frequency_loss(a, b)))

        grid = 8
        pa = rng.uniform(0, grid - 1, (NUM_KEYPOINTS, 2))
        pb = rng.uniform(0, grid - 1, (NUM_KEYPOINTS, 2))
        ia = PoseInstance(1, [0.5] * 4, (pa + 0.5) / grid)
        ib = PoseInstance(1, [0.5] * 4, (pb + 0.5) / grid)
        kl = ev.heatmap_kl(ia, ib, sigma=1.0, grid=grid)
        worst["heatmap_kl"] = max(worst["heatmap_kl"],
                                  _rel(kl, naive_heatmap_kl(pa.tolist(), pb.tolist(), 1.0, grid)))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-8 and dt < 10
    detail = ", ".join(f"{k} rel {v:.1e}" for k, v in worst.items())
    assert record(1, ok, f"oracle agreement ({detail}) in {dt:.2f}s")


# ---------------------------------------------------------------- 2

def test_acceptance_02_dhf_invariant():
    rng = np.random.default_rng(102)
    worst_mean, violations = 0.0, 0
    mask = fo.make_highpass_mask(16, 16)
    for _ in range(1000):
        hp = fo.high_pass_filter(rng.random((16, 16, 3)) * rng.uniform(0.05, 1.0), mask)
        ll = rng.random((16, 16, 3)) * rng.uniform(0.01, 0.3)
        out = fo.dhf_correct(hp, ll, clip=False)
        worst_mean = max(worst_mean, float(np.max(np.abs(out.mean(axis=(0, 1)) -
                                                         ll.mean(axis=(0, 1))))))
        with_dhf = int(np.sum((out < 0) | (out > 1)))
        without = int(np.sum((hp < 0) | (hp > 1)))
        violations += with_dhf > without
    ok = worst_mean <= 1e-9 and violations == 0
    assert record(2, ok, f"max mean gap {worst_mean:.1e}, pairs with more clipping {violations}/1000")


# ---------------------------------------------------------------- 3

def test_acceptance_03_ain_and_variants():
    rng = np.random.default_rng(103)
    worst = 0.0
    for _ in range(200):
        img = rng.random((8, 8, 3)) * 0.1 + 0.001
        if img.max() * 0.449 / img.mean() > 1:
            continue
        worst = max(worst, abs(fo.ain_normalize(img).mean() - 0.449))
    # every variant through the toy synthesis pipeline
    cfg = RunConfig()
    for k, v in {"n_well_lit": 4, "n_references": 8, "n_test": 1, "repeats": 1}.items():
        cfg.set("data", k, v)
    for k, v in {"ae_epochs": 1, "epochs": 1, "lr_drop_epoch": 1, "batch_size": 4}.items():
        cfg.set("lcim", k, v)
    well_lit, refs, _ = make_scenes(cfg.dataset())
    ran = []
    for method in fo.NORMALIZATION_METHODS:
        cfg.set("data", "normalization", method)
        syn = ex.make_synthesizer(cfg).fit(np.stack([r.image for r in refs]),
                                           well_lit=np.stack([s.image for s in well_lit]))
        out = syn.synthesize(well_lit[:2], repeats=1, seed=0)
        if all(np.isfinite(s.image).all() for s in out):
            ran.append(method)
    ok = worst <= 1e-6 and len(ran) == len(fo.NORMALIZATION_METHODS) >= 5
    assert record(3, ok, f"AIN mean error {worst:.1e}; variants run: {', '.join(ran)}")


# ---------------------------------------------------------------- 4

def test_acceptance_04_weight_anchors():
    M, N = 8, 8
    c, corner, mid = (fo.frequency_weight(M // 2, N // 2, M, N), fo.frequency_weight(0, 0, M, N),
                      fo.frequency_weight(M // 4, N // 2, M, N))
    ok = c == 0 and abs(corner - 2) <= 1e-9 and abs(mid - 0.7071067811865476) <= 1e-9
    assert record(4, ok, f"W(center)={c}, W(corner)={corner:.12f}, W(M/4,N/2)={mid:.12f}")


# ---------------------------------------------------------------- 5

def _gate(d, seed=0, scale=1.0):
    torch.manual_seed(seed)
    g = nn.Sequential(nn.Linear(2 * d, d), nn.ReLU(), nn.Linear(d, 2)).double()
    with torch.no_grad():
        for p in g.parameters():
            p.mul_(scale)
    return g


def test_acceptance_05_dca_contract():
    d = 16
    g = _gate(d, scale=3.0)
    gen = torch.Generator().manual_seed(5)
    qp = torch.randn(100_000, d, generator=gen, dtype=torch.float64) * 3
    qi = torch.randn(100_000, d, generator=gen, dtype=torch.float64) * 3
    with torch.no_grad():
        q, w = pm.dca_fuse(qp, qi, g)
    sum_err = float((w.sum(-1) - 1).abs().max())
    lo, hi = torch.minimum(qp, qi), torch.maximum(qp, qi)
    convex = bool(torch.all(q >= lo - 1e-12) and torch.all(q <= hi + 1e-12))
    with torch.no_grad():
        g[2].weight.zero_()
        g[2].bias.zero_()
        q, _ = pm.dca_fuse(qp[:1000], qi[:1000], g)
    pinned = float((q - 0.5 * pm.residual_fuse(qp[:1000], qi[:1000])).abs().max())
    ok = sum_err <= 1e-6 and convex and pinned <= 1e-7
    assert record(5, ok, f"gate sum error {sum_err:.1e} over 1e5 tokens, convex {convex}, "
                         f"pinned-gate gap {pinned:.1e}")


# ---------------------------------------------------------------- 6

def _fd_check(f, param, coords, h=1e-6):
    """Max relative gap between autograd and central differences at ``coords``."""
    param.grad = None
    f().backward()
    analytic = param.grad.clone()
    worst = 0.0
    for idx in coords:
        with torch.no_grad():
            param[idx] += h
            up = f().item()
            param[idx] -= 2 * h
            down = f().item()
            param[idx] += h
        num = (up - down) / (2 * h)
        worst = max(worst, abs(num - analytic[idx].item()) / max(abs(num), 1e-8))
    return worst


def _top(grad, n):
    return [np.unravel_index(i, grad.shape)
            for i in torch.argsort(grad.abs().flatten(), descending=True)[:n].tolist()]


def test_acceptance_06_gradient_checks():
    rng = np.random.default_rng(106)
    t0 = time.perf_counter()
    gaps = {}

    a = torch.tensor(rng.random((3, 6, 6)), requires_grad=True)
    b = torch.tensor(rng.random((3, 6, 6)))
    gaps["frequency_loss"] = _fd_check(lambda: fo.frequency_loss(a, b), a,
                                       [(0, 1, 2), (1, 4, 4), (2, 0, 5), (0, 3, 3)])

    torch.manual_seed(0)
    net = lcim.SynthesisNet(lcim.ToyAutoencoder(strides=(2, 2, 2, 2))).freeze_backbone().double()
    z = lcim.encode_multiscale(torch.as_tensor(rng.random((1, 3, 32, 32))), net)
    w = net.adapters.convs[1].weight
    obj = lambda: sum((t ** 2).sum() for t in lcim.lcim_transform(z, net))  # noqa: E731
    w.grad = None
    obj().backward()
    gaps["lcim_adapters"] = _fd_check(obj, w, _top(w.grad, 5))

    g = _gate(8, seed=2)
    qp, qi = (torch.as_tensor(rng.standard_normal((6, 8))) for _ in range(2))
    target = torch.as_tensor(rng.standard_normal((6, 8)))
    obj = lambda: ((pm.dca_fuse(qp, qi, g)[0] - target) ** 2).sum()  # noqa: E731
    gaps["dca_mlp"] = max(_fd_check(obj, p, _top(torch.ones_like(p), 3)) for p in g.parameters())

    Q = 3
    logits = torch.tensor(rng.normal(0, 1, Q), requires_grad=True)
    boxes = torch.tensor(np.c_[rng.uniform(0.3, 0.7, (Q, 2)), rng.uniform(0.2, 0.5, (Q, 2))],
                         requires_grad=True)
    kps = torch.tensor(rng.uniform(0.2, 0.8, (Q, NUM_KEYPOINTS, 2)), requires_grad=True)
    gt_b = torch.tensor([[0.5, 0.5, 0.3, 0.4]], dtype=torch.float64)
    gt_k = (kps[1].detach() + 0.0005)[None]
    gt_v = torch.full((1, NUM_KEYPOINTS), 2)
    wts, k = pl.LossWeights(), pl.OksConstants(k=(0.3,) * NUM_KEYPOINTS)
    obj = lambda: pl.set_loss(torch.sigmoid(logits), boxes, kps, gt_b, gt_k, gt_v,  # noqa: E731
                              wts, k)[0]
    gaps["total_loss"] = max(_fd_check(obj, logits, [(0,), (1,), (2,)]),
                             _fd_check(obj, boxes, [(1, 0), (1, 3), (0, 2)]),
                             _fd_check(obj, kps, [(1, 0, 0), (1, 7, 1)]))
    dt = time.perf_counter() - t0
    ok = max(gaps.values()) <= 1e-3 and dt < 60
    detail = ", ".join(f"{n} {v:.1e}" for n, v in gaps.items())
    assert record(6, ok, f"max relative gap ({detail}) in {dt:.1f}s")


# ---------------------------------------------------------------- 7

def test_acceptance_07_hungarian_optimality():
    rng = np.random.default_rng(107)
    bad = 0
    for i in range(200):
        r, c = rng.integers(1, 7, size=2)
        C = rng.uniform(0, 1, (r, c)) if i % 2 else rng.integers(0, 5, (r, c)).astype(float)
        pairs = pl.hungarian_match(C).pairs
        bad += sum(C[p] for p in pairs) != brute_force_assignment_cost(C)
    assert record(7, bad == 0, f"{200 - bad}/200 assignments equal the enumeration optimum")


# ---------------------------------------------------------------- 8

def test_acceptance_08_loss_spot_values():
    f = pl.focal_loss(0.5, 1, pl.LossWeights(lambda_c=2.0, alpha=0.25, gamma=2.0))
    corner = pl.giou([0, 0, 1, 1], [1, 1, 2, 2])
    nested = pl.giou([0, 0, 2, 2], [0, 0, 1, 1])
    ok = abs(f - 0.0866434) <= 1e-6 and corner == -0.5 and nested == 0.25
    assert record(8, ok, f"focal {f:.7f}, GIoU corner {corner}, nested {nested}")


# ------------------------------------------------------------ 9, 10

@pytest.fixture(scope="module")
def benchmark():
    torch.set_num_threads(1)
    cfg = RunConfig()
    t0 = time.perf_counter()
    rows, ctx = ex.ablation_benchmark(cfg)
    ablation_time = time.perf_counter() - t0
    models = {"dca": ctx["models"]["full"], "residual": ctx["models"]["full_residual"]}
    _, curve = ex.mask_benchmark(cfg, models, ctx["tests"])
    return {"ap": {r["variant"]: r["ap"] for r in rows}, "curve": curve,
            "n_train": {r["variant"]: r["n_train"] for r in rows},
            "n_test": len(ctx["tests"]), "time": ablation_time}


@pytest.mark.slow
def test_acceptance_09_lcim_ablation_ordering(benchmark):
    ap = benchmark["ap"]
    g1, g2 = ap["full"] - ap["z0"], ap["z0"] - ap["well_lit"]
    sizes_ok = benchmark["n_train"]["full"] == 300 and benchmark["n_test"] == 60
    ok = g1 > 0.02 and g2 > 0.02 and benchmark["time"] < 1800 and sizes_ok
    assert record(9, ok, f"AP full {ap['full']:.4f}, z0 {ap['z0']:.4f}, well-lit "
                         f"{ap['well_lit']:.4f}; gaps {g1:+.4f} / {g2:+.4f} (need > 0.02); "
                         f"{benchmark['time'] / 60:.1f} min")


@pytest.mark.slow
def test_acceptance_10_dca_ablation(benchmark):
    ap = benchmark["ap"]
    gap = ap["full"] - ap["full_residual"]
    at = {(r["variant"], r["k"]): r["ap_mean"] for r in benchmark["curve"]}
    dominates = all(at["dca", k] > at["residual", k] for k in (2, 4))
    ok = gap > 0.01 and dominates
    curve = ", ".join(f"k={k}: {at['dca', k]:.4f} vs {at['residual', k]:.4f}" for k in (2, 4))
    assert record(10, ok, f"AP gate {ap['full']:.4f} vs residual {ap['full_residual']:.4f} "
                          f"(gap {gap:+.4f}); masked {curve}")


# ---------------------------------------------------------------- 11

def test_acceptance_11_eval_fidelity():
    from test_eval_harness import _gt, _shifted

    g1, g2 = _gt(0.25, 0.5, seed=1), _gt(0.75, 0.5, seed=2)
    preds = [_shifted(g2, 0.06, 0.7), _shifted(g1, 0.012, 0.9), _shifted(g1, 0.12, 0.8)]
    rep = ev.oks_match_eval([preds], [[g1, g2]], image_sizes=[(64, 64)])
    hand50, hand75 = (51 + 50 * 2 / 3) / 101, 51 / 101
    scenes = make_scenes(DatasetConfig(n_well_lit=10, n_references=0, n_test=0, seed=11))[0]
    perfect = ev.evaluate_samples([[PoseInstance(1.0, i.box, i.keypoints) for i in s.instances]
                                   for s in scenes], scenes).ap_mean
    empty = ev.evaluate_samples([[] for _ in scenes], scenes).ap_mean
    ok = (abs(rep.ap_50 - hand50) <= 1e-6 and abs(rep.ap_75 - hand75) <= 1e-6
          and perfect == 1.0 and empty == 0.0)
    assert record(11, ok, f"AP50 {rep.ap_50:.9f} (hand {hand50:.9f}), AP75 {rep.ap_75:.9f} "
                          f"(hand {hand75:.9f}); perfect {perfect}, empty {empty}")


# ---------------------------------------------------------------- 12

REPRO_INI = """
[data]
n_well_lit = 8
repeats = 1
n_references = 8
n_test = 4
[lcim]
ae_epochs = 1
epochs = 2
lr_drop_epoch = 1
batch_size = 4
[pose]
d_model = 16
n_heads = 2
n_layers = 1
n_queries = 2
ffn_dim = 16
epochs = 2
lr_drop_epoch = 1
batch_size = 4
[eval]
mask_k = 0 2 14
mask_trials = 2
scale_sizes = 4 8
lambda_values = 0.0 0.0004
"""


def test_acceptance_12_reproducible_experiments(tmp_path):
    ini = tmp_path / "small.ini"
    ini.write_text(REPRO_INI)
    mismatched, compared = [], 0
    for which in ("ablation", "mask", "scale", "lambda"):
        for run in ("a", "b"):
            code = main(["experiment", which, "--config", str(ini), "-q", "--out",
                         str(tmp_path / which / run)])
            assert code == 0
        for f in sorted((tmp_path / which / "a").glob("*.csv")):
            compared += 1
            if f.read_bytes() != (tmp_path / which / "b" / f.name).read_bytes():
                mismatched.append(f"{which}/{f.name}")
    ok = not mismatched and compared >= 7
    assert record(12, ok, f"{compared - len(mismatched)}/{compared} CSV files byte-identical "
                          f"across reruns of all four experiment commands")
