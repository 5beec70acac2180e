"""Keypoint AP/AR under the COCO protocol, image similarity metrics, heatmap
KL and the robustness / data-scaling experiments."""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage, stats

from ._validation import check_image, check_same_shape
from .structures import CROWDPOSE_SIGMAS, NUM_KEYPOINTS

logger = logging.getLogger(__name__)

OKS_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_C1, SSIM_C2 = 0.01**2, 0.03**2


@dataclass
class EvalReport:
    ap_mean: float
    ap_50: float
    ap_75: float
    ar_mean: float
    ar_50: float
    ar_75: float
    per_threshold: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def summary(self):
        return {k: getattr(self, k) for k in ("ap_mean", "ap_50", "ap_75", "ar_mean", "ar_50", "ar_75")}


def eval_oks(pred, gt, width, height, sigmas=CROWDPOSE_SIGMAS):
    """Evaluation OKS between a prediction and a ground-truth PoseInstance.

    Uses pixel coordinates, squared distances and the ground-truth box area
    as the scale; only labelled (v > 0) keypoints count.
    """
    vis = gt.visibility > 0 if gt.visibility is not None else np.ones(NUM_KEYPOINTS, bool)
    if not vis.any():
        return 0.0
    wh = np.array([width, height], dtype=np.float64)
    d2 = (((pred.keypoints - gt.keypoints) * wh) ** 2).sum(-1)
    area = gt.box[2] * width * gt.box[3] * height
    var = (2 * np.asarray(sigmas)) ** 2
    e = d2 / (2 * var * (area + np.spacing(1)))
    return float(np.exp(-e)[vis].mean())


def _oks_matrix(preds, gts, width, height, sigmas):
    return np.array([[eval_oks(p, g, width, height, sigmas) for g in gts] for p in preds]).reshape(
        len(preds), len(gts))


def _greedy_match(order, oks, thr):
    """TP flags for detections visited in ``order`` (COCO greedy rule)."""
    n_gt = oks.shape[1]
    taken = np.zeros(n_gt, bool)
    tp = np.zeros(len(order), bool)
    for rank, d in enumerate(order):
        best, best_oks = -1, thr
        for g in range(n_gt):
            if taken[g] or oks[d, g] < best_oks:
                continue
            if best >= 0 and oks[d, g] == best_oks:
                continue
            best, best_oks = g, oks[d, g]
        if best >= 0:
            taken[best] = True
            tp[rank] = True
    return tp


def _interp_ap(tp, scores, n_gt):
    if n_gt == 0:
        return 0.0, 0.0
    if len(tp) == 0:
        return 0.0, 0.0
    order = np.argsort(-np.asarray(scores), kind="mergesort")
    tp = np.asarray(tp)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.spacing(1))
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean()), float(recall[-1])


def oks_match_eval(predictions, gts, thresholds=OKS_THRESHOLDS, image_sizes=None,
                   sigmas=CROWDPOSE_SIGMAS):
    """COCO-style keypoint AP/AR.

    ``predictions`` and ``gts`` are per-image lists of PoseInstance;
    ``image_sizes`` is a list of (width, height) (default (1, 1), i.e.
    normalised units). Detections are matched greedily per image in
    descending score order; precision is integrated at 101 recall points.
    """
    if len(predictions) != len(gts):
        raise ValueError(f"{len(predictions)} prediction lists for {len(gts)} images")
    if image_sizes is None:
        image_sizes = [(1, 1)] * len(gts)
    per_image = []
    for preds, gt, (w, h) in zip(predictions, gts, image_sizes):
        gt = [g for g in gt if g.visibility is None or (g.visibility > 0).any()]
        scores = np.array([p.score for p in preds], dtype=np.float64)
        order = np.argsort(-scores, kind="mergesort")
        per_image.append((order, scores[order], _oks_matrix(preds, gt, w, h, sigmas), len(gt)))
    n_gt = sum(item[3] for item in per_image)
    rows = []
    for thr in thresholds:
        tps, scores = [], []
        for order, sc, oks, _ in per_image:
            tps.append(_greedy_match(order, oks, thr))
            scores.append(sc)
        tp = np.concatenate(tps) if tps else np.zeros(0, bool)
        sc = np.concatenate(scores) if scores else np.zeros(0)
        ap, ar = _interp_ap(tp, sc, n_gt)
        rows.append({"threshold": float(thr), "ap": ap, "ar": ar})
    by = {round(r["threshold"], 2): r for r in rows}

    def pick(t, key):
        return by[t][key] if t in by else float("nan")

    return EvalReport(
        ap_mean=float(np.mean([r["ap"] for r in rows])),
        ap_50=pick(0.5, "ap"), ap_75=pick(0.75, "ap"),
        ar_mean=float(np.mean([r["ar"] for r in rows])),
        ar_50=pick(0.5, "ar"), ar_75=pick(0.75, "ar"),
        per_threshold=rows,
        config={"thresholds": [float(t) for t in thresholds], "sigmas": list(sigmas),
                "n_images": len(gts), "n_gt": n_gt},
    )


def evaluate_samples(predictions, samples, **kwargs):
    """:func:`oks_match_eval` against AnnotatedSample ground truth in pixels."""
    return oks_match_eval(predictions, [s.instances for s in samples],
                          image_sizes=[(s.width, s.height) for s in samples], **kwargs)


# ------------------------------------------------------------ image metrics

def psnr(a, b):
    """PSNR in dB for images on the unit range; identical images give 100."""
    a, b = check_image(a, "a"), check_image(b, "b")
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(1.0 / mse))


def ssim(a, b, window=SSIM_WINDOW):
    """Mean SSIM over all ``window`` x ``window`` patches and channels."""
    a, b = check_image(a, "a"), check_image(b, "b")
    check_same_shape(a, b)
    h, w = a.shape[:2]
    win = (min(window, h), min(window, w))
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mean = lambda img: ndimage.uniform_filter(img, win, mode="constant")
        # keep only windows fully inside the image
        sl = (slice(win[0] // 2, h - (win[0] - 1) // 2), slice(win[1] // 2, w - (win[1] - 1) // 2))
        mx, my = mean(x)[sl], mean(y)[sl]
        vx = mean(x * x)[sl] - mx**2
        vy = mean(y * y)[sl] - my**2
        cxy = mean(x * y)[sl] - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
        den = (mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2)
        vals.append(num / den)
    return float(np.mean(vals))


def _render_heatmap(points, sigma, shape):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    hm = np.zeros((h, w))
    for x, y in points:
        hm += np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma**2))
    return hm


def heatmap_kl(inst_a, inst_b, sigma=1.0, grid=32, eps=1e-12):
    """KL(A || B) between summed Gaussian keypoint heatmaps.

    Instances use normalised coordinates; pixel centres of the ``grid``
    lattice sit at integer positions, so x maps to ``x * W - 0.5``.
    """
    shape = (grid, grid) if np.isscalar(grid) else tuple(grid)
    maps = []
    for name, inst in (("inst_a", inst_a), ("inst_b", inst_b)):
        vis = inst.visibility > 0 if inst.visibility is not None else np.ones(NUM_KEYPOINTS, bool)
        if not vis.any():
            raise ValueError(f"heatmap_kl: {name} has no visible keypoints")
        pts = inst.keypoints[vis] * np.array([shape[1], shape[0]]) - 0.5
        hm = _render_heatmap(pts, sigma, shape)
        hm = np.maximum(hm / hm.sum(), eps)
        maps.append(hm / hm.sum())
    p, q = maps
    return float(np.sum(p * np.log(p / q)))


# -------------------------------------------------------------- experiments

def _mask_squares(img, instances, k, rng, sigma_mask, value):
    h, w = img.shape[:2]
    for inst in instances:
        labelled = np.flatnonzero(inst.visibility > 0)
        chosen = rng.permutation(labelled)[:k]
        for j in chosen:
            x, y = inst.keypoints[j] * np.array([w, h])
            x0, x1 = int(max(0, np.floor(x - sigma_mask))), int(min(w, np.ceil(x + sigma_mask)))
            y0, y1 = int(max(0, np.floor(y - sigma_mask))), int(min(h, np.ceil(y + sigma_mask)))
            img[y0:y1, x0:x1] = value
    return img


def mask_keypoints(sample, k, rng, sigma_mask=1.0):
    """Image with ``k`` random labelled keypoints per person occluded.

    Each occluder is a keypoint-centred square of side ``2 * sigma_mask``
    pixels set to the dark floor. When ``sample.meta`` carries the clean
    scene and its capture parameters the square is blacked out in the scene
    and the capture is re-run with the same noise draw, so the occluder
    carries sensor noise like the rest of the dark image; otherwise the
    pixels are set to the image's per-channel minimum.
    """
    if k == 0:
        return sample.image.copy()
    if "clean" in sample.meta and "degrade" in sample.meta:
        from .toydata import DegradeParams, degrade_lowlight

        scene = _mask_squares(np.array(sample.meta["clean"], dtype=np.float64), sample.instances,
                              k, rng, sigma_mask, 0.0)
        return degrade_lowlight(scene, DegradeParams(**sample.meta["degrade"]))
    img = sample.image.copy()
    floor = img.reshape(-1, img.shape[2]).min(0)
    return _mask_squares(img, sample.instances, k, rng, sigma_mask, floor)


def mask_experiment(models, samples, predict_fn, k_values=tuple(range(0, 15, 2)), trials=5,
                    seed=0, sigma_mask=1.0):
    """AP@.50:.95 under keypoint-region masking.

    ``models`` maps a variant name to a model; ``predict_fn(model, images)``
    returns per-image PoseInstance lists. Returns ``(rows, curve)`` where rows
    are (variant, k, trial, ap) and curve is (variant, k, ap_mean).
    """
    rows = []
    for k in k_values:
        for t in range(trials):
            rng = np.random.default_rng([seed, k, t])
            images = np.stack([mask_keypoints(s, k, rng, sigma_mask) for s in samples])
            for name, model in models.items():
                rep = evaluate_samples(predict_fn(model, images), samples)
                rows.append({"variant": name, "k": k, "trial": t, "ap": rep.ap_mean})
    curve = []
    for name in models:
        for k in k_values:
            aps = [r["ap"] for r in rows if r["variant"] == name and r["k"] == k]
            curve.append({"variant": name, "k": k, "ap_mean": float(np.mean(aps))})
    return rows, curve


def masking_trend(rows, variant):
    """Spearman (rho, p) between k and AP over all trials of one variant."""
    sel = [r for r in rows if r["variant"] == variant]
    aps = [r["ap"] for r in sel]
    if len(set(aps)) < 2:
        return float("nan"), float("nan")
    res = stats.spearmanr([r["k"] for r in sel], aps)
    return float(res.statistic), float(res.pvalue)


def scaling_experiment(train_samples, test_samples, sizes, fit_fn, predict_fn):
    """(size, AP) rows; each model is trained on the first ``size`` samples.

    ``fit_fn(samples)`` returns a trained model.
    """
    rows = []
    for n in sizes:
        if n > len(train_samples):
            raise ValueError(f"size {n} exceeds the {len(train_samples)} available samples")
        model = fit_fn(train_samples[:n])
        rep = evaluate_samples(predict_fn(model, np.stack([s.image for s in test_samples])),
                               test_samples)
        rows.append({"size": n, "ap": rep.ap_mean, "ap_50": rep.ap_50, "ar": rep.ar_mean})
        logger.info("scaling: size %d -> AP %.4f", n, rep.ap_mean)
    return rows


def check_thresholds(thresholds):
    t = np.asarray(thresholds, dtype=np.float64)
    if t.ndim != 1 or len(t) == 0 or np.any((t <= 0) | (t > 1)):
        raise ValueError("thresholds must be a non-empty list in (0, 1]")
    return tuple(t)
