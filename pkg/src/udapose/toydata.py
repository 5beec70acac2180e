"""Procedural stick-figure scenes and a physically flavoured darkening model.

These stand in for an annotated well-lit pose dataset and for unpaired real
low-light captures.
"""
from dataclasses import dataclass

import cv2
import numpy as np

from ._validation import check_image, check_random_state
from .structures import NUM_KEYPOINTS, SKELETON, AnnotatedSample, PoseInstance

_SS = 4  # supersampling factor for anti-aliased rendering


@dataclass
class SceneConfig:
    height: int = 32
    width: int = 32
    min_persons: int = 1
    max_persons: int = 3
    min_person_height: float = 0.5
    max_person_height: float = 0.85
    limb_thickness: float = 0.09

    def __post_init__(self):
        if not 1 <= self.min_persons <= self.max_persons <= 3:
            raise ValueError("persons per image must satisfy 1 <= min <= max <= 3")
        if self.height < 8 or self.width < 8:
            raise ValueError("scene must be at least 8x8")


@dataclass
class DegradeParams:
    brightness_scale: float = 0.1
    gamma: float = 1.0
    read_noise_sigma: float = 0.01
    shot_noise_gain: float = 0.05
    quant_levels: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.brightness_scale <= 1:
            raise ValueError("brightness_scale must be in (0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.read_noise_sigma < 0 or self.shot_noise_gain < 0:
            raise ValueError("noise parameters must be >= 0")
        if self.quant_levels < 2:
            raise ValueError("quant_levels must be >= 2")

    @classmethod
    def sample(cls, rng, seed=None):
        """Draw a random low-light condition."""
        return cls(
            brightness_scale=float(rng.uniform(0.04, 0.15)),
            gamma=float(rng.uniform(1.0, 1.6)),
            read_noise_sigma=float(rng.uniform(0.004, 0.012)),
            shot_noise_gain=float(rng.uniform(0.03, 0.08)),
            quant_levels=int(rng.choice([64, 128, 256])),
            seed=int(rng.integers(2**31)) if seed is None else seed,
        )


def _pose(rng, cx, top, height):
    """Keypoints (14, 2) in pixels for a randomly articulated figure."""
    h = height
    head = np.array([cx + rng.normal(0, 0.02) * h, top + 0.07 * h])
    neck = np.array([cx, top + 0.17 * h])
    sw, hw = 0.13 * h, 0.08 * h
    tilt = rng.normal(0, 0.08)
    down = np.array([np.sin(tilt), np.cos(tilt)])
    side = np.array([down[1], -down[0]])
    l_sh, r_sh = neck + side * sw + down * 0.03 * h, neck - side * sw + down * 0.03 * h
    pelvis = neck + down * 0.33 * h
    l_hip, r_hip = pelvis + side * hw, pelvis - side * hw

    def limb(start, base_angle, length):
        ang = base_angle + rng.normal(0, 0.5)
        return start + length * np.array([np.sin(ang), np.cos(ang)])

    upper, fore = 0.16 * h, 0.15 * h
    thigh, shin = 0.22 * h, 0.2 * h
    l_el = limb(l_sh, 0.5, upper)
    r_el = limb(r_sh, -0.5, upper)
    l_wr = limb(l_el, rng.uniform(-1.2, 1.6), fore)
    r_wr = limb(r_el, -rng.uniform(-1.2, 1.6), fore)
    l_kn = limb(l_hip, 0.15, thigh)
    r_kn = limb(r_hip, -0.15, thigh)
    l_an = limb(l_kn, 0.05, shin)
    r_an = limb(r_kn, -0.05, shin)
    return np.stack([l_sh, r_sh, l_el, r_el, l_wr, r_wr, l_hip, r_hip,
                     l_kn, r_kn, l_an, r_an, head, neck])


def _background(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.25, 0.55, size=3)
    grad = rng.normal(0, 0.15, size=(2, 3))
    bg = base + xx[..., None] * grad[0] + yy[..., None] * grad[1]
    for _ in range(3):
        f = rng.uniform(1.5, 6.0, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.06)
        bg = bg + amp * np.sin(2 * np.pi * (f[0] * xx + f[1] * yy) + ph)[..., None]
    return np.clip(bg, 0.05, 0.8)


def _render_person(kps, thickness, h, w):
    """Anti-aliased coverage mask in [0, 1] at image resolution."""
    canvas = np.zeros((h * _SS, w * _SS), np.float32)
    pts = np.round((kps * _SS - 0.5) * 16).astype(np.int64)  # 4 fractional bits
    t = max(1, int(round(thickness * _SS)))
    for a, b in SKELETON:
        cv2.line(canvas, tuple(int(v) for v in pts[a]), tuple(int(v) for v in pts[b]),
                 1.0, t, cv2.LINE_AA, shift=4)
    head_r = int(round(thickness * 1.6 * _SS * 16))
    cv2.circle(canvas, tuple(int(v) for v in pts[12]), head_r, 1.0, -1, cv2.LINE_AA, shift=4)
    return cv2.resize(canvas, (w, h), interpolation=cv2.INTER_AREA).astype(np.float64)


def generate_toy_scene(seed, cfg=None):
    """Render 1-3 stick figures over a textured background.

    Returns a well-lit :class:`AnnotatedSample` with exact keypoints; a
    keypoint is 0 when outside the frame, 1 when covered by a figure drawn
    later, else 2.
    """
    cfg = cfg or SceneConfig()
    rng = check_random_state(seed)
    h, w = cfg.height, cfg.width
    img = _background(rng, h, w)
    n = int(rng.integers(cfg.min_persons, cfg.max_persons + 1))
    people = []
    for i in range(n):
        ph = rng.uniform(cfg.min_person_height, cfg.max_person_height) * h
        cx = rng.uniform(0.2, 0.8) * w if n == 1 else (i + rng.uniform(0.3, 0.7)) * w / n
        top = rng.uniform(-0.05, 1.0 - ph / h) * h
        kps = _pose(rng, cx, top, ph)
        thickness = max(1.0, cfg.limb_thickness * ph)
        mask = _render_person(kps, thickness, h, w)
        color = rng.uniform(0.75, 1.0, size=3) * rng.choice([1.0, 0.9])
        if rng.random() < 0.5:
            color = 0.05 + 0.1 * rng.random(3)  # dark clothing on a lighter background
        img = img * (1 - mask[..., None]) + mask[..., None] * color
        people.append((kps, mask))

    instances = []
    for i, (kps, mask) in enumerate(people):
        inside = (kps[:, 0] >= 0) & (kps[:, 0] < w) & (kps[:, 1] >= 0) & (kps[:, 1] < h)
        vis = np.where(inside, 2, 0)
        for kps_later, mask_later in people[i + 1:]:
            for k in np.flatnonzero(vis == 2):
                px, py = int(kps[k, 0]), int(kps[k, 1])
                if mask_later[py, px] > 0.5:
                    vis[k] = 1
        ys, xs = np.nonzero(mask > 0.25)
        if len(xs) == 0:
            continue
        x0, x1 = xs.min(), xs.max() + 1.0
        y0, y1 = ys.min(), ys.max() + 1.0
        pts = kps[vis > 0]
        if len(pts):
            x0, y0 = min(x0, pts[:, 0].min()), min(y0, pts[:, 1].min())
            x1, y1 = max(x1, pts[:, 0].max()), max(y1, pts[:, 1].max())
        x0, y0 = max(0.0, x0), max(0.0, y0)
        x1, y1 = min(float(w), x1), min(float(h), y1)
        kp_norm = np.where(vis[:, None] > 0, kps / np.array([w, h]), 0.0)
        instances.append(PoseInstance(
            score=1.0,
            box=[(x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h],
            keypoints=kp_norm,
            visibility=vis,
        ))
    return AnnotatedSample(np.clip(img, 0.0, 1.0), instances, source_id=f"scene-{seed}",
                           domain_tag="well_lit")


def degrade_lowlight(i_wl, p):
    """Darken with gamma and gain, add signal-dependent and read noise, quantise."""
    img = check_image(i_wl, "i_wl")
    rng = np.random.default_rng(p.seed)
    signal = np.power(np.clip(img, 0, 1), p.gamma) * p.brightness_scale
    noisy = signal
    if p.shot_noise_gain > 0:
        noisy = noisy + rng.standard_normal(img.shape) * np.sqrt(signal) * p.shot_noise_gain
    if p.read_noise_sigma > 0:
        noisy = noisy + rng.standard_normal(img.shape) * p.read_noise_sigma
    levels = p.quant_levels - 1
    return np.round(np.clip(noisy, 0.0, 1.0) * levels) / levels
