"""Low-light synthesis pipeline and on-disk dataset construction.

A well-lit annotated sample and an unlabeled low-light reference go in; a
synthetic low-light sample carrying the well-lit annotations comes out.
"""
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import freq_ops, lcim
from ._validation import check_image, check_same_shape
from .io import read_png, write_png
from .structures import AnnotatedSample, PoseInstance
from .toydata import DegradeParams, SceneConfig, degrade_lowlight, generate_toy_scene

logger = logging.getLogger(__name__)

ANNOTATION_FORMAT = "crowdpose-14"
ALL_LEVELS = (1, 2, 3, 4)


class SynthesisError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _levels(injection):
    if injection in (None, "full"):
        return ALL_LEVELS
    if injection in ("z0", "none", ()):
        return ()
    levels = tuple(sorted(set(int(i) for i in injection)))
    if any(i not in ALL_LEVELS for i in levels):
        raise ValueError(f"injection levels must be drawn from {ALL_LEVELS}, got {injection!r}")
    return levels


def _align_channels(src, ref):
    """Per-channel mean/std alignment of (N, C, h, w) tensors over space."""
    s_mu, r_mu = src.mean(dim=(-2, -1), keepdim=True), ref.mean(dim=(-2, -1), keepdim=True)
    s_sd = src.std(dim=(-2, -1), unbiased=False, keepdim=True)
    r_sd = ref.std(dim=(-2, -1), unbiased=False, keepdim=True)
    degenerate = (s_sd < freq_ops.DEGENERATE_STD) | (r_sd < freq_ops.DEGENERATE_STD)
    scale = torch.where(degenerate, torch.ones_like(s_sd), r_sd / torch.where(degenerate, torch.ones_like(s_sd), s_sd))
    return (src - s_mu) * scale + r_mu


def _tensor(img, params):
    return lcim.to_tensor(img, next(params.parameters()).dtype)


@torch.no_grad()
def style_infused_latent(i_wl, i_ll_ain, params):
    """Latent of ``i_wl`` whose channel statistics follow the reference latent."""
    a, b = check_image(i_wl, "i_wl"), check_image(i_ll_ain, "i_ll_ain")
    check_same_shape(a, b, ("i_wl", "i_ll_ain"))
    z_wl = lcim.encode_latent(_tensor(a, params), params)
    z_ref = lcim.encode_latent(_tensor(b, params), params)
    return _align_channels(z_wl, z_ref)


@torch.no_grad()
def synthesize_image(i_wl, i_ll_ref, params, injection="full", normalization="ain",
                     cutoff_radius=freq_ops.DEFAULT_CUTOFF, clip=True):
    """Run the full pipeline on raw arrays and return the synthetic image."""
    stage = "input"
    try:
        wl = check_image(i_wl, "i_wl")
        ref = check_image(i_ll_ref, "i_ll_ref")
        check_same_shape(wl, ref, ("i_wl", "i_ll_ref"))
        levels = _levels(injection)
        stage = "normalize"
        ref_norm = freq_ops.normalize_intensity(ref, normalization)
        stage = "style_latent"
        z0 = style_infused_latent(wl, ref_norm, params)
        f = None
        if levels:
            stage = "dhf"
            hp = freq_ops.dhf(ref_norm, cutoff_radius)
            stage = "lcim"
            stack = lcim.lcim_transform(lcim.encode_multiscale(_tensor(hp, params), params), params)
            f = [lvl if (i + 1) in levels else None for i, lvl in enumerate(stack)]
        stage = "decode"
        pre = lcim.to_images(lcim.decode_with_injection(z0, f, params))[0]
        stage = "align"
        return freq_ops.channel_stats_align(pre, ref, clip=clip)
    except (ValueError, RuntimeError) as exc:
        if isinstance(exc, SynthesisError):
            raise
        raise SynthesisError(stage, str(exc)) from exc


def synthesize_lowlight(sample_wl, i_ll_ref, params, **kwargs):
    """Synthetic low-light :class:`AnnotatedSample` with the input's annotations."""
    img = synthesize_image(sample_wl.image, i_ll_ref, params, **kwargs)
    return AnnotatedSample(img, sample_wl.instances, source_id=sample_wl.source_id,
                           domain_tag="synthetic_low_light", meta=dict(sample_wl.meta))


# --------------------------------------------------------------- annotations

def annotations_to_json(samples, files, seed, extra_meta=None):
    images, anns = [], []
    for image_id, (smp, fname) in enumerate(zip(samples, files)):
        images.append({"id": image_id, "file": fname, "width": smp.width, "height": smp.height})
        for inst in smp.instances:
            rec = inst.to_json(smp.width, smp.height)
            rec.pop("score")
            anns.append({"image_id": image_id, **rec})
    meta = {"format": ANNOTATION_FORMAT, "seed": seed}
    meta.update(extra_meta or {})
    return {"images": images, "annotations": anns, "meta": meta}


def write_annotations(path, samples, files, seed, extra_meta=None):
    doc = annotations_to_json(samples, files, seed, extra_meta)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc


def read_annotations(path):
    """Return ``(doc, {image_id: [PoseInstance]})``."""
    doc = json.loads(Path(path).read_text())
    sizes = {im["id"]: (im["width"], im["height"]) for im in doc["images"]}
    by_image = {im["id"]: [] for im in doc["images"]}
    for ann in doc["annotations"]:
        w, h = sizes[ann["image_id"]]
        by_image[ann["image_id"]].append(PoseInstance.from_json(ann, w, h))
    return doc, by_image


def load_split(root, split):
    """Load a dataset split written by :func:`build_dataset` as samples.

    Test samples get their clean scene and capture parameters back in
    ``meta`` when the dataset stored them.
    """
    root = Path(root)
    path = root / split / "annotations.json"
    if not path.exists():
        raise FileNotFoundError(f"missing split {split!r} under {root}")
    doc, by_image = read_annotations(path)
    tag = {"well_lit": "well_lit", "references": "low_light_ref",
           "synthetic": "synthetic_low_light", "test": "low_light_test"}.get(split, "well_lit")
    captures = doc["meta"].get("captures", {})
    out = []
    for im in doc["images"]:
        img = read_png(root / split / im["file"])
        meta = {}
        cap = captures.get(im["file"])
        if cap is not None:
            meta = {"clean": read_png(root / split / cap["clean"]), "degrade": cap["degrade"]}
        out.append(AnnotatedSample(img, by_image[im["id"]], source_id=im["file"], domain_tag=tag,
                                   meta=meta))
    return out


# ------------------------------------------------------------------ datasets

@dataclass
class DatasetConfig:
    n_well_lit: int = 10
    repeats: int = 2
    n_references: int = 20
    n_test: int = 20
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    injection: str = "full"
    normalization: str = "ain"
    cutoff_radius: float = freq_ops.DEFAULT_CUTOFF
    bit_depth: int = 16


def substream(seed, name, *index):
    """Deterministic integer seed for a named stream and index."""
    digest = hashlib.sha256(f"{seed}/{name}/{'/'.join(map(str, index))}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def make_scenes(cfg):
    """Well-lit, reference and test samples for a dataset config (in memory)."""
    well_lit = [generate_toy_scene(substream(cfg.seed, "well_lit", i), cfg.scene)
                for i in range(cfg.n_well_lit)]
    refs = []
    for i in range(cfg.n_references):
        scene = generate_toy_scene(substream(cfg.seed, "ref_scene", i), cfg.scene)
        p = DegradeParams.sample(np.random.default_rng(substream(cfg.seed, "ref_degrade", i)))
        refs.append(AnnotatedSample(degrade_lowlight(scene.image, p), [],
                                    source_id=f"ref-{i}", domain_tag="low_light_ref"))
    tests = []
    for i in range(cfg.n_test):
        scene = generate_toy_scene(substream(cfg.seed, "test_scene", i), cfg.scene)
        p = DegradeParams.sample(np.random.default_rng(substream(cfg.seed, "test_degrade", i)))
        tests.append(AnnotatedSample(degrade_lowlight(scene.image, p), scene.instances,
                                     source_id=f"test-{i}", domain_tag="low_light_test",
                                     meta={"clean": scene.image, "degrade": asdict(p)}))
    return well_lit, refs, tests


def reference_index(seed, image_index, repeat, n_refs):
    rng = np.random.default_rng(substream(seed, "ref_draw", image_index, repeat))
    return int(rng.integers(n_refs))


def synthesize_set(well_lit, refs, params, repeats, seed, jobs=1, **kwargs):
    """Pair each well-lit sample with ``repeats`` uniformly drawn references.

    ``jobs`` > 1 runs the per-image work on a thread pool; the result does
    not depend on it.
    """
    tasks = [(i, r, reference_index(seed, i, r, len(refs)))
             for i in range(len(well_lit)) for r in range(repeats)]

    def one(task):
        i, _, j = task
        ref = refs[j].image if isinstance(refs[j], AnnotatedSample) else refs[j]
        return synthesize_image(well_lit[i].image, ref, params, **kwargs)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            images = list(pool.map(one, tasks))
    else:
        images = [one(t) for t in tasks]
    out = []
    for (i, r, j), img in zip(tasks, images):
        smp = well_lit[i]
        out.append(AnnotatedSample(img, smp.instances, source_id=f"{smp.source_id}-r{r}",
                                   domain_tag="synthetic_low_light",
                                   meta={"well_lit": smp.source_id, "reference": j, "repeat": r}))
    return out


def _write_split(root, name, samples, seed, bit_depth, extra_meta=None):
    d = Path(root) / name
    d.mkdir(parents=True, exist_ok=True)
    files, captures = [], {}
    for i, smp in enumerate(samples):
        fname = f"{i:05d}.png"
        write_png(d / fname, smp.image, bit_depth)
        files.append(fname)
        if "clean" in smp.meta:
            cname = f"{i:05d}_clean.png"
            write_png(d / cname, smp.meta["clean"], 16)
            captures[fname] = {"clean": cname, "degrade": smp.meta["degrade"]}
    meta = dict(extra_meta or {})
    if captures:
        meta["captures"] = captures
    write_annotations(d / "annotations.json", samples, files, seed, meta)
    return files


def write_synthetic(out_dir, synthetic, seed, bit_depth=16):
    """Write a synthetic split; each image records its well-lit source and reference."""
    return _write_split(Path(out_dir), "synthetic", synthetic, seed, bit_depth,
                        {"pairs": [s.meta for s in synthetic]})


def build_dataset(cfg, out_dir, params=None):
    """Write well-lit, reference and held-out test splits, plus the
    synthetic split (N * R images) when a fitted ``params`` is given.

    Returns the manifest dict, also written to ``manifest.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    well_lit, refs, tests = make_scenes(cfg)
    _write_split(out, "well_lit", well_lit, cfg.seed, cfg.bit_depth)
    _write_split(out, "references", refs, cfg.seed, cfg.bit_depth)
    _write_split(out, "test", tests, cfg.seed, cfg.bit_depth)
    counts = {"well_lit": len(well_lit), "references": len(refs), "test": len(tests)}
    if params is not None:
        synthetic = synthesize_set(well_lit, refs, params, cfg.repeats, cfg.seed,
                                   injection=cfg.injection, normalization=cfg.normalization,
                                   cutoff_radius=cfg.cutoff_radius)
        write_synthetic(out, synthetic, cfg.seed, cfg.bit_depth)
        counts["synthetic"] = len(synthetic)
    cfg_dict = asdict(cfg)
    manifest = {
        "seed": cfg.seed,
        "config": cfg_dict,
        "counts": counts,
        "streams": ["well_lit", "ref_scene", "ref_degrade", "test_scene", "test_degrade",
                    "ref_draw"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
