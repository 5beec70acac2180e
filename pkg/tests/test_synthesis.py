import json

import cv2
import numpy as np
import pytest
import torch

from udapose import freq_ops as fo
from udapose import lcim, synthesis, toydata
from udapose.estimators import LowLightSynthesizer
from udapose.structures import NUM_KEYPOINTS, AnnotatedSample


@pytest.fixture(scope="module")
def scenes():
    cfg = synthesis.DatasetConfig(n_well_lit=100, n_references=20, n_test=4, seed=11)
    return synthesis.make_scenes(cfg)


@pytest.fixture(scope="module")
def fitted(scenes):
    well_lit, refs, _ = scenes
    est = LowLightSynthesizer(strides=(1, 2, 2, 1), ae_epochs=15, epochs=5, lr_drop_epoch=4,
                              random_state=0)
    return est.fit(np.stack([r.image for r in refs]),
                   well_lit=np.stack([s.image for s in well_lit]))


def _random_net(seed=0):
    torch.manual_seed(seed)
    return lcim.SynthesisNet().freeze_backbone()


# --------------------------------------------------------- style latent

def test_style_latent_self_alignment(rng):
    net = _random_net()
    img = rng.random((32, 32, 3))
    z = synthesis.style_infused_latent(img, img, net)
    ref = lcim.encode_latent(lcim.to_tensor(img), net)
    assert torch.allclose(z, ref, atol=1e-6)


def test_style_latent_takes_reference_channel_stats(rng):
    net = _random_net()
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3)) * 0.3
    z = synthesis.style_infused_latent(a, b, net).double()
    zr = lcim.encode_latent(lcim.to_tensor(b), net).double()
    sd = zr.std(dim=(-2, -1), unbiased=False)
    ok = sd > 1e-4
    assert torch.allclose(z.mean(dim=(-2, -1))[ok], zr.mean(dim=(-2, -1))[ok], atol=1e-6)
    assert torch.allclose(z.std(dim=(-2, -1), unbiased=False)[ok], sd[ok], atol=1e-6)


def test_style_latent_deterministic_and_dim_checked(rng):
    net = _random_net()
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    assert torch.equal(synthesis.style_infused_latent(a, b, net),
                       synthesis.style_infused_latent(a, b, net))
    with pytest.raises(ValueError):
        synthesis.style_infused_latent(a, b[:16], net)


# ------------------------------------------------------------- pipeline

def test_synthesized_sample_contract(scenes, fitted):
    well_lit, refs, _ = scenes
    ref = refs[3].image
    out = synthesis.synthesize_lowlight(well_lit[0], ref, fitted.net_)
    assert out.domain_tag == "synthetic_low_light"
    assert out.instances is well_lit[0].instances
    assert out.image.shape == well_lit[0].image.shape
    assert out.image.min() >= 0 and out.image.max() <= 1
    pre = synthesis.synthesize_image(well_lit[0].image, ref, fitted.net_, clip=False)
    np.testing.assert_allclose(pre.mean(axis=(0, 1)), ref.mean(axis=(0, 1)), atol=1e-6)
    np.testing.assert_allclose(pre.std(axis=(0, 1)), ref.std(axis=(0, 1)), atol=1e-6)


def test_pipeline_is_pure(scenes, fitted):
    well_lit, refs, _ = scenes
    a = synthesis.synthesize_image(well_lit[1].image, refs[0].image, fitted.net_)
    b = synthesis.synthesize_image(well_lit[1].image, refs[0].image, fitted.net_)
    assert np.array_equal(a, b)


def test_reference_swap_changes_pixels_not_annotations(scenes, fitted):
    well_lit, refs, _ = scenes
    a = synthesis.synthesize_lowlight(well_lit[2], refs[0].image, fitted.net_)
    b = synthesis.synthesize_lowlight(well_lit[2], refs[1].image, fitted.net_)
    assert not np.array_equal(a.image, b.image)
    assert a.instances is b.instances


def test_injection_modes_differ(scenes, fitted):
    well_lit, refs, _ = scenes
    full = synthesis.synthesize_image(well_lit[0].image, refs[0].image, fitted.net_)
    z0 = synthesis.synthesize_image(well_lit[0].image, refs[0].image, fitted.net_,
                                    injection="z0")
    lvl = synthesis.synthesize_image(well_lit[0].image, refs[0].image, fitted.net_,
                                     injection=(1, 2))
    assert not np.array_equal(full, z0) and not np.array_equal(lvl, z0)
    with pytest.raises(synthesis.SynthesisError, match="injection levels"):
        synthesis.synthesize_image(well_lit[0].image, refs[0].image, fitted.net_,
                                   injection=(5,))


def test_errors_carry_stage_name(fitted):
    with pytest.raises(synthesis.SynthesisError) as err:
        synthesis.synthesize_image(np.zeros((32, 32, 3)), np.zeros((32, 32, 3)), fitted.net_)
    assert err.value.stage == "normalize"


@pytest.mark.parametrize("method", fo.NORMALIZATION_METHODS)
def test_every_normalization_runs_on_toy_pipeline(scenes, fitted, method):
    well_lit, refs, _ = scenes
    out = synthesis.synthesize_image(well_lit[0].image, refs[0].image, fitted.net_,
                                     normalization=method)
    assert np.isfinite(out).all()


def _edges(img, blur=1.0):
    """Sobel gradient magnitude after a Gaussian blur (sensor noise suppressed)."""
    g = img.mean(axis=2) if img.ndim == 3 else img
    g = cv2.GaussianBlur(g, (0, 0), blur)
    return np.hypot(cv2.Sobel(g, cv2.CV_64F, 1, 0), cv2.Sobel(g, cv2.CV_64F, 0, 1))


def _skeleton(sample, limb_fraction=0.09):
    """Stick figures re-rendered from the carried annotations."""
    mask = np.zeros(sample.image.shape[:2])
    wh = np.array([sample.width, sample.height])
    for inst in sample.instances:
        t = max(1.0, limb_fraction * inst.box[3] * sample.height)
        mask = np.maximum(mask, toydata._render_person(inst.keypoints * wh, t, sample.height,
                                                       sample.width))
    return mask


def _consistency_pass_rate(samples):
    # compare against the skeleton of the next sample (never the sample's own)
    passes = 0
    for i, s in enumerate(samples):
        e = _edges(s.image).ravel()
        own = np.corrcoef(_edges(_skeleton(s)).ravel(), e)[0, 1]
        other = np.corrcoef(_edges(_skeleton(samples[(i + 1) % len(samples)])).ravel(), e)[0, 1]
        passes += own > 0 and own > other
    return passes / len(samples)


def test_consistency_check_on_well_lit_images(scenes):
    assert _consistency_pass_rate(scenes[0]) == 1.0


@pytest.mark.slow
def test_anatomical_consistency_guard(default_synthesizer):
    d = default_synthesizer
    synthetic = d["est"].synthesize(d["well_lit"], repeats=1, seed=4)
    assert len(synthetic) >= 100
    assert _consistency_pass_rate(synthetic) >= 0.95


# ------------------------------------------------------------- toy data

def test_toy_scene_contract():
    for seed in range(30):
        s = toydata.generate_toy_scene(seed)
        assert 1 <= len(s.instances) <= 3
        for inst in s.instances:
            assert inst.keypoints.shape == (NUM_KEYPOINTS, 2)
            x0, y0, x1, y1 = inst.box_xyxy()
            vis = inst.visibility == 2
            kp = inst.keypoints[vis]
            assert np.all((kp[:, 0] >= x0 - 1e-9) & (kp[:, 0] <= x1 + 1e-9))
            assert np.all((kp[:, 1] >= y0 - 1e-9) & (kp[:, 1] <= y1 + 1e-9))
            assert np.all((inst.keypoints[inst.visibility > 0] >= 0)
                          & (inst.keypoints[inst.visibility > 0] <= 1))
            assert 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1


def test_toy_scene_deterministic():
    a, b = toydata.generate_toy_scene(7), toydata.generate_toy_scene(7)
    assert np.array_equal(a.image, b.image)
    assert all(np.array_equal(p.keypoints, q.keypoints) for p, q in zip(a.instances, b.instances))


def test_degrade_noise_free_scale(rng):
    img = rng.random((32, 32, 3))
    p = toydata.DegradeParams(brightness_scale=0.3, gamma=1.0, read_noise_sigma=0,
                              shot_noise_gain=0, quant_levels=256)
    out = toydata.degrade_lowlight(img, p)
    assert abs(out.mean() - 0.3 * img.mean()) <= 0.5 / 255


def test_degrade_shot_noise_is_signal_dependent():
    img = np.zeros((64, 64, 3))
    img[:, 32:] = 1.0
    p = toydata.DegradeParams(brightness_scale=0.5, gamma=1.0, read_noise_sigma=0.0,
                              shot_noise_gain=0.1, quant_levels=256, seed=3)
    diff = toydata.degrade_lowlight(img, p) - 0.5 * img
    assert diff[:, 32:].var() > diff[:, :32].var()


def test_degrade_two_levels_is_binary(rng):
    p = toydata.DegradeParams(brightness_scale=1.0, quant_levels=2, seed=1)
    out = toydata.degrade_lowlight(rng.random((16, 16, 3)), p)
    assert set(np.unique(out)) <= {0.0, 1.0}


def test_degrade_params_validation():
    for bad in [dict(brightness_scale=0), dict(gamma=0), dict(read_noise_sigma=-1),
                dict(quant_levels=1)]:
        with pytest.raises(ValueError):
            toydata.DegradeParams(**bad)


# -------------------------------------------------------------- dataset

def test_build_dataset_counts_and_annotation_transfer(tmp_path, fitted):
    cfg = synthesis.DatasetConfig(n_well_lit=10, repeats=2, n_references=4, n_test=3, seed=5)
    manifest = synthesis.build_dataset(cfg, tmp_path, fitted.net_)
    assert manifest["counts"]["synthetic"] == 20
    syn = synthesis.load_split(tmp_path, "synthetic")
    wl = synthesis.load_split(tmp_path, "well_lit")
    assert len(syn) == 20
    doc = json.loads((tmp_path / "synthetic" / "annotations.json").read_text())
    for i, (s, pair) in enumerate(zip(syn, doc["meta"]["pairs"])):
        assert pair["repeat"] == i % 2
        src = wl[i // 2]
        for a, b in zip(s.instances, src.instances):
            np.testing.assert_array_equal(a.keypoints, b.keypoints)
            np.testing.assert_array_equal(a.visibility, b.visibility)


def test_build_dataset_rebuild_is_byte_identical(tmp_path):
    cfg = synthesis.DatasetConfig(n_well_lit=4, n_references=3, n_test=2, seed=9)
    synthesis.build_dataset(cfg, tmp_path / "a")
    synthesis.build_dataset(cfg, tmp_path / "b")
    for split in ("well_lit", "references", "test"):
        assert ((tmp_path / "a" / split / "annotations.json").read_bytes()
                == (tmp_path / "b" / split / "annotations.json").read_bytes())
    assert (tmp_path / "a" / "manifest.json").read_bytes() == \
        (tmp_path / "b" / "manifest.json").read_bytes()


def test_annotation_wire_format(tmp_path):
    cfg = synthesis.DatasetConfig(n_well_lit=2, n_references=1, n_test=1, seed=1)
    synthesis.build_dataset(cfg, tmp_path)
    doc = json.loads((tmp_path / "well_lit" / "annotations.json").read_text())
    assert set(doc) == {"images", "annotations", "meta"}
    assert set(doc["images"][0]) == {"id", "file", "width", "height"}
    ann = doc["annotations"][0]
    assert set(ann) == {"image_id", "bbox", "keypoints", "num_keypoints"}
    assert len(ann["keypoints"]) == 42
    assert doc["meta"]["format"] == "crowdpose-14" and doc["meta"]["seed"] == 1


def test_test_split_restores_capture_meta(tmp_path):
    cfg = synthesis.DatasetConfig(n_well_lit=1, n_references=1, n_test=2, seed=3)
    _, _, tests = synthesis.make_scenes(cfg)
    synthesis.build_dataset(cfg, tmp_path)
    loaded = synthesis.load_split(tmp_path, "test")
    assert loaded[0].meta["degrade"] == tests[0].meta["degrade"]
    np.testing.assert_allclose(loaded[0].meta["clean"], tests[0].meta["clean"], atol=1e-4)


def test_load_missing_split(tmp_path):
    with pytest.raises(FileNotFoundError):
        synthesis.load_split(tmp_path, "synthetic")


def test_reference_draws_are_seeded_and_in_range():
    draws = [synthesis.reference_index(4, i, r, 7) for i in range(50) for r in range(2)]
    assert draws == [synthesis.reference_index(4, i, r, 7) for i in range(50) for r in range(2)]
    assert min(draws) >= 0 and max(draws) < 7 and len(set(draws)) == 7


def test_synthesize_set_jobs_invariant(scenes, fitted):
    well_lit, refs, _ = scenes
    a = synthesis.synthesize_set(well_lit[:4], refs, fitted.net_, 2, seed=1)
    b = synthesis.synthesize_set(well_lit[:4], refs, fitted.net_, 2, seed=1, jobs=3)
    assert all(np.array_equal(p.image, q.image) for p, q in zip(a, b))
    assert [s.meta for s in a] == [s.meta for s in b]
