import numpy as np
import pytest
import torch

from udapose import freq_ops as fo
from udapose import lcim

from oracles import naive_frequency_loss


def _net(bias=True, seed=0, dtype=torch.float32, strides=(2, 2, 2, 2)):
    torch.manual_seed(seed)
    bb = lcim.ToyAutoencoder(bias=bias, strides=strides)
    return lcim.SynthesisNet(bb).freeze_backbone().to(dtype)


def _x(rng, n=2, h=32, w=32, dtype=torch.float32):
    return torch.as_tensor(rng.random((n, 3, h, w)), dtype=dtype)


# ---------------------------------------------------------------- encoders

def test_multiscale_dims_halve(rng):
    z = lcim.encode_multiscale(_x(rng), _net())
    assert [t.shape[-1] for t in z] == [2, 4, 8, 16]
    assert z.scales == (1 / 16, 1 / 8, 1 / 4, 1 / 2)


def test_latent_dims(rng):
    z0 = lcim.encode_latent(_x(rng), _net())
    assert z0.shape == (2, 16, 2, 2)


def test_zero_input_bias_free_gives_zero_features():
    net = _net(bias=False)
    x = torch.zeros(1, 3, 32, 32)
    assert all(torch.count_nonzero(t) == 0 for t in lcim.encode_multiscale(x, net))
    assert torch.count_nonzero(lcim.encode_latent(x, net)) == 0


def test_encoders_deterministic(rng):
    x = _x(rng)
    a, b = lcim.encode_multiscale(x, _net(seed=3)), lcim.encode_multiscale(x, _net(seed=3))
    assert all(torch.equal(p, q) for p, q in zip(a, b))


def test_bad_dims_rejected():
    with pytest.raises(ValueError, match="multiples"):
        lcim.encode_latent(torch.zeros(1, 3, 30, 32), _net())


def test_alternative_strides_keep_injection_sites_matched(rng):
    net = _net(strides=(1, 2, 2, 1))
    x = _x(rng)
    f = lcim.lcim_transform(lcim.encode_multiscale(x, net), net)
    out = lcim.decode_with_injection(lcim.encode_latent(x, net), f, net)
    assert out.shape == x.shape


# ------------------------------------------------------------ adapters

def test_transform_dims_match_decoder_blocks(rng):
    net = _net()
    x = _x(rng)
    f = lcim.lcim_transform(lcim.encode_multiscale(x, net), net)
    h = lcim.encode_latent(x, net)
    for i in range(4):
        h = net.backbone.block(i, h)
        assert f[i].shape == h.shape


def test_transform_linear_when_bias_free(rng):
    net = _net()
    z = lcim.encode_multiscale(_x(rng), net)
    a = lcim.lcim_transform(z.scaled(2.0), net)
    b = lcim.lcim_transform(z, net)
    for p, q in zip(a, b):
        assert torch.allclose(p, 2 * q, atol=1e-6)


def test_transform_level_count():
    net = _net()
    with pytest.raises(ValueError, match="4 feature levels"):
        lcim.lcim_transform(lcim.FeatureStack([torch.zeros(1, 64, 2, 2)] * 3), net)


def test_adapter_gradient_matches_finite_differences(rng):
    net = _net(dtype=torch.float64)
    z = lcim.encode_multiscale(_x(rng, n=1, dtype=torch.float64), net)
    w = net.adapters.convs[2].weight

    def objective():
        return sum((t ** 2).sum() for t in lcim.lcim_transform(z, net))

    net.zero_grad()
    objective().backward()
    analytic = w.grad.clone()
    h = 1e-6
    for idx in [(0, 0, 0, 0), (3, 5, 1, 2), (31, 7, 2, 2)]:
        with torch.no_grad():
            w[idx] += h
            up = objective().item()
            w[idx] -= 2 * h
            down = objective().item()
            w[idx] += h
        numeric = (up - down) / (2 * h)
        assert abs(numeric - analytic[idx].item()) <= 1e-4 * max(abs(numeric), 1e-8)


# -------------------------------------------------------------- decoder

def test_zero_injection_equals_plain_decode(rng):
    net = _net()
    for _ in range(100):
        z0 = torch.as_tensor(rng.standard_normal((1, 16, 2, 2)), dtype=torch.float32)
        zeros = [torch.zeros(1, c, s, s) for c, s in zip((64, 64, 32, 16), (4, 8, 16, 32))]
        a = lcim.decode_with_injection(z0, zeros, net)
        assert torch.allclose(a, lcim.decode(z0, net), atol=1e-7)


def test_last_level_injection_is_post_block(rng):
    net = _net()
    z0 = torch.as_tensor(rng.standard_normal((1, 16, 2, 2)), dtype=torch.float32)
    f = [None, None, None, torch.zeros(1, 16, 32, 32)]
    base = lcim.decode_with_injection(z0, f, net, clip=False)
    f[3][0, 0, 10, 10] = 0.5
    moved = lcim.decode_with_injection(z0, f, net, clip=False)
    assert (moved - base).abs().max() > 0
    # the injection lands after block 4, so only the 3x3 head spreads it
    changed = torch.nonzero((moved - base).abs().sum(1)[0] > 0)
    assert changed.min() >= 9 and changed.max() <= 11


def test_decode_upsamples_by_sixteen(rng):
    out = lcim.decode(torch.zeros(1, 16, 2, 2), _net())
    assert out.shape == (1, 3, 32, 32)
    assert out.min() >= 0 and out.max() <= 1


def test_injection_shape_mismatch_names_level():
    net = _net()
    f = [torch.zeros(1, 64, 4, 4), torch.zeros(1, 64, 7, 7), None, None]
    with pytest.raises(ValueError, match="level 2"):
        lcim.decode_with_injection(torch.zeros(1, 16, 2, 2), f, net)


# ------------------------------------------------------------------ loss

def test_loss_identical_is_zero(rng):
    x = _x(rng)
    total, mse, freq = lcim.lcim_loss(x, x.clone(), 4e-4)
    assert total.item() == mse.item() == freq.item() == 0.0


def test_loss_lambda_zero_is_mse(rng):
    a, b = _x(rng), _x(rng)
    total, mse, _ = lcim.lcim_loss(a, b, 0.0)
    assert total.item() == mse.item()


def test_loss_matches_independent_recomputation(rng):
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    ta, tb = lcim.to_tensor(a, torch.float64), lcim.to_tensor(b, torch.float64)
    total, _, _ = lcim.lcim_loss(ta, tb, 4e-4)
    expected = np.mean((a - b) ** 2) + 4e-4 * naive_frequency_loss(a, b)
    assert total.item() == pytest.approx(expected, rel=1e-10, abs=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        lcim.lcim_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 4), 0.1)


def test_end_to_end_gradient_check_16px(rng):
    torch.manual_seed(0)
    bb = lcim.ToyAutoencoder(strides=(2, 2, 2, 2)).double()
    net = lcim.SynthesisNet(bb).freeze_backbone().double()
    for conv in net.adapters.convs:
        torch.nn.init.normal_(conv.weight, std=0.1)
    x = torch.as_tensor(rng.random((1, 3, 16, 16)))

    def objective():
        return lcim.lcim_loss(x, lcim.reconstruct(x, net).clamp(0, 1), 4e-4)[0]

    net.zero_grad()
    objective().backward()
    w = net.adapters.convs[0].weight
    analytic = w.grad.clone()
    order = torch.argsort(analytic.abs().flatten(), descending=True)[:4]
    for flat in order.tolist():
        idx = np.unravel_index(flat, w.shape)
        h = 1e-6
        with torch.no_grad():
            w[idx] += h
            up = objective().item()
            w[idx] -= 2 * h
            down = objective().item()
            w[idx] += h
        numeric = (up - down) / (2 * h)
        assert numeric == pytest.approx(analytic[idx].item(), rel=1e-3)


# -------------------------------------------------------------- training

def _lowlight(rng, n=16):
    return np.clip(rng.random((n, 32, 32, 3)) * 0.1 + 0.02, 0, 1)


def test_train_rejects_unfrozen_backbone(rng):
    net = lcim.SynthesisNet()
    with pytest.raises(ValueError, match="frozen"):
        lcim.train_lcim(_lowlight(rng, 2), lcim.TrainConfig(epochs=1, lr_drop_epoch=1), net)


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        lcim.train_lcim(np.zeros((0, 32, 32, 3)), lcim.TrainConfig(epochs=1, lr_drop_epoch=1),
                        _net())


def test_train_keeps_backbone_bytes_and_is_deterministic(rng):
    data = _lowlight(rng, 8)
    cfg = lcim.TrainConfig(epochs=10, lr_drop_epoch=8, batch_size=4, lr_initial=1e-3,
                           lr_late=1e-4, seed=5)
    net = _net()
    before = lcim.snapshot(net.backbone)
    _, hist_a, _ = lcim.train_lcim(data, cfg, net)
    after = lcim.snapshot(net.backbone)
    assert all(torch.equal(before[k], after[k]) for k in before)
    _, hist_b, _ = lcim.train_lcim(data, cfg, _net())
    assert hist_a == hist_b
    assert [r["lr"] for r in hist_a] == [1e-3] * 8 + [1e-4] * 2


def test_train_config_validation():
    for bad in [dict(lambda_freq=-1), dict(lr_initial=0), dict(epochs=5, lr_drop_epoch=6),
                dict(normalization="nope")]:
        with pytest.raises(ValueError):
            lcim.TrainConfig(**bad)


@pytest.mark.slow
def test_toy_run_halves_mse_and_trend_is_monotone():
    from udapose.synthesis import DatasetConfig, make_scenes

    _, refs, _ = make_scenes(DatasetConfig(n_well_lit=0, n_references=64, n_test=0, seed=2))
    data = np.stack([r.image for r in refs])
    net = _net(strides=(1, 2, 2, 1))
    cfg = lcim.TrainConfig(epochs=40, lr_initial=1e-3, lr_late=1e-4, lr_drop_epoch=30,
                           batch_size=16, lambda_freq=4e-4, seed=0)
    _, hist, _ = lcim.train_lcim(data, cfg, net)
    assert hist[-1]["l_mse"] <= 0.5 * hist[0]["l_mse"]
    totals = np.array([r["total"] for r in hist])
    ma = np.convolve(totals, np.ones(5) / 5, mode="valid")
    rises = np.flatnonzero(np.diff(ma) > 0)
    assert len(rises) <= 1
    assert all(ma[i + 1] <= 1.02 * ma[i] for i in rises)
