"""Toy frozen autoencoder, low-light characteristic injection adapters and
their training loop.

Tensors are channel-first ``(N, C, H, W)``. With the default strides the
encoder halves resolution four times; its block outputs, read coarse to fine,
are the multi-scale features ``z_1..z_4`` (scales 1/16, 1/8, 1/4, 1/2). The
decoder has four upsampling blocks ``d_1..d_4`` (outputs at 1/8, 1/4, 1/2,
1/1) and a linear head ``d_final``. Adapter ``i`` upsamples ``z_i`` onto the
output grid of ``d_i`` and applies one 3x3 convolution.
"""
import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import freq_ops
from ._validation import check_image_batch

logger = logging.getLogger(__name__)

@dataclass
class TrainConfig:
    lambda_freq: float = 4e-4
    epochs: int = 40
    lr_initial: float = 4e-4
    lr_late: float = 4e-5
    lr_drop_epoch: int = 30
    batch_size: int = 16
    seed: int = 0
    cutoff_radius: float = freq_ops.DEFAULT_CUTOFF
    normalization: str = "ain"

    def __post_init__(self):
        if self.normalization not in freq_ops.NORMALIZATION_METHODS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.lambda_freq < 0:
            raise ValueError("lambda_freq must be >= 0")
        if self.lr_initial <= 0 or self.lr_late <= 0:
            raise ValueError("learning rates must be > 0")
        if self.epochs < 1 or not 0 < self.lr_drop_epoch <= self.epochs:
            raise ValueError("need 0 < lr_drop_epoch <= epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, epoch):
        """Learning rate for 1-based ``epoch``."""
        return self.lr_initial if epoch <= self.lr_drop_epoch else self.lr_late


@dataclass
class FeatureStack:
    levels: list
    role: str = "z"
    scales: tuple = ()

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def scaled(self, factor):
        return FeatureStack([None if z is None else z * factor for z in self.levels],
                            self.role, self.scales)


class ToyAutoencoder(nn.Module):
    """Four strided conv blocks down, four upsample+conv blocks up.

    ``strides`` of (2, 2, 1, 1) keep an 8x8 latent on 32x32 inputs; the
    default (2, 2, 2, 2) puts the latent at 1/16 scale.
    """

    def __init__(self, widths=(16, 32, 64, 64), latent_channels=16, in_channels=3, bias=True,
                 strides=(2, 2, 2, 2)):
        super().__init__()
        if len(widths) != 4 or len(strides) != 4:
            raise ValueError("the backbone has exactly four blocks")
        if any(s not in (1, 2) for s in strides):
            raise ValueError("block strides must be 1 or 2")
        self.widths = tuple(widths)
        self.strides = tuple(strides)
        self.downscale = int(np.prod(strides))
        self.latent_channels = latent_channels
        self.in_channels = in_channels
        self.bias = bias
        chans = (in_channels,) + self.widths
        self.enc = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=strides[i], padding=1, bias=bias)
            for i in range(4)
        )
        self.to_latent = nn.Conv2d(self.widths[-1], latent_channels, 1, bias=bias)
        # decoder output widths mirror the encoder levels they receive
        self.dec_widths = tuple(reversed(self.widths))
        self.up_factors = tuple(reversed(self.strides))
        dchans = (latent_channels,) + self.dec_widths
        self.dec = nn.ModuleList(
            nn.Conv2d(dchans[i], dchans[i + 1], 3, padding=1, bias=bias) for i in range(4)
        )
        self.head = nn.Conv2d(self.dec_widths[-1], in_channels, 3, padding=1, bias=bias)

    def architecture(self):
        return {"kind": "toy_autoencoder", "widths": list(self.widths),
                "latent_channels": self.latent_channels, "in_channels": self.in_channels,
                "bias": self.bias, "strides": list(self.strides)}

    def level_scales(self):
        """Scales of z_1..z_4 (coarse to fine) relative to the input."""
        scales, acc = [], 1.0
        for st in self.strides:
            acc /= st
            scales.append(acc)
        return tuple(reversed(scales))

    def encoder_levels(self, x):
        feats = []
        for conv in self.enc:
            x = F.leaky_relu(conv(x), 0.1)
            feats.append(x)
        return feats

    def block(self, i, x):
        if self.up_factors[i] > 1:
            x = F.interpolate(x, scale_factor=self.up_factors[i], mode="nearest")
        return F.leaky_relu(self.dec[i](x), 0.1)

    def forward(self, x):
        return decode_with_injection(encode_latent(x, self), None, self)


class LCIMAdapters(nn.Module):
    """One 3x3, channel-preserving conv per level, applied after upsampling
    each level by the factor of the decoder block it feeds."""

    def __init__(self, level_channels=(64, 64, 32, 16), bias=False, up_factors=(2, 2, 2, 2)):
        super().__init__()
        self.level_channels = tuple(level_channels)
        self.up_factors = tuple(up_factors)
        self.bias = bias
        self.convs = nn.ModuleList(nn.Conv2d(c, c, 3, padding=1, bias=bias) for c in level_channels)
        for conv in self.convs:
            nn.init.normal_(conv.weight, std=1e-3)

    def forward(self, stack):
        return lcim_transform(stack, self)


class SynthesisNet(nn.Module):
    """Frozen backbone plus trainable adapters; plays the role of the ParamSet."""

    def __init__(self, backbone=None, adapters=None):
        super().__init__()
        self.backbone = backbone if backbone is not None else ToyAutoencoder()
        if adapters is None:
            adapters = LCIMAdapters(self.backbone.dec_widths, up_factors=self.backbone.up_factors)
        self.adapters = adapters

    def freeze_backbone(self):
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        return self

    def architecture(self):
        return {"kind": "lcim_synthesis", "backbone": self.backbone.architecture(),
                "adapter_channels": list(self.adapters.level_channels),
                "adapter_bias": self.adapters.bias}

    @classmethod
    def from_architecture(cls, arch):
        bb = arch["backbone"]
        backbone = ToyAutoencoder(bb["widths"], bb["latent_channels"], bb["in_channels"],
                                  bb["bias"], bb["strides"])
        return cls(backbone, LCIMAdapters(arch["adapter_channels"], arch["adapter_bias"],
                                          backbone.up_factors))


def _backbone(params):
    return params.backbone if isinstance(params, SynthesisNet) else params


def _adapters(params):
    return params.adapters if isinstance(params, SynthesisNet) else params


def _check_dims(x, bb):
    if x.dim() != 4:
        raise ValueError(f"expected (N, C, H, W) tensor, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % bb.downscale or w % bb.downscale:
        raise ValueError(f"spatial dims {h}x{w} must be multiples of {bb.downscale}")


def encode_multiscale(i_dhf, params):
    """Encoder block outputs of ``i_dhf`` ordered coarse to fine (z_1..z_4)."""
    bb = _backbone(params)
    _check_dims(i_dhf, bb)
    return FeatureStack(bb.encoder_levels(i_dhf)[::-1], role="z", scales=bb.level_scales())


def encode_latent(img, params):
    bb = _backbone(params)
    _check_dims(img, bb)
    return bb.to_latent(bb.encoder_levels(img)[-1])


def lcim_transform(z, params):
    if len(z) != 4:
        raise ValueError(f"expected 4 feature levels, got {len(z)}")
    adapters = _adapters(params)
    out = []
    for conv, up, level in zip(adapters.convs, adapters.up_factors, z):
        if up > 1:
            level = F.interpolate(level, scale_factor=up, mode="nearest")
        out.append(conv(level))
    scales = tuple(s * u for s, u in zip(z.scales, adapters.up_factors)) if z.scales else ()
    return FeatureStack(out, role="f", scales=scales)


def decode_with_injection(z0, f, params, clip=True):
    """``d_final(d_4(d_3(d_2(d_1(z0) + f_1) + f_2) + f_3) + f_4)``.

    ``f`` may be None (plain decode) or contain None entries (no injection at
    that level).
    """
    bb = _backbone(params)
    x = z0
    for i in range(4):
        x = bb.block(i, x)
        inj = None if f is None else f[i]
        if inj is not None:
            if inj.shape != x.shape:
                raise ValueError(
                    f"injection level {i + 1}: feature shape {tuple(inj.shape)} "
                    f"does not match decoder block output {tuple(x.shape)}"
                )
            x = x + inj
    out = bb.head(x)
    return out.clamp(0.0, 1.0) if clip else out


def decode(z0, params, clip=True):
    return decode_with_injection(z0, None, params, clip=clip)


def lcim_loss(target, recon, lambda_freq):
    """Return ``(total, l_mse, l_freq)`` for channel-first tensors."""
    if target.shape != recon.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(recon.shape)}")
    l_mse = F.mse_loss(recon, target)
    l_freq = freq_ops.frequency_loss(target, recon)
    return l_mse + lambda_freq * l_freq, l_mse, l_freq


def reconstruct(x, params):
    """Training-time path: LCIM features from DHF(x) injected into decode(E(x))."""
    x_np = to_images(x)
    hp = torch.as_tensor(
        np.stack([freq_ops.dhf(im) for im in x_np]), dtype=x.dtype
    ).permute(0, 3, 1, 2)
    return decode_with_injection(
        encode_latent(x, params), lcim_transform(encode_multiscale(hp, params), params), params
    )


def to_tensor(images, dtype=torch.float32):
    """(N, H, W, C) or (H, W, C) numpy -> (N, C, H, W) tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)


def to_images(t):
    return t.detach().cpu().double().numpy().transpose(0, 2, 3, 1)


def prepare_lowlight(images, cutoff_radius=freq_ops.DEFAULT_CUTOFF, normalization="ain"):
    """Return (normalised targets, DHF images) as (N, H, W, C) arrays."""
    norm = np.stack([freq_ops.normalize_intensity(im, normalization) for im in images])
    hp = np.stack([freq_ops.dhf(im, cutoff_radius) for im in norm])
    return norm, hp


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def pretrain_backbone(images, epochs=40, lr=1e-3, batch_size=32, seed=0, backbone=None,
                      **arch):
    """Fit the toy autoencoder on well-lit images (plain reconstruction, no injection).

    Extra keyword arguments go to :class:`ToyAutoencoder` when ``backbone`` is None.
    """
    torch.manual_seed(seed)
    if backbone is None:
        backbone = ToyAutoencoder(in_channels=np.shape(images)[-1], **arch)
    X = check_image_batch(images, "images", multiple_of=backbone.downscale)
    data = to_tensor(X)
    opt = torch.optim.Adam(backbone.parameters(), lr=lr)
    history = []
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        total, count = 0.0, 0
        for idx in _batches(len(data), batch_size, rng):
            batch = data[idx]
            recon = decode(encode_latent(batch, backbone), backbone, clip=False)
            loss = F.mse_loss(recon, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append({"epoch": epoch, "mse": total / count})
    backbone.eval()
    return backbone, history


def train_lcim(dataset, cfg, params, start_epoch=1, optimizer_state=None, callback=None):
    """Train the LCIM adapters to reconstruct normalised low-light images.

    Returns ``(params, history, optimizer)``; ``history`` holds one dict per
    epoch with keys epoch, total, l_mse, l_freq, lr.
    """
    if not isinstance(params, SynthesisNet):
        raise TypeError("params must be a SynthesisNet")
    X = check_image_batch(dataset, "dataset", multiple_of=params.backbone.downscale)
    if any(p.requires_grad for p in params.backbone.parameters()):
        raise ValueError("backbone tensors must be frozen before LCIM training")
    trainable = [p for p in params.adapters.parameters() if p.requires_grad]
    if not trainable:
        raise ValueError("no trainable adapter tensors")
    dtype = next(params.parameters()).dtype
    targets, hps = prepare_lowlight(X, cfg.cutoff_radius, cfg.normalization)
    targets, hps = to_tensor(targets, dtype), to_tensor(hps, dtype)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(trainable, lr=cfg.lr_at(start_epoch))
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    history = []
    for epoch in range(start_epoch, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([cfg.seed, epoch])
        sums = np.zeros(3)
        for idx in _batches(len(targets), cfg.batch_size, rng):
            tgt, hp = targets[idx], hps[idx]
            with torch.no_grad():
                z0 = encode_latent(tgt, params)
                z = encode_multiscale(hp, params)
            recon = decode_with_injection(z0, lcim_transform(z, params), params)
            total, l_mse, l_freq = lcim_loss(tgt, recon, cfg.lambda_freq)
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += np.array([total.item(), l_mse.item(), l_freq.item()]) * len(idx)
        sums /= len(targets)
        row = {"epoch": epoch, "total": sums[0], "l_mse": sums[1], "l_freq": sums[2], "lr": lr}
        history.append(row)
        logger.debug("lcim epoch %d: %s", epoch, row)
        if callback is not None:
            callback(row, params, opt)
    return params, history, opt


def snapshot(module):
    """Deep copy of a module's state for freeze checks."""
    return {k: v.detach().clone() for k, v in copy.deepcopy(module.state_dict()).items()}


def config_dict(cfg):
    return asdict(cfg)
