"""Closed-form frequency-domain and intensity-statistics operations.

Images are numpy arrays in (H, W, C) layout unless noted. ``frequency_loss``
additionally accepts torch tensors in channel-first (..., C, H, W) layout so
it can sit inside a training graph.
"""
from dataclasses import dataclass

import numpy as np
import torch

from ._validation import check_image, check_same_shape, check_scalar

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
IMAGENET_GLOBAL_MEAN = 0.449
DEFAULT_CUTOFF = 0.1
DEGENERATE_STD = 1e-8


@dataclass(frozen=True)
class SpectrumField:
    """Centered 2-D DFT of one channel; DC sits at ``(M // 2, N // 2)``."""

    coeffs: np.ndarray

    @property
    def shape(self):
        return self.coeffs.shape

    def magnitude(self):
        return np.abs(self.coeffs)

    def inverse(self):
        return np.fft.ifft2(np.fft.ifftshift(self.coeffs)).real


@dataclass(frozen=True)
class SpectralMask:
    weights: np.ndarray
    cutoff_radius: float

    @property
    def shape(self):
        return self.weights.shape


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def spectrum(channel):
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"spectrum expects a 2-D channel, got shape {x.shape}")
    if x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError(f"spectrum needs at least 2x2 input, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("spectrum: input contains non-finite values")
    return SpectrumField(np.fft.fftshift(np.fft.fft2(x)))


def make_highpass_mask(M, N, cutoff_radius=DEFAULT_CUTOFF):
    """Hard circular high-pass mask on the centered grid.

    ``cutoff_radius`` is a fraction of ``min(M, N) // 2``; every bin within
    that Euclidean distance of DC is zeroed. Radius 0 removes DC only.
    """
    if M < 2 or N < 2:
        raise ValueError(f"mask dims must be >= 2, got {M}x{N}")
    cutoff_radius = check_scalar(cutoff_radius, "cutoff_radius", low=0.0)
    r = cutoff_radius * (min(M, N) // 2)
    du = np.arange(M)[:, None] - M // 2
    dv = np.arange(N)[None, :] - N // 2
    dist = np.sqrt(du**2 + dv**2)
    weights = (dist > r).astype(np.float64)
    return SpectralMask(weights, cutoff_radius)


def high_pass_filter(image, mask):
    """Per-channel ``iFFT(FFT(x) * mask)``; output is not clipped."""
    img = check_image(image)
    weights = mask.weights if isinstance(mask, SpectralMask) else np.asarray(mask, float)
    if weights.shape != img.shape[:2]:
        raise ValueError(f"mask shape {weights.shape} != image dims {img.shape[:2]}")
    spec = np.fft.fftshift(np.fft.fft2(img, axes=(0, 1)), axes=(0, 1))
    spec = spec * weights[:, :, None]
    out = np.fft.ifft2(np.fft.ifftshift(spec, axes=(0, 1)), axes=(0, 1))
    return out.real


def _channel_mean(img):
    return img.mean(axis=(0, 1))


def dhf_correct(i_hp, i_ref, clip=True):
    """Shift a high-passed image so its channel means match ``i_ref``."""
    hp = check_image(i_hp, "i_hp")
    ref = check_image(i_ref, "i_ref")
    check_same_shape(hp, ref, ("i_hp", "i_ref"))
    out = hp + (_channel_mean(ref) - _channel_mean(hp))
    return np.clip(out, 0.0, 1.0) if clip else out


def dhf(image, cutoff_radius=DEFAULT_CUTOFF, clip=True):
    """High-pass ``image`` then re-centre it on its own channel means."""
    img = check_image(image)
    mask = make_highpass_mask(img.shape[0], img.shape[1], cutoff_radius)
    return dhf_correct(high_pass_filter(img, mask), img, clip=clip)


def ain_normalize(i_ll, delta=IMAGENET_GLOBAL_MEAN, clip=True):
    """Scale by one global factor so the mean over all channels becomes ``delta``."""
    img = check_image(i_ll, "i_ll")
    mu = img.mean()
    if mu <= 0:
        raise ValueError("ain_normalize: image has zero global mean (all black)")
    out = img * (delta / mu)
    return np.clip(out, 0.0, 1.0) if clip else out


NORMALIZATION_METHODS = ("ain", "direct", "zscore", "fixed", "per_channel")


def normalize_intensity(i_ll, method="ain", fixed_factor=8.0, clip=True):
    """Encoder-input normalisation of a low-light reference.

    ``ain`` is the default; the others are the ablation alternatives:
    ``direct`` (no-op), ``zscore`` (per-channel standardisation onto ImageNet
    statistics), ``fixed`` (one dataset-wide factor) and ``per_channel``
    (each channel scaled onto its ImageNet mean).
    """
    img = check_image(i_ll, "i_ll")
    if method == "ain":
        return ain_normalize(img, clip=clip)
    if method == "direct":
        out = img.copy()
    elif method == "zscore":
        mu = _channel_mean(img)
        sd = img.std(axis=(0, 1))
        sd = np.where(sd < DEGENERATE_STD, 1.0, sd)
        out = (img - mu) * (np.asarray(IMAGENET_STD)[: img.shape[2]] / sd)
        out = out + np.asarray(IMAGENET_MEAN)[: img.shape[2]]
    elif method == "fixed":
        out = img * fixed_factor
    elif method == "per_channel":
        mu = _channel_mean(img)
        if np.any(mu <= 0):
            raise ValueError("per_channel normalisation: a channel has zero mean")
        out = img * (np.asarray(IMAGENET_MEAN)[: img.shape[2]] / mu)
    else:
        raise ValueError(f"unknown normalisation {method!r}; choose from {NORMALIZATION_METHODS}")
    return np.clip(out, 0.0, 1.0) if clip else out


def frequency_weight(u, v, M, N):
    if not (0 <= u < M and 0 <= v < N):
        raise ValueError(f"index ({u}, {v}) outside {M}x{N} grid")
    return float(
        np.sin(np.pi * abs(2 * u - M) / (2 * M)) + np.sin(np.pi * abs(2 * v - N) / (2 * N))
    )


def frequency_weight_grid(M, N):
    """Weights for every bin of a centered spectrum; 0 at DC, up to 2 at corners."""
    u = np.arange(M)[:, None]
    v = np.arange(N)[None, :]
    return np.sin(np.pi * np.abs(2 * u - M) / (2 * M)) + np.sin(np.pi * np.abs(2 * v - N) / (2 * N))


def _frequency_loss_torch(a, b):
    M, N = a.shape[-2], a.shape[-1]
    w = torch.as_tensor(frequency_weight_grid(M, N), dtype=a.dtype, device=a.device)
    fa = torch.fft.fftshift(torch.fft.fft2(a), dim=(-2, -1)).abs()
    fb = torch.fft.fftshift(torch.fft.fft2(b), dim=(-2, -1)).abs()
    per_channel = (w * (fa - fb) ** 2).sum(dim=(-2, -1)) / (M * N)
    return per_channel.mean()


def frequency_loss(a, b):
    """Sinusoidally weighted MSE between Fourier magnitude spectra.

    Numpy (H, W, C) inputs return a float; torch (..., C, H, W) inputs return a
    differentiable scalar tensor. The mean runs over channels (and batch).
    """
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        return _frequency_loss_torch(a, b)
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b)
    ta = torch.from_numpy(np.moveaxis(a, -1, 0).copy())
    tb = torch.from_numpy(np.moveaxis(b, -1, 0).copy())
    return float(_frequency_loss_torch(ta, tb))


def channel_stats(img):
    arr = check_image(img, finite=True)
    return ChannelStats(arr.mean(axis=(0, 1)), arr.std(axis=(0, 1)))


def channel_stats_align(src, ref, clip=True):
    """Match per-channel mean and (population) std of ``src`` to ``ref``.

    Channels where either std is below 1e-8 get a mean-only shift.
    """
    s = check_image(src, "src")
    r = check_image(ref, "ref")
    if s.shape[2] != r.shape[2]:
        raise ValueError(f"channel mismatch: src has {s.shape[2]}, ref has {r.shape[2]}")
    s_stats, r_stats = channel_stats(s), channel_stats(r)
    degenerate = (s_stats.std < DEGENERATE_STD) | (r_stats.std < DEGENERATE_STD)
    scale = np.where(degenerate, 1.0, r_stats.std / np.where(degenerate, 1.0, s_stats.std))
    out = (s - s_stats.mean) * scale + r_stats.mean
    return np.clip(out, 0.0, 1.0) if clip else out


def _bin_index(x, n_bins):
    return np.clip(np.floor(x * n_bins).astype(np.int64), 0, n_bins - 1)


def histogram_match(src, ref, n_bins=256):
    """Per-channel CDF-to-CDF histogram matching with ``n_bins`` bins on [0, 1].

    Each source bin maps to the reference quantile at that bin's cumulative
    fraction, so the mapping is a non-decreasing function of pixel value.
    """
    s = check_image(src, "src")
    r = check_image(ref, "ref")
    if s.shape[2] != r.shape[2]:
        raise ValueError(f"channel mismatch: src has {s.shape[2]}, ref has {r.shape[2]}")
    out = np.empty_like(s)
    for c in range(s.shape[2]):
        sc = s[:, :, c].ravel()
        ref_sorted = np.sort(r[:, :, c].ravel(), kind="stable")
        bins = _bin_index(sc, n_bins)
        cdf = np.cumsum(np.bincount(bins, minlength=n_bins)) / sc.size
        idx = np.ceil(cdf * ref_sorted.size - 1e-9).astype(np.int64) - 1
        lut = ref_sorted[np.clip(idx, 0, ref_sorted.size - 1)]
        out[:, :, c] = lut[bins].reshape(s.shape[:2])
    return out
