"""Pixel mask from the l1 counterfactual and mask-conditioned inpainting.

Mask convention: ``m == 1`` marks *modified* pixels. During inpainting the
modified region keeps evolving counterfactual content and the rest is
re-injected from the noised original. ``literal=True`` swaps the roles, as
the blend is literally written in the method description; it is kept for
auditing only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, InputError
from .models import as_tensor, ddpm_forward, ddpm_reverse_step, from_model_range, to_model_range


@dataclass(frozen=True)
class BinaryMask:
    m: np.ndarray  # (H, W) uint8 in {0, 1}
    window: int = 1
    threshold: float = 0.1
    dilation: int = 0

    @property
    def shape(self):
        return self.m.shape

    def fraction(self):
        return float(self.m.mean())


def normalized_difference(x, x2):
    """Channel-mean |x'' - x| divided by its per-image maximum (0 if all equal)."""
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x.shape != x2.shape or x.ndim != 3:
        raise InputError(f"need two (C, H, W) images of equal shape, got {x.shape} and {x2.shape}")
    diff = np.abs(x2 - x).mean(axis=0)
    top = diff.max()
    if top == 0:
        return np.zeros_like(diff)
    return diff / top


def build_mask(x, x2, threshold=0.1, window=1):
    """Binary mask: window-max of the normalized difference exceeds ``threshold``.

    Windows are ``window`` x ``window`` and are clamped at the image border.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError("must be in [0, 1]", "gamma")
    if window < 1 or window % 2 == 0:
        raise ConfigError("must be odd and >= 1", "window")
    d = normalized_difference(x, x2)
    if window > 1:
        # nearest-mode padding repeats border values, so the max equals the clamped-window max
        d = ndimage.maximum_filter(d, size=window, mode="nearest")
    return BinaryMask((d > threshold).astype(np.uint8), window, threshold, 0)


def dilate(mask, radius):
    """Dilation by a (2 radius + 1)^2 square structuring element."""
    if radius < 0:
        raise ConfigError("must be >= 0", "dilation_radius")
    m = mask.m
    if radius > 0:
        m = ndimage.binary_dilation(m.astype(bool), structure=np.ones((2 * radius + 1,) * 2, dtype=bool))
    return BinaryMask(m.astype(np.uint8), mask.window, mask.threshold, mask.dilation + radius)


def inpaint(x, x_initial, masks, denoiser, schedule, t_refine, seed=0, literal=False, paste=False):
    """Refine ``x_initial`` by blended reverse diffusion.

    ``x`` and ``x_initial`` are (N, C, H, W) or (C, H, W) in [0, 1]; ``masks``
    is an (N, H, W) / (H, W) array or a BinaryMask. The counterfactual is
    noised to ``t_refine``; at every step t the unmodified region is replaced
    by the original noised to level t (fresh noise) and one stochastic reverse
    step is taken. Injection noise and reverse noise use separate streams, so
    an all-ones mask reproduces the unblended reverse trajectory exactly.
    With ``paste`` the unmodified region of the output is finally set to the
    original itself (the noise-free end of the injection schedule).
    """
    x = as_tensor(x)
    x_init = as_tensor(x_initial)
    single = x.ndim == 3
    if single:
        x, x_init = x[None], x_init[None]
    if isinstance(masks, BinaryMask):
        masks = masks.m
    m = torch.as_tensor(np.array(masks, dtype=np.float32))
    if m.ndim == 2:
        m = m[None]
    if x.shape != x_init.shape or m.shape != (x.shape[0],) + tuple(x.shape[-2:]):
        raise InputError("mask / image dimensions do not match")
    if not 0 <= t_refine <= schedule.T:
        raise ConfigError(f"must be in [0, {schedule.T}]", "t_refine")
    m = m[:, None]
    if literal:
        m = 1.0 - m
    if t_refine == 0:
        out = x_init.clamp(0.0, 1.0)
        if paste:
            out = (1.0 - m) * x + m * out
        return out[0] if single else out
    g_start = torch.Generator().manual_seed(int(seed))
    g_inject = torch.Generator().manual_seed(int(seed) + 1)
    g_reverse = torch.Generator().manual_seed(int(seed) + 2)
    x0 = to_model_range(x)
    eps = torch.randn(x.shape, generator=g_start)
    h = ddpm_forward(to_model_range(x_init), t_refine, eps, schedule)
    with torch.no_grad():
        for t in range(t_refine, 0, -1):
            known = ddpm_forward(x0, t, torch.randn(x.shape, generator=g_inject), schedule)
            h = (1.0 - m) * known + m * h
            h = ddpm_reverse_step(h, t, schedule, denoiser, stochastic=True, generator=g_reverse)
    out = from_model_range(h).clamp(0.0, 1.0)
    if paste:
        out = (1.0 - m) * x + m * out
    return out[0] if single else out


def reverse_from(x_initial, denoiser, schedule, t_refine, seed=0):
    """Plain (unblended) noise-then-reverse trajectory with inpaint's RNG layout."""
    x_init = as_tensor(x_initial)
    single = x_init.ndim == 3
    if single:
        x_init = x_init[None]
    g_start = torch.Generator().manual_seed(int(seed))
    g_reverse = torch.Generator().manual_seed(int(seed) + 2)
    h = ddpm_forward(to_model_range(x_init), t_refine, torch.randn(x_init.shape, generator=g_start), schedule)
    with torch.no_grad():
        for t in range(t_refine, 0, -1):
            h = ddpm_reverse_step(h, t, schedule, denoiser, stochastic=True, generator=g_reverse)
    out = from_model_range(h).clamp(0.0, 1.0)
    return out[0] if single else out


def save_mask_png(mask, path):
    m = mask.m if isinstance(mask, BinaryMask) else np.asarray(mask)
    Image.fromarray(m.astype(bool)).save(path)


def load_mask_png(path):
    return np.asarray(Image.open(path)).astype(np.uint8)
