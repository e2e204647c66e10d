"""Generator and discriminator objectives for the stainer and the refocuser.

All distance-like terms take ``(reference, output)`` tensors of identical
shape, either ``(C, H, W)`` or ``(N, C, H, W)``.  Weighted totals come
back as ``(total, breakdown)`` where ``breakdown`` maps term names to the
*unweighted* float value of each term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, filter2d_valid, pool2, relu, sigmoid

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class VsLossWeights:
    eta: float = 2000.0
    lam: float = 0.02

    def __post_init__(self):
        if self.eta < 0 or self.lam < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class DrLossWeights:
    a: float = 300.0
    b: float = 2000.0
    c: float = 500.0
    d: float = 100.0
    e: float = 100.0

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d, self.e) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class MsssimParams:
    """Multi-scale SSIM settings.

    ``weights`` holds one exponent per scale. When fewer than five scales
    are requested the leading entries of the standard five-scale table are
    taken and renormalised to sum to one.  The luminance exponent is the
    last weight; the contrast-structure exponent of scale ``j`` is
    ``weights[j]``.
    """

    scales: int = 5
    weights: tuple = None
    window: int = 11
    sigma: float = 1.5
    data_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if self.weights is None:
            if self.scales <= len(MSSSIM_WEIGHTS):
                w = np.asarray(MSSSIM_WEIGHTS[: self.scales])
                self.weights = tuple(w / w.sum())
            else:
                self.weights = (1.0 / self.scales,) * self.scales
        if len(self.weights) != self.scales:
            raise ValueError("need one weight per scale")

    @property
    def c1(self):
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.data_range) ** 2

    @property
    def c3(self):
        return self.c2 / 2


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mae_loss(target, output):
    """Mean absolute difference over every element (pixels and channels)."""
    _same_shape(target, output)
    return (target - output).abs().mean()


def tv_loss(image):
    """Anisotropic total variation summed over channels (and batch)."""
    h, w = image.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError("tv_loss needs spatial dims >= 2")
    dv = image[..., 1:, :] - image[..., :-1, :]
    dh = image[..., :, 1:] - image[..., :, :-1]
    return dv.abs().sum() + dh.abs().sum()


def _check_prob(d, what):
    v = np.asarray(d.data if isinstance(d, Tensor) else d)
    if np.any(v < 0) or np.any(v > 1):
        raise ValueError(f"{what} must lie in [0, 1]")


def adv_loss(d_fake):
    """Least-squares generator term, averaged over the batch."""
    d_fake = d_fake if isinstance(d_fake, Tensor) else Tensor(d_fake)
    _check_prob(d_fake, "discriminator output")
    return ((1.0 - d_fake) ** 2).mean()


def discriminator_loss(d_fake, d_real):
    d_fake = d_fake if isinstance(d_fake, Tensor) else Tensor(d_fake)
    d_real = d_real if isinstance(d_real, Tensor) else Tensor(d_real)
    _check_prob(d_fake, "discriminator output")
    _check_prob(d_real, "discriminator output")
    return (d_fake ** 2).mean() + ((1.0 - d_real) ** 2).mean()


def vs_discriminator_loss(z, fake, disc):
    """Stainer discriminator objective; ``fake`` should be detached."""
    return discriminator_loss(disc(fake), disc(z))


def dr_discriminator_loss(y, fake, disc):
    """Refocuser discriminator objective with ``y`` as the real class."""
    return discriminator_loss(disc(fake), disc(y))


def vs_generator_loss(y, z, generator, disc, w=None, output=None):
    """MAE + eta * adversarial + lambda * TV for the virtual stainer.

    ``output`` may be passed when ``generator(y)`` was already evaluated.
    """
    w = w or VsLossWeights()
    out = output if output is not None else generator(y)
    terms = {
        "mae": mae_loss(z, out),
        "adv": adv_loss(disc(out)) if w.eta else None,
        "tv": tv_loss(out) if w.lam else None,
    }
    total = terms["mae"]
    if terms["adv"] is not None:
        total = total + w.eta * terms["adv"]
    if terms["tv"] is not None:
        total = total + w.lam * terms["tv"]
    return total, {k: (v.item() if v is not None else 0.0) for k, v in terms.items()}


def _map_l1(a, b):
    return (a - b).abs().mean()


def perceptual_loss(y, output, disc, y_taps=None):
    """Mean over discriminator blocks of the per-element L1 feature distance."""
    _same_shape(y, output)
    fy = y_taps if y_taps is not None else disc.features(y)
    return _taps_l1(fy, disc.features(output))


def style_loss(y, output, frozen_vs, y_taps=None):
    """Mean over stainer encoder levels of the per-element L1 feature distance.

    ``frozen_vs`` must be frozen; only ``output`` receives gradient.
    """
    if not getattr(frozen_vs, "frozen", False):
        raise ValueError("style loss requires a frozen virtual-staining network")
    _same_shape(y, output)
    fy = y_taps if y_taps is not None else frozen_vs.features(y)
    return _taps_l1(fy, frozen_vs.features(output))


def _ssim_components(f, g, params, win):
    mu_f = filter2d_valid(f, win)
    mu_g = filter2d_valid(g, win)
    e_ff = filter2d_valid(f * f, win)
    e_gg = filter2d_valid(g * g, win)
    e_fg = filter2d_valid(f * g, win)
    mu_ff, mu_gg, mu_fg = mu_f * mu_f, mu_g * mu_g, mu_f * mu_g
    var_f, var_g, cov = e_ff - mu_ff, e_gg - mu_gg, e_fg - mu_fg
    c1, c2 = params.c1, params.c2
    lum = (2.0 * mu_fg + c1) / (mu_ff + mu_gg + c1)
    cs = (2.0 * cov + c2) / (var_f + var_g + c2)
    return lum, cs


def msssim_index(target, output, params=None):
    """Multi-scale SSIM index, averaged over channels and batch."""
    params = params or MsssimParams()
    _same_shape(target, output)
    min_side = params.window * 2 ** (params.scales - 1)
    if min(target.shape[-2:]) < min_side:
        raise ValueError(
            f"image {target.shape[-2:]} too small for {params.scales} scales "
            f"with a {params.window}px window (need >= {min_side})"
        )
    win = gaussian_window(params.window, params.sigma)
    f, g = target, output
    value = None
    spatial = (-2, -1)
    for j in range(params.scales):
        lum, cs = _ssim_components(f, g, params, win)
        last = j == params.scales - 1
        term = (lum * cs).mean(axis=spatial) if last else cs.mean(axis=spatial)
        term = relu(term) ** params.weights[j]
        value = term if value is None else value * term
        if not last:
            f, g = _downsample(f), _downsample(g)
    return value.mean()


def _downsample(x):
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        x = x[..., : h - h % 2, : w - w % 2]
    return pool2(x, "avg")


def msssim_loss(target, output, params=None):
    return 1.0 - msssim_index(target, output, params)


def dr_generator_loss(x, y, generator, disc, frozen_vs, w=None, msssim=None, output=None, style_taps=None):
    """Weighted refocuser objective ``a*adv + b*perc + c*style + d*mae + e*msssim``."""
    w = w or DrLossWeights()
    out = output if output is not None else generator(x)
    _same_shape(y, out)
    if msssim is None:
        msssim = MsssimParams(scales=_max_scales(y.shape[-2:]), data_range=_range(y))
    y_taps = disc.features(y) if w.b else None
    out_taps = disc.features(out) if (w.a or w.b) else None
    terms = {}
    if w.a:
        terms["adv"] = adv_loss(sigmoid(disc.logits(None, taps=out_taps)))
    if w.b:
        terms["perceptual"] = _taps_l1(y_taps, out_taps)
    if w.c:
        terms["style"] = style_loss(y, out, frozen_vs, y_taps=style_taps)
    terms["mae"] = mae_loss(y, out)
    if w.e:
        terms["msssim"] = msssim_loss(y, out, msssim)
    weights = {"adv": w.a, "perceptual": w.b, "style": w.c, "mae": w.d, "msssim": w.e}
    total = None
    for k, t in terms.items():
        if weights[k] == 0:
            continue
        total = weights[k] * t if total is None else total + weights[k] * t
    if total is None:
        total = terms["mae"] * 0.0
    breakdown = {k: 0.0 for k in weights}
    breakdown.update({k: t.item() for k, t in terms.items()})
    return total, breakdown


def _taps_l1(fy, fo):
    total = None
    for a, b in zip(fy, fo):
        term = _map_l1(a.detach(), b)
        total = term if total is None else total + term
    return total * (1.0 / len(fo))


def _range(t):
    d = np.asarray(t.data)
    r = float(d.max() - d.min())
    return r if r > 0 else 1.0


def _max_scales(hw, window=11, cap=5):
    s = 1
    while s < cap and min(hw) >= window * 2 ** s:
        s += 1
    return s
