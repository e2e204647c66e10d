"""Inference with the three staining frameworks and the defocus sweep.

* framework 1: stain the (possibly defocused) input directly
* framework 2: refocus first, then stain
* framework 3: stain the in-focus image of the same field (the reference)

Networks work on per-channel standardised autofluorescence and emit YCbCr
scaled to [0, 1]; :func:`infer` returns 8-bit RGB for export.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .metrics import (
    METRIC_COLUMNS,
    TTEST_COLUMNS,
    color_difference,
    msssim,
    paired_upper_t_test,
    psnr,
    ssim,
    write_csv,
    ycbcr_to_rgb_uint8,
)
from .phantom import EVAL_Z, normalize_input
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

CHANNELS = ("Y", "Cb", "Cr")


def _run(net, x, batch=10):
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    xb = x[None] if single else x
    outs = []
    with no_grad():
        for i in range(0, len(xb), batch):
            outs.append(net(Tensor(xb[i:i + batch])).data)
    out = np.concatenate(outs)
    return out[0] if single else out


def _check_af(af):
    af = np.asarray(af, dtype=np.float64)
    if af.ndim not in (3, 4) or af.shape[-3] != 2:
        raise ValueError(f"expected 2-channel autofluorescence (2, H, W), got {af.shape}")
    return af


def stain_ycbcr(af, framework, stainer, refocuser=None):
    """YCbCr code values (0..255 scale) of ``af`` under ``framework`` 1, 2 or 3.

    For framework 3 ``af`` must be the in-focus image; the code path is the
    same as framework 1.
    """
    if framework not in (1, 2, 3):
        raise ValueError("framework must be 1, 2 or 3")
    if stainer is None:
        raise ValueError("every framework needs a stainer")
    af = _check_af(af)
    x = normalize_input(af)
    if framework == 2:
        if refocuser is None:
            raise ValueError("framework 2 needs a refocuser")
        x = _run(refocuser, x)
    return _run(stainer, x) * 255.0


def infer(af, framework, stainer, refocuser=None):
    """8-bit RGB image, channels last."""
    ycc = stain_ycbcr(af, framework, stainer, refocuser)
    return ycbcr_to_rgb_uint8(np.moveaxis(ycc, -3, -1))


def _blend_weight(tile, overlap):
    ramp = np.ones(tile)
    if overlap:
        r = (np.arange(overlap) + 0.5) / overlap
        ramp[:overlap] = r
        ramp[-overlap:] = r[::-1]
    return np.outer(ramp, ramp)


def tiled_stain_ycbcr(af, framework, stainer, refocuser=None, tile=64, overlap=16):
    """Stain a large field tile by tile and blend overlaps with linear ramps.

    Each tile is standardised on its own, as during training.
    """
    af = _check_af(af)
    if af.ndim != 3:
        raise ValueError("tiled inference takes a single (2, H, W) field")
    _, h, w = af.shape
    if h < tile or w < tile:
        raise ValueError("image smaller than one tile")
    if not 0 <= overlap < tile:
        raise ValueError("overlap must be in [0, tile)")
    step = tile - overlap

    def starts(n):
        s = list(range(0, n - tile + 1, step))
        if s[-1] != n - tile:
            s.append(n - tile)
        return s

    out = np.zeros((3, h, w))
    acc = np.zeros((h, w))
    wt = _blend_weight(tile, overlap)
    for r in starts(h):
        for c in starts(w):
            y = stain_ycbcr(af[:, r:r + tile, c:c + tile], framework, stainer, refocuser)
            out[:, r:r + tile, c:c + tile] += y * wt
            acc[r:r + tile, c:c + tile] += wt
    return out / acc


@dataclass
class DefocusEvaluation:
    z_list: tuple
    metric_rows: list = field(default_factory=list)
    ttest_rows: list = field(default_factory=list)
    # (framework, z) -> array (n_fov, 3) of |dY|, |dCb|, |dCr|
    diffs: dict = field(default_factory=dict)

    def mean_diff(self, framework, z):
        return self.diffs[(framework, z)].mean(axis=0)

    def ttest(self, z, channel):
        for row in self.ttest_rows:
            if row["z_axial_um"] == z and row["channel"] == channel:
                return row
        raise KeyError((z, channel))


def evaluate_color_vs_defocus(records, stainer, refocuser, z_list=EVAL_Z, out_dir=None,
                              image_metrics=True):
    """Colour differences of frameworks 1 and 2 against framework 3 across defocus.

    For each plane and framework, every field gets a ColorDifferenceRecord
    against the framework-3 output of its in-focus plane; a paired
    upper-tailed t-test per channel asks whether framework 2 is closer.
    With ``out_dir`` the metric and t-test tables are written as CSV and
    the curves as ``color_vs_defocus.png``.
    """
    if len(records) < 2:
        raise ValueError("need at least two fields of view")
    for rec in records:
        missing = [z for z in z_list if z not in rec.af_stack]
        if missing or 0.0 not in rec.af_stack:
            raise ValueError(f"field {rec.id} is missing planes {missing or [0.0]}")
    z_list = tuple(float(z) for z in z_list)
    res = DefocusEvaluation(z_list)
    ref_in = np.stack([normalize_input(r.af_infocus) for r in records])
    ref = _run(stainer, ref_in) * 255.0
    for z in z_list:
        x = np.stack([normalize_input(r.af_stack[z]) for r in records])
        outs = {1: _run(stainer, x) * 255.0, 2: _run(stainer, _run(refocuser, x)) * 255.0}
        for fw, imgs in outs.items():
            rows = []
            for rec, img, r in zip(records, imgs, ref):
                cd = color_difference(img, r, z, fw)
                rows.append(cd.as_tuple())
                row = {"fov_id": rec.id, "framework": fw, "z_axial_um": z,
                       "dY": cd.dY, "dCb": cd.dCb, "dCr": cd.dCr,
                       "psnr_db": "", "ssim": "", "msssim": ""}
                if image_metrics:
                    row["psnr_db"] = psnr(r, img, 255.0)
                    row["ssim"] = float(np.mean([ssim(r[c], img[c], data_range=255.0) for c in range(3)]))
                    row["msssim"] = msssim(r, img, data_range=255.0)
                res.metric_rows.append(row)
            res.diffs[(fw, z)] = np.array(rows)
        for k, ch in enumerate(CHANNELS):
            t = paired_upper_t_test(res.diffs[(1, z)][:, k], res.diffs[(2, z)][:, k])
            res.ttest_rows.append({"z_axial_um": z, "channel": ch, "t": t.t_statistic,
                                   "dof": t.degrees_of_freedom, "p": t.p_value})
        log.info("z=%+.1f f1=%s f2=%s", z, res.mean_diff(1, z).round(2), res.mean_diff(2, z).round(2))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, "metrics.csv"), METRIC_COLUMNS, res.metric_rows)
        write_csv(os.path.join(out_dir, "ttest.csv"), TTEST_COLUMNS, res.ttest_rows)
        plot_color_vs_defocus(res, os.path.join(out_dir, "color_vs_defocus.png"))
    return res


def plot_color_vs_defocus(res, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    z = np.array(res.z_list)
    fig, axes = plt.subplots(2, 3, figsize=(11, 6), sharex=True)
    for k, ch in enumerate(CHANNELS):
        ax = axes[0, k]
        for fw, style in ((1, "o-"), (2, "s-")):
            ax.plot(z, [res.mean_diff(fw, zz)[k] for zz in res.z_list], style, label=f"framework {fw}")
        ax.set_title(f"|d{ch}|")
        ax.legend(fontsize=8)
        ax = axes[1, k]
        ax.semilogy(z, [max(res.ttest(zz, ch)["p"], 1e-300) for zz in res.z_list], "k.-")
        ax.axhline(0.05, color="r", lw=0.8)
        ax.set_xlabel("z (um)")
        ax.set_ylabel("p")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
