"""Three-stage co-registration: correlation crop, MI affine, elastic block matching.

Coordinates are ``(row, col)`` pixel units throughout.  A transform maps a
pixel position in the *fixed* (output) grid to a position in the *moving*
image that is sampled there, so ``warp_image(moving, T)`` lands on the
fixed grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, optimize, signal


class RegistrationError(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass
class AffineTransform:
    """2x3 matrix: ``moving_pos = M[:, :2] @ fixed_pos + M[:, 2]``."""

    matrix: np.ndarray
    residual: float = float("nan")

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(2, 3)
        if abs(np.linalg.det(self.matrix[:, :2])) <= 1e-6:
            raise ValueError("affine linear part is singular")

    @classmethod
    def identity(cls):
        return cls(np.array([[1.0, 0, 0], [0, 1.0, 0]]))

    @classmethod
    def from_params(cls, angle_deg=0.0, scale=1.0, shift=(0.0, 0.0), center=(0.0, 0.0)):
        """Rotation by ``angle_deg`` and isotropic ``scale`` about ``center``, then ``shift``."""
        th = np.deg2rad(angle_deg)
        lin = scale * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        c = np.asarray(center, dtype=np.float64)
        t = c - lin @ c + np.asarray(shift, dtype=np.float64)
        return cls(np.column_stack([lin, t]))

    @property
    def linear(self):
        return self.matrix[:, :2]

    @property
    def translation(self):
        return self.matrix[:, 2]

    def angle_deg(self):
        a = self.linear
        return float(np.rad2deg(np.arctan2(a[1, 0] - a[0, 1], a[0, 0] + a[1, 1])))

    def scale(self):
        return float(np.sqrt(abs(np.linalg.det(self.linear))))

    def inverse(self):
        inv = np.linalg.inv(self.linear)
        return AffineTransform(np.column_stack([inv, -inv @ self.translation]))

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear.T + self.translation


@dataclass
class DisplacementField:
    """Per-pixel ``(drow, dcol)``; the fixed pixel ``p`` samples moving at ``p + d(p)``."""

    field: np.ndarray  # (2, H, W)
    flagged_blocks: int = 0

    def __post_init__(self):
        self.field = np.asarray(self.field, dtype=np.float64)
        if self.field.ndim != 3 or self.field.shape[0] != 2:
            raise ValueError("displacement field must have shape (2, H, W)")
        if not np.isfinite(self.field).all():
            raise ValueError("displacement field must be finite")

    @property
    def shape(self):
        return self.field.shape[1:]

    def max_gradient(self):
        gy = np.gradient(self.field, axis=1)
        gx = np.gradient(self.field, axis=2)
        return float(np.max(np.hypot(gy, gx)))

    def __neg__(self):
        return DisplacementField(-self.field)

    def to_bytes(self):
        h, w = self.shape
        if h > 0xFFFF or w > 0xFFFF:
            raise ValueError("field too large for the DFLD header")
        return b"DFLD" + struct.pack("<HH", h, w) + self.field.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob):
        if blob[:4] != b"DFLD":
            raise ValueError("not a displacement field (bad magic)")
        h, w = struct.unpack("<HH", blob[4:8])
        arr = np.frombuffer(blob, dtype="<f4", offset=8)
        if arr.size != 2 * h * w:
            raise ValueError("displacement payload size does not match header")
        return cls(arr.reshape(2, h, w).astype(np.float64))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# warping


def _sample(image, rows, cols):
    return ndimage.map_coordinates(image, [rows, cols], order=1, mode="nearest")


def warp_image(image, transform):
    """Resample ``image`` (H, W) or (C, H, W) onto the fixed grid with bilinear weights."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return np.stack([warp_image(c, transform) for c in image])
    h, w = image.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    if isinstance(transform, AffineTransform):
        m = transform.matrix
        rows = m[0, 0] * rr + m[0, 1] * cc + m[0, 2]
        cols = m[1, 0] * rr + m[1, 1] * cc + m[1, 2]
    elif isinstance(transform, DisplacementField):
        if transform.shape != (h, w):
            raise ValueError("field and image shapes differ")
        rows = rr + transform.field[0]
        cols = cc + transform.field[1]
    else:
        raise TypeError("transform must be AffineTransform or DisplacementField")
    return _sample(image, rows, cols)


# ---------------------------------------------------------------------------
# coarse: normalized cross-correlation


def _zscore(a):
    a = np.asarray(a, dtype=np.float64)
    sd = a.std()
    if sd == 0:
        raise ValueError("cannot correlate a constant image")
    return (a - a.mean()) / sd


def _best_offset(score, offsets_r, offsets_c):
    best = score.max()
    cand = np.argwhere(score >= best - 1e-9 * max(1.0, abs(best)))
    dr, dc = offsets_r[cand[:, 0]], offsets_c[cand[:, 1]]
    k = np.lexsort((np.abs(dc), np.abs(dr), dr * dr + dc * dc))[0]
    return int(dr[k]), int(dc[k])


def coarse_match(moving, fixed):
    """Integer offset ``(dy, dx)`` of ``moving`` inside ``fixed`` by normalized cross-correlation.

    Same-sized images are compared under circular shifts, so the answer is
    the shift with ``fixed ~= np.roll(moving, (dy, dx))``.  A smaller
    ``moving`` is slid over ``fixed`` and the offset is its top-left corner.
    """
    m, f = np.asarray(moving, dtype=np.float64), np.asarray(fixed, dtype=np.float64)
    if m.shape[0] > f.shape[0] or m.shape[1] > f.shape[1]:
        raise ValueError("moving image must fit within fixed image")
    if m.shape == f.shape:
        a, b = _zscore(m), _zscore(f)
        xc = np.real(np.fft.ifft2(np.conj(np.fft.fft2(a)) * np.fft.fft2(b))) / a.size
        h, w = a.shape
        xc = np.fft.fftshift(xc)
        offs_r = np.arange(h) - h // 2
        offs_c = np.arange(w) - w // 2
        return _best_offset(xc, offs_r, offs_c)
    t = _zscore(m)
    n = t.size
    num = signal.fftconvolve(f, t[::-1, ::-1], mode="valid")
    ones = np.ones_like(t)
    s1 = signal.fftconvolve(f, ones, mode="valid")
    s2 = signal.fftconvolve(f * f, ones, mode="valid")
    var = np.maximum(s2 - s1 * s1 / n, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ncc = np.where(var > 1e-12, num / np.sqrt(var * n), -np.inf)
    return _best_offset(ncc, np.arange(ncc.shape[0]), np.arange(ncc.shape[1]))


# ---------------------------------------------------------------------------
# affine: mutual information


def mutual_information(a, b, bins=32, mask=None):
    """MI of two images with a linearly interpolated joint histogram."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if mask is not None:
        a, b = a[mask.ravel()], b[mask.ravel()]
    joint = _joint_hist(a, b, bins, (a.min(), a.max()), (b.min(), b.max()))
    return _mi_from_joint(joint)


def _bin_coords(x, lo, hi, bins):
    span = hi - lo if hi > lo else 1.0
    pos = np.clip((x - lo) / span * (bins - 1), 0, bins - 1)
    i0 = np.minimum(np.floor(pos).astype(int), bins - 2)
    return i0, pos - i0


def _joint_hist(a, b, bins, range_a, range_b):
    ia, fa = _bin_coords(a, *range_a, bins)
    ib, fb = _bin_coords(b, *range_b, bins)
    joint = np.zeros(bins * bins)
    for da, wa in ((0, 1 - fa), (1, fa)):
        for db, wb in ((0, 1 - fb), (1, fb)):
            joint += np.bincount((ia + da) * bins + ib + db, weights=wa * wb, minlength=bins * bins)
    return joint.reshape(bins, bins)


def _mi_from_joint(joint):
    p = joint / joint.sum()
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (pa @ pb)[nz])))


@dataclass
class MetricConfig:
    metric: str = "mi"  # "mi" or "ncc"
    bins: int = 32
    levels: int = 3
    max_iterations: int = 4000
    border: float = 0.1  # fraction of each side excluded from the metric


def _affine_from_vector(p, center, radius):
    # p: 4 linear entries scaled by radius (so 1 unit ~ 1 px at the border) + 2 shifts
    lin = np.eye(2) + p[:4].reshape(2, 2) / radius
    t = center - lin @ center + p[4:]
    return np.column_stack([lin, t])


def _vector_from_affine(m, center, radius):
    lin = m[:, :2]
    t = m[:, 2] - (center - lin @ center)
    return np.concatenate([((lin - np.eye(2)) * radius).ravel(), t])


def affine_register(moving, fixed, metric_config=None, initial=None):
    """Affine transform taking ``fixed`` grid positions into ``moving``.

    Maximises mutual information (or NCC) over a coarse-to-fine pyramid
    with Powell's method.  Raises :class:`RegistrationError` (carrying the
    best transform so far) when the optimiser exhausts its budget.
    """
    cfg = metric_config or MetricConfig()
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    if moving.shape != fixed.shape:
        raise ValueError("affine_register expects coarse-aligned images of equal shape")
    m_full = (initial.matrix if initial is not None else AffineTransform.identity().matrix).copy()
    best = None
    for level in reversed(range(cfg.levels)):
        f = 2 ** level
        mov = ndimage.zoom(ndimage.gaussian_filter(moving, 0.5 * (f - 1)), 1 / f, order=1) if f > 1 else moving
        fix = ndimage.zoom(ndimage.gaussian_filter(fixed, 0.5 * (f - 1)), 1 / f, order=1) if f > 1 else fixed
        h, w = fix.shape
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        radius = max(h, w) / 2.0
        # level coordinates: x_level = x_full / f  (corner-aligned approximation)
        m_lvl = m_full.copy()
        m_lvl[:, 2] /= f
        rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
        b = int(round(cfg.border * min(h, w)))
        inner = np.zeros((h, w), bool)
        inner[b:h - b, b:w - b] = True
        fix_in = fix[inner]
        range_f = (fix_in.min(), fix_in.max())
        range_m = (mov.min(), mov.max())

        def cost(p):
            m = _affine_from_vector(p, center, radius)
            rows = m[0, 0] * rr + m[0, 1] * cc + m[0, 2]
            cols = m[1, 0] * rr + m[1, 1] * cc + m[1, 2]
            warped = _sample(mov, rows[inner], cols[inner])
            if cfg.metric == "ncc":
                a = warped - warped.mean()
                z = fix_in - fix_in.mean()
                return -float(a @ z / (np.sqrt((a @ a) * (z @ z)) + 1e-12))
            return -_mi_from_joint(_joint_hist(fix_in, warped, cfg.bins, range_f, range_m))

        p0 = _vector_from_affine(m_lvl, center, radius)
        res = optimize.minimize(cost, p0, method="Powell",
                                options={"xtol": 1e-4, "ftol": 1e-10, "maxfev": cfg.max_iterations})
        p = res.x if cost(res.x) <= cost(p0) else p0
        m_lvl = _affine_from_vector(p, center, radius)
        m_full = m_lvl.copy()
        m_full[:, 2] *= f
        best = AffineTransform(m_full, residual=float(cost(p)))
        if not res.success and res.nfev >= cfg.max_iterations:
            raise RegistrationError("affine registration did not converge", best)
    return best


# ---------------------------------------------------------------------------
# elastic: pyramidal block matching


def _ncc_scores(block, region):
    """NCC of ``block`` against every same-size window of ``region``."""
    b = block - block.mean()
    nb = np.sqrt((b * b).sum())
    win = np.lib.stride_tricks.sliding_window_view(region, block.shape)
    wm = win.mean(axis=(-2, -1), keepdims=True)
    wz = win - wm
    num = np.einsum("ijkl,kl->ij", wz, b)
    den = np.sqrt((wz * wz).sum(axis=(-2, -1))) * nb
    return np.where(den > 1e-12, num / np.maximum(den, 1e-12), -1.0)


def _subpixel(scores, i, j):
    def peak(m, c, p):
        den = m - 2 * c + p
        return 0.0 if den >= 0 else float(np.clip(0.5 * (m - p) / den, -0.5, 0.5))

    h, w = scores.shape
    di = peak(scores[i - 1, j], scores[i, j], scores[i + 1, j]) if 0 < i < h - 1 else 0.0
    dj = peak(scores[i, j - 1], scores[i, j], scores[i, j + 1]) if 0 < j < w - 1 else 0.0
    return di, dj


def _match_level(moving, fixed, block, radius, min_std):
    """Block displacements on a half-overlapping grid; returns centers, vectors, flags."""
    h, w = fixed.shape
    step = max(block // 2, 1)
    pad = radius
    mp = np.pad(moving, pad, mode="edge")
    centers, vecs, flags = [], [], 0
    for r0 in range(0, max(h - block, 0) + 1, step):
        for c0 in range(0, max(w - block, 0) + 1, step):
            blk = fixed[r0:r0 + block, c0:c0 + block]
            center = (r0 + (blk.shape[0] - 1) / 2.0, c0 + (blk.shape[1] - 1) / 2.0)
            if blk.std() < min_std:
                centers.append(center)
                vecs.append((0.0, 0.0))
                flags += 1
                continue
            region = mp[r0:r0 + blk.shape[0] + 2 * pad, c0:c0 + blk.shape[1] + 2 * pad]
            sc = _ncc_scores(blk, region)
            i, j = np.unravel_index(np.argmax(sc), sc.shape)
            # an exact match is an integer shift; the parabola fit would only add bias
            di, dj = (0.0, 0.0) if sc[i, j] > 1 - 1e-9 else _subpixel(sc, i, j)
            centers.append(center)
            vecs.append((i + di - pad, j + dj - pad))
    return np.array(centers), np.array(vecs), flags


def _dense_from_blocks(centers, vecs, shape):
    rows = np.unique(centers[:, 0])
    cols = np.unique(centers[:, 1])
    grid = np.zeros((2, rows.size, cols.size))
    ri = np.searchsorted(rows, centers[:, 0])
    ci = np.searchsorted(cols, centers[:, 1])
    grid[:, ri, ci] = vecs.T
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    # fractional grid index of every pixel, clamped to the outermost block centers
    fr = np.interp(rr[:, 0], rows, np.arange(rows.size))
    fc = np.interp(cc[0], cols, np.arange(cols.size))
    FR, FC = np.meshgrid(fr, fc, indexing="ij")
    return np.stack([ndimage.map_coordinates(g, [FR, FC], order=1, mode="nearest") for g in grid])


def _gauss5(field):
    k = np.exp(-np.arange(-2, 3) ** 2 / (2 * 1.0 ** 2))
    k /= k.sum()
    out = ndimage.convolve1d(field, k, axis=-2, mode="nearest")
    return ndimage.convolve1d(out, k, axis=-1, mode="nearest")


def _compose(current, update):
    """Field of ``warp(warp(m, current), update)`` as a single displacement."""
    h, w = current.shape[1:]
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    rows, cols = rr + update[0], cc + update[1]
    moved = np.stack([_sample(current[k], rows, cols) for k in range(2)])
    return update + moved


def elastic_register(moving, fixed, pyramid_levels=3, block_size=16, search_radius=4,
                     iterations=2, min_std=1e-3, max_gradient=None):
    """Coarse-to-fine block matching by local normalized correlation.

    Returns a :class:`DisplacementField` with ``warp_image(moving, F) ~= fixed``;
    ``flagged_blocks`` counts textureless blocks that were given zero
    displacement.
    """
    if pyramid_levels < 1:
        raise ValueError("pyramid_levels must be >= 1")
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    if moving.shape != fixed.shape:
        raise ValueError("elastic_register expects pre-aligned images of equal shape")
    h, w = fixed.shape
    field = np.zeros((2, h, w))
    flagged = 0
    for level in reversed(range(pyramid_levels)):
        f = 2 ** level
        if min(h, w) // f < block_size:
            continue
        for _ in range(iterations):
            warped = warp_image(moving, DisplacementField(field))
            if f > 1:
                wl = ndimage.zoom(ndimage.gaussian_filter(warped, 0.5 * f), 1 / f, order=1)
                fl = ndimage.zoom(ndimage.gaussian_filter(fixed, 0.5 * f), 1 / f, order=1)
            else:
                wl, fl = warped, fixed
            centers, vecs, flags = _match_level(wl, fl, block_size, search_radius, min_std)
            flagged = flags
            upd = _dense_from_blocks(centers, vecs, fl.shape) * f
            if f > 1:
                upd = np.stack([ndimage.zoom(u, (h / u.shape[0], w / u.shape[1]), order=1) for u in upd])
            upd = _gauss5(upd)
            field = _compose(field, upd)
    field = _gauss5(field)
    if max_gradient is not None:
        g = DisplacementField(field).max_gradient()
        if g > max_gradient:
            field = field * (max_gradient / g)
    return DisplacementField(field, flagged)


def register_pipeline(moving, fixed, proxy=None, affine_config=None, **elastic_kw):
    """Coarse crop, affine, then elastic registration of ``moving`` onto ``fixed``.

    ``moving`` may be larger than ``fixed``; the best-matching window is cut
    out first.  ``proxy`` maps the (affine-aligned) moving image into the
    fixed image's modality before block matching.
    """
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    if moving.shape != fixed.shape:
        dy, dx = coarse_match(fixed, moving)
        moving = moving[dy:dy + fixed.shape[0], dx:dx + fixed.shape[1]]
        offset = (dy, dx)
    else:
        offset = (0, 0)
    affine = affine_register(moving, fixed, affine_config)
    aligned = warp_image(moving, affine)
    matched = proxy(aligned) if proxy is not None else aligned
    dfield = elastic_register(matched, fixed, **elastic_kw)
    return {"offset": offset, "affine": affine, "field": dfield,
            "registered": warp_image(aligned, dfield)}
