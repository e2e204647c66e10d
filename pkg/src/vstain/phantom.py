"""Synthetic tissue phantoms, autofluorescence z-stacks and H&E-like targets.

A phantom is three maps on one grid: compact nuclei blobs, filamentous
stroma and a slowly varying cytoplasm/background density.  From it we
render

* two autofluorescence channels (DAPI-like, TxRed-like), defocused with an
  isotropic Gaussian whose width grows linearly with ``|z|``, and
* a brightfield RGB image by optical-density mixing of a hematoxylin-like
  and an eosin-like absorber, stored as YCbCr for training.

Rendered autofluorescence is quantised to 16 bits and the stain image to
8 bits before it is returned, so what is held in memory is exactly what
the PNG files contain.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage, special

from .metrics import rgb_to_ycbcr, ycbcr_to_rgb

TRAIN_Z = tuple(np.round(np.arange(-2.0, 2.01, 0.5), 1))
EVAL_Z = tuple(np.round(np.arange(-3.0, 3.01, 0.5), 1))

SIGMA0 = 0.5  # px, in-focus blur
KAPPA = 1.0  # px per um of defocus
NOISE = 0.01  # fraction of dynamic range

# absorbance per unit stain amount in R, G, B
HEMATOXYLIN_OD = np.array([0.65, 0.70, 0.29]) * 1.6
EOSIN_OD = np.array([0.07, 0.99, 0.11]) * 1.0


@dataclass
class Phantom:
    nuclei_map: np.ndarray
    stroma_map: np.ndarray
    background: np.ndarray
    seed: int

    @property
    def shape(self):
        return self.nuclei_map.shape


@dataclass
class FovRecord:
    id: int
    seed: int
    split: str
    af_stack: dict  # z (um) -> (2, H, W) float array
    stained_rgb: np.ndarray  # (H, W, 3) uint8

    @property
    def z_axial_list(self):
        return sorted(self.af_stack)

    @property
    def af_infocus(self):
        return self.af_stack[0.0]

    @property
    def stained_target(self):
        """(3, H, W) YCbCr in code values 0..255."""
        return rgb_to_ycbcr(self.stained_rgb.astype(np.float64)).transpose(2, 0, 1)


@dataclass
class DatasetManifest:
    root: str
    patch_size: int
    augment: bool
    entries: list = field(default_factory=list)  # dicts: id, split, planes, patch_size, seed

    def ids(self, split):
        return [e["id"] for e in self.entries if e["split"] == split]

    def seeds(self, split):
        return {e["seed"] for e in self.entries if e["split"] == split}

    def __len__(self):
        return len(self.entries)


def _blob_count(rng, density, size):
    return rng.poisson(density * size * size / 60.0)


def _place_nuclei(rng, n, size, tries=60):
    """Centres, radii and orientations of up to ``n`` non-touching nuclei."""
    placed = []
    for _ in range(n * tries):
        if len(placed) == n:
            break
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(1.8, 3.5, 2)
        th = rng.uniform(0, np.pi)
        r = max(ry, rx)
        if all(np.hypot(cy - q[0], cx - q[1]) >= r + max(q[2], q[3]) + 1.5 for q in placed):
            placed.append((cy, cx, ry, rx, th))
    return placed


def generate_phantom(seed, size=64, nuclei_density=0.3):
    """Procedural tissue phantom; identical for identical arguments."""
    if size < 64:
        raise ValueError("phantom size must be >= 64")
    if not 0.0 <= nuclei_density < 1.0:
        raise ValueError("nuclei_density must be in [0, 1)")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    nuclei = np.zeros((size, size))
    n = _blob_count(rng, nuclei_density, size) if nuclei_density > 0 else 0
    for cy, cx, ry, rx, th in _place_nuclei(rng, n, size):
        dy, dx = yy - cy, xx - cx
        u = (dy * np.cos(th) + dx * np.sin(th)) / ry
        v = (-dy * np.sin(th) + dx * np.cos(th)) / rx
        r2 = u * u + v * v
        blob = rng.uniform(0.7, 1.0) * special.expit((1.0 - r2) * 6.0)
        nuclei = np.maximum(nuclei, blob)
    nuclei[nuclei < 1e-3] = 0.0

    # fibres: thin level sets of band-limited noise
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), 4.0, mode="wrap")
    field_ /= field_.std() + 1e-12
    fibres = np.exp(-((field_ / 0.25) ** 2))
    field2 = ndimage.gaussian_filter(rng.standard_normal((size, size)), 2.5, mode="wrap")
    field2 /= field2.std() + 1e-12
    fibres = np.maximum(fibres, 0.6 * np.exp(-((field2 / 0.2) ** 2)))
    stroma = np.clip(fibres * (1.0 - nuclei), 0.0, 1.0)

    bg = ndimage.gaussian_filter(rng.standard_normal((size, size)), 10.0, mode="wrap")
    bg = (bg - bg.min()) / (np.ptp(bg) + 1e-12)
    background = np.clip(0.2 + 0.6 * bg, 0.0, 1.0)
    return Phantom(nuclei, stroma, background, int(seed))


def defocus_sigma(z_axial):
    """Gaussian blur width in pixels at axial offset ``z_axial`` (um)."""
    return SIGMA0 + KAPPA * abs(float(z_axial))


def _plane_seed(seed, z_axial):
    return (int(seed) * 1009 + int(round(float(z_axial) * 10)) + 500) % (2 ** 32)


def quantize16(img):
    return np.round(np.clip(img, 0.0, 1.0) * 65535.0) / 65535.0


def render_autofluorescence(phantom, z_axial):
    """(2, H, W) autofluorescence at axial offset ``z_axial``; values in [0, 1]."""
    if abs(z_axial) > 3.0 + 1e-9:
        raise ValueError("z_axial must lie within +-3 um")
    nuc, stro, bg = phantom.nuclei_map, phantom.stroma_map, phantom.background
    dapi = 0.05 + 0.70 * nuc + 0.12 * stro + 0.10 * bg
    txred = 0.05 + 0.15 * nuc + 0.60 * stro + 0.15 * bg
    sig = defocus_sigma(z_axial)
    rng = np.random.default_rng(_plane_seed(phantom.seed, z_axial))
    out = np.empty((2,) + phantom.shape)
    for c, img in enumerate((dapi, txred)):
        out[c] = ndimage.gaussian_filter(img, sig, mode="reflect") + rng.normal(0.0, NOISE, phantom.shape)
    return quantize16(out)


def render_hne_rgb(phantom):
    """(H, W, 3) uint8 brightfield rendering."""
    hema = 1.0 * phantom.nuclei_map
    eosin = 0.9 * phantom.stroma_map + 0.35 * phantom.background * (1.0 - phantom.nuclei_map)
    od = hema[..., None] * HEMATOXYLIN_OD + eosin[..., None] * EOSIN_OD
    rgb = 255.0 * np.exp(-od)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def render_hne(phantom):
    """(3, H, W) YCbCr stain target in code values."""
    return rgb_to_ycbcr(render_hne_rgb(phantom).astype(np.float64)).transpose(2, 0, 1)


def make_record(fov_id, seed, split, size=64, nuclei_density=0.3, z_list=None):
    z_list = z_list if z_list is not None else (EVAL_Z if split == "test" else TRAIN_Z)
    ph = generate_phantom(seed, size, nuclei_density)
    stack = {float(z): render_autofluorescence(ph, z) for z in z_list}
    return FovRecord(int(fov_id), int(seed), split, stack, render_hne_rgb(ph))


# ---------------------------------------------------------------------------
# storage


def _af_name(fov_id, z, channel):
    return f"fov{fov_id:04d}_z{z:+.1f}um_{channel}.png"


def _stain_name(fov_id):
    return f"fov{fov_id:04d}_stain.png"


def save_record(rec, root):
    os.makedirs(root, exist_ok=True)
    for z, planes in rec.af_stack.items():
        for c, name in enumerate(("dapi", "txred")):
            arr = np.round(planes[c] * 65535.0).astype(np.uint16)
            Image.fromarray(arr).save(os.path.join(root, _af_name(rec.id, z, name)))
    Image.fromarray(rec.stained_rgb, mode="RGB").save(os.path.join(root, _stain_name(rec.id)))


def load_record(root, entry):
    fov_id, split = int(entry["id"]), entry["split"]
    z_list = EVAL_Z if int(entry["planes"]) == len(EVAL_Z) else TRAIN_Z
    stack = {}
    for z in z_list:
        planes = []
        for name in ("dapi", "txred"):
            path = os.path.join(root, _af_name(fov_id, z, name))
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing plane {path}")
            planes.append(np.asarray(Image.open(path), dtype=np.float64) / 65535.0)
        stack[float(z)] = np.stack(planes)
    rgb = np.asarray(Image.open(os.path.join(root, _stain_name(fov_id))).convert("RGB"), dtype=np.uint8)
    return FovRecord(fov_id, int(entry["seed"]), split, stack, rgb)


MANIFEST_COLUMNS = ("id", "split", "planes", "patch_size", "seed")


def write_manifest(manifest):
    path = os.path.join(manifest.root, "manifest.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        w.writeheader()
        for e in manifest.entries:
            w.writerow({k: e[k] for k in MANIFEST_COLUMNS})
    return path


def read_manifest(root, augment=True):
    with open(os.path.join(root, "manifest.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    entries = [
        {"id": int(r["id"]), "split": r["split"], "planes": int(r["planes"]),
         "patch_size": int(r["patch_size"]), "seed": int(r["seed"])}
        for r in rows
    ]
    patch = entries[0]["patch_size"] if entries else 64
    return DatasetManifest(root, patch, augment, entries)


def synthesize_dataset(root, n_train, n_test, n_val=0, size=64, patch_size=64,
                       nuclei_density=0.3, seed=0, augment=True):
    """Render and store ``n_train + n_val`` 9-plane and ``n_test`` 13-plane records.

    Phantom seeds are drawn without replacement, so splits never share a seed.
    """
    if n_train < 1 or n_test < 1 or n_val < 0:
        raise ValueError("need at least one training and one test record")
    rng = np.random.default_rng(seed)
    total = n_train + n_val + n_test
    seeds = rng.choice(10 * total + 1000, size=total, replace=False)
    splits = ["train"] * n_train + ["validation"] * n_val + ["test"] * n_test
    manifest = DatasetManifest(root, patch_size, augment)
    for i, (split, s) in enumerate(zip(splits, seeds)):
        rec = make_record(i, int(s), split, size, nuclei_density)
        save_record(rec, root)
        manifest.entries.append({
            "id": i, "split": split, "planes": len(rec.af_stack),
            "patch_size": patch_size, "seed": int(s),
        })
    write_manifest(manifest)
    return manifest


def load_split(manifest, split):
    return [load_record(manifest.root, e) for e in manifest.entries if e["split"] == split]


# ---------------------------------------------------------------------------
# preprocessing


def normalize_input(image, eps=1e-12):
    """Per-channel zero mean, unit variance over the last two axes."""
    image = np.asarray(image, dtype=np.float64)
    mu = image.mean(axis=(-2, -1), keepdims=True)
    sd = image.std(axis=(-2, -1), keepdims=True)
    if np.any(sd <= eps):
        raise ValueError("cannot normalise a constant channel")
    return (image - mu) / sd


def to_patches(image, patch_size, n=1, rng=None):
    """``n`` random ``patch_size`` crops of a (..., H, W) array."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch {patch_size} larger than image {(h, w)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    out = []
    for _ in range(n):
        oy = int(rng.integers(0, h - patch_size + 1))
        ox = int(rng.integers(0, w - patch_size + 1))
        out.append(image[..., oy:oy + patch_size, ox:ox + patch_size])
    return out


def dihedral(image, index):
    """Element ``index`` (0..7) of the dihedral group acting on the last two axes."""
    if not 0 <= index < 8:
        raise ValueError("dihedral index must be in 0..7")
    out = np.rot90(image, index % 4, axes=(-2, -1))
    if index >= 4:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


def dihedral_inverse(image, index):
    if index >= 4:
        image = np.flip(image, axis=-1)
    return np.ascontiguousarray(np.rot90(image, -(index % 4), axes=(-2, -1)))


def augment8(*arrays):
    """All 8 flips/rotations; paired arrays receive the same transform index.

    Returns a list with one tuple (or array, for a single input) per index.
    """
    for a in arrays:
        if a.shape[-1] != a.shape[-2]:
            raise ValueError("augment8 needs square patches")
    out = []
    for k in range(8):
        t = tuple(dihedral(a, k) for a in arrays)
        out.append(t[0] if len(arrays) == 1 else t)
    return out
