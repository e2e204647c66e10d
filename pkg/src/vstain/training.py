"""Two-stage adversarial training.

Stage one fits the virtual stainer on in-focus autofluorescence and YCbCr
targets.  Stage two fits the refocuser on randomly chosen planes of the
training z-stacks while the finished stainer is frozen and only supplies
style features.  Each iteration does one discriminator update followed by
one generator update, both with Adam.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .checkpoint import Checkpoint
from .models import build_discriminator, build_dr_generator, build_vs_generator
from .optim import Adam
from .phantom import TRAIN_Z, dihedral, normalize_input, to_patches
from .tensor import NonFiniteError, Tensor, backward, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    generator: object
    discriminator: object
    checkpoint: Checkpoint
    history: list = field(default_factory=list)
    plateau_iteration: int | None = None
    ablation: bool = False


@contextlib.contextmanager
def _frozen(net):
    flags = [(p, p.requires_grad) for p in net.parameters()]
    for p, _ in flags:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in flags:
            p.requires_grad = flag


def stain_target(record):
    """YCbCr target scaled to [0, 1]."""
    return record.stained_target / 255.0


class _Sampler:
    """Deterministic mini-batch source over a list of records."""

    def __init__(self, records, cfg, rng):
        if not records:
            raise ValueError("no training records")
        self.records = records
        self.cfg = cfg
        self.rng = rng

    def _crop_aug(self, arrays):
        stacked = np.concatenate(arrays, axis=0)
        (patch,) = to_patches(stacked, self.cfg.patch_size, 1, self.rng)
        k = int(self.rng.integers(0, 8)) if self.cfg.augment else 0
        patch = dihedral(patch, k)
        out, start = [], 0
        for a in arrays:
            out.append(patch[start:start + a.shape[0]])
            start += a.shape[0]
        return out

    def stainer_batch(self):
        xs, zs = [], []
        for _ in range(self.cfg.batch_size):
            rec = self.records[int(self.rng.integers(len(self.records)))]
            x, z = self._crop_aug([rec.af_infocus, stain_target(rec)])
            xs.append(normalize_input(x))
            zs.append(z)
        return np.stack(xs), np.stack(zs)

    def refocuser_batch(self):
        xs, ys = [], []
        planes = [z for z in TRAIN_Z]
        for _ in range(self.cfg.batch_size):
            rec = self.records[int(self.rng.integers(len(self.records)))]
            zpick = planes[int(self.rng.integers(len(planes)))]
            x, y = self._crop_aug([rec.af_stack[zpick], rec.af_infocus])
            xs.append(normalize_input(x))
            ys.append(normalize_input(y))
        return np.stack(xs), np.stack(ys)


def _plateau(history, key, budget):
    """First iteration where the windowed loss changed by < 1 % over 10 % of the budget."""
    win = max(budget // 10, 5)
    vals = np.array([h[key] for h in history])
    for i in range(2 * win, len(vals) + 1, win):
        prev, cur = vals[i - 2 * win:i - win].mean(), vals[i - win:i].mean()
        if prev != 0 and abs(cur - prev) / abs(prev) < 0.01:
            return history[i - 1]["iteration"]
    return None


def _check_finite(value, it, make_ckpt):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at iteration {it}", make_ckpt())


def train_virtual_stainer(records, cfg, callback=None):
    """Fit the stainer GAN on in-focus training records."""
    if cfg.stage != "virtual_stainer":
        raise ValueError("config stage must be virtual_stainer")
    rng = np.random.default_rng(cfg.seed)
    gen = build_vs_generator(cfg.base_channels, seed=cfg.seed)
    disc = build_discriminator(3, cfg.disc_base_channels, seed=cfg.seed + 1)
    g_opt = Adam(gen.parameters(), cfg.gen_lr)
    d_opt = Adam(disc.parameters(), cfg.disc_lr)
    sampler = _Sampler(records, cfg, rng)
    weights = cfg.vs_weights
    history = []

    def snapshot(it):
        return Checkpoint.from_training(cfg, it, {"generator": gen, "discriminator": disc},
                                        {"generator": g_opt, "discriminator": d_opt})

    last_good = None
    for it in range(1, cfg.max_iterations + 1):
        y, z = sampler.stainer_batch()
        y, z = Tensor(y), Tensor(z)
        try:
            with no_grad():
                fake = gen(y)
            for _ in range(cfg.disc_steps):
                d_loss = losses.vs_discriminator_loss(z, fake, disc)
                backward(d_loss, d_opt.params)
                d_opt.step()
            with _frozen(disc):
                g_loss, parts = losses.vs_generator_loss(y, z, gen, disc, weights)
                backward(g_loss, g_opt.params)
            g_opt.step()
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite values at iteration {it}: {exc}", last_good or snapshot(it - 1))
        _check_finite(g_loss.item(), it, lambda: last_good or snapshot(it - 1))
        rec = {"iteration": it, "g_loss": g_loss.item(), "d_loss": d_loss.item(), **parts}
        history.append(rec)
        if callback:
            callback(rec)
        if it % cfg.log_every == 0:
            log.info("vs it=%d g=%.4f d=%.4f mae=%.4f", it, rec["g_loss"], rec["d_loss"], rec["mae"])
    plateau = _plateau(history, "mae", cfg.max_iterations) if history else None
    if plateau:
        log.info("stainer loss plateau detected at iteration %d", plateau)
    ckpt = snapshot(cfg.max_iterations)
    return TrainResult(gen, disc, ckpt, history, plateau)


def train_refocuser(records, vs_checkpoint, cfg, callback=None, check_every=100):
    """Fit the refocuser GAN with the style term taken from a frozen stainer."""
    if cfg.stage != "refocuser":
        raise ValueError("config stage must be refocuser")
    if vs_checkpoint is None:
        raise ValueError("refocuser training needs a finished virtual-stainer checkpoint")
    stainer = vs_checkpoint.network("generator")
    if getattr(stainer, "variant", None) != "virtual_stainer":
        raise ValueError("checkpoint does not contain a virtual-stainer generator")
    stainer.freeze()
    frozen_hash = stainer.parameter_hash()

    rng = np.random.default_rng(cfg.seed)
    gen = build_dr_generator(cfg.base_channels, seed=cfg.seed, input_residual=cfg.input_residual,
                             standardize_output=cfg.standardize_output)
    disc = build_discriminator(2, cfg.disc_base_channels, seed=cfg.seed + 1)
    g_opt = Adam(gen.parameters(), cfg.gen_lr)
    d_opt = Adam(disc.parameters(), cfg.disc_lr)
    sampler = _Sampler(records, cfg, rng)
    weights = cfg.dr_weights
    ablation = weights.c == 0
    if ablation:
        log.info("style weight is zero: running refocuser ablation without stainer coupling")
    history = []

    def snapshot(it):
        return Checkpoint.from_training(cfg, it, {"generator": gen, "discriminator": disc},
                                        {"generator": g_opt, "discriminator": d_opt},
                                        extra={"stainer_hash": frozen_hash})

    for it in range(1, cfg.max_iterations + 1):
        x, y = sampler.refocuser_batch()
        x, y = Tensor(x), Tensor(y)
        try:
            with no_grad():
                fake = gen(x)
            d_loss = losses.dr_discriminator_loss(y, fake, disc)
            backward(d_loss, d_opt.params)
            d_opt.step()
            with _frozen(disc):
                g_loss, parts = losses.dr_generator_loss(x, y, gen, disc, stainer, weights)
                backward(g_loss, g_opt.params)
            g_opt.step()
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite values at iteration {it}: {exc}", snapshot(it - 1))
        _check_finite(g_loss.item(), it, lambda: snapshot(it - 1))
        if it % check_every == 0 or it == cfg.max_iterations:
            stray = [p for p in stainer.parameters() if p.grad is not None and np.any(p.grad)]
            if stray or stainer.parameter_hash() != frozen_hash:
                raise RuntimeError("frozen stainer received an update")
        rec = {"iteration": it, "g_loss": g_loss.item(), "d_loss": d_loss.item(), **parts}
        history.append(rec)
        if callback:
            callback(rec)
        if it % cfg.log_every == 0:
            log.info("dr it=%d g=%.4f d=%.4f mae=%.4f style=%.4f", it, rec["g_loss"], rec["d_loss"],
                     rec["mae"], rec["style"])
    plateau = _plateau(history, "mae", cfg.max_iterations) if history else None
    res = TrainResult(gen, disc, snapshot(cfg.max_iterations), history, plateau, ablation)
    res.stainer = stainer
    res.stainer_hash = frozen_hash
    return res
