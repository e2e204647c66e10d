"""U-Net generators and the convolutional discriminator.

Two generator variants share one builder:

* ``virtual_stainer``: 4 levels, 3 convolutions per block, residual
  shortcut in each downsampling block, average pooling.
* ``refocuser``: 5 levels, 2 convolutions per block, residual shortcut in
  every block, max pooling.

Decoder blocks upsample 2x, concatenate the encoder features of the same
level and reduce the concatenated width by a factor of four.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    concat,
    conv2d,
    dense,
    get_default_dtype,
    leaky_relu,
    pool2,
    resize_bilinear_2x,
    sigmoid,
    standardize,
)

SLOPE = 0.1


def _he_conv(rng, c_out, c_in, k, dtype):
    std = np.sqrt(2.0 / (c_in * k * k * (1 + SLOPE ** 2)))
    return Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True, dtype=dtype)


def _zeros(n, dtype):
    return Tensor(np.zeros(n), requires_grad=True, dtype=dtype)


class _Network:
    params: dict

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return dict(self.params)

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def unfreeze(self):
        for p in self.params.values():
            p.requires_grad = True
        self.frozen = False
        return self

    def parameter_hash(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def _conv(self, x, name, stride=1):
        return conv2d(x, self.params[name + ".w"], self.params[name + ".b"], stride=stride)


@dataclass(eq=False)
class GeneratorNetwork(_Network):
    variant: str
    levels: int
    convs_per_block: int
    pool_kind: str
    base_channels: int
    in_channels: int
    out_channels: int
    up_residual: bool = False
    tap: str = "post_pool"
    input_residual: bool = False
    standardize_output: bool = False
    seed: int = 0
    params: dict = field(default_factory=dict, repr=False)
    frozen: bool = False

    def config(self):
        return {
            "kind": "generator",
            "variant": self.variant,
            "levels": self.levels,
            "convs_per_block": self.convs_per_block,
            "pool_kind": self.pool_kind,
            "base_channels": self.base_channels,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "up_residual": self.up_residual,
            "tap": self.tap,
            "input_residual": self.input_residual,
            "standardize_output": self.standardize_output,
        }

    def level_widths(self):
        return [self.base_channels * 2 ** m for m in range(self.levels)]

    def decoder_widths(self):
        widths = self.level_widths()
        h = widths[-1]
        out = []
        for m in reversed(range(self.levels)):
            h = (h + widths[m]) // 4
            out.append(h)
        return out

    def _init(self):
        rng = np.random.default_rng(self.seed)
        dt = get_default_dtype()
        c_in = self.in_channels
        for m, width in enumerate(self.level_widths()):
            for i in range(self.convs_per_block):
                src = c_in if i == 0 else width
                self.params[f"down{m}.conv{i}.w"] = _he_conv(rng, width, src, 3, dt)
                self.params[f"down{m}.conv{i}.b"] = _zeros(width, dt)
            self.params[f"down{m}.proj.w"] = _he_conv(rng, width, c_in, 1, dt)
            self.params[f"down{m}.proj.b"] = _zeros(width, dt)
            c_in = width
        widths = self.level_widths()
        h = widths[-1]
        for j, m in enumerate(reversed(range(self.levels))):
            cat = h + widths[m]
            width = cat // 4
            for i in range(self.convs_per_block):
                src = cat if i == 0 else width
                self.params[f"up{j}.conv{i}.w"] = _he_conv(rng, width, src, 3, dt)
                self.params[f"up{j}.conv{i}.b"] = _zeros(width, dt)
            if self.up_residual:
                self.params[f"up{j}.proj.w"] = _he_conv(rng, width, cat, 1, dt)
                self.params[f"up{j}.proj.b"] = _zeros(width, dt)
            h = width
        # small output init keeps early outputs near zero
        w = rng.normal(0.0, 0.1 / np.sqrt(9 * h), size=(self.out_channels, h, 3, 3))
        self.params["out.w"] = Tensor(w, requires_grad=True, dtype=dt)
        self.params["out.b"] = _zeros(self.out_channels, dt)

    def _block(self, x, prefix, n_convs, residual):
        h = x
        for i in range(n_convs):
            h = leaky_relu(self._conv(h, f"{prefix}.conv{i}"), SLOPE)
        if residual:
            h = h + self._conv(x, f"{prefix}.proj")
        return h

    def _encode(self, x, taps_only=False):
        skips, taps = [], []
        h = x
        for m in range(self.levels):
            h = self._block(h, f"down{m}", self.convs_per_block, True)
            skips.append(h)
            if self.tap == "pre_pool":
                taps.append(h)
            h = pool2(h, self.pool_kind)
            if self.tap == "post_pool":
                taps.append(h)
            if taps_only and len(taps) == self.levels:
                break
        return h, skips, taps

    def check_input(self, x):
        if x.ndim not in (3, 4):
            raise ValueError(f"expected (C,H,W) or (N,C,H,W) input, got {x.shape}")
        c = x.shape[-3]
        if c != self.in_channels:
            raise ValueError(f"{self.variant} expects {self.in_channels} channels, got {c}")
        div = 2 ** self.levels
        hh, ww = x.shape[-2:]
        if hh % div or ww % div:
            raise ValueError(f"spatial dims {(hh, ww)} must be divisible by {div}")
        if min(hh, ww) < 2 * div:
            raise ValueError(f"spatial dims {(hh, ww)} must be at least {2 * div}")

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        h, skips, _ = self._encode(x)
        for j, m in enumerate(reversed(range(self.levels))):
            h = concat([resize_bilinear_2x(h), skips[m]], axis=-3)
            h = self._block(h, f"up{j}", self.convs_per_block, self.up_residual)
        out = self._conv(h, "out")
        if self.input_residual:
            out = out + x
        if self.standardize_output:
            out = standardize(out)
        return out

    __call__ = forward

    def features(self, x):
        """Per-level encoder feature maps (the style-loss taps)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        return self._encode(x, taps_only=True)[2]


@dataclass(eq=False)
class DiscriminatorNetwork(_Network):
    in_channels: int
    base_channels: int
    blocks: int = 6
    convs_per_block: int = 2
    stride_per_block: int = 2
    seed: int = 0
    params: dict = field(default_factory=dict, repr=False)
    frozen: bool = False

    def config(self):
        return {
            "kind": "discriminator",
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "blocks": self.blocks,
        }

    def block_widths(self):
        return [self.base_channels * 2 ** j for j in range(self.blocks)]

    def _init(self):
        rng = np.random.default_rng(self.seed)
        dt = get_default_dtype()
        c = self.in_channels
        for j, width in enumerate(self.block_widths()):
            for i in range(self.convs_per_block):
                src = c if i == 0 else width
                self.params[f"block{j}.conv{i}.w"] = _he_conv(rng, width, src, 3, dt)
                self.params[f"block{j}.conv{i}.b"] = _zeros(width, dt)
            c = width
        hidden = max(c // 2, 1)
        self.params["fc0.w"] = Tensor(rng.normal(0, np.sqrt(2.0 / c), (hidden, c)), requires_grad=True, dtype=dt)
        self.params["fc0.b"] = _zeros(hidden, dt)
        self.params["fc1.w"] = Tensor(rng.normal(0, np.sqrt(1.0 / hidden), (1, hidden)), requires_grad=True, dtype=dt)
        self.params["fc1.b"] = _zeros(1, dt)

    def check_input(self, x):
        if x.ndim not in (3, 4):
            raise ValueError(f"expected (C,H,W) or (N,C,H,W) input, got {x.shape}")
        if x.shape[-3] != self.in_channels:
            raise ValueError(f"discriminator expects {self.in_channels} channels, got {x.shape[-3]}")
        div = 2 ** self.blocks
        hh, ww = x.shape[-2:]
        if hh % div or ww % div:
            raise ValueError(f"spatial dims {(hh, ww)} must be divisible by {div}")

    def features(self, x):
        """Output of each convolution block; spatial size halves per block."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        taps = []
        h = x
        for j in range(self.blocks):
            for i in range(self.convs_per_block):
                last = i == self.convs_per_block - 1
                h = leaky_relu(self._conv(h, f"block{j}.conv{i}", stride=self.stride_per_block if last else 1), SLOPE)
            taps.append(h)
        return taps

    def logits(self, x, taps=None):
        taps = taps if taps is not None else self.features(x)
        h = taps[-1].mean(axis=(-2, -1))
        h = leaky_relu(dense(h, self.params["fc0.w"], self.params["fc0.b"]), SLOPE)
        out = dense(h, self.params["fc1.w"], self.params["fc1.b"])
        return out.reshape(out.shape[:-1])

    def forward(self, x):
        """Probability that ``x`` is a real image; shape () or (N,)."""
        return sigmoid(self.logits(x))

    __call__ = forward


def build_vs_generator(base_channels=16, seed=0, tap="post_pool"):
    """Virtual-staining generator: 2 autofluorescence channels in, 3 YCbCr channels out."""
    if base_channels < 4:
        raise ValueError("base_channels must be >= 4")
    net = GeneratorNetwork(
        variant="virtual_stainer", levels=4, convs_per_block=3, pool_kind="avg",
        base_channels=base_channels, in_channels=2, out_channels=3,
        up_residual=False, tap=tap, seed=seed,
    )
    net._init()
    return net


def build_dr_generator(base_channels=16, seed=0, input_residual=True, standardize_output=True):
    """Refocusing generator: 2 channels in, 2 channels out, same spatial size.

    With ``input_residual`` the network predicts a correction added to its
    input rather than the whole image.
    ``standardize_output`` rescales each output channel to zero mean and
    unit variance, the same normalisation the stainer's inputs receive.
    """
    if base_channels < 4:
        raise ValueError("base_channels must be >= 4")
    net = GeneratorNetwork(
        variant="refocuser", levels=5, convs_per_block=2, pool_kind="max",
        base_channels=base_channels, in_channels=2, out_channels=2,
        up_residual=True, input_residual=input_residual,
        standardize_output=standardize_output, seed=seed,
    )
    net._init()
    return net


def build_discriminator(in_channels, base_channels=16, seed=0):
    if in_channels < 1 or base_channels < 1:
        raise ValueError("channel counts must be positive")
    net = DiscriminatorNetwork(in_channels=in_channels, base_channels=base_channels, seed=seed)
    net._init()
    return net


def forward_generator(net, x):
    return net.forward(x)


def tap_vs_features(net, x):
    if not isinstance(net, GeneratorNetwork) or net.variant != "virtual_stainer":
        raise TypeError("feature taps need a virtual_stainer generator")
    return net.features(x)


def tap_disc_features(net, x):
    return net.features(x)


def build_from_config(cfg, seed=0):
    """Rebuild an (uninitialised-equivalent) network from :meth:`config` output."""
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == "discriminator":
        net = DiscriminatorNetwork(seed=seed, **cfg)
    else:
        net = GeneratorNetwork(seed=seed, **cfg)
    net._init()
    return net
