"""U-shape encoder / multi-scale-reasoning / decoder segmentation network.

Three encoder stages (two conv blocks each, then max-pool by the schedule),
a bottleneck at 8x base channels whose center module is selected by the
ablation flags, and a mirrored decoder (bilinear upsample, skip concat, two
conv blocks).  The forward pass returns both class logits and the
penultimate feature map, which downstream fusion consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .graphreason import GraphReasoningBlock, MultiScaleReasoning
from .nn import Conv2d, ConvBlock, Module, ModuleList
from .tensor import Tensor

__all__ = ["MGUNetConfig", "MGUNet", "LAYER_POOL_SCHEDULE", "DISC_POOL_SCHEDULE"]

LAYER_POOL_SCHEDULE = (2, 2, 2)
DISC_POOL_SCHEDULE = (2, 4, 2)


@dataclass
class MGUNetConfig:
    """Topology knobs for one network.

    ``pool_schedule`` holds the three per-stage square pooling factors;
    input H and W must be divisible by their product.  ``grb_nodes`` are the
    per-branch latent node counts of the multi-scale module (full-res, 2x2,
    3x3, 5x5 branches); when ``msp_enabled`` is off only the first entry is
    used.  ``grb_reduced`` defaults to half the bottleneck width.
    """

    num_classes: int
    in_channels: int = 1
    base_channels: int = 32
    pool_schedule: tuple = LAYER_POOL_SCHEDULE
    mgrm_enabled: bool = True
    grb_enabled: bool = True
    msp_enabled: bool = True
    grb_reduced: int | None = None
    grb_nodes: tuple = (32, 16, 8, 4)

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ConfigError("channel counts must be positive")
        if len(self.pool_schedule) != 3 or any(int(k) < 2 for k in self.pool_schedule):
            raise ConfigError(f"pool_schedule must be three factors >= 2, got {self.pool_schedule}")
        if len(self.grb_nodes) != 4 or any(int(n) < 1 for n in self.grb_nodes):
            raise ConfigError(f"grb_nodes must be four positive counts, got {self.grb_nodes}")
        bottleneck = 8 * self.base_channels
        reduced = self.reduced_channels()
        if not (0 < reduced < bottleneck):
            raise ConfigError(f"grb_reduced must lie in (0, {bottleneck}), got {reduced}")

    def reduced_channels(self) -> int:
        return 4 * self.base_channels if self.grb_reduced is None else int(self.grb_reduced)

    def required_multiple(self) -> int:
        m = 1
        for k in self.pool_schedule:
            m *= int(k)
        return m


class MGUNet(Module):
    """Build the network described by ``config`` with rng-seeded weights."""

    def __init__(self, config: MGUNetConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        c = config.base_channels
        widths = [c, 2 * c, 4 * c]
        bott = 8 * c

        enc = []
        prev = config.in_channels
        for w in widths:
            enc.append(ConvBlock(prev, w, rng))
            enc.append(ConvBlock(w, w, rng))
            prev = w
        self.encoder = ModuleList(enc)
        self.bottleneck_in = ConvBlock(widths[-1], bott, rng)
        self.bottleneck_out = ConvBlock(bott, bott, rng)

        self.center = None
        if config.mgrm_enabled and (config.grb_enabled or config.msp_enabled):
            reduced = config.reduced_channels()
            if config.msp_enabled:
                self.center = MultiScaleReasoning(bott, reduced, config.grb_nodes, rng,
                                                  use_grb=config.grb_enabled)
            else:
                self.center = GraphReasoningBlock(bott, reduced, config.grb_nodes[0], rng)

        dec = []
        up_prev = bott
        for w in reversed(widths):
            dec.append(ConvBlock(up_prev + w, w, rng))
            dec.append(ConvBlock(w, w, rng))
            up_prev = w
        self.decoder = ModuleList(dec)
        self.head = Conv2d(c, config.num_classes, kernel=1, rng=rng)

    def forward(self, x: Tensor):
        """[N,in,H,W] -> (logits [N,classes,H,W], features [N,base,H,W])."""
        if x.ndim != 4 or x.data.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"expected [N,{self.config.in_channels},H,W] input, got {x.data.shape}")
        mult = self.config.required_multiple()
        h, w = x.data.shape[2:]
        if h % mult or w % mult:
            raise DimensionError(
                f"input {h}x{w} must be divisible by {mult} "
                f"(pool schedule {self.config.pool_schedule})")

        skips = []
        cur = x
        for i, k in enumerate(self.config.pool_schedule):
            cur = self.encoder[2 * i + 1](self.encoder[2 * i](cur))
            skips.append(cur)
            cur = ops.max_pool2d(cur, (int(k), int(k)))
        cur = self.bottleneck_out(self.bottleneck_in(cur))
        if self.center is not None:
            cur = self.center(cur)
        for i, skip in enumerate(reversed(skips)):
            sh, sw = skip.data.shape[2:]
            cur = ops.bilinear_upsample(cur, sh, sw)
            cur = ops.concat_channels([cur, skip])
            cur = self.decoder[2 * i + 1](self.decoder[2 * i](cur))
        return self.head(cur), cur
