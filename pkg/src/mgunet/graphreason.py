"""Graph reasoning over latent nodes, single-scale and multi-scale.

A GraphReasoningBlock projects a [N,C,H,W] map onto a small set of latent
nodes, propagates information across nodes through a learned dense adjacency,
and projects back, adding the result to the input (residual).  The
multi-scale variant runs four parallel branches (full resolution plus 2x2,
3x3 and 5x5 average-pooled), upsamples them back and fuses by a 1x1 conv.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigError
from .nn import Conv2d, Module, ModuleList, Parameter, he_uniform
from .tensor import Tensor

__all__ = ["GraphReasoningBlock", "MultiScaleReasoning", "pool_partition"]

BRANCH_POOL_KERNELS = (None, 2, 3, 5)


def pool_partition(x: Tensor, kernel: int) -> Tensor:
    """Ceil-mode average pooling: edge-replicate to the next multiple, then pool."""
    k = int(kernel)
    if k < 1:
        raise ConfigError(f"pool_partition: kernel must be >= 1, got {kernel}")
    h, w = x.data.shape[2:]
    ph = (-h) % k
    pw = (-w) % k
    if ph or pw:
        x = ops.pad_replicate(x, (0, ph), (0, pw))
    return ops.avg_pool2d(x, (k, k))


class GraphReasoningBlock(Module):
    """Project -> graph-convolve -> re-project, with a residual connection.

    The expand projection is zero-initialized so a fresh block is an exact
    identity map; the adjacency starts at zero so node propagation starts as
    the identity.
    """

    def __init__(self, channels: int, reduced: int, nodes: int, rng: np.random.Generator):
        super().__init__()
        if not (0 < reduced < channels):
            raise ConfigError(f"reduced channels must satisfy 0 < {reduced} < {channels}")
        if nodes < 1:
            raise ConfigError(f"node count must be positive, got {nodes}")
        self.channels = channels
        self.reduced = reduced
        self.nodes = nodes
        self.reduce_proj = Conv2d(channels, reduced, kernel=1, rng=rng)
        self.node_proj = Conv2d(channels, nodes, kernel=1, rng=rng)
        self.inv_proj = Conv2d(channels, nodes, kernel=1, rng=rng)
        self.adjacency = Parameter(np.zeros((nodes, nodes)))
        self.node_weights = Parameter(he_uniform(rng, (reduced, reduced), reduced))
        self.expand_proj = Conv2d(reduced, channels, kernel=1, zero_init=True)
        self._eye = Tensor(np.eye(nodes))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.data.shape
        if c != self.channels:
            raise ConfigError(f"block built for {self.channels} channels, got {c}")
        if h * w < self.nodes:
            raise ConfigError(f"{self.nodes} nodes need at least {self.nodes} pixels, got {h}x{w}")
        hw = h * w
        reduced = ops.reshape(self.reduce_proj(x), (n, self.reduced, hw))
        node_assign = ops.reshape(self.node_proj(x), (n, self.nodes, hw))
        # aggregate pixels into per-node features
        node_feats = ops.matmul(reduced, ops.transpose2d(node_assign))
        propagated = ops.matmul(node_feats, ops.sub(self._eye, self.adjacency))
        mixed = ops.relu(ops.matmul(self.node_weights, propagated))
        # distribute node features back over pixels
        inv_assign = ops.reshape(self.inv_proj(x), (n, self.nodes, hw))
        spatial = ops.reshape(ops.matmul(mixed, inv_assign), (n, self.reduced, h, w))
        return ops.add(self.expand_proj(spatial), x)


class MultiScaleReasoning(Module):
    """Four-branch reasoning pyramid with a 1x1 fusion conv back to C channels.

    Branch 1 reasons at full resolution; branches 2-4 average-pool by 2/3/5
    first (ceil mode) and bilinearly upsample their result back.  With
    ``use_grb=False`` the reasoning blocks are dropped and the branches
    reduce to a plain pooling pyramid.
    """

    def __init__(self, channels: int, reduced: int, nodes, rng: np.random.Generator,
                 use_grb: bool = True):
        super().__init__()
        nodes = tuple(nodes)
        if len(nodes) != len(BRANCH_POOL_KERNELS):
            raise ConfigError(f"need {len(BRANCH_POOL_KERNELS)} per-branch node counts, got {nodes}")
        self.channels = channels
        self.use_grb = use_grb
        if use_grb:
            self.blocks = ModuleList(
                GraphReasoningBlock(channels, reduced, nd, rng) for nd in nodes)
        self.fuse = Conv2d(len(BRANCH_POOL_KERNELS) * channels, channels, kernel=1, rng=rng)

    def _branch_outputs(self, x: Tensor) -> list:
        h, w = x.data.shape[2:]
        outs = []
        for i, k in enumerate(BRANCH_POOL_KERNELS):
            y = x if k is None else pool_partition(x, k)
            if self.use_grb:
                y = self.blocks[i](y)
            if k is not None:
                y = ops.bilinear_upsample(y, h, w)
            outs.append(y)
        return outs

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.data.shape[2:]
        if h < 5 or w < 5:
            raise ConfigError(f"multi-scale reasoning needs spatial dims >= 5, got {h}x{w}")
        return self.fuse(ops.concat_channels(self._branch_outputs(x)))
