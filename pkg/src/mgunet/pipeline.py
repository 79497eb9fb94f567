"""Two-stage segmentation pipeline: disc detection, soft masking, layer
segmentation, feature fusion, and the weighted joint loss.

Final class scheme (11 classes): 0 background, 1 RNFL, 2 GCL, 3 IPL, 4 INL,
5 OPL, 6 ONL, 7 IS/OS, 8 RPE, 9 choroid, 10 optic disc.  Stage 1 sees
{non-disc, disc}; stage 2 sees the disc mapped to background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ContractError, DataError, DimensionError
from .network import DISC_POOL_SCHEDULE, LAYER_POOL_SCHEDULE, MGUNet, MGUNetConfig
from .nn import Conv2d, Module
from .tensor import Tensor, no_grad

__all__ = [
    "CLASS_NAMES", "NUM_CLASSES", "DISC_CLASS", "ClassScheme", "one_hot",
    "mask_apply", "dice_loss", "ce_loss", "combine_losses", "total_loss",
    "LossReport", "TwoStageModel", "OneStageModel", "build_model",
    "model_config_records", "model_from_records",
]

CLASS_NAMES = ("background", "RNFL", "GCL", "IPL", "INL", "OPL", "ONL",
               "IS/OS", "RPE", "choroid", "disc")
NUM_CLASSES = 11
DISC_CLASS = 10


class ClassScheme:
    """Total projections from the 11-class scheme onto the two stages."""

    num_final = NUM_CLASSES
    num_stage1 = 2
    num_stage2 = 10

    @staticmethod
    def to_stage1(labels: np.ndarray) -> np.ndarray:
        """0 = non-disc, 1 = disc."""
        return (labels == DISC_CLASS).astype(np.int64)

    @staticmethod
    def to_stage2(labels: np.ndarray) -> np.ndarray:
        """Disc pixels become background; layer labels 0..9 pass through."""
        out = labels.astype(np.int64).copy()
        out[out == DISC_CLASS] = 0
        return out


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """[N,H,W] integer labels -> [N,num_classes,H,W] float64 indicator."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(
            f"labels must lie in 0..{num_classes - 1}, found range "
            f"[{labels.min()}, {labels.max()}]")
    n, h, w = labels.shape
    out = np.zeros((n, num_classes, h, w))
    nn, hh, ww = np.meshgrid(np.arange(n), np.arange(h), np.arange(w), indexing="ij")
    out[nn, labels, hh, ww] = 1.0
    return out


def mask_apply(image: Tensor, disc_probs: Tensor) -> Tensor:
    """Soft disc removal: image * (1 - p_disc), differentiable end-to-end."""
    if image.ndim != 4 or image.data.shape[1] != 1:
        raise DimensionError(f"mask_apply expects [N,1,H,W] image, got {image.data.shape}")
    if disc_probs.ndim != 4 or disc_probs.data.shape[1] != 2:
        raise DimensionError(f"mask_apply expects [N,2,H,W] probabilities, got {disc_probs.data.shape}")
    sums = disc_probs.data.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > 1e-6:
        raise ContractError("disc probabilities do not sum to 1 per pixel")
    p_disc = ops.slice_channels(disc_probs, 1, 2)
    keep = ops.scalar_add(ops.scalar_mul(p_disc, -1.0), 1.0)
    return ops.mul(image, keep)


def dice_loss(probs: Tensor, target: Tensor, eps: float = 1e-6) -> Tensor:
    """Soft Dice: 1 - mean over classes of (2*sum(p*g)+eps)/(sum p + sum g + eps).

    Sums run over batch and the whole pixel domain; ``target`` is one-hot.
    """
    if probs.data.shape != target.data.shape:
        raise DimensionError(
            f"dice_loss: prediction {probs.data.shape} vs target {target.data.shape}")
    inter = ops.reduce_sum(ops.mul(probs, target), axis=(0, 2, 3))
    psum = ops.reduce_sum(probs, axis=(0, 2, 3))
    gsum = ops.reduce_sum(target, axis=(0, 2, 3))
    numer = ops.scalar_add(ops.scalar_mul(inter, 2.0), eps)
    denom = ops.scalar_add(ops.add(psum, gsum), eps)
    per_class = ops.div(numer, denom)
    return ops.scalar_add(ops.scalar_mul(ops.reduce_mean(per_class), -1.0), 1.0)


def ce_loss(probs: Tensor, target: Tensor) -> Tensor:
    """Cross entropy -(1/(M*N*H*W)) sum g*log(p), probs clamped to >= 1e-12."""
    if probs.data.shape != target.data.shape:
        raise DimensionError(
            f"ce_loss: prediction {probs.data.shape} vs target {target.data.shape}")
    logp = ops.log(ops.clamp_min(probs, 1e-12))
    s = ops.reduce_sum(ops.mul(target, logp))
    return ops.scalar_mul(s, -1.0 / probs.data.size)


def combine_losses(l_seg1: Tensor, l_seg2: Tensor, lam: float) -> Tensor:
    """Weighted joint loss: l_seg1 + lam * l_seg2."""
    return ops.add(l_seg1, ops.scalar_mul(l_seg2, lam))


@dataclass
class LossReport:
    l_seg1: float
    l_seg2: float
    total: float
    dice1: float
    ce1: float
    dice2: float
    ce2: float


def total_loss(disc_logits: Tensor, fused_probs: Tensor, ground_truth: np.ndarray,
               lam: float = 2.0):
    """Joint two-stage loss; returns (scalar tensor, LossReport).

    Stage 1 is supervised against the disc/non-disc projection of the truth;
    stage 2 against the fused 11-class output versus the full truth.
    """
    gt = np.asarray(ground_truth)
    if gt.ndim == 2:
        gt = gt[None]
    if gt.min() < 0 or gt.max() > DISC_CLASS:
        raise DataError(f"ground truth labels outside 0..{DISC_CLASS}: "
                        f"range [{gt.min()}, {gt.max()}]")
    t1 = Tensor(one_hot(ClassScheme.to_stage1(gt), ClassScheme.num_stage1))
    tf = Tensor(one_hot(gt, NUM_CLASSES))

    p1 = ops.softmax_channels(disc_logits)
    d1 = dice_loss(p1, t1)
    c1 = ce_loss(p1, t1)
    l1 = ops.add(d1, c1)

    d2 = dice_loss(fused_probs, tf)
    c2 = ce_loss(fused_probs, tf)
    l2 = ops.add(d2, c2)

    total = combine_losses(l1, l2, lam)
    report = LossReport(l_seg1=float(l1.data), l_seg2=float(l2.data),
                        total=float(total.data), dice1=float(d1.data),
                        ce1=float(c1.data), dice2=float(d2.data), ce2=float(c2.data))
    return total, report


class TwoStageModel(Module):
    """Disc net (2 classes, pools 2/4/2) -> soft mask -> layer net (10
    classes, pools 2/2/2) -> fusion 1x1 conv over concatenated features and
    logits -> 11-class softmax."""

    def __init__(self, rng: np.random.Generator, base_channels: int = 32,
                 mgrm_enabled: bool = True, grb_enabled: bool = True,
                 msp_enabled: bool = True, grb_nodes=(32, 16, 8, 4)):
        super().__init__()
        flags = dict(mgrm_enabled=mgrm_enabled, grb_enabled=grb_enabled,
                     msp_enabled=msp_enabled, grb_nodes=grb_nodes,
                     base_channels=base_channels)
        self.disc_net = MGUNet(MGUNetConfig(num_classes=2, pool_schedule=DISC_POOL_SCHEDULE,
                                            **flags), rng)
        self.layer_net = MGUNet(MGUNetConfig(num_classes=10, pool_schedule=LAYER_POOL_SCHEDULE,
                                             **flags), rng)
        fused_in = 2 * base_channels + 2 + 10
        self.fusion = Conv2d(fused_in, NUM_CLASSES, kernel=1, rng=rng)
        self.num_classes = NUM_CLASSES

    def required_multiple(self) -> int:
        return max(self.disc_net.config.required_multiple(),
                   self.layer_net.config.required_multiple())

    def min_input_hw(self) -> int:
        """Smallest legal H/W: divisibility plus bottleneck >= 5 when the
        multi-scale module is present."""
        need = max(net.config.required_multiple() * (5 if net.center is not None else 1)
                   for net in (self.disc_net, self.layer_net))
        mult = self.required_multiple()
        return ((need + mult - 1) // mult) * mult

    def forward(self, image: Tensor):
        """Returns (disc_logits, fused_probs, intermediates dict)."""
        mult = self.required_multiple()
        h, w = image.data.shape[2:]
        if h % mult or w % mult:
            raise DimensionError(f"input {h}x{w} must be divisible by {mult}")
        disc_logits, disc_feats = self.disc_net(image)
        disc_probs = ops.softmax_channels(disc_logits)
        masked = mask_apply(image, disc_probs)
        layer_logits, layer_feats = self.layer_net(masked)
        fused_in = ops.concat_channels([disc_feats, disc_logits, layer_feats, layer_logits])
        fused_logits = self.fusion(fused_in)
        fused_probs = ops.softmax_channels(fused_logits)
        intermediates = {
            "disc_probs": disc_probs,
            "masked_image": masked,
            "layer_logits": layer_logits,
            "fused_logits": fused_logits,
        }
        return disc_logits, fused_probs, intermediates

    def training_loss(self, image: Tensor, labels: np.ndarray, lam: float = 2.0):
        disc_logits, fused_probs, _ = self.forward(image)
        return total_loss(disc_logits, fused_probs, labels, lam=lam)

    def predict(self, image: np.ndarray) -> np.ndarray:
        """[H,W] image -> [H,W] argmax class map (no gradients recorded)."""
        with no_grad():
            _, fused_probs, _ = self.forward(Tensor(image[None, None]))
        return np.argmax(fused_probs.data[0], axis=0)


class OneStageModel(Module):
    """Single 11-class network (the one-stage ablation baseline)."""

    def __init__(self, rng: np.random.Generator, base_channels: int = 32,
                 mgrm_enabled: bool = False, grb_enabled: bool = True,
                 msp_enabled: bool = True, grb_nodes=(32, 16, 8, 4)):
        super().__init__()
        self.net = MGUNet(MGUNetConfig(num_classes=NUM_CLASSES,
                                       pool_schedule=LAYER_POOL_SCHEDULE,
                                       base_channels=base_channels,
                                       mgrm_enabled=mgrm_enabled,
                                       grb_enabled=grb_enabled,
                                       msp_enabled=msp_enabled,
                                       grb_nodes=grb_nodes), rng)
        self.num_classes = NUM_CLASSES

    def required_multiple(self) -> int:
        return self.net.config.required_multiple()

    def min_input_hw(self) -> int:
        return self.net.config.required_multiple() * (5 if self.net.center is not None else 1)

    def forward(self, image: Tensor):
        logits, feats = self.net(image)
        return logits, ops.softmax_channels(logits), {"features": feats}

    def training_loss(self, image: Tensor, labels: np.ndarray, lam: float = 2.0):
        gt = np.asarray(labels)
        if gt.ndim == 2:
            gt = gt[None]
        if gt.min() < 0 or gt.max() > DISC_CLASS:
            raise DataError(f"ground truth labels outside 0..{DISC_CLASS}")
        _, probs, _ = self.forward(image)
        target = Tensor(one_hot(gt, NUM_CLASSES))
        d = dice_loss(probs, target)
        c = ce_loss(probs, target)
        loss = ops.add(d, c)
        v = float(loss.data)
        report = LossReport(l_seg1=v, l_seg2=0.0, total=v, dice1=float(d.data),
                            ce1=float(c.data), dice2=0.0, ce2=0.0)
        return loss, report

    def predict(self, image: np.ndarray) -> np.ndarray:
        with no_grad():
            _, probs, _ = self.forward(Tensor(image[None, None]))
        return np.argmax(probs.data[0], axis=0)


def build_model(stages: str, rng: np.random.Generator, base_channels: int = 32,
                grb: bool = True, msp: bool = True, grb_nodes=(32, 16, 8, 4)):
    """Model factory for the ablation axes.

    ``stages='one-stage'`` builds the plain baseline (single 11-class
    network, no reasoning module); ``'two-stage'`` builds the pipeline whose
    bottleneck follows the grb/msp flags.
    """
    if stages == "one-stage":
        return OneStageModel(rng, base_channels=base_channels, mgrm_enabled=False,
                             grb_nodes=grb_nodes)
    if stages == "two-stage":
        return TwoStageModel(rng, base_channels=base_channels,
                             mgrm_enabled=grb or msp, grb_enabled=grb,
                             msp_enabled=msp, grb_nodes=grb_nodes)
    raise ConfigError(f"unknown stage mode {stages!r}")


def model_config_records(model) -> dict:
    """Architecture hyperparameters as checkpoint records (all float64)."""
    if isinstance(model, TwoStageModel):
        cfg = model.disc_net.config
        kind = 0.0
    elif isinstance(model, OneStageModel):
        cfg = model.net.config
        kind = 1.0
    else:
        raise ConfigError(f"cannot serialize model of type {type(model).__name__}")
    return {
        "model.kind": np.array(kind),
        "model.base_channels": np.array(float(cfg.base_channels)),
        "model.mgrm": np.array(float(cfg.mgrm_enabled)),
        "model.grb": np.array(float(cfg.grb_enabled)),
        "model.msp": np.array(float(cfg.msp_enabled)),
        "model.grb_nodes": np.array([float(n) for n in cfg.grb_nodes]),
    }


def model_from_records(records: dict, rng: np.random.Generator):
    """Rebuild an (uninitialized) model matching checkpointed hyperparameters."""
    try:
        kind = float(records["model.kind"])
        base = int(float(records["model.base_channels"]))
        mgrm = bool(float(records["model.mgrm"]))
        grb = bool(float(records["model.grb"]))
        msp = bool(float(records["model.msp"]))
        nodes = tuple(int(v) for v in np.atleast_1d(records["model.grb_nodes"]))
    except KeyError as e:
        raise ConfigError(f"checkpoint lacks model configuration record {e}") from e
    if kind == 1.0:
        return OneStageModel(rng, base_channels=base, mgrm_enabled=mgrm,
                             grb_enabled=grb, msp_enabled=msp, grb_nodes=nodes)
    return TwoStageModel(rng, base_channels=base, mgrm_enabled=mgrm,
                         grb_enabled=grb, msp_enabled=msp, grb_nodes=nodes)
