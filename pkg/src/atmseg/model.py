"""Whole-model assembly: an encoder variant feeding a segmentation head.

Two heads exist: the attention-to-mask cascade (the interesting one) and a
plain per-token linear classifier used as the ablation baseline.  The
model owns loss computation so the training loop stays generic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from atmseg import tensor as T
from atmseg.decoder import AtmDecoder, predict_labels
from atmseg.encoder import EncoderConfig, Linear, TokenGrid, ViTEncoder, _prefix
from atmseg.losses import IGNORE_LABEL, LossWeights, one_hot_masks, total_loss
from atmseg.shrunk import (
    ShrunkConfig, ShrunkEncoder, ShrunkPPEncoder, edge_loss, gt_edge_mask,
)
from atmseg.tensor import ContractViolation, Rng, Tensor


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    variant: ShrunkConfig
    head: str = "atm"           # atm | linear
    n_classes: int = 5

    def __post_init__(self):
        self.variant.validate(self.encoder.depth)
        if self.head not in ("atm", "linear"):
            raise ContractViolation(f"unknown head {self.head!r}")


class LinearHead:
    """Per-token two-layer classifier; upsampled logits, pixel argmax."""

    def __init__(self, rng: Rng, width: int, n_classes: int):
        self.fc1 = Linear(rng, width, width)
        self.fc2 = Linear(rng, width, n_classes)
        self.n_classes = n_classes

    def logits(self, tap: TokenGrid, target_hw) -> Tensor:
        h, w = tap.grid
        x = self.fc2(T.gelu(self.fc1(tap.tokens)))
        planes = T.transpose(T.reshape(x, (h, w, self.n_classes)), (2, 0, 1))
        return T.bilinear_upsample2d(planes, target_hw)

    def params(self):
        return _prefix("fc1", self.fc1) + _prefix("fc2", self.fc2)


class SegModel:
    def __init__(self, cfg: ModelConfig, rng: Rng,
                 loss_weights: LossWeights | None = None):
        self.cfg = cfg
        self.weights = loss_weights or LossWeights()
        enc_rng = rng.split(1)
        self.backbone = ViTEncoder(cfg.encoder, enc_rng)
        if cfg.variant.variant == "shrunk":
            self.encoder = ShrunkEncoder(self.backbone, cfg.variant, rng.split(2))
        elif cfg.variant.variant == "shrunk_pp":
            self.encoder = ShrunkPPEncoder(self.backbone, cfg.variant, rng.split(2))
        else:
            self.encoder = self.backbone
        if cfg.head == "atm":
            self.head = AtmDecoder(
                rng.split(3), cfg.n_classes, cfg.encoder.width,
                cfg.encoder.heads, len(cfg.encoder.tap_layers),
                cfg.encoder.mlp_ratio,
            )
        else:
            self.head = LinearHead(rng.split(3), cfg.encoder.width, cfg.n_classes)

    @property
    def image_hw(self):
        return tuple(self.cfg.encoder.image_hw)

    def encode(self, image: Tensor):
        """Taps plus the edge-probability tensor (shrunk_pp only)."""
        if isinstance(self.encoder, ShrunkPPEncoder):
            taps, edge_probs = self.encoder.forward_tapped(image)
            return taps, edge_probs
        return self.encoder.forward_tapped(image), None

    def forward(self, image: Tensor):
        taps, edge_probs = self.encode(image)
        if self.cfg.head == "atm":
            seg, per_stage, stage_probs = self.head.forward(taps, self.image_hw)
            return {
                "seg": seg, "per_stage": per_stage,
                "stage_probs": stage_probs, "edge_probs": edge_probs,
                "grid": taps[0].grid,
            }
        logits = self.head.logits(taps[-1], self.image_hw)
        return {"logits": logits, "edge_probs": edge_probs, "grid": taps[-1].grid}

    def predict(self, image_input: np.ndarray) -> np.ndarray:
        out = self.forward(Tensor(image_input))
        if self.cfg.head == "atm":
            return predict_labels(out["seg"])
        return np.argmax(out["logits"].data, axis=0)

    def loss(self, image_input: np.ndarray, labels: np.ndarray):
        out = self.forward(Tensor(image_input))
        edge_term = None
        if out["edge_probs"] is not None:
            gt = gt_edge_mask(labels, self.cfg.encoder.patch)
            edge_term = edge_loss(out["edge_probs"], gt)
        if self.cfg.head == "atm":
            return total_loss(
                out["per_stage"], out["stage_probs"], out["seg"], labels,
                self.weights, out["grid"], edge_term=edge_term,
            )
        loss, comps = _pixel_ce_loss(out["logits"], labels)
        if edge_term is not None:
            comps["edge"] = edge_term
            loss = loss + edge_term * self.weights.edge
        return loss, comps

    def named_parameters(self):
        prefix = {"atm": "head", "linear": "head"}[self.cfg.head]
        items = _prefix("encoder", self.encoder) + _prefix(prefix, self.head)
        return dict(items)


def _pixel_ce_loss(logits: Tensor, labels: np.ndarray):
    """Softmax cross-entropy over upsampled per-pixel logits."""
    n = logits.shape[0]
    onehot, valid = one_hot_masks(labels, n)
    m = int(np.prod(logits.shape[1:]))
    probs = T.softmax(T.reshape(logits, (n, m)), axis=0)
    picked = T.tensor_sum(T.mul(probs, Tensor(onehot.reshape(n, -1))), axis=0)
    logp = T.log(T.clamp(picked, 1e-12, 1.0))
    w = valid.reshape(-1)
    total = w.sum()
    if total <= 0:
        ce = T.tensor_sum(logp) * 0.0
    else:
        ce = -(T.tensor_sum(T.mul(logp, Tensor(w))) * (1.0 / total))
    return ce, {"ce": ce}


def build_model(cfg: ModelConfig, seed: int,
                loss_weights: LossWeights | None = None) -> SegModel:
    return SegModel(cfg, Rng(seed), loss_weights)
