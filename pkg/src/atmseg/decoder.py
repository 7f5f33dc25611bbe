"""Attention-to-mask decoding.

Learnable per-class tokens cross-attend to backbone features.  The scaled
query-key similarity map, squashed by a sigmoid, is read off directly as a
per-class mask; the updated class tokens are classified into "class is
present / absent".  Stages cascade: each stage's output tokens become the
next stage's queries against a different backbone tap, and the per-stage
sigmoid masks are averaged into the combined mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from atmseg import tensor as T
from atmseg.encoder import Linear, LayerNorm, Mlp, TokenGrid, _prefix, \
    multi_head_attention
from atmseg.tensor import ContractViolation, Rng, Tensor


@dataclass
class ClassTokens:
    tokens: Tensor  # [N, C], trainable

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def new_class_tokens(rng: Rng, n_classes: int, width: int) -> ClassTokens:
    if n_classes < 1:
        raise ContractViolation(f"need at least one class, got {n_classes}")
    return ClassTokens(
        Tensor(rng.truncated_normal((n_classes, width), 0.02), requires_grad=True)
    )


@dataclass
class AtmStageOutput:
    sim: Tensor    # [N, L] pre-softmax similarity
    mask: Tensor   # [N, L] == sigmoid(sim)
    tokens: Tensor  # [N, C] updated class tokens


@dataclass
class SegOutput:
    masks: Tensor        # [N, H, W] upsampled combined mask
    class_probs: Tensor  # [N, 2]; column 1 = presence probability
    seg_scores: Tensor   # [N, H, W] = presence * mask


def project_qkv(class_tokens: Tensor, feats: TokenGrid, wq: Linear,
                wk: Linear, wv: Linear):
    """Affine maps onto query/key/value; queries from class tokens."""
    if class_tokens.shape[1] != feats.width:
        raise ContractViolation(
            f"token width {class_tokens.shape[1]} != feature width {feats.width}"
        )
    return wq(class_tokens), wk(feats.tokens), wv(feats.tokens)


def similarity_map(q: Tensor, k: Tensor) -> Tensor:
    """Scaled dot products, one row per class token: [N, L]."""
    if q.shape[1] != k.shape[1]:
        raise ContractViolation(
            f"similarity_map: widths differ, {q.shape} vs {k.shape}"
        )
    return T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(q.shape[1]))


def atm_cross_attention(sim: Tensor, v: Tensor) -> Tensor:
    """Convex combination of value rows, weighted along the token axis."""
    return T.matmul(T.softmax(sim, axis=-1), v)


def attention_to_mask(sim: Tensor) -> Tensor:
    """The mask is the sigmoid of the raw similarity map; no cross-class
    normalization, so masks may overlap until the final argmax."""
    return T.sigmoid(sim)


class AtmStage:
    """One decoder stage: cross-attention (no self-attention) + MLP block.

    The mask similarity is taken from the full-width, head-merged q/k pair;
    the token update path may still split into heads internally.
    """

    def __init__(self, rng: Rng, width: int, heads: int, mlp_ratio: float = 4.0):
        self.width = width
        self.heads = heads
        self.wq = Linear(rng, width, width)
        self.wk = Linear(rng, width, width)
        self.wv = Linear(rng, width, width)
        self.proj = Linear(rng, width, width)
        self.norm = LayerNorm(width)
        self.mlp = Mlp(rng, width, int(width * mlp_ratio))

    def __call__(self, class_tokens: Tensor, feats: TokenGrid) -> AtmStageOutput:
        q, k, v = project_qkv(class_tokens, feats, self.wq, self.wk, self.wv)
        sim = similarity_map(q, k)
        ctx = multi_head_attention(q, k, v, self.heads)
        x = class_tokens + self.proj(ctx)
        tokens = x + self.mlp(self.norm(x))
        return AtmStageOutput(sim=sim, mask=attention_to_mask(sim), tokens=tokens)

    def params(self):
        out = []
        for name in ("wq", "wk", "wv", "proj", "norm", "mlp"):
            out += _prefix(name, getattr(self, name))
        return out


def cascade_decode(class_tokens: ClassTokens, taps, stages):
    """Chain stages over taps, deepest tap first.

    ``taps`` arrive ordered deepest-last (encoder order); they are consumed
    reversed so stage 1 sees the most semantic features.  Returns the
    stage-averaged mask, the final tokens, and every stage output.
    """
    if not taps:
        raise ContractViolation("cascade_decode: no feature taps given")
    if len(taps) != len(stages):
        raise ContractViolation(
            f"cascade_decode: {len(taps)} taps for {len(stages)} stages"
        )
    grid = taps[0].grid
    for tg in taps:
        if tg.grid != grid:
            raise ContractViolation("cascade_decode: taps disagree on grid")

    tokens = class_tokens.tokens
    per_stage = []
    for stage, tap in zip(stages, reversed(taps)):
        out = stage(tokens, tap)
        per_stage.append(out)
        tokens = out.tokens

    combined = per_stage[0].mask
    for out in per_stage[1:]:
        combined = combined + out.mask
    combined = combined * (1.0 / len(per_stage))
    return combined, tokens, per_stage


def classify_tokens(tokens: Tensor, w: Tensor) -> Tensor:
    """Row-wise [absent, present] probabilities for each class token."""
    return T.softmax(T.matmul(tokens, w), axis=-1)


def assemble_segmentation(combined_mask: Tensor, grid, class_probs: Tensor,
                          target) -> SegOutput:
    """Reshape masks onto the grid, upsample, and gate by presence."""
    h, w = grid
    n, L = combined_mask.shape
    if h * w != L:
        raise ContractViolation(
            f"assemble_segmentation: grid {grid} does not cover {L} tokens"
        )
    planes = T.reshape(combined_mask, (n, h, w))
    up = T.bilinear_upsample2d(planes, target)
    presence = T.reshape(T.slice_axis(class_probs, 1, 1, 2), (n,))
    scores = T.row_scale(up, presence)
    return SegOutput(masks=up, class_probs=class_probs, seg_scores=scores)


def predict_labels(seg: SegOutput) -> np.ndarray:
    """Per-pixel argmax over class scores; ties go to the lowest class id."""
    return np.argmax(seg.seg_scores.data, axis=0)


class AtmDecoder:
    """Class tokens, a stage per tap, and the shared presence classifier."""

    def __init__(self, rng: Rng, n_classes: int, width: int, heads: int,
                 n_stages: int, mlp_ratio: float = 4.0):
        self.class_tokens = new_class_tokens(rng, n_classes, width)
        self.stages = [
            AtmStage(rng, width, heads, mlp_ratio) for _ in range(n_stages)
        ]
        self.classifier = Tensor(
            rng.truncated_normal((width, 2), 0.02), requires_grad=True
        )

    @property
    def n_classes(self) -> int:
        return self.class_tokens.count

    def forward(self, taps, target_hw):
        """Full decode: cascade, classify, assemble.

        Returns (SegOutput, per-stage outputs, per-stage class probs); class
        probabilities in the SegOutput come from the final stage's tokens.
        """
        combined, final_tokens, per_stage = cascade_decode(
            self.class_tokens, taps, self.stages
        )
        stage_probs = [
            classify_tokens(out.tokens, self.classifier) for out in per_stage
        ]
        seg = assemble_segmentation(
            combined, taps[0].grid, stage_probs[-1], target_hw
        )
        return seg, per_stage, stage_probs

    def params(self):
        out = [("class_tokens", self.class_tokens.tokens)]
        for i, stage in enumerate(self.stages):
            out += _prefix(f"stages.{i}", stage)
        out.append(("classifier", self.classifier))
        return out
