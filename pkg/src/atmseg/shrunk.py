"""Token-downsampled encoder variants.

QD keeps a strided subset of tokens as attention queries while keys and
values still cover the whole grid, so the sequence shrinks mid-stack.  QU
runs cross-attention from a higher-resolution query set onto low-resolution
features, restoring token count.  The edge-aware variant (EQD) keeps, in
addition to the stride anchors, every token whose patch is predicted to
contain a label boundary, and drops resolution before the first layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from atmseg import tensor as T
from atmseg.encoder import (
    EncoderConfig, EncoderLayer, LayerNorm, Linear, Mlp, TokenGrid,
    ViTEncoder, _prefix, multi_head_attention,
)
from atmseg.tensor import ContractViolation, Rng, Tensor


@dataclass
class TokenSelection:
    """Sorted unique token indices kept from a source grid."""

    retained: np.ndarray
    source_grid: tuple
    target_grid: Optional[tuple] = None  # set only for regular strides

    def __post_init__(self):
        idx = np.asarray(self.retained, dtype=np.int64)
        h, w = self.source_grid
        if idx.size:
            if idx.min() < 0 or idx.max() >= h * w:
                raise ContractViolation(
                    f"selection indices outside grid {self.source_grid}"
                )
            if not (np.diff(idx) > 0).all():
                raise ContractViolation("selection indices must strictly increase")
        self.retained = idx

    @property
    def count(self) -> int:
        return int(self.retained.size)


@dataclass
class ShrunkConfig:
    variant: str = "single"      # single | shrunk | shrunk_pp
    qd_layer: int = 0            # which layer runs as QD (shrunk only)
    qd_stride: int = 2
    edge_tau: float = 0.7

    def validate(self, depth: int):
        if self.variant not in ("single", "shrunk", "shrunk_pp"):
            raise ContractViolation(f"unknown variant {self.variant!r}")
        if self.variant == "shrunk" and not (1 < self.qd_layer < depth):
            raise ContractViolation(
                f"shrunk needs qd_layer strictly inside (1, {depth}), "
                f"got {self.qd_layer}"
            )
        if self.variant == "shrunk_pp" and self.qd_layer != 0:
            raise ContractViolation("shrunk_pp downsamples before layer 1")
        # stride 1 is a degenerate escape hatch (no downsampling at all)
        if self.qd_stride not in (1, 2, 3):
            raise ContractViolation(f"stride must be 2 or 3, got {self.qd_stride}")
        if not (0.0 < self.edge_tau < 1.0):
            raise ContractViolation(f"edge threshold must sit in (0,1), got {self.edge_tau}")
        return self


def nearest_anchor_indices(grid, stride: int) -> TokenSelection:
    """Keep the top-left token of every stride x stride cell."""
    h, w = grid
    if stride not in (2, 3):
        raise ContractViolation(f"stride must be 2 or 3, got {stride}")
    if h % stride or w % stride:
        raise ContractViolation(f"grid {grid} not divisible by stride {stride}")
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    idx = (rows[:, None] * w + cols[None, :]).reshape(-1)
    return TokenSelection(idx, (h, w), (h // stride, w // stride))


def qd_layer(tg: TokenGrid, sel: TokenSelection, layer: EncoderLayer) -> TokenGrid:
    """Encoder layer whose queries are the retained tokens only."""
    if sel.source_grid != tg.grid:
        raise ContractViolation(
            f"selection grid {sel.source_grid} does not match tokens {tg.grid}"
        )
    out = layer.attend_subset(tg.tokens, sel.retained)
    if sel.target_grid is not None:
        return TokenGrid(out, sel.target_grid)
    return TokenGrid(out, (1, sel.count))


class QuLayer:
    """Cross-attention upsampler: many queries, few keys/values."""

    def __init__(self, rng: Rng, width: int, heads: int, mlp_ratio: float = 4.0):
        self.heads = heads
        self.norm_q = LayerNorm(width)
        self.norm_kv = LayerNorm(width)
        self.q = Linear(rng, width, width)
        self.k = Linear(rng, width, width)
        self.v = Linear(rng, width, width)
        self.proj = Linear(rng, width, width)
        self.norm2 = LayerNorm(width)
        self.mlp = Mlp(rng, width, int(width * mlp_ratio))

    def __call__(self, queries: TokenGrid, kv: TokenGrid) -> TokenGrid:
        if queries.width != kv.width:
            raise ContractViolation(
                f"query width {queries.width} != kv width {kv.width}"
            )
        qn = self.norm_q(queries.tokens)
        kn = self.norm_kv(kv.tokens)
        ctx = multi_head_attention(self.q(qn), self.k(kn), self.v(kn), self.heads)
        x = queries.tokens + self.proj(ctx)
        x = x + self.mlp(self.norm2(x))
        return TokenGrid(x, queries.grid)

    def params(self):
        out = []
        for name in ("norm_q", "norm_kv", "q", "k", "v", "proj", "norm2", "mlp"):
            out += _prefix(name, getattr(self, name))
        return out


def qu_layer(queries: TokenGrid, kv: TokenGrid, layer: QuLayer) -> TokenGrid:
    return layer(queries, kv)


class EdgeHead:
    """Three-layer token MLP scoring each patch as boundary / interior."""

    def __init__(self, rng: Rng, width: int, tau: float = 0.7):
        if not (0.0 < tau < 1.0):
            raise ContractViolation(f"tau must sit in (0,1), got {tau}")
        self.tau = tau
        self.fc1 = Linear(rng, width, width // 2)
        self.fc2 = Linear(rng, width // 2, 2)

    def __call__(self, tokens: Tensor) -> Tensor:
        return edge_head_forward(tokens, self)

    def params(self):
        return _prefix("fc1", self.fc1) + _prefix("fc2", self.fc2)


def edge_head_forward(tokens: Tensor, head: EdgeHead) -> Tensor:
    """Per-token [interior, edge] probabilities (rows sum to 1)."""
    if tokens.shape[1] != head.fc1.w.shape[0]:
        raise ContractViolation(
            f"edge head expects width {head.fc1.w.shape[0]}, got {tokens.shape[1]}"
        )
    hidden = T.gelu(head.fc1(tokens))
    return T.softmax(head.fc2(hidden), axis=-1)


def edge_mask_from_scores(edge_probs: Tensor, tau: float) -> np.ndarray:
    """Binary mask, 1 where the edge probability reaches the threshold."""
    if not (0.0 < tau < 1.0):
        raise ContractViolation(f"tau must sit in (0,1), got {tau}")
    scores = edge_probs.data[:, 1]
    return (scores >= tau).astype(np.int64)


def gt_edge_mask(labels: np.ndarray, patch: int) -> np.ndarray:
    """Tokens whose patch holds at least one label-boundary pixel.

    A pixel is a boundary pixel when any 4-neighbor carries a different
    label; the pixel map is then pooled patch-wise with logical-or.
    """
    labels = np.asarray(labels)
    H, W = labels.shape
    if H % patch or W % patch:
        raise ContractViolation(
            f"label map {labels.shape} not divisible by patch {patch}"
        )
    edge = np.zeros((H, W), dtype=bool)
    edge[:-1, :] |= labels[:-1, :] != labels[1:, :]
    edge[1:, :] |= labels[1:, :] != labels[:-1, :]
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    h, w = H // patch, W // patch
    patches = edge.reshape(h, patch, w, patch).any(axis=(1, 3))
    return patches.reshape(-1).astype(np.int64)


def edge_loss(edge_probs: Tensor, gt_mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of the edge probability against the mask."""
    gt = np.asarray(gt_mask, dtype=np.float64).reshape(-1)
    if edge_probs.shape[0] != gt.shape[0]:
        raise ContractViolation(
            f"edge_loss: {edge_probs.shape[0]} predictions vs {gt.shape[0]} targets"
        )
    p = T.clamp(T.slice_axis(edge_probs, 1, 1, 2), 1e-12, 1.0 - 1e-12)
    p = T.reshape(p, (gt.shape[0],))
    g = Tensor(gt)
    pos = T.mul(g, T.log(p))
    neg = T.mul(Tensor(1.0 - gt), T.log(Tensor(np.ones_like(gt)) - p))
    return -T.tensor_mean(pos + neg)


def eqd_select(grid, stride: int, edge_mask: np.ndarray) -> TokenSelection:
    """Union of stride anchors and predicted edge tokens (irregular)."""
    h, w = grid
    mask = np.asarray(edge_mask).reshape(-1)
    if mask.shape[0] != h * w:
        raise ContractViolation(
            f"edge mask length {mask.shape[0]} does not cover grid {grid}"
        )
    anchors = nearest_anchor_indices(grid, stride).retained
    edges = np.flatnonzero(mask != 0)
    retained = np.union1d(anchors, edges)
    return TokenSelection(retained, (h, w), None)


class ShrunkEncoder:
    """Mid-depth query downsampling with a stored high-res restoration set.

    Layer ``qd_layer`` of the base stack runs in QD mode (strided queries,
    full keys/values).  Just before it, a learnable full-resolution query
    grid cross-attends to the features and is kept aside; every tap that
    comes out at reduced resolution is restored by a final QU that uses the
    stored set as queries.  With the degenerate stride 1 nothing shrinks and
    the forward collapses to the plain encoder.
    """

    def __init__(self, base: ViTEncoder, scfg: ShrunkConfig, rng: Rng):
        scfg.validate(base.cfg.depth)
        if scfg.variant != "shrunk":
            raise ContractViolation(f"ShrunkEncoder got variant {scfg.variant!r}")
        self.base = base
        self.scfg = scfg
        cfg = base.cfg
        self.store_queries = Tensor(
            rng.truncated_normal((cfg.tokens, cfg.width), 0.02) + base.pos.data,
            requires_grad=True,
        )
        self.qu_store = QuLayer(rng, cfg.width, cfg.heads, cfg.mlp_ratio)
        self.qu_final = QuLayer(rng, cfg.width, cfg.heads, cfg.mlp_ratio)

    @property
    def cfg(self) -> EncoderConfig:
        return self.base.cfg

    def forward_tapped(self, image: Tensor, record_schedule=None):
        cfg = self.base.cfg
        stride = self.scfg.qd_stride
        k = self.scfg.qd_layer
        tg = self.base.embed(image)
        full_grid = tg.grid
        x = tg
        stored = None
        taps = []
        want = set(cfg.tap_layers)
        sched = record_schedule if record_schedule is not None else None

        for i, layer in enumerate(self.base.layers, start=1):
            if i == k and stride > 1:
                stored = self.qu_store(
                    TokenGrid(self.store_queries, full_grid), x
                )
                if sched is not None:
                    sched.append(("qu_store", stored.count, x.count))
                sel = nearest_anchor_indices(x.grid, stride)
                if sched is not None:
                    sched.append((f"layer{i}_qd", sel.count, x.count))
                x = qd_layer(x, sel, layer)
            else:
                if sched is not None:
                    sched.append((f"layer{i}", x.count, x.count))
                x = TokenGrid(layer(x.tokens), x.grid)
            if i in want:
                taps.append(x)

        restored = []
        for tap in taps:
            if tap.grid != full_grid:
                if sched is not None:
                    sched.append(("qu_final", stored.count, tap.count))
                restored.append(self.qu_final(stored, tap))
            else:
                restored.append(tap)
        return restored

    def params(self):
        out = _prefix("base", self.base)
        out.append(("store_queries", self.store_queries))
        out += _prefix("qu_store", self.qu_store)
        out += _prefix("qu_final", self.qu_final)
        return out


class ShrunkPPEncoder:
    """Edge-aware downsampling before the first layer, QU restoration after.

    The edge head scores raw patch embeddings (before the positional table,
    so boundary evidence is appearance only).  The retained set is the union
    of stride anchors and predicted edge tokens; the whole stack then runs
    dense attention on that subsequence, and a learnable full-resolution
    query grid restores every tap for the decoder.
    """

    def __init__(self, base: ViTEncoder, scfg: ShrunkConfig, rng: Rng):
        scfg.validate(base.cfg.depth)
        if scfg.variant != "shrunk_pp":
            raise ContractViolation(f"ShrunkPPEncoder got variant {scfg.variant!r}")
        self.base = base
        self.scfg = scfg
        cfg = base.cfg
        self.edge_head = EdgeHead(rng, cfg.width, scfg.edge_tau)
        self.full_queries = Tensor(
            rng.truncated_normal((cfg.tokens, cfg.width), 0.02) + base.pos.data,
            requires_grad=True,
        )
        self.qu_final = QuLayer(rng, cfg.width, cfg.heads, cfg.mlp_ratio)

    @property
    def cfg(self) -> EncoderConfig:
        return self.base.cfg

    def select(self, image: Tensor):
        """Edge probabilities and the resulting retained-token selection."""
        from atmseg.encoder import patchify

        cfg = self.base.cfg
        raw = patchify(image, cfg, self.base.patch_proj)
        edge_probs = edge_head_forward(raw.tokens, self.edge_head)
        mask = edge_mask_from_scores(edge_probs, self.edge_head.tau)
        sel = eqd_select(raw.grid, self.scfg.qd_stride, mask)
        return raw, edge_probs, sel

    def forward_tapped(self, image: Tensor, record_schedule=None):
        from atmseg.encoder import add_positional

        cfg = self.base.cfg
        raw, edge_probs, sel = self.select(image)
        full_grid = raw.grid
        sched = record_schedule if record_schedule is not None else None
        if sched is not None:
            sched.append(("edge_head", raw.count, raw.count))

        tokens = add_positional(raw, self.base.pos).tokens
        x = TokenGrid(T.gather_rows(tokens, sel.retained), (1, sel.count))
        taps = []
        want = set(cfg.tap_layers)
        for i, layer in enumerate(self.base.layers, start=1):
            if sched is not None:
                sched.append((f"layer{i}", x.count, x.count))
            x = TokenGrid(layer(x.tokens), x.grid)
            if i in want:
                taps.append(x)

        queries = TokenGrid(self.full_queries, full_grid)
        restored = []
        for tap in taps:
            if sched is not None:
                sched.append(("qu_final", queries.count, tap.count))
            restored.append(self.qu_final(queries, tap))
        return restored, edge_probs

    def params(self):
        out = _prefix("base", self.base)
        out += _prefix("edge_head", self.edge_head)
        out.append(("full_queries", self.full_queries))
        out += _prefix("qu_final", self.qu_final)
        return out


def shrunk_forward(image: Tensor, enc: ShrunkEncoder, record_schedule=None):
    return enc.forward_tapped(image, record_schedule)


def shrunkpp_forward(image: Tensor, enc: ShrunkPPEncoder, record_schedule=None):
    return enc.forward_tapped(image, record_schedule)
