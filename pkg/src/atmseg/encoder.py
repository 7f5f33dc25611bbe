"""Plain (non-hierarchical) transformer encoder over image patch tokens.

An image is cut into P x P patches, each linearly embedded to width C, and
the resulting token sequence runs through a stack of pre-norm transformer
layers.  Token count and grid never change inside the stack; selected layer
outputs ("taps") are handed to the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from atmseg import tensor as T
from atmseg.tensor import ContractViolation, Rng, Tensor


@dataclass
class EncoderConfig:
    patch: int = 8
    width: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    image_hw: tuple = (64, 64)
    tap_layers: tuple = (2, 3, 4)

    def __post_init__(self):
        H, W = self.image_hw
        if H % self.patch or W % self.patch:
            raise ContractViolation(
                f"image {self.image_hw} not divisible by patch {self.patch}"
            )
        if self.width % self.heads:
            raise ContractViolation(
                f"width {self.width} not divisible by heads {self.heads}"
            )
        taps = tuple(self.tap_layers)
        if not taps or taps[-1] != self.depth:
            raise ContractViolation(
                f"tap_layers {taps} must be non-empty and end at depth {self.depth}"
            )
        if any(t < 1 or t > self.depth for t in taps):
            raise ContractViolation(
                f"tap_layers {taps} outside [1, {self.depth}]"
            )
        if list(taps) != sorted(taps):
            raise ContractViolation(f"tap_layers {taps} must be sorted")
        self.tap_layers = taps

    @property
    def grid(self):
        return (self.image_hw[0] // self.patch, self.image_hw[1] // self.patch)

    @property
    def tokens(self) -> int:
        h, w = self.grid
        return h * w


@dataclass
class TokenGrid:
    """A token sequence [L, C] plus its 2-D arrangement (h, w)."""

    tokens: Tensor
    grid: tuple

    def __post_init__(self):
        h, w = self.grid
        if h * w != self.tokens.shape[0]:
            raise ContractViolation(
                f"grid {self.grid} does not cover {self.tokens.shape[0]} tokens"
            )

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


class Linear:
    def __init__(self, rng: Rng, d_in: int, d_out: int):
        self.w = Tensor(rng.truncated_normal((d_in, d_out), 0.02), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w) + self.b

    def params(self):
        return [("w", self.w), ("b", self.b)]


class LayerNorm:
    """Normalization with learned gain/bias; eps fixed at 1e-6."""

    def __init__(self, width: int):
        self.g = Tensor(np.ones(width), requires_grad=True)
        self.b = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, eps=1e-6) * self.g + self.b

    def params(self):
        return [("g", self.g), ("b", self.b)]


class Mlp:
    def __init__(self, rng: Rng, width: int, hidden: int):
        self.fc1 = Linear(rng, width, hidden)
        self.fc2 = Linear(rng, hidden, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def params(self):
        return _prefix("fc1", self.fc1) + _prefix("fc2", self.fc2)


def _prefix(name, module):
    return [(f"{name}.{k}", t) for k, t in module.params()]


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[L, C] -> [heads, L, C/heads]."""
    L, C = x.shape
    return T.transpose(T.reshape(x, (L, heads, C // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """[heads, L, d] -> [L, heads*d]."""
    h, L, d = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (L, h * d))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         return_attn: bool = False):
    """Scaled dot-product attention over already-projected q/k/v."""
    d = q.shape[1] // heads
    qh = split_heads(q, heads)
    kh = split_heads(k, heads)
    vh = split_heads(v, heads)
    scores = T.matmul(qh, T.transpose(kh, (0, 2, 1))) * (1.0 / np.sqrt(d))
    attn = T.softmax(scores, axis=-1)
    ctx = merge_heads(T.matmul(attn, vh))
    if return_attn:
        return ctx, attn
    return ctx


class EncoderLayer:
    """Pre-norm block: self-attention then MLP, each behind a residual."""

    def __init__(self, rng: Rng, width: int, heads: int, mlp_ratio: float = 4.0):
        self.width = width
        self.heads = heads
        self.norm1 = LayerNorm(width)
        self.q = Linear(rng, width, width)
        self.k = Linear(rng, width, width)
        self.v = Linear(rng, width, width)
        self.proj = Linear(rng, width, width)
        self.norm2 = LayerNorm(width)
        self.mlp = Mlp(rng, width, int(width * mlp_ratio))

    def __call__(self, x: Tensor, return_attn: bool = False):
        xn = self.norm1(x)
        ctx = multi_head_attention(
            self.q(xn), self.k(xn), self.v(xn), self.heads,
            return_attn=return_attn,
        )
        if return_attn:
            ctx, attn = ctx
        x = x + self.proj(ctx)
        x = x + self.mlp(self.norm2(x))
        if return_attn:
            return x, attn
        return x

    def attend_subset(self, x: Tensor, retained) -> Tensor:
        """Same block, but queries restricted to the retained row subset.

        Keys and values still range over every token, so each surviving
        token aggregates from the full grid before the sequence shrinks.
        """
        xn = self.norm1(x)
        qn = T.gather_rows(xn, retained)
        ctx = multi_head_attention(
            self.q(qn), self.k(xn), self.v(xn), self.heads
        )
        y = T.gather_rows(x, retained) + self.proj(ctx)
        return y + self.mlp(self.norm2(y))

    def params(self):
        out = []
        for name in ("norm1", "q", "k", "v", "proj", "norm2", "mlp"):
            out += _prefix(name, getattr(self, name))
        return out


def patchify(image: Tensor, cfg: EncoderConfig, proj: Linear) -> TokenGrid:
    """Cut [H, W, 3] into P x P patches and embed each to width C."""
    H, W, ch = image.shape
    if (H, W) != tuple(cfg.image_hw):
        raise ContractViolation(
            f"image {(H, W)} does not match config {cfg.image_hw}"
        )
    P = cfg.patch
    h, w = H // P, W // P
    x = T.reshape(image, (h, P, w, P, ch))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    x = T.reshape(x, (h * w, P * P * ch))
    return TokenGrid(proj(x), (h, w))


def add_positional(tg: TokenGrid, pos: Tensor) -> TokenGrid:
    if pos.shape != tg.tokens.shape:
        raise ContractViolation(
            f"positional table {pos.shape} does not match tokens {tg.tokens.shape}"
        )
    return TokenGrid(tg.tokens + pos, tg.grid)


class ViTEncoder:
    """Patch embedding + positional table + a stack of encoder layers."""

    def __init__(self, cfg: EncoderConfig, rng: Rng):
        self.cfg = cfg
        self.patch_proj = Linear(rng, cfg.patch * cfg.patch * 3, cfg.width)
        self.pos = Tensor(
            rng.truncated_normal((cfg.tokens, cfg.width), 0.02), requires_grad=True
        )
        self.layers = [
            EncoderLayer(rng, cfg.width, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.depth)
        ]

    def embed(self, image: Tensor) -> TokenGrid:
        return add_positional(patchify(image, self.cfg, self.patch_proj), self.pos)

    def forward_tapped(self, image: Tensor):
        """Run all layers; return one TokenGrid per configured tap layer."""
        tg = self.embed(image)
        x = tg.tokens
        taps = []
        want = set(self.cfg.tap_layers)
        for i, layer in enumerate(self.layers, start=1):
            x = layer(x)
            if i in want:
                taps.append(TokenGrid(x, tg.grid))
        return taps

    def params(self):
        out = _prefix("patch_proj", self.patch_proj)
        out.append(("pos", self.pos))
        for i, layer in enumerate(self.layers):
            out += _prefix(f"layers.{i}", layer)
        return out


def run_encoder_tapped(image: Tensor, cfg: EncoderConfig, enc: ViTEncoder):
    if enc.cfg is not cfg and (enc.cfg.tap_layers != cfg.tap_layers
                               or enc.cfg.depth != cfg.depth):
        raise ContractViolation("encoder weights built for a different config")
    return enc.forward_tapped(image)
