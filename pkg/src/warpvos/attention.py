"""Attention forms used by the refinement block.

Four operations: plain attention, identity-augmented attention (adds the
identity embedding to the values), cross-attention over long-term memory
with a shared key projection for query and key, and windowed cross-attention
over the warped previous frame with a relative position bias plus a learned
per-offset key embedding.  All run multi-head with heads concatenated and
optionally output-projected; logits scale by 1/sqrt(head_dim).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module, Parameter


@dataclass
class AttentionConfig:
    embed_dim: int = 256
    heads: int = 8
    ffn_hidden: int = 1024
    window: int = 15

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ad.ShapeError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.window % 2 == 0:
            raise ad.ShapeError(f"window must be odd (centered), got {self.window}")


def split_heads(x: Tensor, heads: int) -> Tensor:
    n, c = x.shape
    return ad.transpose(ad.reshape(x, (n, heads, c // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    h, n, d = x.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (n, h * d))


def attention_weights(q: Tensor, k: Tensor, heads: int, extra_logits=None) -> Tensor:
    """softmax((QK^T)/sqrt(d) + extra) per head: [heads, n, m]."""
    if q.shape[-1] != k.shape[-1]:
        raise ad.ShapeError(f"channel mismatch: Q {q.shape} vs K {k.shape}")
    d = q.shape[-1] // heads
    qh = split_heads(q, heads)
    kh = split_heads(k, heads)
    scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(d))
    if extra_logits is not None:
        scores = ad.add(scores, extra_logits)
    return ad.softmax(scores, axis=-1)


def apply_weights(weights: Tensor, v: Tensor, heads: int, out_proj: Linear | None = None) -> Tensor:
    out = merge_heads(ad.matmul(weights, split_heads(v, heads)))
    return out_proj(out) if out_proj is not None else out


def transport(weights: Tensor, coeffs: Tensor) -> Tensor:
    """Carry slot coefficients [m,K+1] by the head-averaged pattern [heads,n,m]."""
    return ad.matmul(ad.tmean(weights, axis=0), coeffs)


@functools.lru_cache(maxsize=32)
def window_index(grid_h: int, grid_w: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Additive window mask [n,n] (0 inside, -inf outside) and bias-table
    index [n,n] for a centered ``window`` x ``window`` neighborhood.

    Border queries keep only their valid (clipped) neighbors; every query
    retains at least itself.  Indices at masked pairs are clamped into the
    table but receive exactly zero softmax weight, hence zero gradient.
    """
    radius = (window - 1) // 2
    ys, xs = np.divmod(np.arange(grid_h * grid_w), grid_w)
    dy = ys[:, None] - ys[None, :]
    dx = xs[:, None] - xs[None, :]
    valid = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    mask = np.where(valid, 0.0, -np.inf).astype(np.float32)
    span = 2 * window - 1
    idx = (np.clip(dy, -(window - 1), window - 1) + window - 1) * span + (
        np.clip(dx, -(window - 1), window - 1) + window - 1
    )
    return mask, idx.astype(np.int64)


class RelativeBias(Module):
    """Per-offset scalar bias per head plus a learned per-offset key embedding.

    Both tables are zero-initialized so that at step 0 the windowed branch
    reduces to plain windowed attention.
    """

    def __init__(self, window: int, heads: int, dim: int):
        span = 2 * window - 1
        self.table = Parameter(np.zeros((span * span, heads)))
        self.key_embed = Parameter(np.zeros((span * span, dim)))
        self.window = window
        self.heads = heads
        self.dim = dim

    def logits(self, q: Tensor, idx: np.ndarray) -> Tensor:
        """[heads, n, n] additive attention logits for projected queries ``q``."""
        heads, dim = self.heads, self.dim
        d = dim // heads
        gathered = ad.take(self.table, idx)  # [n, n, heads]
        bias = ad.transpose(gathered, (2, 0, 1))
        qh = split_heads(q, heads)  # [h, n, d]
        eh = ad.transpose(ad.reshape(self.key_embed, (-1, heads, d)), (1, 2, 0))  # [h, d, O]
        qe = ad.mul(ad.matmul(qh, eh), 1.0 / np.sqrt(d))  # [h, n, O]
        idx_h = np.broadcast_to(idx, (heads,) + idx.shape)
        shaw = ad.gather_last(qe, idx_h)  # [h, n, n]
        return ad.add(bias, shaw)


def att(q, k, v, heads: int = 1, out_proj: Linear | None = None) -> Tensor:
    """Att(Q,K,V): softmax(QK^T/sqrt(d)) V per head, concat, optional proj."""
    w = attention_weights(q, k, heads)
    return apply_weights(w, v, heads, out_proj)


def att_id(q, k, v, ident, heads: int = 1, out_proj: Linear | None = None) -> Tensor:
    """AttID(Q,K,V,ID) = Att(Q, K, V + ID)."""
    v = v if isinstance(v, Tensor) else Tensor(v)
    ident = ident if isinstance(ident, Tensor) else Tensor(ident)
    if v.shape != ident.shape:
        raise ad.ShapeError(f"ID shape {ident.shape} must equal V shape {v.shape}")
    return att(q, k, ad.add(v, ident), heads=heads, out_proj=out_proj)


def catt(x_t, x_m, y_m, w_k, w_v, heads: int = 1, out_proj: Linear | None = None) -> Tensor:
    """Long-term cross-attention: AttID(X_t W_k, X_m W_k, X_m W_v, Y_m).

    W_k is shared between query and key (symmetric matching); memory rows
    are the concatenation of all long-term entries and must be non-empty.
    """
    x_m = x_m if isinstance(x_m, Tensor) else Tensor(x_m)
    if x_m.shape[0] == 0:
        raise ad.UsageError("long-term memory is empty (reference frame must always be present)")
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    w_k = w_k if isinstance(w_k, Tensor) else Tensor(w_k)
    w_v = w_v if isinstance(w_v, Tensor) else Tensor(w_v)
    return att_id(ad.matmul(x_t, w_k), ad.matmul(x_m, w_k), ad.matmul(x_m, w_v), y_m, heads=heads, out_proj=out_proj)


def wcatt(
    x_t,
    x_l,
    y_l,
    w_k,
    w_v,
    grid: tuple[int, int],
    window: int,
    heads: int = 1,
    bias: RelativeBias | None = None,
    out_proj: Linear | None = None,
) -> Tensor:
    """Windowed cross-attention against the warped previous frame.

    Attention at position p is restricted to the window x window
    neighborhood N(p) on the shared grid; logits get the relative position
    bias.  A window spanning the whole grid with zero bias reduces to catt.
    """
    h, w = grid
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    x_l = x_l if isinstance(x_l, Tensor) else Tensor(x_l)
    y_l = y_l if isinstance(y_l, Tensor) else Tensor(y_l)
    if x_t.shape[0] != h * w or x_l.shape[0] != h * w:
        raise ad.ShapeError(f"token count must equal grid {h}x{w}")
    mask, idx = window_index(h, w, window)
    q = ad.matmul(x_t, w_k if isinstance(w_k, Tensor) else Tensor(w_k))
    k = ad.matmul(x_l, w_k if isinstance(w_k, Tensor) else Tensor(w_k))
    v = ad.add(ad.matmul(x_l, w_v if isinstance(w_v, Tensor) else Tensor(w_v)), y_l)
    extra = Tensor(mask) if bias is None else ad.add(bias.logits(q, idx), Tensor(mask))
    weights = attention_weights(q, k, heads, extra_logits=extra)
    return apply_weights(weights, v, heads, out_proj)


def sine_positional(height: int, width: int, channels: int) -> np.ndarray:
    """Fixed 2-D sinusoidal position embedding, [C, H, W].

    First half of the channels encodes the row coordinate, second half the
    column, each as interleaved (sin, cos) pairs over a geometric frequency
    ladder.  Added to self-attention queries/keys only.
    """
    if channels % 4:
        raise ad.ShapeError(f"positional channels must be divisible by 4, got {channels}")
    quarter = channels // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    out = np.zeros((channels, height, width), dtype=ad.default_dtype())
    ys = np.arange(height)[None, :, None] * freqs[:, None, None]  # [q, H, 1]
    xs = np.arange(width)[None, None, :] * freqs[:, None, None]  # [q, 1, W]
    half = channels // 2
    out[0:half:2] = np.broadcast_to(np.sin(ys), (quarter, height, width))
    out[1:half:2] = np.broadcast_to(np.cos(ys), (quarter, height, width))
    out[half::2] = np.broadcast_to(np.sin(xs), (quarter, height, width))
    out[half + 1 :: 2] = np.broadcast_to(np.cos(xs), (quarter, height, width))
    return out


def positional_tokens(height: int, width: int, channels: int) -> np.ndarray:
    """Token-major view of the sine embedding: [H*W, C]."""
    return sine_positional(height, width, channels).reshape(channels, height * width).T.copy()


class SelfAttention(Module):
    """Standard multi-head self-attention; positions enter queries and keys."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        self.w_q = Linear(rng, dim, dim, bias=False)
        self.w_k = Linear(rng, dim, dim, bias=False)
        self.w_v = Linear(rng, dim, dim, bias=False)
        self.out = Linear(rng, dim, dim)
        self.heads = heads

    def forward(self, x: Tensor, pos: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        qk_in = ad.add(x, Tensor(pos)) if pos is not None else x
        weights = attention_weights(self.w_q(qk_in), self.w_k(qk_in), self.heads)
        return apply_weights(weights, self.w_v(x), self.heads, self.out), weights


class CrossAttentionBranch(Module):
    """Long-term branch: shared W_k for query/key, W_v for values.

    The feature output is projected; identity content is transported
    separately by the same attention pattern (head-averaged), keeping the
    readout exactly equivariant to slot relabeling.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        self.w_k = Linear(rng, dim, dim, bias=False)
        self.w_v = Linear(rng, dim, dim, bias=False)
        self.out = Linear(rng, dim, dim)
        self.heads = heads

    def forward(self, x_t: Tensor, x_m: Tensor, coeffs_m: Tensor) -> tuple[Tensor, Tensor]:
        if x_m.shape[0] == 0:
            raise ad.UsageError("long-term memory is empty")
        weights = attention_weights(self.w_k(x_t), self.w_k(x_m), self.heads)
        feat = apply_weights(weights, self.w_v(x_m), self.heads, self.out)
        return feat, transport(weights, coeffs_m)


class WindowedCrossAttentionBranch(Module):
    """Short-term branch: window-restricted matching with relative bias."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, window: int):
        self.w_k = Linear(rng, dim, dim, bias=False)
        self.w_v = Linear(rng, dim, dim, bias=False)
        self.out = Linear(rng, dim, dim)
        self.bias = RelativeBias(window, heads, dim)
        self.heads = heads
        self.window = window

    def forward(self, x_t: Tensor, x_l: Tensor, coeffs_l: Tensor, grid: tuple[int, int]) -> tuple[Tensor, Tensor]:
        mask, idx = window_index(grid[0], grid[1], self.window)
        q = self.w_k(x_t)
        extra = ad.add(self.bias.logits(q, idx), Tensor(mask))
        weights = attention_weights(q, self.w_k(x_l), self.heads, extra_logits=extra)
        feat = apply_weights(weights, self.w_v(x_l), self.heads, self.out)
        return feat, transport(weights, coeffs_l)


class FeedForward(Module):
    """Position-wise two-layer MLP with GELU."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.lin1 = Linear(rng, dim, hidden)
        self.lin2 = Linear(rng, hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(ad.gelu(self.lin1(x)))
