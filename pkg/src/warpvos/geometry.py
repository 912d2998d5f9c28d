"""Flow fields and backward warping.

Convention: a flow field lives on the *target* grid and stores, per target
pixel p, the displacement to the source location to sample from, i.e. the
warp reads ``source[p + f(p)]``.  The zero field is therefore the identity
warp.  Sampling is bilinear with clamp-to-edge borders and is differentiable
with respect to the source (never the coordinates — flow is an input).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, UsageError


@dataclass
class FlowField:
    """Per-pixel displacement (x, y) on the target grid, backward convention."""

    vectors: np.ndarray  # [2, H, W]; [0] = x displacement, [1] = y displacement

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 3 or self.vectors.shape[0] != 2:
            raise ad.ShapeError(f"flow field must be [2,H,W], got {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise UsageError("flow field contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[1], self.vectors.shape[2]

    @classmethod
    def zero(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((2, height, width), dtype=np.float32))

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.vectors[0] ** 2 + self.vectors[1] ** 2)


def identity_coords(height: int, width: int, dtype=np.float64) -> np.ndarray:
    """Absolute (x, y) coordinate grids, shape [2, H, W]."""
    ys, xs = np.meshgrid(np.arange(height, dtype=dtype), np.arange(width, dtype=dtype), indexing="ij")
    return np.stack([xs, ys])


def grid_sample_bilinear(source, coords: np.ndarray) -> Tensor:
    """Sample ``source[C,H,W]`` at absolute ``coords[2,H',W']`` (x, y).

    Bilinear interpolation of the four neighbors; out-of-bounds coordinates
    clamp to the border.  Integer coordinates reproduce source values
    bit-exactly.  Differentiable w.r.t. the source via scatter-add.
    """
    src = source if isinstance(source, Tensor) else Tensor(source)
    if src.ndim != 3:
        raise ad.ShapeError(f"grid_sample expects source [C,H,W], got {src.shape}")
    coords = np.asarray(coords)
    if coords.ndim != 3 or coords.shape[0] != 2:
        raise ad.ShapeError(f"coords must be [2,H,W], got {coords.shape}")
    if not np.isfinite(coords).all():
        raise UsageError("grid_sample received non-finite coordinates")

    c, h, w = src.shape
    oh, ow = coords.shape[1], coords.shape[2]
    x = np.clip(coords[0], 0, w - 1)
    y = np.clip(coords[1], 0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (x - x0).astype(src.dtype)
    wy = (y - y0).astype(src.dtype)

    d = src.data
    v00 = d[:, y0, x0]
    v01 = d[:, y0, x1]
    v10 = d[:, y1, x0]
    v11 = d[:, y1, x1]
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)

    def bwd(g):
        gs = np.zeros((h * w, c), dtype=g.dtype)
        gt = g.reshape(c, -1).T  # [N, C]
        for yy, xx, ww in (
            (y0, x0, (1 - wy) * (1 - wx)),
            (y0, x1, (1 - wy) * wx),
            (y1, x0, wy * (1 - wx)),
            (y1, x1, wy * wx),
        ):
            np.add.at(gs, (yy * w + xx).reshape(-1), gt * ww.reshape(-1, 1))
        return (gs.T.reshape(c, h, w),)

    return ad._make(np.ascontiguousarray(out), (src,), bwd)


def warp_image(image, flow: FlowField) -> Tensor:
    """Pull source-frame content into the flow's target grid."""
    img = image if isinstance(image, Tensor) else Tensor(image)
    fh, fw = flow.shape
    if img.shape[1:] != (fh, fw):
        raise ad.ShapeError(f"image {img.shape} does not match flow grid {(fh, fw)}")
    coords = identity_coords(fh, fw) + flow.vectors
    return grid_sample_bilinear(img, coords)


def warp_soft_mask(mask, flow: FlowField, eps: float = 1e-8) -> Tensor:
    """Warp a per-object probability stack and renormalize per pixel.

    The input must lie on the simplex (channels sum to 1 within 1e-4,
    background channel included); the output does too.
    """
    m = mask if isinstance(mask, Tensor) else Tensor(mask)
    sums = m.data.sum(axis=0)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise UsageError(f"soft mask channels must sum to 1 (max deviation {np.abs(sums - 1.0).max():.2e})")
    warped = warp_image(m, flow)
    total = ad.tsum(warped, axis=0, keepdims=True)
    return ad.div(warped, ad.add(total, eps))


@functools.lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int, dtype: str) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix [n_out, n_in],
    half-pixel aligned with border clamping."""
    pos = np.clip((np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    mat = np.zeros((n_out, n_in))
    mat[np.arange(n_out), lo] += 1.0 - frac
    mat[np.arange(n_out), hi] += frac
    return mat.astype(dtype)


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize (half-pixel aligned); separable, so it runs as two
    small matrix products and differentiates without scatter ops."""
    t = x if isinstance(x, Tensor) else Tensor(x)
    c, h, w = t.shape
    dtype = str(t.dtype)
    ry = Tensor(_interp_matrix(h, out_h, dtype))  # [H', H]
    rx = Tensor(_interp_matrix(w, out_w, dtype))  # [W', W]
    rows = ad.matmul(ry, ad.reshape(ad.transpose(t, (1, 0, 2)), (h, c * w)))  # [H', C*W]
    cols = ad.transpose(ad.reshape(rows, (out_h, c, w)), (1, 0, 2))  # [C, H', W]
    return ad.matmul(cols, ad.transpose(rx))


def upsample_bilinear(x, scale: int) -> Tensor:
    """Bilinear upscale by an integer factor (half-pixel aligned)."""
    t = x if isinstance(x, Tensor) else Tensor(x)
    _, h, w = t.shape
    return resize_bilinear(t, h * scale, w * scale)


def flow_to_color(flow: FlowField, max_magnitude: float | None = None) -> np.ndarray:
    """Color-wheel rendering of a flow field as an RGB uint8 image."""
    u, v = flow.vectors[0], flow.vectors[1]
    mag = np.sqrt(u * u + v * v)
    ang = np.arctan2(v, u)  # [-pi, pi]
    scale = max_magnitude if max_magnitude else max(float(mag.max()), 1e-6)
    sat = np.clip(mag / scale, 0, 1)
    hue = (ang + np.pi) / (2 * np.pi)  # [0, 1]
    i = np.floor(hue * 6).astype(int) % 6
    f = hue * 6 - np.floor(hue * 6)
    p = 1 - sat
    q = 1 - f * sat
    t = 1 - (1 - f) * sat
    one = np.ones_like(sat)
    conds = [(i == k)[..., None] for k in range(6)]
    rgb = np.select(
        conds,
        [
            np.stack([one, t, p], -1),
            np.stack([q, one, p], -1),
            np.stack([p, one, t], -1),
            np.stack([p, q, one], -1),
            np.stack([t, p, one], -1),
            np.stack([one, p, q], -1),
        ],
    )
    return (rgb * 255).astype(np.uint8)
