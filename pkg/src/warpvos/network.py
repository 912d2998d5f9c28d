"""Per-frame model: toy strided encoder, refinement transformer block, and
an FPN-style decoder with group normalization.

Identity content (which object is where) travels alongside the feature
stream as a per-cell slot-coefficient stack.  Attention layers transport it
with their own matching patterns; the decoder refines it with per-pixel
3x3 filters predicted from features.  Every transform applied to the stack
is linear with feature-derived coefficients shared across channels, so the
final similarity readout is exactly equivariant to slot relabeling.
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import blobio
from .attention import (
    CrossAttentionBranch,
    FeedForward,
    SelfAttention,
    WindowedCrossAttentionBranch,
    positional_tokens,
    transport,
)
from .autodiff import Tensor
from .geometry import upsample_bilinear
from .identity import IdentityAssignment, IdentityBank, materialize_coeffs, pool_patch_probs, readout_logits
from .nn import Conv2d, GroupNorm, LayerNorm, Module


@dataclass
class ModelConfig:
    embed_dim: int = 256
    heads: int = 8
    ffn_hidden: int = 1024
    window: int = 15
    slots: int = 10
    enc_channels: tuple[int, ...] = (32, 64, 128, 256)
    dec_channels: int = 128
    norm_groups: int = 8
    fusion: str = "sum"  # "sum" | "mean" of the two branch outputs
    patch: int = 16

    def __post_init__(self):
        self.enc_channels = tuple(self.enc_channels)
        if self.enc_channels[-1] != self.embed_dim:
            raise ad.ShapeError("final encoder stage must produce embed_dim channels")
        if self.patch != 2 ** len(self.enc_channels):
            raise ad.ShapeError(f"patch {self.patch} must match encoder downsampling {2 ** len(self.enc_channels)}")
        if self.fusion not in ("sum", "mean"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.embed_dim % self.heads:
            raise ad.ShapeError("embed_dim must divide evenly into heads")
        if self.window % 2 == 0:
            raise ad.ShapeError("window must be odd")

    def to_json(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**{**obj, "enc_channels": tuple(obj.get("enc_channels", (32, 64, 128, 256)))})


def to_tokens(x: Tensor) -> Tensor:
    c, h, w = x.shape
    return ad.transpose(ad.reshape(x, (c, h * w)), (1, 0))


def from_tokens(x: Tensor, grid: tuple[int, int]) -> Tensor:
    n, c = x.shape
    return ad.reshape(ad.transpose(x, (1, 0)), (c, grid[0], grid[1]))


class Encoder(Module):
    """Four stride-2 conv stages to 1/16 resolution; skips kept at 1/4, 1/8."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        chans = (3,) + cfg.enc_channels
        self.convs = [Conv2d(rng, chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(len(cfg.enc_channels))]
        self.norms = [GroupNorm(min(cfg.norm_groups, c), c) for c in cfg.enc_channels]

    def forward(self, image) -> tuple[Tensor, Tensor, Tensor]:
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim != 3 or x.shape[0] != 3:
            raise ad.ShapeError(f"encoder expects [3,H,W], got {x.shape}")
        if x.shape[1] % 16 or x.shape[2] % 16:
            raise ad.ShapeError(f"input extent {x.shape[1]}x{x.shape[2]} not divisible by 16")
        feats = []
        for conv, norm in zip(self.convs, self.norms):
            x = ad.relu(norm(conv(x)))
            feats.append(x)
        return feats[3], feats[2], feats[1]  # 1/16, 1/8, 1/4


class RefinementBlock(Module):
    """Self-attention, long-term and warped short-term branches, fusion
    self-attention, feed-forward — pre-norm residual arrangement.

    Returns the refined feature tokens and the transported slot
    coefficients.  With no sensory entry (first frame) the short-term
    branch is skipped and the block runs long-term only.
    """

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        dim = cfg.embed_dim
        self.norm_self = LayerNorm(dim)
        self.self_att = SelfAttention(rng, dim, cfg.heads)
        self.norm_long = LayerNorm(dim)
        self.long_branch = CrossAttentionBranch(rng, dim, cfg.heads)
        self.norm_short = LayerNorm(dim)
        self.short_branch = WindowedCrossAttentionBranch(rng, dim, cfg.heads, cfg.window)
        self.norm_fuse = LayerNorm(dim)
        self.fuse_att = SelfAttention(rng, dim, cfg.heads)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, cfg.ffn_hidden)
        self.fusion = cfg.fusion

    def forward(
        self,
        x_tokens: Tensor,
        grid: tuple[int, int],
        mem_feats: Tensor,
        mem_coeffs: Tensor,
        sens_feats: Tensor | None,
        sens_coeffs: Tensor | None,
        pos: np.ndarray,
    ) -> tuple[Tensor, Tensor]:
        sa, _ = self.self_att(self.norm_self(x_tokens), pos)
        u = ad.add(x_tokens, sa)

        long_feat, long_q = self.long_branch(self.norm_long(u), self.norm_long(mem_feats), mem_coeffs)
        long_out = ad.add(u, long_feat)
        if sens_feats is not None:
            short_feat, short_q = self.short_branch(
                self.norm_short(u), self.norm_short(sens_feats), sens_coeffs, grid
            )
            short_out = ad.add(u, short_feat)
            fused = ad.add(long_out, short_out)
            q = ad.add(long_q, short_q)
            if self.fusion == "mean":
                fused = ad.mul(fused, 0.5)
                q = ad.mul(q, 0.5)
        else:
            fused = long_out
            q = long_q

        fo, fw = self.fuse_att(self.norm_fuse(fused), pos)
        z = ad.add(fused, fo)
        q = transport(fw, q)
        h = ad.add(z, self.ffn(self.norm_ffn(z)))
        return h, q


def local_filter3x3(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-pixel 3x3 filtering with a kernel shared across channels.

    ``x`` is [C,H,W]; ``kernels`` is [9,H,W] in row-major offset order
    (offset index 4 is the center).  Borders clamp to the edge.  Linear in
    ``x`` per pixel, so slot-coefficient stacks stay slot-symmetric.
    """
    c, h, w = x.shape
    if kernels.shape != (9, h, w):
        raise ad.ShapeError(f"kernels must be [9,{h},{w}], got {kernels.shape}")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)), mode="edge")
    shifts = [xp[:, dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)]
    kd = kernels.data
    out = np.zeros_like(x.data)
    for t in range(9):
        out += kd[t] * shifts[t]

    def bwd(g):
        gk = np.empty_like(kd)
        for t in range(9):
            gk[t] = (g * shifts[t]).sum(axis=0)
        gxp = np.zeros_like(xp)
        for t in range(9):
            dy, dx = divmod(t, 3)
            gxp[:, dy : dy + h, dx : dx + w] += kd[t] * g
        gx = gxp[:, 1:-1, 1:-1].copy()
        gx[:, 0, :] += gxp[:, 0, 1:-1]
        gx[:, -1, :] += gxp[:, -1, 1:-1]
        gx[:, :, 0] += gxp[:, 1:-1, 0]
        gx[:, :, -1] += gxp[:, 1:-1, -1]
        gx[:, 0, 0] += gxp[:, 0, 0]
        gx[:, 0, -1] += gxp[:, 0, -1]
        gx[:, -1, 0] += gxp[:, -1, 0]
        gx[:, -1, -1] += gxp[:, -1, -1]
        return gx, gk

    return ad._make(out, (x, kernels), bwd)


def _delta_kernel_conv(rng: np.random.Generator, in_ch: int) -> Conv2d:
    """3x3 conv predicting per-pixel kernels; starts near the identity filter.

    Small (not zero) weights keep gradients flowing into the feature path
    from step 0; the center-offset bias makes the initial filter a delta.
    """
    conv = Conv2d(rng, in_ch, 9, 3, padding=1)
    conv.weight.data = conv.weight.data * 0.1
    bias = np.zeros(9, dtype=conv.bias.data.dtype)
    bias[4] = 1.0
    conv.bias.data = bias
    return conv


class Decoder(Module):
    """FPN top-down pathway with group normalization.

    Features flow 1/16 -> 1/8 -> 1/4 (upsample x2, lateral 1x1, 3x3 conv,
    GN); at each level the slot-coefficient stack is upsampled and refined
    by feature-predicted local filters.  The quarter-resolution stack is
    materialized through the identity bank, read out to K+1 logits, and
    bilinearly upsampled x4.
    """

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        dc = cfg.dec_channels
        g = cfg.norm_groups
        self.head16 = Conv2d(rng, cfg.embed_dim, dc, 3, padding=1)
        self.gn16 = GroupNorm(g, dc)
        self.lat8 = Conv2d(rng, cfg.enc_channels[2], dc, 1)
        self.conv8 = Conv2d(rng, dc, dc, 3, padding=1)
        self.gn8 = GroupNorm(g, dc)
        self.lat4 = Conv2d(rng, cfg.enc_channels[1], dc, 1)
        self.conv4 = Conv2d(rng, dc, dc, 3, padding=1)
        self.gn4 = GroupNorm(g, dc)
        self.kern8 = _delta_kernel_conv(rng, dc)
        self.kern4 = _delta_kernel_conv(rng, dc)

    def forward(
        self,
        h16: Tensor,
        skip8: Tensor,
        skip4: Tensor,
        q16: Tensor,
        bank: IdentityBank,
        assignment: IdentityAssignment,
    ) -> Tensor:
        if skip8.shape[1:] != (h16.shape[1] * 2, h16.shape[2] * 2):
            raise ad.ShapeError(f"skip at 1/8 has extent {skip8.shape}, expected x2 of {h16.shape}")
        d16 = ad.relu(self.gn16(self.head16(h16)))
        d8 = ad.relu(self.gn8(self.conv8(ad.add(upsample_bilinear(d16, 2), self.lat8(skip8)))))
        q8 = local_filter3x3(upsample_bilinear(q16, 2), self.kern8(d8))
        d4 = ad.relu(self.gn4(self.conv4(ad.add(upsample_bilinear(d8, 2), self.lat4(skip4)))))
        q4 = local_filter3x3(upsample_bilinear(q8, 2), self.kern4(d4))
        logits4 = readout_logits(materialize_coeffs(q4, bank, assignment), bank, assignment)
        return upsample_bilinear(logits4, 4)


@functools.lru_cache(maxsize=16)
def _cached_positions(h: int, w: int, c: int, dtype: str) -> np.ndarray:
    return positional_tokens(h, w, c).astype(dtype)


class Segmenter(Module):
    """Full per-frame model: encoder, refinement block, decoder, identity bank."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.cfg = cfg
        self.bank = IdentityBank(rng, cfg.slots, cfg.embed_dim, cfg.heads)
        self.encoder = Encoder(rng, cfg)
        self.rtb = RefinementBlock(rng, cfg)
        self.decoder = Decoder(rng, cfg)

    def encode_frame(self, image) -> tuple[Tensor, Tensor, Tensor, tuple[int, int]]:
        f16, skip8, skip4 = self.encoder(image)
        grid = (f16.shape[1], f16.shape[2])
        return to_tokens(f16), skip8, skip4, grid

    def pool_mask(self, soft_mask) -> Tensor:
        """Soft mask [K+1,H,W] -> coefficient tokens [P, K+1] at 1/16.

        Patch-mean normalization (1/256 of the raw patch sum) keeps logits
        and attention values well-conditioned; the sum-convention encoding
        is a fixed scalar multiple and lives in identity.encode_mask.
        """
        coeffs = pool_patch_probs(soft_mask, patch=self.cfg.patch)
        return to_tokens(ad.mul(coeffs, 1.0 / (self.cfg.patch * self.cfg.patch)))

    def forward_frame(
        self,
        image,
        memory: tuple[Tensor, Tensor],
        sensory: tuple[Tensor, Tensor] | None,
        assignment: IdentityAssignment,
    ) -> tuple[Tensor, Tensor]:
        """Logits [K+1,H,W] for one frame, plus the frame's feature tokens
        (reused by the caller when the frame enters long-term memory)."""
        x_tokens, skip8, skip4, grid = self.encode_frame(image)
        pos = _cached_positions(grid[0], grid[1], self.cfg.embed_dim, str(x_tokens.dtype))
        mem_feats, mem_coeffs = memory
        sens_feats, sens_coeffs = sensory if sensory is not None else (None, None)
        h, q = self.rtb(x_tokens, grid, mem_feats, mem_coeffs, sens_feats, sens_coeffs, pos)
        logits = self.decoder(from_tokens(h, grid), skip8, skip4, from_tokens(q, grid), self.bank, assignment)
        return logits, x_tokens

    def encoder_param_names(self) -> set[str]:
        return {name for name, _ in self.named_parameters() if name.startswith("encoder.")}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"bank.directions": self.bank.directions}

    def load_buffers(self, arrays: dict[str, np.ndarray]) -> None:
        self.bank.directions = np.asarray(arrays["bank.directions"], dtype=self.bank.scale.data.dtype)


CHECKPOINT_FORMAT = "warpvos-checkpoint-v1"


def save_checkpoint(model: Segmenter, directory, extra: dict | None = None) -> None:
    """Checkpoint = manifest.json (config, names/shapes) + one blob per array."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    dtype = str(model.bank.scale.data.dtype)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": dtype,
        "config": model.cfg.to_json(),
        "parameters": {},
        "buffers": {},
        "extra": extra or {},
    }
    for name, p in model.named_parameters():
        manifest["parameters"][name] = list(p.data.shape)
        blobio.save_blob(directory / "params" / f"{name}.bin", p.data, dtype=dtype)
    for name, arr in model.buffers().items():
        manifest["buffers"][name] = list(arr.shape)
        blobio.save_blob(directory / "params" / f"{name}.bin", arr, dtype=dtype)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory) -> tuple[Segmenter, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format {manifest.get('format')!r}")
    cfg = ModelConfig.from_json(manifest["config"])
    dtype = manifest["dtype"]
    with ad.precision(dtype):
        model = Segmenter(np.random.default_rng(0), cfg)
    params = {
        name: blobio.load_blob(directory / "params" / f"{name}.bin", dtype=dtype)
        for name in manifest["parameters"]
    }
    model.load_state_arrays(params)
    model.load_buffers(
        {name: blobio.load_blob(directory / "params" / f"{name}.bin", dtype=dtype) for name in manifest["buffers"]}
    )
    return model, manifest
