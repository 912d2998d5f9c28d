"""Pluggable optical-flow providers.

All estimators return backward-sampling flow on the target grid (see
geometry).  Three desk-scale providers cover the quality ladder: exact
analytic flow from synthetic scene transforms, integer block matching, and
the zero field (identity transform).  Externally computed flow can be
loaded from per-pair blob files or the common ``.flo`` float format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import blobio
from .autodiff import ShapeError, UsageError
from .geometry import FlowField


@dataclass
class ObjectPose:
    """Similarity transform placing an object's local frame in the image."""

    center: tuple[float, float]  # (cx, cy) pixels
    angle: float = 0.0  # radians
    scale: float = 1.0

    def local_to_world(self, pts: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        rot = np.array([[c, -s], [s, c]])
        return (pts @ rot.T) * self.scale + np.asarray(self.center)

    def world_to_local(self, pts: np.ndarray) -> np.ndarray:
        c, s = np.cos(-self.angle), np.sin(-self.angle)
        rot = np.array([[c, -s], [s, c]])
        return ((pts - np.asarray(self.center)) @ rot.T) / self.scale


@dataclass
class FrameState:
    """Everything needed to compute exact motion for one rendered frame."""

    frame_index: int
    background_offset: tuple[float, float]
    object_poses: dict[int, ObjectPose]
    labels: np.ndarray  # [H, W] topmost object id per pixel, 0 = background


def ground_truth_flow(state_t: FrameState, state_k: FrameState) -> FlowField:
    """Exact analytic backward flow from frame k into frame t's grid.

    Each target pixel follows its owner's transform (frame-t label mask
    decides ownership); background pixels follow the background pan.
    """
    if state_t.labels.shape != state_k.labels.shape:
        raise ShapeError("frame states have mismatched extents")
    if set(state_t.object_poses) - set(state_k.object_poses):
        raise UsageError("object present in frame t has no pose in frame k")
    h, w = state_t.labels.shape
    flow = np.empty((2, h, w), dtype=np.float64)
    off_t = np.asarray(state_t.background_offset, dtype=np.float64)
    off_k = np.asarray(state_k.background_offset, dtype=np.float64)
    flow[0] = off_t[0] - off_k[0]
    flow[1] = off_t[1] - off_k[1]
    ys, xs = np.nonzero(state_t.labels)
    if len(ys):
        pts = np.stack([xs, ys], axis=1).astype(np.float64)
        owners = state_t.labels[ys, xs]
        for oid in np.unique(owners):
            sel = owners == oid
            local = state_t.object_poses[int(oid)].world_to_local(pts[sel])
            prev = state_k.object_poses[int(oid)].local_to_world(local)
            disp = prev - pts[sel]
            flow[0, ys[sel], xs[sel]] = disp[:, 0]
            flow[1, ys[sel], xs[sel]] = disp[:, 1]
    return FlowField(flow.astype(np.float32))


class FlowEstimator:
    """Interface: ``estimate(target, source, pair_key)`` -> FlowField.

    ``pair_key`` identifies the frame pair (the target frame index) for
    providers backed by precomputed fields; image-driven providers ignore it.
    """

    name = "base"
    cost_hint = "unknown"

    def estimate(self, target: np.ndarray, source: np.ndarray, pair_key: int | None = None) -> FlowField:
        raise NotImplementedError


def _check_pair(target: np.ndarray, source: np.ndarray) -> tuple[int, int]:
    if target.shape != source.shape:
        raise ShapeError(f"frame pair extents disagree: {target.shape} vs {source.shape}")
    return target.shape[-2], target.shape[-1]


class ZeroFlow(FlowEstimator):
    """Identity transformation: no motion information at all."""

    name = "zero"
    cost_hint = "free"

    def estimate(self, target, source, pair_key=None) -> FlowField:
        h, w = _check_pair(target, source)
        return FlowField.zero(h, w)


class BlockMatchingFlow(FlowEstimator):
    """Exhaustive integer-displacement SSD matching over a search window.

    Ties favor the smallest displacement magnitude, then lexicographic
    (du, dv) — identical frames therefore yield the exact zero field.
    An optional 3x3 median pass smooths impulse mismatches.
    """

    name = "block"
    cost_hint = "cpu-heavy"

    def __init__(self, radius: int = 8, block: int = 9, median: bool = True):
        if radius < 1:
            raise UsageError(f"search radius must be >= 1, got {radius}")
        if block % 2 == 0:
            raise UsageError(f"block size must be odd, got {block}")
        self.radius = radius
        self.block = block
        self.median = median

    def estimate(self, target, source, pair_key=None) -> FlowField:
        h, w = _check_pair(target, source)
        gt = np.asarray(target, dtype=np.float64)
        gk = np.asarray(source, dtype=np.float64)
        if gt.ndim == 3:  # [3,H,W] -> luminance
            gt = gt.mean(axis=0)
            gk = gk.mean(axis=0)
        ys = np.arange(h)[:, None]
        xs = np.arange(w)[None, :]
        candidates = sorted(
            ((du, dv) for du in range(-self.radius, self.radius + 1) for dv in range(-self.radius, self.radius + 1)),
            key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]),
        )
        best_cost = np.full((h, w), np.inf)
        best_u = np.zeros((h, w), dtype=np.float32)
        best_v = np.zeros((h, w), dtype=np.float32)
        for du, dv in candidates:
            shifted = gk[np.clip(ys + dv, 0, h - 1), np.clip(xs + du, 0, w - 1)]
            diff = gt - shifted
            cost = ndimage.uniform_filter(diff * diff, size=self.block, mode="nearest")
            better = cost < best_cost
            best_cost[better] = cost[better]
            best_u[better] = du
            best_v[better] = dv
        if self.median:
            best_u = ndimage.median_filter(best_u, size=3, mode="nearest")
            best_v = ndimage.median_filter(best_v, size=3, mode="nearest")
        return FlowField(np.stack([best_u, best_v]))


class PrecomputedFlow(FlowEstimator):
    """Flow served from a mapping of pair key -> FlowField."""

    cost_hint = "free"

    def __init__(self, fields: dict[int, FlowField], name: str = "precomputed"):
        self.fields = fields
        self.name = name

    def estimate(self, target, source, pair_key=None) -> FlowField:
        _check_pair(target, source)
        if pair_key is None:
            raise UsageError(f"{self.name} flow needs a pair key (target frame index)")
        if pair_key not in self.fields:
            raise UsageError(f"{self.name} flow has no entry for frame pair {pair_key}")
        field = self.fields[pair_key]
        if field.shape != (target.shape[-2], target.shape[-1]):
            raise ShapeError(f"stored flow {field.shape} does not match frames {target.shape}")
        return field


class GroundTruthFlow(PrecomputedFlow):
    """Exact flow from synthetic scene states (or their saved fields)."""

    name = "gt"

    def __init__(self, fields: dict[int, FlowField]):
        super().__init__(fields, name="gt")

    @classmethod
    def from_states(cls, states: list[FrameState]) -> "GroundTruthFlow":
        fields = {}
        for prev, cur in zip(states, states[1:]):
            fields[cur.frame_index] = ground_truth_flow(cur, prev)
        return cls(fields)


class ExternalFlow(FlowEstimator):
    """Per-pair flow files from a directory: ``flow_{t:05d}.bin`` blobs or
    ``flow_{t:05d}.flo`` in the common float format."""

    name = "external"
    cost_hint = "free"

    def __init__(self, directory):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise UsageError(f"external flow directory {self.directory} does not exist")

    def estimate(self, target, source, pair_key=None) -> FlowField:
        _check_pair(target, source)
        if pair_key is None:
            raise UsageError("external flow needs a pair key (target frame index)")
        blob = self.directory / f"flow_{pair_key:05d}.bin"
        flo = self.directory / f"flow_{pair_key:05d}.flo"
        if blob.exists():
            return FlowField(blobio.load_blob(blob))
        if flo.exists():
            return read_flo(flo)
        raise UsageError(f"no flow file for frame {pair_key} under {self.directory}")


FLO_MAGIC = 202021.25


def write_flo(path, flow: FlowField) -> None:
    """Two-channel float flow file: magic, width, height, interleaved u,v."""
    h, w = flow.shape
    inter = np.stack([flow.vectors[0], flow.vectors[1]], axis=-1).astype("<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(inter.tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    magic, w, h = struct.unpack_from("<fii", raw, 0)
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise UsageError(f"{path}: bad flow magic {magic}")
    data = np.frombuffer(raw, dtype="<f4", offset=12)
    if data.size != h * w * 2:
        raise UsageError(f"{path}: truncated flow payload")
    inter = data.reshape(h, w, 2)
    return FlowField(np.stack([inter[..., 0], inter[..., 1]]))


def make_estimator(source: str, sequence_flow: dict[int, FlowField] | None = None, **kwargs) -> FlowEstimator:
    """Build an estimator from a config string: zero | gt | block | external:<dir>."""
    if source == "zero":
        return ZeroFlow()
    if source == "block":
        return BlockMatchingFlow(**kwargs)
    if source == "gt":
        if sequence_flow is None:
            raise UsageError("ground-truth flow requested but the sequence provides none")
        return GroundTruthFlow(sequence_flow)
    if source.startswith("external:"):
        return ExternalFlow(source.split(":", 1)[1])
    raise UsageError(f"unknown flow source {source!r}")
