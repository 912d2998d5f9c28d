"""Synthetic sequences with exact labels and analytic flow, dataset IO in
the standard VOS directory layout, and training-time augmentation.

Scenes are textured convex polygons/ellipses moving affinely over a panning
filtered-noise background.  Every frame's label mask and backward flow field
derive exactly from the stored per-frame transforms, so the generator also
serves as its own oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import blobio
from .autodiff import ShapeError, UsageError
from .flow import FlowField, FrameState, ObjectPose, ground_truth_flow

MASK_ALIGN = 16  # ingestion pads spatial extents to this multiple


# ---------------------------------------------------------------------------
# textures and shapes


def filtered_noise(rng: np.random.Generator, h: int, w: int, sigma: float, lo: float, hi: float) -> np.ndarray:
    """Smoothed uniform noise per channel, rescaled into [lo, hi]."""
    tex = gaussian_filter(rng.random((3, h, w)), sigma=(0, sigma, sigma))
    mn = tex.min(axis=(1, 2), keepdims=True)
    mx = tex.max(axis=(1, 2), keepdims=True)
    return (lo + (tex - mn) / np.maximum(mx - mn, 1e-9) * (hi - lo)).astype(np.float32)


def sample_bilinear_np(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Plain numpy bilinear lookup with border clamp; img is [C,H,W]."""
    c, h, w = img.shape
    x = np.clip(xs, 0, w - 1)
    y = np.clip(ys, 0, h - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx, wy = x - x0, y - y0
    return (1 - wy) * ((1 - wx) * img[:, y0, x0] + wx * img[:, y0, x1]) + wy * (
        (1 - wx) * img[:, y1, x0] + wx * img[:, y1, x1]
    )


@dataclass
class Shape:
    """Convex region in local coordinates (unit radius before pose scale)."""

    kind: str  # "ellipse" | "polygon"
    radius: float
    aspect: float = 1.0
    vertices: np.ndarray | None = None  # [k,2] convex, for polygons

    def inside(self, local: np.ndarray) -> np.ndarray:
        if self.kind == "ellipse":
            nx = local[:, 0] / self.radius
            ny = local[:, 1] / (self.radius * self.aspect)
            return nx * nx + ny * ny <= 1.0
        v = self.vertices
        ok = np.ones(len(local), dtype=bool)
        for i in range(len(v)):
            a, b = v[i], v[(i + 1) % len(v)]
            edge = b - a
            rel = local - a
            ok &= edge[0] * rel[:, 1] - edge[1] * rel[:, 0] >= 0
        return ok

    def to_json(self) -> dict:
        d = {"kind": self.kind, "radius": self.radius, "aspect": self.aspect}
        if self.vertices is not None:
            d["vertices"] = self.vertices.tolist()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "Shape":
        verts = np.asarray(obj["vertices"]) if "vertices" in obj else None
        return cls(obj["kind"], obj["radius"], obj.get("aspect", 1.0), verts)

    @classmethod
    def random(cls, rng: np.random.Generator, radius: float) -> "Shape":
        if rng.random() < 0.5:
            return cls("ellipse", radius, aspect=float(rng.uniform(0.55, 1.0)))
        k = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        radii = rng.uniform(0.6, 1.0, size=k) * radius
        verts = np.stack([np.cos(angles) * radii, np.sin(angles) * radii], axis=1)
        return cls("polygon", radius, vertices=verts)


@dataclass
class SceneObject:
    object_id: int
    shape: Shape
    texture: np.ndarray  # [3, th, tw]
    poses: list[ObjectPose]

    def texture_colors(self, local: np.ndarray) -> np.ndarray:
        th, tw = self.texture.shape[1:]
        span = self.shape.radius * 1.6
        tx = (local[:, 0] / span * 0.5 + 0.5) * (tw - 1)
        ty = (local[:, 1] / span * 0.5 + 0.5) * (th - 1)
        return sample_bilinear_np(self.texture, tx, ty)


# ---------------------------------------------------------------------------
# scene assembly and rendering

MAX_TRANSLATION = 6.0  # px/frame
MAX_ROTATION = np.deg2rad(4.0)  # per frame
SCALE_STEP = (0.98, 1.02)  # per-frame scale factor bounds


@dataclass
class SceneSpec:
    """Knobs for one synthetic sequence."""

    seed: int = 0
    height: int = 96
    width: int = 160
    frames: int = 24
    min_objects: int = 1
    max_objects: int = 3
    min_radius: float = 11.0
    max_radius: float = 22.0
    max_speed: float = 6.0
    max_spin_deg: float = 4.0
    max_pan: float = 2.0
    texture_sigma: float = 2.0
    aim_center: bool = True  # bias paths through the middle -> occlusion events

    def validate(self) -> None:
        if self.max_speed > MAX_TRANSLATION + 1e-9:
            raise UsageError(f"max_speed {self.max_speed} exceeds cap {MAX_TRANSLATION}")
        if np.deg2rad(self.max_spin_deg) > MAX_ROTATION + 1e-9:
            raise UsageError(f"max_spin {self.max_spin_deg} deg exceeds cap 4 deg")
        if 2 * self.max_radius >= min(self.height, self.width):
            raise UsageError("objects larger than frame")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise UsageError("bad object count range")

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise UsageError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**obj)


class SyntheticScene:
    """A fully determined moving-shape sequence with exact ground truth."""

    def __init__(self, spec: SceneSpec, background: np.ndarray, bg_offsets: np.ndarray, objects: list[SceneObject]):
        self.spec = spec
        self.background = background
        self.bg_offsets = bg_offsets  # [T, 2]
        self.objects = objects

    @classmethod
    def build(cls, spec: SceneSpec, scripted_paths: dict[int, list[tuple[float, float]]] | None = None) -> "SyntheticScene":
        spec.validate()
        rng = np.random.default_rng(spec.seed)
        h, w, t = spec.height, spec.width, spec.frames
        margin = int(np.ceil(spec.max_pan * t)) + 2
        background = filtered_noise(rng, h + 2 * margin, w + 2 * margin, spec.texture_sigma * 2, 0.15, 0.55)
        pan_vel = rng.uniform(-spec.max_pan, spec.max_pan, size=2)
        bg_offsets = margin + np.arange(t)[:, None] * pan_vel[None, :]

        count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        objects = []
        for oid in range(1, count + 1):
            radius = float(rng.uniform(spec.min_radius, spec.max_radius))
            shape = Shape.random(rng, radius)
            tex_size = int(np.ceil(radius * 1.6 * 2)) + 3
            base = rng.uniform(0.35, 0.95, size=3)
            texture = filtered_noise(rng, tex_size, tex_size, spec.texture_sigma, 0.0, 0.45)
            texture = np.clip(texture + base[:, None, None] * 0.9, 0, 1).astype(np.float32)
            poses = cls._random_poses(rng, spec, radius, t, (scripted_paths or {}).get(oid))
            objects.append(SceneObject(oid, shape, texture, poses))
        return cls(spec, background, bg_offsets, objects)

    @staticmethod
    def _random_poses(rng, spec: SceneSpec, radius: float, frames: int, path=None) -> list[ObjectPose]:
        h, w = spec.height, spec.width
        if path is not None:
            if len(path) != frames:
                raise UsageError(f"scripted path length {len(path)} != frames {frames}")
            return [ObjectPose((float(x), float(y))) for x, y in path]
        cx = float(rng.uniform(radius * 0.5, w - radius * 0.5))
        cy = float(rng.uniform(radius * 0.5, h - radius * 0.5))
        if spec.aim_center:
            target = np.array([w / 2, h / 2]) + rng.uniform(-0.2, 0.2, 2) * [w, h]
            direction = target - [cx, cy]
            norm = np.linalg.norm(direction)
            direction = direction / norm if norm > 1e-6 else np.array([1.0, 0.0])
        else:
            ang = rng.uniform(0, 2 * np.pi)
            direction = np.array([np.cos(ang), np.sin(ang)])
        speed = float(rng.uniform(0.3, 1.0) * spec.max_speed)
        vel = direction * speed
        spin = float(rng.uniform(-1, 1) * np.deg2rad(spec.max_spin_deg))
        scale_rate = float(rng.uniform(*SCALE_STEP))
        # bounce box lets objects leave the frame partially and re-enter
        lo_x, hi_x = -0.2 * w, 1.2 * w
        lo_y, hi_y = -0.2 * h, 1.2 * h
        poses = []
        x, y, angle, scale = cx, cy, 0.0, 1.0
        vx, vy = vel
        for _ in range(frames):
            poses.append(ObjectPose((x, y), angle, scale))
            x, y = x + vx, y + vy
            if not lo_x <= x <= hi_x:
                vx = -vx
                x = float(np.clip(x, lo_x, hi_x))
            if not lo_y <= y <= hi_y:
                vy = -vy
                y = float(np.clip(y, lo_y, hi_y))
            angle += spin
            scale = float(np.clip(scale * scale_rate, 0.85, 1.18))
        return poses

    # -- exact ground truth -------------------------------------------------
    def labels(self, t: int) -> np.ndarray:
        h, w = self.spec.height, self.spec.width
        lab = np.zeros((h, w), dtype=np.uint8)
        pts = _pixel_points(h, w)
        for obj in self.objects:  # later ids paint on top
            local = obj.poses[t].world_to_local(pts)
            lab.reshape(-1)[obj.shape.inside(local)] = obj.object_id
        return lab

    def render(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        h, w = self.spec.height, self.spec.width
        pts = _pixel_points(h, w)
        off = self.bg_offsets[t]
        frame = sample_bilinear_np(self.background, pts[:, 0] + off[0], pts[:, 1] + off[1]).reshape(3, h, w)
        lab = np.zeros((h, w), dtype=np.uint8)
        for obj in self.objects:
            local = obj.poses[t].world_to_local(pts)
            ins = obj.shape.inside(local)
            if ins.any():
                colors = obj.texture_colors(local[ins])
                frame.reshape(3, -1)[:, ins] = colors
                lab.reshape(-1)[ins] = obj.object_id
        return frame.astype(np.float32), lab

    def frame_state(self, t: int) -> FrameState:
        return FrameState(
            frame_index=t,
            background_offset=(float(self.bg_offsets[t][0]), float(self.bg_offsets[t][1])),
            object_poses={o.object_id: o.poses[t] for o in self.objects},
            labels=self.labels(t),
        )

    def flow(self, t: int) -> FlowField:
        """Backward flow sampled on frame t pointing into frame t-1."""
        if t < 1:
            raise UsageError("flow defined for t >= 1")
        return ground_truth_flow(self.frame_state(t), self.frame_state(t - 1))

    def first_annotation(self) -> dict[int, int]:
        firsts = {}
        for t in range(self.spec.frames):
            lab = self.labels(t)
            for oid in np.unique(lab):
                if oid and int(oid) not in firsts:
                    firsts[int(oid)] = t
        return firsts

    def meta(self) -> dict:
        return {
            "seed": self.spec.seed,
            "first_annotation": {str(k): v for k, v in self.first_annotation().items()},
            "background_offsets": self.bg_offsets.tolist(),
            "objects": {
                str(o.object_id): {
                    "shape": o.shape.to_json(),
                    "poses": [
                        {"center": [p.center[0], p.center[1]], "angle": p.angle, "scale": p.scale} for p in o.poses
                    ],
                }
                for o in self.objects
            },
        }


def _pixel_points(h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)


# ---------------------------------------------------------------------------
# dataset layout


def voc_palette() -> list[int]:
    """Standard indexed-color palette (label = palette index)."""
    palette = []
    for i in range(256):
        r = g = b = 0
        cid = i
        for j in range(8):
            r |= ((cid >> 0) & 1) << (7 - j)
            g |= ((cid >> 1) & 1) << (7 - j)
            b |= ((cid >> 2) & 1) << (7 - j)
            cid >>= 3
        palette.extend([r, g, b])
    return palette


def save_label_png(path, labels: np.ndarray) -> None:
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(voc_palette())
    img.save(path)


def load_label_png(path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise UsageError(f"cannot read annotation {path}: {exc}") from exc
    if img.mode != "P":
        img = img.convert("P")
    return np.array(img, dtype=np.int32)


@dataclass
class DatasetSpec:
    seed: int = 0
    sequences: int = 4
    scene: SceneSpec = field(default_factory=SceneSpec)

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSpec":
        known = {"seed", "sequences", "scene"}
        unknown = set(obj) - known
        if unknown:
            raise UsageError(f"unknown dataset spec keys: {sorted(unknown)}")
        scene = SceneSpec.from_json(obj.get("scene", {}))
        return cls(seed=obj.get("seed", 0), sequences=obj.get("sequences", 4), scene=scene)


def generate_synthetic(spec: DatasetSpec, out_dir, frames_override: int | None = None) -> list[str]:
    """Render a dataset to disk in the standard layout, with flow and meta.

    Layout: root/{JPEGImages,Annotations,Flow,meta}/{sequence}/...
    Per-pair backward flow is stored as ``flow_{t:05d}.bin`` blobs.
    Byte-identical across runs for a fixed spec.
    """
    out = Path(out_dir)
    names = []
    for s in range(spec.sequences):
        derived = int(np.random.SeedSequence([spec.seed, s]).generate_state(1)[0])
        scene_spec = SceneSpec(**{**vars(spec.scene), "seed": derived})
        if frames_override is not None:
            scene_spec.frames = frames_override
        scene = SyntheticScene.build(scene_spec)
        name = f"seq{s:03d}"
        names.append(name)
        img_dir = out / "JPEGImages" / name
        ann_dir = out / "Annotations" / name
        flow_dir = out / "Flow" / name
        for d in (img_dir, ann_dir, flow_dir, out / "meta"):
            d.mkdir(parents=True, exist_ok=True)
        for t in range(scene_spec.frames):
            frame, lab = scene.render(t)
            Image.fromarray((frame.transpose(1, 2, 0) * 255).round().astype(np.uint8)).save(
                img_dir / f"{t:05d}.jpg", quality=95
            )
            save_label_png(ann_dir / f"{t:05d}.png", lab)
            if t >= 1:
                blobio.save_blob(flow_dir / f"flow_{t:05d}.bin", scene.flow(t).vectors)
        (out / "meta" / f"{name}.json").write_text(json.dumps(scene.meta(), sort_keys=True))
    return names


# ---------------------------------------------------------------------------
# loading


@dataclass
class LoadedSequence:
    name: str
    frames: list[np.ndarray]  # [3,H,W] float32 in [0,1], padded to /16
    annotations: dict[int, np.ndarray]  # frame -> [H,W] int labels, padded
    first_annotation: dict[int, int]
    flows: dict[int, FlowField]  # frame t -> backward flow into t-1, padded
    orig_hw: tuple[int, int]
    frame_states: list[FrameState] | None = None

    @property
    def object_ids(self) -> list[int]:
        return sorted(self.first_annotation)

    @property
    def num_frames(self) -> int:
        return len(self.frames)


def _pad_to_multiple(arr: np.ndarray, multiple: int, mode: str) -> np.ndarray:
    h, w = arr.shape[-2], arr.shape[-1]
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if not ph and not pw:
        return arr
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    if mode == "zero":
        return np.pad(arr, pad)
    return np.pad(arr, pad, mode="edge")


def load_sequence(root, name: str) -> LoadedSequence:
    """Read one sequence from the directory layout, padding extents to /16."""
    root = Path(root)
    img_dir = root / "JPEGImages" / name
    ann_dir = root / "Annotations" / name
    if not img_dir.is_dir():
        raise UsageError(f"missing frame directory {img_dir}")
    frame_files = sorted(img_dir.glob("*.jpg")) + sorted(img_dir.glob("*.png"))
    if not frame_files:
        raise UsageError(f"no frames under {img_dir}")
    frames = []
    orig_hw = None
    for i, f in enumerate(frame_files):
        expected = int(f.stem)
        if expected != i:
            raise UsageError(f"frame numbering gap at {f} (expected index {i})")
        try:
            img = Image.open(f).convert("RGB")
        except Exception as exc:
            raise UsageError(f"cannot read frame {f}: {exc}") from exc
        arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
        if orig_hw is None:
            orig_hw = arr.shape[1:]
        elif arr.shape[1:] != orig_hw:
            raise UsageError(f"frame extent mismatch at {f}: {arr.shape[1:]} vs {orig_hw}")
        frames.append(_pad_to_multiple(arr, MASK_ALIGN, "edge"))

    annotations = {}
    for f in sorted(ann_dir.glob("*.png")) if ann_dir.is_dir() else []:
        lab = load_label_png(f)
        if lab.shape != orig_hw:
            raise UsageError(f"annotation extent mismatch at {f}: {lab.shape} vs frames {orig_hw}")
        annotations[int(f.stem)] = _pad_to_multiple(lab, MASK_ALIGN, "zero")
    if 0 not in annotations:
        raise UsageError(f"sequence {name} has no frame-0 annotation under {ann_dir}")

    meta_path = root / "meta" / f"{name}.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    if "first_annotation" in meta:
        first = {int(k): int(v) for k, v in meta["first_annotation"].items()}
    else:
        first = {}
        for t in sorted(annotations):
            for oid in np.unique(annotations[t]):
                if oid and int(oid) not in first:
                    first[int(oid)] = t

    flows = {}
    flow_dir = root / "Flow" / name
    if flow_dir.is_dir():
        for f in sorted(flow_dir.glob("flow_*.bin")):
            t = int(f.stem.split("_")[1])
            flows[t] = FlowField(_pad_to_multiple(blobio.load_blob(f), MASK_ALIGN, "edge"))

    states = None
    if "objects" in meta:
        states = []
        n = len(frames)
        offsets = meta.get("background_offsets", [[0.0, 0.0]] * n)
        for t in range(n):
            poses = {}
            for oid, obj in meta["objects"].items():
                p = obj["poses"][t]
                poses[int(oid)] = ObjectPose((p["center"][0], p["center"][1]), p["angle"], p["scale"])
            lab = annotations.get(t)
            if lab is None:
                lab = np.zeros(frames[t].shape[1:], dtype=np.int32)
            states.append(FrameState(t, (offsets[t][0], offsets[t][1]), poses, lab))

    return LoadedSequence(
        name=name,
        frames=frames,
        annotations=annotations,
        first_annotation=first,
        flows=flows,
        orig_hw=tuple(orig_hw),
        frame_states=states,
    )


def list_sequences(root) -> list[str]:
    img_root = Path(root) / "JPEGImages"
    if not img_root.is_dir():
        raise UsageError(f"no JPEGImages directory under {root}")
    return sorted(p.name for p in img_root.iterdir() if p.is_dir())


def unpad(arr: np.ndarray, orig_hw: tuple[int, int]) -> np.ndarray:
    return arr[..., : orig_hw[0], : orig_hw[1]]


# ---------------------------------------------------------------------------
# training clips, merge, augmentation


@dataclass
class TrainingClip:
    frames: list[np.ndarray]  # [3,h,w] float32
    labels: list[np.ndarray]  # [h,w] int
    flows: dict[int, FlowField]  # clip-local t -> flow(t -> t-1)
    object_ids: list[int]


def clip_from_sequence(seq: LoadedSequence, start: int, length: int) -> TrainingClip:
    if start + length > seq.num_frames:
        raise UsageError(f"clip [{start},{start + length}) exceeds sequence length {seq.num_frames}")
    frames = [seq.frames[start + i] for i in range(length)]
    labels = []
    for i in range(length):
        t = start + i
        if t not in seq.annotations:
            raise UsageError(f"training clip needs labels at every frame; missing frame {t} of {seq.name}")
        labels.append(seq.annotations[t])
    flows = {i: seq.flows[start + i] for i in range(1, length) if (start + i) in seq.flows}
    present = sorted({int(o) for lab in labels for o in np.unique(lab) if o})
    return TrainingClip(frames, labels, flows, present)


def dynamic_merge(a: TrainingClip, b: TrainingClip) -> TrainingClip:
    """Overlay clip b onto clip a: wherever b has a foreground object, the
    merged frame and label take b's pixels; elsewhere a's.  b's object ids
    are relabeled to stay disjoint from a's."""
    if len(a.frames) != len(b.frames):
        raise ShapeError("merge requires equal clip lengths")
    if a.frames[0].shape != b.frames[0].shape:
        raise ShapeError(f"merge requires equal extents: {a.frames[0].shape} vs {b.frames[0].shape}")
    offset = max(a.object_ids, default=0)
    frames, labels = [], []
    flows: dict[int, FlowField] = {}
    for i, (fa, fb, la, lb) in enumerate(zip(a.frames, b.frames, a.labels, b.labels)):
        fg = lb > 0
        frames.append(np.where(fg[None], fb, fa))
        lab = np.where(fg, lb + offset, la)
        labels.append(lab.astype(la.dtype))
        if i >= 1 and i in a.flows and i in b.flows:
            flows[i] = FlowField(np.where(fg[None], b.flows[i].vectors, a.flows[i].vectors))
    ids = a.object_ids + [oid + offset for oid in b.object_ids]
    return TrainingClip(frames, labels, flows, ids)


@dataclass
class AugmentConfig:
    enabled: bool = True
    scale_range: tuple[float, float] = (0.7, 1.3)
    crop_hw: tuple[int, int] | None = None  # None: keep full (scaled) extent
    jitter: float = 0.2
    shift: float = 0.08
    blur_prob: float = 0.3
    grey_prob: float = 0.1
    crop_tries: int = 20


def _resize_frame(frame: np.ndarray, oh: int, ow: int) -> np.ndarray:
    from .geometry import resize_bilinear
    from . import autodiff as ad

    with ad.no_grad():
        return resize_bilinear(frame, oh, ow).data.astype(np.float32)


def _resize_labels(lab: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = lab.shape
    ys = np.minimum((np.arange(oh) + 0.5) * (h / oh), h - 1).astype(int)
    xs = np.minimum((np.arange(ow) + 0.5) * (w / ow), w - 1).astype(int)
    return lab[ys[:, None], xs[None, :]]


def augment(clip: TrainingClip, rng: np.random.Generator, cfg: AugmentConfig) -> TrainingClip:
    """Random scale, object-balanced crop, then photometric jitter.

    Masks and flow follow the geometry exactly; flow vectors scale with the
    image.  Photometric changes touch RGB only.
    """
    if not cfg.enabled:
        return clip
    h, w = clip.frames[0].shape[1:]
    lo, hi = cfg.scale_range
    if cfg.crop_hw is not None:
        lo = max(lo, cfg.crop_hw[0] / h, cfg.crop_hw[1] / w)
        hi = max(hi, lo)
    s = float(rng.uniform(lo, hi))
    if cfg.crop_hw is None:
        # keep extents /16-divisible when no crop follows
        oh = max(MASK_ALIGN, int(round(h * s / MASK_ALIGN)) * MASK_ALIGN)
        ow = max(MASK_ALIGN, int(round(w * s / MASK_ALIGN)) * MASK_ALIGN)
    else:
        oh, ow = max(int(round(h * s)), 1), max(int(round(w * s)), 1)
    sy, sx = oh / h, ow / w
    frames = [_resize_frame(f, oh, ow) for f in clip.frames]
    labels = [_resize_labels(lab, oh, ow) for lab in clip.labels]
    flows = {}
    for t, fl in clip.flows.items():
        v = np.stack(
            [
                _resize_frame(fl.vectors[None, 0], oh, ow)[0] * sx,
                _resize_frame(fl.vectors[None, 1], oh, ow)[0] * sy,
            ]
        )
        flows[t] = FlowField(v)

    if cfg.crop_hw is not None:
        ch, cw = cfg.crop_hw
        top = left = 0
        found = False
        for _ in range(cfg.crop_tries):
            top = int(rng.integers(0, oh - ch + 1))
            left = int(rng.integers(0, ow - cw + 1))
            if (labels[0][top : top + ch, left : left + cw] > 0).any():
                found = True
                break
        if not found:
            top, left = (oh - ch) // 2, (ow - cw) // 2
        frames = [f[:, top : top + ch, left : left + cw] for f in frames]
        labels = [lab[top : top + ch, left : left + cw] for lab in labels]
        flows = {t: FlowField(fl.vectors[:, top : top + ch, left : left + cw]) for t, fl in flows.items()}

    jit_scale = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter, size=3).astype(np.float32)
    jit_shift = rng.uniform(-cfg.shift, cfg.shift, size=3).astype(np.float32)
    do_blur = rng.random() < cfg.blur_prob
    sigma = float(rng.uniform(0.3, 1.1)) if do_blur else 0.0
    do_grey = rng.random() < cfg.grey_prob
    out_frames = []
    for f in frames:
        g = f * jit_scale[:, None, None] + jit_shift[:, None, None]
        if do_blur:
            g = gaussian_filter(g, sigma=(0, sigma, sigma))
        if do_grey:
            g = np.repeat(g.mean(axis=0, keepdims=True), 3, axis=0)
        out_frames.append(np.clip(g, 0, 1).astype(np.float32))

    ids = sorted({int(o) for lab in labels for o in np.unique(lab) if o})
    return TrainingClip(out_frames, labels, flows, ids)


class ClipSampler:
    """Uniform clip sampling with optional dynamic-merge and augmentation."""

    def __init__(
        self,
        sequences: list[LoadedSequence],
        clip_len: int,
        merge_prob: float = 0.4,
        augment_cfg: AugmentConfig | None = None,
    ):
        if not sequences:
            raise UsageError("no training sequences")
        self.sequences = sequences
        self.clip_len = clip_len
        self.merge_prob = merge_prob
        self.augment_cfg = augment_cfg or AugmentConfig(enabled=False)

    def _raw_clip(self, rng: np.random.Generator) -> TrainingClip:
        seq = self.sequences[int(rng.integers(len(self.sequences)))]
        start = int(rng.integers(0, max(seq.num_frames - self.clip_len, 0) + 1))
        return clip_from_sequence(seq, start, min(self.clip_len, seq.num_frames))

    def sample(self, rng: np.random.Generator) -> TrainingClip:
        clip = self._raw_clip(rng)
        if rng.random() < self.merge_prob:
            other = self._raw_clip(rng)
            if len(other.frames) == len(clip.frames) and other.frames[0].shape == clip.frames[0].shape:
                clip = dynamic_merge(clip, other)
        return augment(clip, rng, self.augment_cfg)
