"""Sequence inference with memory banking, losses, and toy training.

Inference propagates soft masks: each frame warps the previous frame and
its soft prediction into the current domain, refines against long-term
memory, and stores the result for the next step.  Training runs two
stages — stage 1 feeds ground-truth masks as memory/sensory inputs, stage 2
propagates the model's own (detached) predictions with only the reference
frame trusted and the identity bank frozen.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import blobio
from .autodiff import Tensor, UsageError
from .data import AugmentConfig, ClipSampler, LoadedSequence, TrainingClip, load_sequence, list_sequences
from .flow import FlowEstimator, PrecomputedFlow, ZeroFlow
from .geometry import warp_image, warp_soft_mask
from .identity import IdentityAssignment
from .network import Segmenter, load_checkpoint, save_checkpoint


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, report: str):
        super().__init__(f"non-finite loss at step {step}; parameter norms: {report}")
        self.step = step


# ---------------------------------------------------------------------------
# memory


@dataclass
class MemoryEntry:
    frame_index: int
    feats: Tensor  # [P, C]
    coeffs: Tensor  # [P, k+1] at the time of insertion


class MemoryBank:
    """Long-term entries; the reference frame is entry 0 and never evicted.

    Frames land in the bank every ``stride`` frames (2 for training, 5 for
    evaluation); ``capacity`` caps stride-driven growth (capacity 1 keeps
    only the reference frame).  Frames carrying new annotations always
    enter — they are reference frames for their objects.
    """

    def __init__(self, stride: int = 5, capacity: int | None = None):
        self.stride = stride
        self.capacity = capacity
        self.entries: list[MemoryEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def maybe_append(self, frame_index: int, feats: Tensor, coeffs: Tensor, annotated: bool = False) -> bool:
        if self.entries and frame_index <= self.entries[-1].frame_index:
            raise UsageError(f"memory indices must increase (got {frame_index})")
        if not self.entries or annotated:
            self.entries.append(MemoryEntry(frame_index, feats, coeffs))
            return True
        if self.stride and frame_index % self.stride == 0:
            if self.capacity is None or len(self.entries) < self.capacity:
                self.entries.append(MemoryEntry(frame_index, feats, coeffs))
                return True
        return False

    def tokens(self, num_channels: int) -> tuple[Tensor, Tensor]:
        """Concatenated features and coefficient stacks, channel-padded."""
        if not self.entries:
            raise UsageError("memory bank is empty")
        feats = ad.concat([e.feats for e in self.entries], axis=0)
        coeffs = ad.concat([_pad_channels(e.coeffs, num_channels) for e in self.entries], axis=0)
        return feats, coeffs


def _pad_channels(coeffs: Tensor, k_target: int) -> Tensor:
    p, k = coeffs.shape
    if k == k_target:
        return coeffs
    if k > k_target:
        raise UsageError(f"coefficient stack wider ({k}) than target ({k_target})")
    return ad.concat([coeffs, Tensor(np.zeros((p, k_target - k), dtype=coeffs.dtype))], axis=1)


# ---------------------------------------------------------------------------
# soft masks


def soft_from_labels(labels: np.ndarray, object_ids: list[int], dtype=None) -> np.ndarray:
    """One-hot probability stack [K+1,H,W]; channel 0 is background."""
    dtype = dtype or ad.default_dtype()
    k = len(object_ids)
    soft = np.zeros((k + 1,) + labels.shape, dtype=dtype)
    for c, oid in enumerate(object_ids, start=1):
        soft[c] = labels == oid
    soft[0] = 1.0 - soft[1:].sum(axis=0)
    return soft


def inject_annotations(soft: np.ndarray, labels: np.ndarray, object_ids: list[int], new_ids: list[int]) -> np.ndarray:
    """Overwrite newly annotated objects' channels with their ground truth;
    remaining probability mass scales down where the new masks claim pixels."""
    out = soft.copy()
    for oid in new_ids:
        c = object_ids.index(oid) + 1
        ind = (labels == oid).astype(soft.dtype)
        out *= 1.0 - ind[None]
        out[c] = ind
    total = out.sum(axis=0, keepdims=True)
    return (out / np.maximum(total, 1e-8)).astype(soft.dtype)


def hard_labels(soft: np.ndarray, object_ids: list[int]) -> np.ndarray:
    ids = np.array([0] + list(object_ids))
    return ids[np.argmax(soft, axis=0)].astype(np.int32)


# ---------------------------------------------------------------------------
# losses


def bootstrap_fraction(step: int, total: int, p_start: float = 1.0, p_end: float = 0.15, anneal_start: float = 0.2) -> float:
    """Hard-pixel fraction schedule: flat at p_start through the warm
    fraction of training, then linear to p_end at the final step."""
    frac = min(step / max(total - 1, 1), 1.0)
    if frac <= anneal_start:
        return p_start
    return p_start + (p_end - p_start) * (frac - anneal_start) / (1.0 - anneal_start)


def bootstrapped_cross_entropy(logits: Tensor, target_channels: np.ndarray, top_frac: float = 1.0) -> Tensor:
    """Mean NLL over the hardest ``top_frac`` of pixels."""
    k1 = logits.shape[0]
    n = target_channels.size
    lp = ad.reshape(ad.log_softmax(logits, axis=0), (k1, n))
    nll = ad.mul(ad.index_select_unique(lp, (target_channels.reshape(-1), np.arange(n))), -1.0)
    keep = max(1, int(np.ceil(top_frac * n)))
    if keep >= n:
        return ad.tmean(nll)
    hardest = np.argpartition(nll.data, n - keep)[n - keep :]
    return ad.tmean(ad.index_select_unique(nll, hardest))


def dice_loss(probs: Tensor, target_channels: np.ndarray, eps: float = 1.0) -> Tensor:
    """Soft dice averaged over foreground object channels."""
    k1 = probs.shape[0]
    total = ad.tensor(0.0)
    for c in range(1, k1):
        g = Tensor((target_channels == c).astype(probs.dtype))
        p = probs[c]
        inter = ad.tsum(ad.mul(p, g))
        denom = ad.add(ad.tsum(p), ad.tsum(g))
        total = ad.add(total, ad.sub(1.0, ad.div(ad.add(ad.mul(inter, 2.0), eps), ad.add(denom, eps))))
    return ad.mul(total, 1.0 / (k1 - 1))


def segmentation_loss(logits: Tensor, target_labels: np.ndarray, object_ids: list[int], top_frac: float = 1.0) -> Tensor:
    """0.5 * bootstrapped cross-entropy + 0.5 * dice (CE alone when the
    target is pure background)."""
    channel_of = {oid: c for c, oid in enumerate(object_ids, start=1)}
    target_channels = np.zeros(target_labels.shape, dtype=np.int64)
    for oid, c in channel_of.items():
        target_channels[target_labels == oid] = c
    bce = bootstrapped_cross_entropy(logits, target_channels, top_frac)
    if not (target_channels > 0).any():
        return bce
    dice = dice_loss(ad.softmax(logits, axis=0), target_channels)
    return ad.add(ad.mul(bce, 0.5), ad.mul(dice, 0.5))


# ---------------------------------------------------------------------------
# optimizer and schedule


def poly_lr(step: int, total: int, lr_start: float = 3e-4, lr_end: float = 2e-5, power: float = 0.9, warmup: int = 0) -> float:
    """Polynomial decay hitting lr_start at step 0 and lr_end at the last step."""
    if warmup and step < warmup:
        return lr_start * (step + 1) / warmup
    denom = max(total - 1, 1)
    frac = min(step / denom, 1.0)
    return lr_end + (lr_start - lr_end) * (1.0 - frac) ** power


class AdamW:
    """Adam moments with decoupled weight decay.

    Decay skips parameters of rank < 2 (biases, norm gains, scalars).
    Per-parameter learning-rate multipliers support the reduced encoder rate.
    """

    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        lr_mults: dict[str, float] | None = None,
    ):
        self.named_params = named_params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_mults = lr_mults or {}
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.named_params:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * self.lr_mults.get(name, 1.0) * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"{name}.m"] = self.m[name]
            out[f"{name}.v"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name] = np.asarray(arrays[f"{name}.m"], dtype=self.m[name].dtype)
            self.v[name] = np.asarray(arrays[f"{name}.v"], dtype=self.v[name].dtype)
        self.step_count = step_count


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# inference


@dataclass
class InferenceResult:
    sequence: str
    soft: list[np.ndarray]
    hard: list[np.ndarray]
    assignment: IdentityAssignment
    flow_seconds: float
    total_seconds: float
    manifest: dict = field(default_factory=dict)

    @property
    def fps_including_flow(self) -> float:
        return len(self.hard) / max(self.total_seconds, 1e-9)

    @property
    def fps_excluding_flow(self) -> float:
        return len(self.hard) / max(self.total_seconds - self.flow_seconds, 1e-9)


def infer_sequence(
    model: Segmenter,
    seq: LoadedSequence,
    estimator: FlowEstimator,
    mem_stride: int = 5,
    capacity: int | None = None,
    assignment: IdentityAssignment | None = None,
    rng: np.random.Generator | None = None,
) -> InferenceResult:
    """Propagate annotations through the sequence (strict temporal order)."""
    object_ids = seq.object_ids
    if not object_ids:
        raise UsageError(f"sequence {seq.name} has no annotated objects")
    first = seq.first_annotation
    initial = [oid for oid in object_ids if first[oid] == 0]
    if not initial:
        raise UsageError(f"sequence {seq.name} has no frame-0 objects")
    if assignment is None:
        assignment = IdentityAssignment.sample(rng or np.random.default_rng(0), object_ids, model.cfg.slots)

    k1 = len(object_ids) + 1
    start = time.perf_counter()
    flow_seconds = 0.0
    with ad.no_grad():
        soft = soft_from_labels(seq.annotations[0], object_ids, dtype=np.float32)
        soft = _suppress_unseen(soft, object_ids, first, t=0)
        memory = MemoryBank(stride=mem_stride, capacity=capacity)
        tokens0, *_ = model.encode_frame(seq.frames[0])
        memory.maybe_append(0, tokens0, model.pool_mask(soft), annotated=True)

        softs = [soft]
        hards = [hard_labels(soft, object_ids)]
        for t in range(1, seq.num_frames):
            t_flow = time.perf_counter()
            flow = estimator.estimate(seq.frames[t], seq.frames[t - 1], pair_key=t)
            flow_seconds += time.perf_counter() - t_flow

            warped_img = warp_image(seq.frames[t - 1], flow)
            warped_soft = warp_soft_mask(softs[t - 1], flow)
            sens_feats, *_ = model.encode_frame(warped_img)
            sens_coeffs = model.pool_mask(warped_soft)

            logits, x_tokens = model.forward_frame(
                seq.frames[t], memory.tokens(k1), (sens_feats, sens_coeffs), assignment
            )
            pred = ad.softmax(logits, axis=0).data.astype(np.float32)

            new_ids = [oid for oid in object_ids if first[oid] == t]
            if new_ids:
                pred = inject_annotations(pred, seq.annotations[t], object_ids, new_ids)
            pred = _suppress_unseen(pred, object_ids, first, t)

            memory.maybe_append(t, x_tokens, model.pool_mask(pred), annotated=bool(new_ids))
            softs.append(pred)
            hards.append(hard_labels(pred, object_ids))

    total = time.perf_counter() - start
    manifest = {
        "sequence": seq.name,
        "assignment": assignment.to_json(),
        "flow_source": estimator.name,
        "frames": seq.num_frames,
        "memory_entries": len(memory),
        "fps_including_flow": len(hards) / max(total, 1e-9),
        "fps_excluding_flow": len(hards) / max(total - flow_seconds, 1e-9),
    }
    return InferenceResult(seq.name, softs, hards, assignment, flow_seconds, total, manifest)


def _suppress_unseen(soft: np.ndarray, object_ids: list[int], first: dict[int, int], t: int) -> np.ndarray:
    """Objects are only predicted from their first annotated frame onward."""
    out = soft.copy()
    for c, oid in enumerate(object_ids, start=1):
        if first[oid] > t:
            out[c] = 0.0
    total = out.sum(axis=0, keepdims=True)
    return (out / np.maximum(total, 1e-8)).astype(soft.dtype)


# ---------------------------------------------------------------------------
# training


def clip_loss(
    model: Segmenter,
    clip: TrainingClip,
    stage: int,
    assignment: IdentityAssignment,
    top_frac: float,
    mem_stride: int,
    mem_capacity: int | None,
    flow_override: FlowEstimator | None = None,
) -> Tensor:
    """Loss summed over predicted frames of one clip.

    Stage 1 feeds ground-truth masks as sensory/memory inputs; stage 2
    propagates the model's own predictions, detached between frames, with
    ground truth trusted only at each object's first annotated frame.
    """
    object_ids = clip.object_ids
    labels = clip.labels
    length = len(clip.frames)
    first_in_clip: dict[int, int] = {}
    for i, lab in enumerate(labels):
        for oid in np.unique(lab):
            if oid and int(oid) not in first_in_clip:
                first_in_clip[int(oid)] = i

    gt_soft = [soft_from_labels(lab, object_ids) for lab in labels]
    memory = MemoryBank(stride=mem_stride, capacity=mem_capacity)
    tokens0, *_ = model.encode_frame(clip.frames[0])
    memory.maybe_append(0, tokens0, model.pool_mask(gt_soft[0]), annotated=True)

    prev_soft: np.ndarray | Tensor = gt_soft[0]
    total_loss = ad.tensor(0.0)
    k1 = len(object_ids) + 1
    for t in range(1, length):
        flow = clip.flows.get(t)
        if flow_override is not None:
            flow = flow_override.estimate(clip.frames[t], clip.frames[t - 1], pair_key=t)
        elif flow is None:
            flow = ZeroFlow().estimate(clip.frames[t], clip.frames[t - 1])

        warped_img = warp_image(clip.frames[t - 1], flow)
        warped_soft = warp_soft_mask(prev_soft if isinstance(prev_soft, np.ndarray) else Tensor(prev_soft), flow)
        sens_feats, *_ = model.encode_frame(warped_img)
        sens_coeffs = model.pool_mask(warped_soft)

        logits, x_tokens = model.forward_frame(
            clip.frames[t], memory.tokens(k1), (sens_feats, sens_coeffs), assignment
        )
        total_loss = ad.add(total_loss, segmentation_loss(logits, labels[t], object_ids, top_frac))

        if stage == 1:
            next_soft = gt_soft[t]
            mem_coeffs = model.pool_mask(gt_soft[t])
        else:
            pred = ad.softmax(logits, axis=0).data.astype(np.float32)  # detached across frames
            new_ids = [oid for oid, f0 in first_in_clip.items() if f0 == t]
            if new_ids:
                pred = inject_annotations(pred, labels[t], object_ids, new_ids)
            next_soft = pred
            mem_coeffs = model.pool_mask(pred)
        memory.maybe_append(t, x_tokens.detach() if stage == 2 else x_tokens, mem_coeffs, annotated=False)
        prev_soft = next_soft

    return ad.mul(total_loss, 1.0 / (length - 1))


def _param_norm_report(model: Segmenter) -> str:
    worst = sorted(
        ((float(np.abs(p.data).max()), name) for name, p in model.named_parameters()),
        reverse=True,
    )[:5]
    return ", ".join(f"{name}={val:.3e}" for val, name in worst)


def train_toy(
    config,
    data_root,
    out_dir,
    resume=None,
    log_every: int = 25,
    progress=None,
) -> Path:
    """Two-stage training on a synthetic (or small real) dataset.

    Writes the checkpoint directory (model + optimizer + RNG state) and a
    JSON-lines loss curve.  Fully seeded: identical configs and seeds give
    bit-identical checkpoints.
    """
    from .config import RunConfig  # local import to avoid a cycle

    cfg: RunConfig = config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tr = cfg.train
    total_steps = tr.stage1_steps + tr.stage2_steps

    with ad.precision(cfg.dtype):
        sequences = [load_sequence(data_root, name) for name in list_sequences(data_root)]
        aug = AugmentConfig(
            enabled=tr.augment,
            crop_hw=tuple(tr.crop_hw) if tr.crop_hw else None,
        )
        sampler = ClipSampler(sequences, tr.clip_len, merge_prob=tr.merge_prob, augment_cfg=aug)

        if resume is not None:
            model, manifest = load_checkpoint(resume)
            state = json.loads((Path(resume) / "training_state.json").read_text())
            start_step = state["step"]
            rng_data = np.random.default_rng()
            rng_data.bit_generator.state = state["rng_data"]
            rng_assign = np.random.default_rng()
            rng_assign.bit_generator.state = state["rng_assign"]
        else:
            model = Segmenter(np.random.default_rng(cfg.seed), cfg.model_config())
            start_step = 0
            rng_data = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
            rng_assign = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

        encoder_names = model.encoder_param_names()
        optimizer = AdamW(
            list(model.named_parameters()),
            betas=(0.9, 0.999),
            weight_decay=tr.weight_decay,
            lr_mults={name: tr.encoder_lr_mult for name in encoder_names},
        )
        if resume is not None:
            optim_arrays = {
                f.stem: blobio.load_blob(f, dtype=cfg.dtype) for f in (Path(resume) / "optim").glob("*.bin")
            }
            optimizer.load_state_arrays(
                {k.replace("__", "."): v for k, v in optim_arrays.items()}, state["optimizer_steps"]
            )
            if state["step"] >= tr.stage1_steps:
                model.bank.freeze()

        log_path = out_dir / "loss_curve.jsonl"
        log_f = open(log_path, "a" if resume else "w")
        try:
            for step in range(start_step, total_steps):
                stage = 1 if step < tr.stage1_steps else 2
                if step == tr.stage1_steps:
                    model.bank.freeze()
                clip = sampler.sample(rng_data)
                assignment = IdentityAssignment.sample(rng_assign, clip.object_ids, cfg.model.slots)
                top_frac = bootstrap_fraction(step, total_steps, tr.bootstrap_start, tr.bootstrap_end, tr.bootstrap_anneal_start)

                model.zero_grad()
                loss = clip_loss(
                    model,
                    clip,
                    stage,
                    assignment,
                    top_frac,
                    mem_stride=cfg.memory.train_stride,
                    mem_capacity=cfg.memory.capacity,
                )
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise TrainingDiverged(step, _param_norm_report(model))
                loss.backward()
                grad_norm = clip_gradients(model.parameters(), tr.grad_clip)
                lr = poly_lr(step, total_steps, tr.lr_start, tr.lr_end, tr.poly_power, tr.warmup_steps)
                optimizer.step(lr)

                if step % log_every == 0 or step == total_steps - 1:
                    rec = {"step": step, "stage": stage, "loss": loss_val, "lr": lr, "grad_norm": grad_norm}
                    log_f.write(json.dumps(rec) + "\n")
                    log_f.flush()
                    if progress:
                        progress(rec)
        finally:
            log_f.close()

        ckpt_dir = out_dir / "checkpoint"
        save_checkpoint(model, ckpt_dir, extra={"config_hash": cfg.hash(), "steps": total_steps})
        optim_dir = ckpt_dir / "optim"
        optim_dir.mkdir(exist_ok=True)
        for name, arr in optimizer.state_arrays().items():
            blobio.save_blob(optim_dir / f"{name.replace('.', '__')}.bin", arr, dtype=cfg.dtype)
        (ckpt_dir / "training_state.json").write_text(
            json.dumps(
                {
                    "step": total_steps,
                    "optimizer_steps": optimizer.step_count,
                    "rng_data": rng_data.bit_generator.state,
                    "rng_assign": rng_assign.bit_generator.state,
                },
                default=int,
            )
        )
    return ckpt_dir
