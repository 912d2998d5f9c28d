"""Identity bank: embedding multi-object masks into a shared vector space.

Objects are assigned slots from a fixed pool of M vectors; a mask stack is
encoded by summing probability-weighted slot vectors over non-overlapping
patches (equivalently a single stride-16 convolution), and probabilities
are read back out by dot-product similarity against the same vectors.

The bank's vector *directions* form a fixed orthonormal family (orthonormal
within every attention head's channel slice as well); only a global scale
trains.  This keeps the bank's Gram matrix exchangeable across slots, which
is what makes relabeling objects to different slots provably leave every
per-object probability map unchanged — the similarity readout then depends
on slot choice only through that Gram matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, Parameter

PATCH = 16


def _blockwise_orthonormal(rng: np.random.Generator, count: int, dim: int, blocks: int) -> np.ndarray:
    """Rows orthonormal overall *and* within each of ``blocks`` channel slices.

    Requires count <= dim // blocks.  Each slice gets an independent
    orthonormal frame scaled by 1/sqrt(blocks) so full rows are unit norm.
    """
    if dim % blocks != 0:
        raise ad.ShapeError(f"dim {dim} not divisible by {blocks} blocks")
    width = dim // blocks
    if count > width:
        raise ad.ShapeError(f"cannot fit {count} orthonormal rows in {width}-wide blocks")
    out = np.zeros((count, dim))
    for b in range(blocks):
        gauss = rng.standard_normal((width, width))
        q, _ = np.linalg.qr(gauss)
        out[:, b * width : (b + 1) * width] = q[:count] / np.sqrt(blocks)
    return out


class IdentityBank(Module):
    """M slot vectors plus a background vector, all sharing one trained scale.

    ``vectors`` materializes to [M, dim]; row norms are scale*sqrt(dim).
    Freezing (stage-2 training) stops gradient into the scale.
    """

    def __init__(self, rng: np.random.Generator, slots: int = 10, dim: int = 256, heads: int = 8):
        directions = _blockwise_orthonormal(rng, slots + 1, dim, heads)
        self.directions = directions.astype(ad.default_dtype())  # buffer, never trained
        self.scale = Parameter(np.ones(()))
        self.background_bias = Parameter(np.zeros(()))
        self.slots = slots
        self.dim = dim
        self.heads = heads
        self.frozen = False

    def freeze(self) -> None:
        self.frozen = True
        self.scale.requires_grad = False
        self.background_bias.requires_grad = False

    def all_vectors(self) -> Tensor:
        """[M+1, dim]: slot rows 0..M-1, background row M."""
        base = Tensor(self.directions.astype(self.scale.data.dtype) * np.sqrt(self.dim))
        return ad.mul(base, self.scale)

    @property
    def vectors(self) -> np.ndarray:
        return self.all_vectors().data[: self.slots]

    @property
    def background_vector(self) -> np.ndarray:
        return self.all_vectors().data[self.slots]


@dataclass
class IdentityAssignment:
    """Injective map from sequence object ids to bank slots (0-based).

    Fixed for a whole sequence at inference, resampled per training clip.
    The channel order of every mask/probability stack is background first,
    then objects in ``object_ids`` order.
    """

    object_ids: list[int]
    slot_of: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.slot_of.values())) != len(self.slot_of):
            raise ValueError(f"assignment not injective: {self.slot_of}")
        for oid in self.object_ids:
            if oid not in self.slot_of:
                raise KeyError(f"object {oid} has no slot assigned")

    @classmethod
    def sample(cls, rng: np.random.Generator, object_ids: list[int], slots: int) -> "IdentityAssignment":
        if len(object_ids) > slots:
            raise ValueError(f"{len(object_ids)} objects exceed bank capacity {slots}")
        chosen = rng.permutation(slots)[: len(object_ids)]
        return cls(list(object_ids), {oid: int(s) for oid, s in zip(object_ids, chosen)})

    def extend(self, rng: np.random.Generator, new_ids: list[int], slots: int) -> "IdentityAssignment":
        used = set(self.slot_of.values())
        free = [s for s in range(slots) if s not in used]
        if len(new_ids) > len(free):
            raise ValueError(f"no free slots for {new_ids}")
        picks = rng.permutation(len(free))[: len(new_ids)]
        mapping = dict(self.slot_of)
        mapping.update({oid: free[int(p)] for oid, p in zip(new_ids, picks)})
        return IdentityAssignment(self.object_ids + list(new_ids), mapping)

    @property
    def num_objects(self) -> int:
        return len(self.object_ids)

    def to_json(self) -> dict:
        return {str(oid): slot for oid, slot in self.slot_of.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "IdentityAssignment":
        ids = sorted(int(k) for k in obj)
        return cls(ids, {int(k): int(v) for k, v in obj.items()})

    def __str__(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def gathered_vectors(bank: IdentityBank, assignment: IdentityAssignment) -> Tensor:
    """[K+1, dim] vector matrix: row 0 background, then objects in id order."""
    idx = np.array([bank.slots] + [assignment.slot_of[oid] for oid in assignment.object_ids])
    return ad.take(bank.all_vectors(), idx)


def pool_patch_probs(mask, patch: int = PATCH) -> Tensor:
    """Sum probabilities over non-overlapping patch cells: [K+1,H,W] -> [K+1,H/p,W/p]."""
    m = mask if isinstance(mask, Tensor) else Tensor(mask)
    k1, h, w = m.shape
    if h % patch or w % patch:
        raise ad.ShapeError(f"mask extent {h}x{w} not divisible by patch {patch}")
    cells = ad.reshape(m, (k1, h // patch, patch, w // patch, patch))
    return ad.tsum(cells, axis=(2, 4))


def encode_mask(mask, bank: IdentityBank, assignment: IdentityAssignment, patch: int = PATCH) -> Tensor:
    """Patch-wise identity encoding: [K+1,H,W] -> [dim, H/p, W/p].

    Each output cell is the sum over its patch's pixels of the
    probability-weighted identity vectors (direct path).
    """
    coeffs = pool_patch_probs(mask, patch=patch)
    return materialize_coeffs(coeffs, bank, assignment)


def materialize_coeffs(coeffs, bank: IdentityBank, assignment: IdentityAssignment) -> Tensor:
    """Turn per-cell slot coefficients [K+1,h,w] into embeddings [dim,h,w]."""
    q = coeffs if isinstance(coeffs, Tensor) else Tensor(coeffs)
    k1, h, w = q.shape
    if k1 != assignment.num_objects + 1:
        raise ad.ShapeError(f"coefficient stack {k1} != objects+1 ({assignment.num_objects + 1})")
    vecs = gathered_vectors(bank, assignment)  # [K+1, dim]
    flat = ad.matmul(ad.transpose(vecs), ad.reshape(q, (k1, h * w)))
    return ad.reshape(flat, (bank.dim, h, w))


def encode_mask_conv(mask, bank: IdentityBank, assignment: IdentityAssignment, patch: int = PATCH) -> Tensor:
    """Equivalent stride-16 convolution formulation (independent path)."""
    m = mask if isinstance(mask, Tensor) else Tensor(mask)
    k1 = m.shape[0]
    vecs = gathered_vectors(bank, assignment).data  # [K+1, dim]
    weight = np.repeat(vecs.T[:, :, None, None], patch * patch, axis=2).reshape(bank.dim, k1, patch, patch)
    return ad.conv2d(m, Tensor(weight.astype(m.dtype)), stride=patch)


def readout_logits(decoded, bank: IdentityBank, assignment: IdentityAssignment) -> Tensor:
    """Similarity readout: logit_m(p) = <feature(p), vector_m> / sqrt(dim).

    Row 0 is the background logit (its vector plus a scalar calibration
    bias); object rows follow in id order.
    """
    f = decoded if isinstance(decoded, Tensor) else Tensor(decoded)
    c, h, w = f.shape
    if c != bank.dim:
        raise ad.ShapeError(f"decoded features have {c} channels, bank dim is {bank.dim}")
    vecs = gathered_vectors(bank, assignment)
    flat = ad.mul(ad.matmul(vecs, ad.reshape(f, (c, h * w))), 1.0 / np.sqrt(bank.dim))
    logits = ad.reshape(flat, (assignment.num_objects + 1, h, w))
    bg_bump = ad.reshape(
        ad.concat([ad.reshape(bank.background_bias, (1,)), Tensor(np.zeros(assignment.num_objects, dtype=f.dtype))]),
        (assignment.num_objects + 1, 1, 1),
    )
    return ad.add(logits, bg_bump)
