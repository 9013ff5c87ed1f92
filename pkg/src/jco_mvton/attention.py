"""Joint multi-branch attention over the sequence [T; X; C1; C2].

Text and noise tokens share the ``tn`` projection branch; the person
reference (C1) and garment (C2) get their own branches.  C1 and C2 never
attend to each other.  Two interchangeable kernels are provided: a dense one
that adds the exclusion mask to the full score matrix, and a block-skipping
one that never computes the excluded score blocks at all.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .rope import RopeConfig, apply_rope

BRANCHES = ("tn", "c1", "c2")
PROJ_NAMES = ("q", "k", "v", "o")


@dataclass(frozen=True)
class Segmentation:
    """Lengths of the text, noise, reference and garment spans, in that order."""

    text: int
    noise: int
    ref: int
    garment: int

    def __post_init__(self):
        if min(self.text, self.noise, self.ref, self.garment) < 0:
            raise ContractError(f"negative span length in {self}")

    @property
    def total(self) -> int:
        return self.text + self.noise + self.ref + self.garment

    @property
    def spans(self) -> dict[str, tuple[int, int]]:
        a = self.text
        b = a + self.noise
        c = b + self.ref
        return {"text": (0, a), "noise": (a, b), "ref": (b, c), "garment": (c, self.total)}

    @property
    def branch_spans(self) -> dict[str, tuple[int, int]]:
        s = self.spans
        return {"tn": (0, s["noise"][1]), "c1": s["ref"], "c2": s["garment"]}

    def branch_of(self) -> np.ndarray:
        """Branch index (0 tn, 1 c1, 2 c2) for every token."""
        out = np.zeros(self.total, dtype=np.int64)
        for i, name in enumerate(BRANCHES):
            lo, hi = self.branch_spans[name]
            out[lo:hi] = i
        return out


def build_mask(seg: Segmentation, dtype=np.float64) -> np.ndarray:
    """L x L additive mask: the sentinel wherever a C1 token meets a C2 token."""
    mask = np.zeros((seg.total, seg.total), dtype=dtype)
    (a0, a1), (b0, b1) = seg.spans["ref"], seg.spans["garment"]
    sentinel = ad.mask_sentinel(dtype)
    mask[a0:a1, b0:b1] = sentinel
    mask[b0:b1, a0:a1] = sentinel
    return mask


def allowed_pairs(seg: Segmentation) -> np.ndarray:
    """Boolean L x L matrix of query/key pairs that may carry weight."""
    return build_mask(seg) == 0


@dataclass
class LoraAdapter:
    """Low-rank update ``(alpha / rank) * B @ A`` for a (d_out, d_in) weight."""

    rank: int
    alpha: float
    A: Tensor
    B: Tensor

    @classmethod
    def init(cls, d_out: int, d_in: int, rank: int, alpha: float | None, rng: np.random.Generator, dtype=np.float64):
        if rank < 1 or rank > min(d_out, d_in):
            raise ContractError(f"LoRA rank {rank} outside [1, {min(d_out, d_in)}]")
        bound = 1.0 / np.sqrt(d_in)
        a = rng.uniform(-bound, bound, size=(rank, d_in)).astype(dtype)
        b = np.zeros((d_out, rank), dtype=dtype)
        return cls(rank, float(rank if alpha is None else alpha), Tensor(a, requires_grad=True), Tensor(b, requires_grad=True))

    @property
    def n_params(self) -> int:
        return self.A.data.size + self.B.data.size

    def delta(self) -> np.ndarray:
        return (self.alpha / self.rank) * (self.B.data @ self.A.data)


def apply_lora(base, adapter: LoraAdapter | None, z) -> Tensor:
    """``z @ (base + (alpha/r) B A).T`` without materialising the sum."""
    base = ad.as_tensor(base)
    out = ad.linear(z, base)
    if adapter is None:
        return out
    d_out, d_in = base.shape
    if adapter.rank > min(d_out, d_in):
        raise ContractError(f"LoRA rank {adapter.rank} exceeds weight extents {base.shape}")
    if adapter.A.shape != (adapter.rank, d_in) or adapter.B.shape != (d_out, adapter.rank):
        raise DimensionError("LoRA factors do not match the base weight")
    low = ad.linear(ad.linear(z, adapter.A), adapter.B)
    return ad.add(out, ad.scale(low, adapter.alpha / adapter.rank))


@dataclass
class BranchProjections:
    """Per-branch (W_Q, W_K, W_V, W_O), each (d, d), plus optional adapters."""

    weights: dict[str, dict[str, Tensor]]
    lora: dict[str, dict[str, LoraAdapter]] = field(default_factory=dict)

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, dtype=np.float64, shared: bool = False):
        bound = 1.0 / np.sqrt(dim)
        weights: dict[str, dict[str, Tensor]] = {}
        for branch in BRANCHES:
            if shared and weights:
                weights[branch] = {k: Tensor(v.data, requires_grad=True) for k, v in weights["tn"].items()}
                continue
            weights[branch] = {
                name: Tensor(rng.uniform(-bound, bound, size=(dim, dim)).astype(dtype), requires_grad=True)
                for name in PROJ_NAMES
            }
        return cls(weights)

    @property
    def dim(self) -> int:
        return self.weights["tn"]["q"].shape[0]

    def project(self, z, branch: str, name: str) -> Tensor:
        return apply_lora(self.weights[branch][name], self.lora.get(branch, {}).get(name), z)


class FlopCounter(Counter):
    """Multiply-accumulate counts keyed by operation name."""

    def report(self) -> dict[str, int]:
        return {k: int(v) for k, v in sorted(self.items())}


def _branchwise(z: Tensor, seg: Segmentation, proj: BranchProjections, name: str, flops) -> Tensor:
    parts = []
    for branch in BRANCHES:
        lo, hi = seg.branch_spans[branch]
        if hi == lo:
            continue
        piece = ad.slice_(z, lo, hi, axis=-2)
        parts.append(proj.project(piece, branch, name))
        if flops is not None:
            d = proj.dim
            flops[f"proj_{name}"] += int(np.prod(piece.shape[:-1])) * d * d
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=-2)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = ad.reshape(x, (*lead, n, heads, d // heads))
    k = len(lead)
    return ad.transpose(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    k = len(lead)
    x = ad.transpose(x, (*range(k), k + 1, k, k + 2))
    return ad.reshape(x, (*lead, n, h * dk))


def _qkv(tokens, seg, proj, coords, heads, rope, flops):
    tokens = ad.as_tensor(tokens)
    if tokens.shape[-2] != seg.total:
        raise ContractError(f"sequence length {tokens.shape[-2]} != segmentation total {seg.total}")
    d = tokens.shape[-1]
    if d != proj.dim:
        raise ContractError(f"token width {d} != projection width {proj.dim}")
    if heads < 1 or d % heads:
        raise ContractError(f"width {d} not divisible by {heads} heads")
    q, k, v = (_split_heads(_branchwise(tokens, seg, proj, n, flops), heads) for n in "qkv")
    if rope is not None and coords is not None:
        q = apply_rope(q, coords, rope)
        k = apply_rope(k, coords, rope)
    return q, k, v


def _attend(q: Tensor, k: Tensor, v: Tensor, mask, flops) -> Tensor:
    dk = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / np.sqrt(dk))
    weights = ad.softmax_lastdim(scores, mask)
    if flops is not None:
        lead = int(np.prod(q.shape[:-2]))
        flops["qk_scores"] += lead * q.shape[-2] * k.shape[-2] * dk
        flops["attn_values"] += lead * q.shape[-2] * k.shape[-2] * dk
    return ad.matmul(weights, v)


def _output(attn: Tensor, seg, proj, flops) -> Tensor:
    return _branchwise(_merge_heads(attn), seg, proj, "o", flops)


def attention_weights(tokens, seg, proj, coords, mask, heads, rope=None) -> np.ndarray:
    """Post-softmax weights (..., heads, L, L) of the dense kernel."""
    with ad.no_grad():
        q, k, _ = _qkv(tokens, seg, proj, coords, heads, rope, None)
        dk = q.shape[-1]
        scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / np.sqrt(dk))
        return ad.softmax_lastdim(scores, mask).data


def joint_attention(tokens, seg: Segmentation, proj: BranchProjections, coords, mask, heads: int,
                    rope: RopeConfig | None = None, flops: FlopCounter | None = None) -> Tensor:
    """Dense kernel: full score matrix plus the additive mask (or none)."""
    q, k, v = _qkv(tokens, seg, proj, coords, heads, rope, flops)
    if mask is not None and np.shape(mask) != (seg.total, seg.total):
        raise ContractError(f"mask shape {np.shape(mask)} for a length-{seg.total} sequence")
    return _output(_attend(q, k, v, mask, flops), seg, proj, flops)


def joint_attention_blockskip(tokens, seg: Segmentation, proj: BranchProjections, coords, heads: int,
                              rope: RopeConfig | None = None, flops: FlopCounter | None = None) -> Tensor:
    """Same result as the masked dense kernel; the C1/C2 score blocks are never formed."""
    q, k, v = _qkv(tokens, seg, proj, coords, heads, rope, flops)
    a = seg.branch_spans["tn"][1]
    groups = []
    if a:
        groups.append(((0, a), [(0, seg.total)]))
    for name in ("c1", "c2"):
        lo, hi = seg.branch_spans[name]
        if hi > lo:
            groups.append(((lo, hi), [(0, a), (lo, hi)] if a else [(lo, hi)]))
    outs = []
    for (lo, hi), key_spans in groups:
        qs = ad.slice_(q, lo, hi, axis=-2)
        ks = [ad.slice_(k, s, e, axis=-2) for s, e in key_spans if e > s]
        vs = [ad.slice_(v, s, e, axis=-2) for s, e in key_spans if e > s]
        kk = ks[0] if len(ks) == 1 else ad.concat(ks, axis=-2)
        vv = vs[0] if len(vs) == 1 else ad.concat(vs, axis=-2)
        outs.append(_attend(qs, kk, vv, None, flops))
    attn = outs[0] if len(outs) == 1 else ad.concat(outs, axis=-2)
    if flops is not None:
        lead = int(np.prod(q.shape[:-2]))
        flops["skipped_qk_scores"] += lead * 2 * seg.ref * seg.garment * q.shape[-1]
    return _output(attn, seg, proj, flops)
