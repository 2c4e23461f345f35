"""Unstructured magnitude pruning.

The polynomial sparsity schedule, ERK per-layer allocation, exact top-k
masks, and application of masks to a model. Masks follow the masked-forward
convention ``W_bar = M * W``; no gradient machinery lives here, an external
training loop would pass dense gradients straight through the mask.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .s5 import S5Model
from .tensors import Mask, SparseMatrix, mask_apply

__all__ = [
    "PruneSchedule",
    "schedule_sparsity",
    "LayerAllocation",
    "ErkAllocation",
    "AllocationError",
    "erk_allocate",
    "magnitude_mask",
    "prunable_layers",
    "prune_model",
    "realized_sparsity",
    "allocation_csv",
]


class AllocationError(ValueError):
    pass


@dataclass(frozen=True)
class PruneSchedule:
    S_f: float
    T: int
    S_i: float = 0.0
    t_i: int = 0
    t_f: int | None = None  # defaults to 0.75 * T
    updates_per_epoch: int = 3

    def __post_init__(self):
        if self.t_f is None:
            object.__setattr__(self, "t_f", int(round(0.75 * self.T)))
        if not 0.0 <= self.S_i <= self.S_f < 1.0:
            raise ValueError("need 0 <= S_i <= S_f < 1")
        if not 0 <= self.t_i < self.t_f <= self.T:
            raise ValueError("need 0 <= t_i < t_f <= T")
        if self.updates_per_epoch < 1:
            raise ValueError("updates_per_epoch must be >= 1")

    def update_steps(self, epochs: int) -> list[int]:
        """Steps at which masks are recomputed: ``updates_per_epoch`` per epoch, plus T."""
        if epochs < 1:
            raise ValueError("epochs must be >= 1")
        n = epochs * self.updates_per_epoch
        return [int(math.floor(u * self.T / n)) for u in range(n + 1)]

    def trace(self, epochs: int) -> list[tuple[int, float]]:
        return [(t, schedule_sparsity(self, t)) for t in self.update_steps(epochs)]


def schedule_sparsity(sched: PruneSchedule, t: float) -> float:
    """Cubic ramp from S_i at t_i to S_f at t_f, flat afterwards."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"step {t} outside [0, {sched.T}]")
    if t <= sched.t_i:
        return sched.S_i
    if t >= sched.t_f:
        return sched.S_f
    frac = (t - sched.t_i) / (sched.t_f - sched.t_i)
    return sched.S_f - (sched.S_f - sched.S_i) * (1.0 - frac) ** 3


@dataclass(frozen=True)
class LayerAllocation:
    name: str
    n: int
    m: int
    score: float
    sparsity: float
    planes: int = 1

    @property
    def size(self) -> int:
        return self.n * self.m

    @property
    def kept(self) -> int:
        return _kept_count(self.size, self.sparsity)


@dataclass(frozen=True)
class ErkAllocation:
    target: float
    layers: tuple = field(default_factory=tuple)

    def __getitem__(self, name: str) -> float:
        for rec in self.layers:
            if rec.name == name:
                return rec.sparsity
        raise KeyError(name)

    def as_dict(self) -> dict[str, float]:
        return {r.name: r.sparsity for r in self.layers}

    @property
    def realized_density(self) -> float:
        w = sum(r.size * r.planes for r in self.layers)
        return sum(r.kept * r.planes for r in self.layers) / w


def _kept_count(size: int, sparsity: float) -> int:
    return int(math.floor((1.0 - sparsity) * size + 0.5))


def erk_allocate(layers, S_t: float) -> ErkAllocation:
    """Distribute a global sparsity over layers by the ERK rule.

    Density of layer l is proportional to (N+M)/(N*M), with the constant
    solved so the parameter-weighted density equals ``1 - S_t``. Layers whose
    share would exceed 1 are made dense and the constant re-solved over the
    rest. ``layers`` holds ``(name, N, M)`` or ``(name, N, M, planes)``,
    where planes counts parameters sharing one mask entry (2 for split
    complex matrices).
    """
    if not 0.0 <= S_t < 1.0:
        raise AllocationError(f"target sparsity {S_t} outside [0, 1)")
    recs = []
    for item in layers:
        name, n, m, *rest = item
        planes = rest[0] if rest else 1
        if n < 1 or m < 1:
            raise AllocationError(f"layer {name} has empty shape")
        recs.append((name, int(n), int(m), int(planes)))
    if not recs:
        return ErkAllocation(S_t, ())
    weight = np.array([n * m * p for _, n, m, p in recs], dtype=np.float64)
    score = np.array([(n + m) / (n * m) for _, n, m, _ in recs], dtype=np.float64)
    budget = (1.0 - S_t) * weight.sum()
    dense = np.zeros(len(recs), dtype=bool)
    while True:
        free = ~dense
        remaining = budget - weight[dense].sum()
        denom = (score[free] * weight[free]).sum()
        if remaining < 0 or (denom == 0 and remaining > 0):
            raise AllocationError("target cannot be met with densities in [0, 1]")
        c = remaining / denom if denom else 0.0
        density = np.where(dense, 1.0, c * score)
        over = free & (density > 1.0)
        if not over.any():
            break
        dense |= over
    density = np.clip(density, 0.0, 1.0)
    out = tuple(
        LayerAllocation(name, n, m, float(score[i]), float(1.0 - density[i]), p)
        for i, (name, n, m, p) in enumerate(recs)
    )
    return ErkAllocation(S_t, out)


def magnitude_mask(W: np.ndarray, s: float) -> Mask:
    """Keep exactly round((1-s)*size) largest-magnitude entries.

    Ties at the threshold are broken in (row, col) order. Complex input is
    ranked by modulus, so split planes can share one mask.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"sparsity {s} outside [0, 1]")
    W = np.asarray(W)
    rows, cols = W.shape
    k = _kept_count(rows * cols, s)
    mag = np.abs(W).astype(np.float64).ravel()
    # lexsort: last key is primary. Flat index order == (row, col) order.
    order = np.lexsort((np.arange(mag.size), -mag))
    keep = np.zeros(mag.size, dtype=bool)
    keep[order[:k]] = True
    return Mask.from_bool(keep.reshape(rows, cols))


def prunable_layers(model: S5Model) -> list[tuple[str, int, int, int]]:
    """(name, N_out, M_in, planes) for every prunable weight matrix.

    Diagonals (lambda, D) and the norm affine are never pruned.
    """
    s = model.spec
    out = [("encoder", s.n_model, s.n_input, 1)]
    for i in range(s.depth):
        out += [
            (f"layers.{i}.B", s.n_ssm, s.n_model, 2),
            (f"layers.{i}.C", s.n_model, s.n_ssm, 2),
            (f"layers.{i}.glu", s.n_model, s.n_model, 1),
        ]
    out.append(("decoder", s.n_output, s.n_model, 1))
    return out


def _layer_tensors(name: str) -> list[str]:
    if name == "encoder":
        return ["encoder.W"]
    if name == "decoder":
        return ["decoder.W"]
    base, kind = name.rsplit(".", 1)
    return {"B": [f"{base}.B_re", f"{base}.B_im"], "C": [f"{base}.C_re", f"{base}.C_im"], "glu": [f"{base}.glu_W"]}[kind]


def prune_model(model: S5Model, allocation):
    """Mask every prunable matrix at its allocated sparsity.

    ``allocation`` is an ErkAllocation or a name -> sparsity mapping.
    Returns ``(pruned_model, masks, csr)`` where ``csr`` maps tensor names
    to SparseMatrix forms of the masked weights.
    """
    alloc = allocation.as_dict() if isinstance(allocation, ErkAllocation) else dict(allocation)
    names = [n for n, *_ in prunable_layers(model)]
    missing = set(names) - set(alloc)
    extra = set(alloc) - set(names)
    if missing or extra:
        raise AllocationError(f"allocation/layer mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    tensors = model.tensors()
    updates, masks, csr = {}, {}, {}
    for name in names:
        tnames = _layer_tensors(name)
        if len(tnames) == 2:
            re, im = tensors[tnames[0]], tensors[tnames[1]]
            mask = magnitude_mask(np.hypot(re.astype(np.float64), im.astype(np.float64)), alloc[name])
        else:
            mask = magnitude_mask(tensors[tnames[0]], alloc[name])
        masks[name] = mask
        for tn in tnames:
            updates[tn] = mask_apply(tensors[tn], mask)
            csr[tn] = SparseMatrix.from_dense(updates[tn])
    pruned = model.with_tensors(updates, masks=masks)
    return pruned, masks, csr


def realized_sparsity(model: S5Model) -> float:
    """Zero fraction over all prunable parameters (both planes of complex matrices)."""
    t = model.tensors()
    total = zeros = 0
    for name, *_ in prunable_layers(model):
        for tn in _layer_tensors(name):
            total += t[tn].size
            zeros += int(np.count_nonzero(t[tn] == 0))
    return zeros / total


def allocation_csv(allocation: ErkAllocation, masks: dict | None = None, trace=None) -> str:
    """One table with ``kind`` in {layer, global, schedule}.

    Layer rows carry N, M, target and realized sparsity and nnz (mask
    entries); the global row is parameter-weighted; schedule rows give the
    scheduled sparsity at each mask-update step.
    """
    buf = io.StringIO()
    buf.write("# sparse_s5 prune-report v1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "layer", "N", "M", "step", "target_sparsity", "realized_sparsity", "nnz"])
    tot = kept = 0
    for r in allocation.layers:
        nnz = masks[r.name].nnz if masks else r.kept
        w.writerow(["layer", r.name, r.n, r.m, "", f"{r.sparsity:.6f}", f"{1 - nnz / r.size:.6f}", nnz])
        tot += r.size * r.planes
        kept += nnz * r.planes
    w.writerow(["global", "all", "", "", "", f"{allocation.target:.6f}", f"{1 - kept / tot:.6f}", kept])
    for t, s in trace or ():
        w.writerow(["schedule", "", "", "", t, f"{s:.6f}", "", ""])
    return buf.getvalue()
