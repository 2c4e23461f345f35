"""Integer-only inference engine.

Weights are 8-bit (the recurrent diagonal 16-bit), activations and state
16-bit, matrix products accumulate in 32 bits. Every activation site is
produced by one requantization from an exact integer expression, rounded
half away from zero, which is what the fake-quant reference in
``quantizer.static_quant_eval`` computes in floating point.
"""
from __future__ import annotations

import hashlib
import time
import weakref
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

import numpy as np
from .quantizer import (
    GATE_ABSMAX,
    QuantRecipe,
    QuantScale,
    ScaleSet,
    quantize,
    SigmoidLut,
    site_tensors,
    weight_sites,
)
from .s5 import Activation, MacCounter, ModelSpec, S5Model
from .tensors import SparseMatrix, dense_matvec, spmv_event_driven

__all__ = [
    "OverflowPolicy",
    "OverflowCounter",
    "Requantizer",
    "SigmoidLut",
    "FxpCheckpoint",
    "FxpState",
    "FxpRun",
    "FreezeError",
    "freeze",
    "fxp_step",
    "fxp_run",
    "narrow",
    "requantize",
]

ACC_BITS = 32


class FreezeError(ValueError):
    """The model or scales cannot be turned into an integer checkpoint."""


class OverflowPolicy(str, Enum):
    SATURATE = "saturate"
    WRAP = "wrap"


@dataclass
class OverflowCounter:
    """Narrowing events per site. Always maintained, whatever the policy."""

    counts: dict = field(default_factory=dict)

    def add(self, site: str, n: int) -> None:
        if n:
            self.counts[site] = self.counts.get(site, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def narrow(v, bits: int, policy: OverflowPolicy, counter: OverflowCounter | None = None,
           site: str = "", symmetric: bool = True) -> np.ndarray:
    """Fit integers into ``bits`` bits.

    Anything outside the legal range counts as one overflow event. SATURATE
    clamps to the range, WRAP keeps the low ``bits`` bits as two's complement
    (so a large positive value can come back negative). ``symmetric`` makes
    the legal range ``[-qmax, qmax]``; accumulators use the full range.
    """
    v = np.asarray(v)
    hi = (1 << (bits - 1)) - 1
    lo = -hi if symmetric else -hi - 1
    bad = (v > hi) | (v < lo)
    nbad = int(np.count_nonzero(bad))
    if counter is not None:
        counter.add(site, nbad)
    if nbad == 0:
        return v.astype(np.int64)
    if policy is OverflowPolicy.SATURATE:
        if v.dtype == object:
            return np.array([min(max(int(a), lo), hi) for a in v], dtype=np.int64)
        return np.clip(v, lo, hi).astype(np.int64)
    mod = 1 << bits
    half = 1 << (bits - 1)
    if v.dtype == object:
        return np.array([((int(a) + half) % mod) - half for a in v], dtype=np.int64)
    return ((v.astype(np.int64) + half) % mod) - half


@dataclass(frozen=True)
class Requantizer:
    """``m * 2**-r`` approximating a real rescale factor, with m in [2^30, 2^31)."""

    m: int
    r: int
    src: str = ""
    dst: str = ""

    @classmethod
    def from_ratio(cls, ratio, src: str = "", dst: str = "") -> "Requantizer":
        ratio = Fraction(ratio)
        if ratio <= 0:
            raise ValueError("rescale factor must be positive")
        # smallest r with ratio * 2**r >= 2**30
        e = ratio.numerator.bit_length() - ratio.denominator.bit_length()
        r = 30 - e
        while ratio * Fraction(2) ** r < (1 << 30):
            r += 1
        while ratio * Fraction(2) ** r >= (1 << 31):
            r -= 1
        m = _round_fraction(ratio * Fraction(2) ** r)
        if m == 1 << 31:
            m, r = 1 << 30, r - 1
        return cls(int(m), int(r), src, dst)

    @classmethod
    def from_scales(cls, s_dst: float, *s_src: float, src: str = "", dst: str = "") -> "Requantizer":
        den = Fraction(1)
        for s in s_src:
            den *= Fraction(s)
        return cls.from_ratio(Fraction(s_dst) / den, src, dst)

    @property
    def value(self) -> Fraction:
        return Fraction(self.m) / Fraction(2) ** self.r if self.r >= 0 else Fraction(self.m * 2 ** -self.r)


def _round_fraction(q: Fraction) -> int:
    n, d = abs(q.numerator), q.denominator
    out = (2 * n + d) // (2 * d)
    return out if q >= 0 else -out


def _shift_round(total, R: int):
    """round_half_away(total * 2**-R) for integer arrays (int64 or object)."""
    if R <= 0:
        return total * (1 << -R)
    half = 1 << (R - 1)
    mag = np.abs(total)
    out = (mag + half) >> R
    return np.where(total < 0, -out, out)


def requantize(terms, bits: int, policy: OverflowPolicy, counter: OverflowCounter | None = None,
               site: str = "", relu: bool = False) -> np.ndarray:
    """``narrow(round(sum_i acc_i * m_i * 2**-r_i))`` with a single rounding.

    ``terms`` is a list of (integer array, Requantizer). One term stays in
    int64; several terms are aligned to a common shift in exact Python
    integers so that no intermediate rounding occurs. ``relu`` fuses a
    ReLU ahead of the narrowing, so negative pre-activations never count as
    overflow.
    """
    if len(terms) == 1:
        acc, q = terms[0]
        acc = np.asarray(acc, dtype=np.int64)
        if q.r >= 0:
            out = _shift_round(acc * q.m, q.r)
        else:
            out = acc.astype(object) * (q.m << -q.r)
    else:
        R = max(q.r for _, q in terms)
        total = None
        for acc, q in terms:
            part = np.asarray(acc, dtype=np.int64).astype(object) * (q.m << (R - q.r))
            total = part if total is None else total + part
        out = _shift_round(total, R)
    if relu:
        out = np.where(out > 0, out, 0)
    return narrow(out, bits, policy, counter, site)


# ---------------------------------------------------------------------------
# checkpoint

@dataclass(frozen=True, eq=False)
class FxpCheckpoint:
    """Everything the integer engine needs; no float is touched at inference.

    ``weights`` holds integer tensors by model tensor name, ``csr`` the
    integer CSR operators, ``requant`` the rescale constants keyed by
    ``<dst site>:<term>``. Scales are kept only for quantizing inputs,
    dequantizing outputs and reporting.
    """

    spec: ModelSpec
    recipe: QuantRecipe
    scales: ScaleSet
    weights: dict
    csr: dict
    requant: dict
    luts: tuple
    masks: dict = field(default_factory=dict)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr(sorted(self.spec.to_dict().items())).encode())
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        for key in sorted(self.requant):
            q = self.requant[key]
            h.update(f"{key}:{q.m}:{q.r}".encode())
        for lut in self.luts:
            h.update(str(lut.k).encode())
            h.update(lut.table.tobytes())
        return h.hexdigest()

    def quantize_input(self, U) -> np.ndarray:
        return quantize(U, self.scales["input"])

    def dequantize_output(self, Yq) -> np.ndarray:
        return np.asarray(Yq, dtype=np.float64) / self.scales["output"].scale

    def weight_bytes(self) -> int:
        return sum(int(a.nbytes) for a in self.weights.values())


def _prev_site(i: int) -> str:
    return "enc_out" if i == 0 else f"layers.{i - 1}.res_out"


def freeze(model: S5Model, scales: ScaleSet, recipe: QuantRecipe | None = None) -> FxpCheckpoint:
    """Quantize weights, precompute rescale constants and sigmoid tables."""
    recipe = recipe or QuantRecipe()
    spec = model.spec
    if not spec.relufied or spec.activation is not Activation.RELU:
        raise FreezeError("integer inference needs a relufied model (GELU has no integer form here)")
    try:
        scales.require(spec, recipe)
    except KeyError as exc:
        raise FreezeError(str(exc.args[0]) if exc.args else str(exc)) from exc
    t = model.tensors()
    S = {k: v.scale for k, v in scales.items()}
    weights = {}
    for site in weight_sites(spec):
        for name in site_tensors(site):
            weights[name] = quantize(t[name], scales[site])
    csr = {"encoder.W": SparseMatrix.from_dense(weights["encoder.W"]),
           "decoder.W": SparseMatrix.from_dense(weights["decoder.W"])}
    RQ = Requantizer.from_scales
    rq = {
        "enc_out:W": RQ(S["enc_out"], S["encoder.W"], S["input"]),
        "enc_out:b": RQ(S["enc_out"], S["encoder.b"]),
    }
    luts = []
    for i in range(spec.depth):
        p = f"layers.{i}."
        prev = _prev_site(i)
        csr[p + "B_re"] = SparseMatrix.from_dense(weights[p + "B_re"])
        csr[p + "B_im"] = SparseMatrix.from_dense(weights[p + "B_im"])
        csr[p + "C"] = SparseMatrix.from_dense(np.hstack([weights[p + "C_re"], -weights[p + "C_im"]]))
        csr[p + "glu_W"] = SparseMatrix.from_dense(weights[p + "glu_W"])
        rq.update({
            p + "pre_b:scale": RQ(S[p + "pre_b"], S[p + "norm_scale"], S[prev]),
            p + "pre_b:shift": RQ(S[p + "pre_b"], S[p + "norm_shift"]),
            p + "state:lambda": RQ(S[p + "state"], S[p + "lambda"], S[p + "state"]),
            p + "state:B": RQ(S[p + "state"], S[p + "B"], S[p + "pre_b"]),
            p + "pre_glu:C": RQ(S[p + "pre_glu"], S[p + "C"], S[p + "state"]),
            p + "pre_glu:D": RQ(S[p + "pre_glu"], S[p + "D"], S[p + "pre_b"]),
            p + "gate_pre:W": RQ(S[p + "gate_pre"], S[p + "glu_W"], S[p + "pre_glu"]),
            p + "glu_out:gate": RQ(S[p + "glu_out"], S[p + "gate"], S[p + "pre_glu"]),
            p + "res_out:skip": RQ(S[p + "res_out"], S[prev]),
            p + "res_out:glu": RQ(S[p + "res_out"], S[p + "glu_out"]),
        })
        luts.append(SigmoidLut.build(scales[p + "gate_pre"], scales[p + "gate"]))
    last = _prev_site(spec.depth)
    rq["output:W"] = RQ(S["output"], S["decoder.W"], S[last])
    rq["output:b"] = RQ(S["output"], S["decoder.b"])
    return FxpCheckpoint(spec, recipe, ScaleSet(scales), weights, csr, rq, tuple(luts), dict(model.masks))


# ---------------------------------------------------------------------------
# execution

@dataclass(frozen=True)
class FxpState:
    """Integer recurrent state: (re, im) 16-bit codes per layer."""

    re: tuple
    im: tuple

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "FxpState":
        z = tuple(np.zeros(spec.n_ssm, dtype=np.int64) for _ in range(spec.depth))
        return cls(z, tuple(a.copy() for a in z))


_DENSE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _spmv(ckpt, name, x, policy, ovf, macs, key, sparse=True):
    if sparse:
        acc, n = spmv_event_driven(ckpt.csr[name], x)
    else:
        ops = _DENSE.setdefault(ckpt, {})
        if name not in ops:
            ops[name] = ckpt.csr[name].to_dense().astype(np.int64)
        W = ops[name]
        acc, n = dense_matvec(W, x), W.size
    if macs is not None:
        macs.add(key, n)
    return narrow(acc, ACC_BITS, policy, ovf, f"{key}.acc", symmetric=False)


def fxp_step(ckpt: FxpCheckpoint, state: FxpState, u_q, policy: OverflowPolicy = OverflowPolicy.SATURATE,
             *, overflow: OverflowCounter | None = None, macs: MacCounter | None = None,
             sparse: bool = True):
    """One frame in integer arithmetic.

    Returns ``(state, y_q, taps)`` with taps named like the float model's.
    """
    policy = OverflowPolicy(policy)
    spec = ckpt.spec
    bits = ckpt.recipe.act_bits
    W, rq = ckpt.weights, ckpt.requant
    u = np.asarray(u_q, dtype=np.int64)
    if u.shape != (spec.n_input,):
        raise ValueError(f"input frame must have length {spec.n_input}")
    ovf = overflow

    def act(terms, site, relu=False):
        return requantize(terms, ckpt.recipe.bits(site), policy, ovf, site, relu)

    acc = _spmv(ckpt, "encoder.W", u, policy, ovf, macs, "encoder", sparse)
    h = act([(acc, rq["enc_out:W"]), (W["encoder.b"], rq["enc_out:b"])], "enc_out")
    taps = {"input": u, "enc_out": h}
    new_re, new_im = [], []
    N, M = spec.n_ssm, spec.n_model
    for i in range(spec.depth):
        p = f"layers.{i}."
        ns = W[p + "norm_scale"].astype(np.int64) * h
        a = act([(ns, rq[p + "pre_b:scale"]), (W[p + "norm_shift"], rq[p + "pre_b:shift"])], p + "pre_b", relu=True)
        b_re = _spmv(ckpt, p + "B_re", a, policy, ovf, macs, p + "s5_hidden", sparse)
        b_im = _spmv(ckpt, p + "B_im", a, policy, ovf, macs, p + "s5_hidden", sparse)
        lr, li = W[p + "lambda_re"].astype(np.int64), W[p + "lambda_im"].astype(np.int64)
        xr, xi = state.re[i], state.im[i]
        # four diagonal products, combined before the single rescale
        p_re = narrow(lr * xr - li * xi, ACC_BITS, policy, ovf, p + "state.acc", symmetric=False)
        p_im = narrow(lr * xi + li * xr, ACC_BITS, policy, ovf, p + "state.acc", symmetric=False)
        s_re = act([(p_re, rq[p + "state:lambda"]), (b_re, rq[p + "state:B"])], p + "state")
        s_im = act([(p_im, rq[p + "state:lambda"]), (b_im, rq[p + "state:B"])], p + "state")
        new_re.append(s_re)
        new_im.append(s_im)
        st = np.concatenate([s_re, s_im])
        r = np.maximum(st, 0)
        acc_c = _spmv(ckpt, p + "C", r, policy, ovf, macs, p + "s5_output", sparse)
        d = W[p + "D"].astype(np.int64) * a
        t = act([(acc_c, rq[p + "pre_glu:C"]), (d, rq[p + "pre_glu:D"])], p + "pre_glu", relu=True)
        acc_w = _spmv(ckpt, p + "glu_W", t, policy, ovf, macs, p + "glu", sparse)
        gp = act([(acc_w, rq[p + "gate_pre:W"])], p + "gate_pre")
        gate = narrow(ckpt.luts[i](gp), bits, policy, ovf, p + "gate")
        g = act([(gate * t, rq[p + "glu_out:gate"])], p + "glu_out")
        h = act([(h, rq[p + "res_out:skip"]), (g, rq[p + "res_out:glu"])], p + "res_out")
        if macs is not None:
            macs.add(p + "batchnorm", M)
            macs.add(p + "s5_hidden", 4 * N)
            macs.add(p + "s5_output", np.count_nonzero(a))
            macs.add(p + "glu", M)
        for k, v in (("pre_b", a), ("state", st), ("pre_c", r), ("pre_glu", t),
                     ("gate_pre", gp), ("gate", gate), ("glu_out", g), ("res_out", h)):
            taps[p + k] = v
    acc = _spmv(ckpt, "decoder.W", h, policy, ovf, macs, "head", sparse)
    y = act([(acc, rq["output:W"]), (W["decoder.b"], rq["output:b"])], "output")
    taps["dec_in"] = h
    taps["output"] = y
    if macs is not None:
        macs.frames += 1
    return FxpState(tuple(new_re), tuple(new_im)), y, taps


@dataclass
class FxpRun:
    y: np.ndarray
    taps: dict
    state: FxpState
    overflow: OverflowCounter
    macs: MacCounter
    frame_ns: list

    def dequantized_taps(self, scales: ScaleSet, spec: ModelSpec) -> dict:
        from .quantizer import scale_site_for_tap

        return {k: v / scales[scale_site_for_tap(k, spec)].scale for k, v in self.taps.items()}


def fxp_run(ckpt: FxpCheckpoint, U_q, policy: OverflowPolicy = OverflowPolicy.SATURATE, *,
            state: FxpState | None = None, keep_taps: bool = True, sparse: bool = True) -> FxpRun:
    """Token-by-token integer execution of a quantized input sequence.

    ``sparse=False`` routes every product through a dense matvec over the
    decompressed weights; results must match the CSR route bit for bit.
    """
    state = state or FxpState.zeros(ckpt.spec)
    ovf, macs = OverflowCounter(), MacCounter()
    ys, rows, times = [], [], []
    for u in np.asarray(U_q):
        t0 = time.perf_counter_ns()
        state, y, taps = fxp_step(ckpt, state, u, policy, overflow=ovf, macs=macs, sparse=sparse)
        times.append(time.perf_counter_ns() - t0)
        ys.append(y)
        if keep_taps:
            rows.append(taps)
    Y = np.stack(ys) if ys else np.zeros((0, ckpt.spec.n_output), dtype=np.int64)
    stacked = {k: np.stack([r[k] for r in rows]) for k in rows[0]} if rows else {}
    return FxpRun(Y, stacked, state, ovf, macs, times)


def gate_scale(bits: int = 16) -> float:
    return ((1 << (bits - 1)) - 1) / GATE_ABSMAX


def requant_error(q: Requantizer, ratio) -> float:
    """Relative error of a requantizer against the exact ratio."""
    ratio = Fraction(ratio)
    return float(abs(q.value - ratio) / ratio)

