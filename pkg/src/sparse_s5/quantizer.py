"""Symmetric absmax quantization, static calibration and fake-quant simulation.

Rounding is half away from zero everywhere and the integer range is the
symmetric ``[-qmax, qmax]`` with ``qmax = 2**(n-1) - 1``; ``-2**(n-1)`` is
never produced.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .s5 import Activation, ModelSpec, S5Model, SequenceState, gelu, model_forward_scan

__all__ = [
    "QuantScale",
    "QuantRecipe",
    "ScaleSet",
    "MissingSiteError",
    "round_half_away",
    "fit_scale",
    "quantize",
    "dequantize",
    "fake_quant",
    "weight_sites",
    "activation_sites",
    "scale_site_for_tap",
    "site_tensors",
    "calibrate",
    "static_quant_eval",
    "sigmoid_knots",
    "SigmoidLut",
    "GATE_ABSMAX",
]

log = logging.getLogger(__name__)

# The sigmoid gate's codomain is (0, 1); its scale is pinned to that bound.
GATE_ABSMAX = 1.0
# Beyond |z| = 12 the sigmoid is within 0.2 LSB of 0 or 1 at 16 bits.
SIGMOID_SPAN = 12.0
SIGMOID_ENTRIES = 1024


class MissingSiteError(KeyError):
    """A quantization site has no scale."""


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantScale:
    site: str
    bits: int
    scale: float
    absmax: float
    degenerate: bool = False

    def __post_init__(self):
        if self.bits not in (8, 16):
            raise ValueError(f"unsupported bit width {self.bits}")
        if not self.scale > 0 or not math.isfinite(self.scale):
            raise ValueError(f"scale for {self.site} must be positive and finite")

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def step(self) -> float:
        return 1.0 / self.scale

    @property
    def zero_point(self) -> int:
        return 0


def fit_scale(x, bits: int, site: str = "") -> QuantScale:
    """``s = qmax / max|x|``; an all-zero tensor gets s = 1 and a degenerate flag."""
    absmax = float(np.max(np.abs(x))) if np.size(x) else 0.0
    qmax = (1 << (bits - 1)) - 1
    if absmax == 0.0:
        return QuantScale(site, bits, 1.0, 0.0, True)
    return QuantScale(site, bits, qmax / absmax, absmax, False)


def _int_dtype(bits: int):
    return np.int8 if bits == 8 else np.int16


def quantize(x, scale: QuantScale) -> np.ndarray:
    q = round_half_away(np.asarray(x, dtype=np.float64) * scale.scale)
    return np.clip(q, -scale.qmax, scale.qmax).astype(_int_dtype(scale.bits))


def dequantize(q, scale: QuantScale) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / scale.scale


def fake_quant(x, scale: QuantScale) -> np.ndarray:
    q = np.clip(round_half_away(np.asarray(x, dtype=np.float64) * scale.scale), -scale.qmax, scale.qmax)
    return q / scale.scale


# ---------------------------------------------------------------------------
# sites

_LAYER_WEIGHTS = {
    "lambda": ("lambda_re", "lambda_im"),
    "B": ("B_re", "B_im"),
    "C": ("C_re", "C_im"),
    "D": ("D",),
    "glu_W": ("glu_W",),
    "norm_scale": ("norm_scale",),
    "norm_shift": ("norm_shift",),
}
_LAYER_ACTS = ("pre_b", "state", "pre_glu", "gate_pre", "gate", "glu_out", "res_out")


def weight_sites(spec: ModelSpec) -> list[str]:
    out = ["encoder.W", "encoder.b"]
    for i in range(spec.depth):
        out += [f"layers.{i}.{k}" for k in _LAYER_WEIGHTS]
    return out + ["decoder.W", "decoder.b"]


def activation_sites(spec: ModelSpec) -> list[str]:
    out = ["input", "enc_out"]
    for i in range(spec.depth):
        out += [f"layers.{i}.{k}" for k in _LAYER_ACTS]
    return out + ["output"]


def site_tensors(site: str) -> tuple[str, ...]:
    """Model tensor names covered by one weight site (complex planes share a site)."""
    if site.startswith("layers."):
        base, kind = site.rsplit(".", 1)
        return tuple(f"{base}.{t}" for t in _LAYER_WEIGHTS[kind])
    return (site,)


def scale_site_for_tap(tap: str, spec: ModelSpec) -> str:
    """Scale site that quantizes a tap. Read-out ReLU and decoder input are aliases."""
    if tap.endswith(".pre_c"):
        return tap[: -len("pre_c")] + "state"
    if tap == "dec_in":
        return f"layers.{spec.depth - 1}.res_out"
    return tap


@dataclass(frozen=True)
class QuantRecipe:
    """Per-site bit widths; W8A16 with a 16-bit recurrent diagonal by default."""

    weight_bits: int = 8
    lambda_bits: int = 16
    act_bits: int = 16
    overrides: dict = field(default_factory=dict)

    def bits(self, site: str) -> int:
        if site in self.overrides:
            return int(self.overrides[site])
        if site.endswith(".lambda"):
            return self.lambda_bits
        if site in ("encoder.W", "encoder.b", "decoder.W", "decoder.b") or site.rsplit(".", 1)[-1] in _LAYER_WEIGHTS:
            return self.weight_bits
        return self.act_bits

    def sites(self, spec: ModelSpec) -> dict[str, int]:
        return {s: self.bits(s) for s in weight_sites(spec) + activation_sites(spec)}

    def to_dict(self) -> dict:
        return {"weight_bits": self.weight_bits, "lambda_bits": self.lambda_bits,
                "act_bits": self.act_bits, "overrides": dict(self.overrides)}


class ScaleSet(dict):
    """site -> QuantScale."""

    def require(self, spec: ModelSpec, recipe: QuantRecipe | None = None) -> None:
        recipe = recipe or QuantRecipe()
        need = recipe.sites(spec)
        gaps = sorted(set(need) - set(self))
        if gaps:
            raise MissingSiteError(f"no scale for sites: {', '.join(gaps)}")
        wrong = sorted(s for s, b in need.items() if self[s].bits != b)
        if wrong:
            raise ValueError(f"bit width disagrees with recipe at: {', '.join(wrong)}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# sparse_s5 scales v1\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site", "bits", "scale", "absmax", "degenerate"])
        for s in self.values():
            w.writerow([s.site, s.bits, repr(s.scale), repr(s.absmax), int(s.degenerate)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# calibration

def _seq_absmax(model: S5Model, U: np.ndarray) -> dict[str, float]:
    _, taps, _ = model_forward_scan(model, U)
    out: dict[str, float] = {}
    for name, v in taps.items():
        site = scale_site_for_tap(name, model.spec)
        m = float(np.max(np.abs(v))) if v.size else 0.0
        out[site] = max(out.get(site, 0.0), m)
    return out


def calibrate(model: S5Model, sequences, recipe: QuantRecipe | None = None, workers: int = 1,
              headroom: float = 1.0) -> ScaleSet:
    """Static scales: weights from their tensors, activations from running absmax.

    The per-site absmax merge is a plain max, so parallel calibration over
    sequences gives exactly the serial result. ``headroom`` widens every
    activation range (not the gate) by a constant factor, for inputs that
    reach a little beyond the calibration data.
    """
    if not headroom >= 1.0:
        raise ValueError("headroom must be >= 1")
    recipe = recipe or QuantRecipe()
    seqs = [np.asarray(U, dtype=np.float64) for U in sequences]
    if not seqs:
        raise ValueError("calibration needs at least one sequence")
    spec = model.spec
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda U: _seq_absmax(model, U), seqs))
    else:
        parts = [_seq_absmax(model, U) for U in seqs]
    absmax: dict[str, float] = {}
    for part in parts:
        for k, v in part.items():
            absmax[k] = max(absmax.get(k, 0.0), v)

    scales = ScaleSet()
    tensors = model.tensors()
    for site in weight_sites(spec):
        vals = np.concatenate([np.abs(tensors[t]).ravel() for t in site_tensors(site)])
        scales[site] = fit_scale(vals, recipe.bits(site), site)
    for site in activation_sites(spec):
        bits = recipe.bits(site)
        if site.endswith(".gate"):
            scales[site] = QuantScale(site, bits, ((1 << (bits - 1)) - 1) / GATE_ABSMAX, GATE_ABSMAX)
            continue
        scales[site] = fit_scale(np.array([headroom * absmax.get(site, 0.0)]), bits, site)
    degenerate = [s for s in activation_sites(spec) if scales[s].degenerate]
    if degenerate:
        log.warning("degenerate activation sites (all-zero during calibration): %s", ", ".join(degenerate))
    return scales


# ---------------------------------------------------------------------------
# tabulated sigmoid

def sigmoid_knots(in_scale: QuantScale) -> tuple[int, np.ndarray]:
    """Knot spacing and input codes for the 1024-entry sigmoid table.

    Knots sit at codes ``(i - 512) * 2**k``; ``k`` is the smallest shift for
    which the table reaches the smaller of the representable range and the
    band where the sigmoid is not yet saturated.
    """
    reach = min(in_scale.qmax, int(math.ceil(SIGMOID_SPAN * in_scale.scale)))
    half = SIGMOID_ENTRIES // 2
    k = 0
    while (half - 1) << k < reach:
        k += 1
    codes = (np.arange(SIGMOID_ENTRIES, dtype=np.int64) - half) << k
    return k, codes


LUT_FRAC_BITS = 8


@dataclass(frozen=True)
class SigmoidLut:
    """1024 samples of the sigmoid at gate-scale codes with 8 extra fraction bits.

    Knots sit at input codes ``(i - 512) * 2**k``; between knots the output
    is interpolated linearly in integer arithmetic, outside them it is held.
    Maps gate_pre codes to gate codes.
    """

    k: int
    table: np.ndarray  # int32, 1024 entries

    @classmethod
    def build(cls, in_scale: QuantScale, out_scale: QuantScale) -> "SigmoidLut":
        k, codes = sigmoid_knots(in_scale)
        vals = expit(codes / in_scale.scale) * out_scale.scale * (1 << LUT_FRAC_BITS)
        return cls(k, round_half_away(vals).astype(np.int32))

    def __call__(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.int64)
        n = self.table.size
        pos = np.clip(q + ((n // 2) << self.k), 0, (n - 1) << self.k)
        i = pos >> self.k
        f = pos & ((1 << self.k) - 1)
        t = self.table.astype(np.int64)
        lo = t[i]
        hi = t[np.minimum(i + 1, n - 1)]
        num = (lo << self.k) + (hi - lo) * f
        half = 1 << (self.k + LUT_FRAC_BITS - 1)
        return (num + half) >> (self.k + LUT_FRAC_BITS)  # num >= 0: plain half-up is half-away


# ---------------------------------------------------------------------------
# fake-quant forward

class _FQModel:
    def __init__(self, model: S5Model, scales: ScaleSet):
        spec = model.spec
        t = model.tensors()
        fq = lambda name, site: fake_quant(t[name], scales[site])  # noqa: E731
        self.enc_W, self.enc_b = fq("encoder.W", "encoder.W"), fq("encoder.b", "encoder.b")
        self.dec_W, self.dec_b = fq("decoder.W", "decoder.W"), fq("decoder.b", "decoder.b")
        self.layers = []
        for i in range(spec.depth):
            p = f"layers.{i}."
            lam = fq(p + "lambda_re", p + "lambda") + 1j * fq(p + "lambda_im", p + "lambda")
            B = np.vstack([fq(p + "B_re", p + "B"), fq(p + "B_im", p + "B")])
            C = np.hstack([fq(p + "C_re", p + "C"), -fq(p + "C_im", p + "C")])
            self.layers.append(dict(
                lam=lam, B=B, C=C, D=fq(p + "D", p + "D"), W=fq(p + "glu_W", p + "glu_W"),
                ns=fq(p + "norm_scale", p + "norm_scale"), nb=fq(p + "norm_shift", p + "norm_shift"),
            ))


def static_quant_eval(model: S5Model, scales: ScaleSet, U, *, sigmoid: str = "exact",
                      recipe: QuantRecipe | None = None, state: SequenceState | None = None):
    """Float forward pass with fake-quant at every weight and activation site.

    Each activation site is rounded exactly once, from the float64 value of
    the operation that produces it; this is the semantics the integer
    runtime reproduces. ``sigmoid`` selects the exact logistic function or
    the tabulated one the integer runtime uses. Returns ``(Y, taps)`` with
    taps holding dequantized values, stacked to (T, dim).
    """
    if sigmoid not in ("exact", "table"):
        raise ValueError("sigmoid must be 'exact' or 'table'")
    spec = model.spec
    scales.require(spec, recipe)
    Q = _FQModel(model, scales)
    sc = scales
    luts = [SigmoidLut.build(sc[f"layers.{i}.gate_pre"], sc[f"layers.{i}.gate"]) for i in range(spec.depth)]
    relu = spec.relufied
    U = np.asarray(U, dtype=np.float64)
    xs = [np.zeros(spec.n_ssm, dtype=np.complex128) for _ in range(spec.depth)] if state is None else list(state.x)
    rows = []
    ys = []
    for u in U:
        taps = {}
        u = fake_quant(u, sc["input"])
        h = fake_quant(Q.enc_W @ u + Q.enc_b, sc["enc_out"])
        taps["input"], taps["enc_out"] = u, h
        for i, L in enumerate(Q.layers):
            p = f"layers.{i}."
            z = L["ns"] * h + L["nb"]
            if relu:
                z = np.maximum(z, 0.0)
            a = fake_quant(z, sc[p + "pre_b"])
            bu = L["B"] @ a
            N = spec.n_ssm
            v = L["lam"] * xs[i] + (bu[:N] + 1j * bu[N:])
            st = fake_quant(np.concatenate([v.real, v.imag]), sc[p + "state"])
            xs[i] = st[:N] + 1j * st[N:]
            r = np.maximum(st, 0.0) if relu else st
            y = L["C"] @ r + L["D"] * a
            tau = np.maximum(y, 0.0) if spec.activation is Activation.RELU else gelu(y)
            t = fake_quant(tau, sc[p + "pre_glu"])
            gp = fake_quant(L["W"] @ t, sc[p + "gate_pre"])
            if sigmoid == "exact":
                gate = fake_quant(expit(gp), sc[p + "gate"])
            else:
                gate = luts[i](round_half_away(gp * sc[p + "gate_pre"].scale)) / sc[p + "gate"].scale
            g = fake_quant(gate * t, sc[p + "glu_out"])
            h = fake_quant(h + g, sc[p + "res_out"])
            for k, val in (("pre_b", a), ("state", st), ("pre_c", r), ("pre_glu", t),
                           ("gate_pre", gp), ("gate", gate), ("glu_out", g), ("res_out", h)):
                taps[p + k] = val
        y_hat = fake_quant(Q.dec_W @ h + Q.dec_b, sc["output"])
        taps["dec_in"], taps["output"] = h, y_hat
        rows.append(taps)
        ys.append(y_hat)
    if not rows:
        return np.zeros((0, spec.n_output)), {}
    return np.stack(ys), {k: np.stack([r[k] for r in rows]) for k in rows[0]}
