"""Floating-point reference model for the diagonal linear RNN stack.

Block layout (one residual add per block)::

    z = norm_scale * h + norm_shift        # inference-fused batch norm
    z = relu(z)                            # relufied only
    x = lambda * x + B z                   # complex diagonal recurrence
    r = relu([Re x, Im x])                 # relufied only, read-out copy
    y = C_re r_re - C_im r_im + D * z
    t = tau(y)                             # GELU or ReLU
    h = h + sigmoid(W t) * t

Complex projections are held as split real/imaginary planes in (out, in)
orientation: ``B_*`` is (N, M), ``C_*`` is (M, N). Any factor of two in the
real-part read-out is absorbed into C.
"""
from __future__ import annotations

import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

import numpy as np
from scipy.special import erf, expit

from .tensors import Mask, SparseMatrix, spmv_event_driven

__all__ = [
    "Activation",
    "ModelSpec",
    "S5LayerParams",
    "S5Model",
    "SequenceState",
    "MacCounter",
    "NumericError",
    "gelu",
    "layer_step",
    "model_forward_step",
    "model_forward_scan",
    "compose",
    "linear_scan",
    "relufy",
    "init_random",
    "LAYER_SITES",
]

BASE_N_MODEL = 192
BASE_N_SSM = 256
BASE_N_IO = 257

# Per-layer tap names, in execution order.
LAYER_SITES = ("pre_b", "state", "pre_c", "pre_glu", "gate_pre", "gate", "glu_out", "res_out")


class NumericError(ArithmeticError):
    """Non-finite values reached the model."""


class Activation(str, Enum):
    GELU = "gelu"
    RELU = "relu"


@dataclass(frozen=True)
class ModelSpec:
    depth: int = 3
    n_input: int = BASE_N_IO
    n_model: int = BASE_N_MODEL
    n_ssm: int = BASE_N_SSM
    n_output: int = BASE_N_IO
    width_factor: float = 1.0
    activation: Activation = Activation.GELU
    relufied: bool = False

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        for name in ("depth", "n_input", "n_model", "n_ssm", "n_output"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.width_factor > 0:
            raise ValueError("width_factor must be positive")

    @classmethod
    def scaled(cls, k: float = 1.0, **overrides) -> "ModelSpec":
        """Base family member: model width and state size scale linearly with ``k``."""
        dims = dict(
            n_model=max(1, int(round(BASE_N_MODEL * k))),
            n_ssm=max(1, int(round(BASE_N_SSM * k))),
            width_factor=float(k),
        )
        dims.update(overrides)
        return cls(**dims)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "n_input": self.n_input,
            "n_model": self.n_model,
            "n_ssm": self.n_ssm,
            "n_output": self.n_output,
            "width_factor": self.width_factor,
            "activation": self.activation.value,
            "relufied": self.relufied,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class S5LayerParams:
    lambda_re: np.ndarray
    lambda_im: np.ndarray
    B_re: np.ndarray
    B_im: np.ndarray
    C_re: np.ndarray
    C_im: np.ndarray
    D: np.ndarray
    glu_W: np.ndarray
    norm_scale: np.ndarray
    norm_shift: np.ndarray

    FIELDS = ("lambda_re", "lambda_im", "B_re", "B_im", "C_re", "C_im", "D", "glu_W", "norm_scale", "norm_shift")

    def validate(self, spec: ModelSpec) -> None:
        N, M = spec.n_ssm, spec.n_model
        want = {
            "lambda_re": (N,), "lambda_im": (N,),
            "B_re": (N, M), "B_im": (N, M),
            "C_re": (M, N), "C_im": (M, N),
            "D": (M,), "glu_W": (M, M), "norm_scale": (M,), "norm_shift": (M,),
        }
        for name, shape in want.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name} contains non-finite values")
        if np.any(np.hypot(self.lambda_re, self.lambda_im) >= 1.0):
            raise ValueError("unstable recurrence: |lambda| >= 1")


@dataclass(frozen=True, eq=False)
class S5Model:
    spec: ModelSpec
    encoder_W: np.ndarray
    encoder_b: np.ndarray
    layers: tuple
    decoder_W: np.ndarray
    decoder_b: np.ndarray
    masks: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        s = self.spec
        if self.encoder_W.shape != (s.n_model, s.n_input) or self.encoder_b.shape != (s.n_model,):
            raise ValueError("encoder shape does not match spec")
        if self.decoder_W.shape != (s.n_output, s.n_model) or self.decoder_b.shape != (s.n_output,):
            raise ValueError("decoder shape does not match spec")
        if len(self.layers) != s.depth:
            raise ValueError(f"expected {s.depth} layers, got {len(self.layers)}")
        for p in self.layers:
            p.validate(s)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"encoder.W": self.encoder_W, "encoder.b": self.encoder_b}
        for i, p in enumerate(self.layers):
            for name in S5LayerParams.FIELDS:
                out[f"layers.{i}.{name}"] = getattr(p, name)
        out["decoder.W"] = self.decoder_W
        out["decoder.b"] = self.decoder_b
        return out

    @classmethod
    def from_tensors(cls, spec: ModelSpec, tensors: dict, masks: dict | None = None) -> "S5Model":
        layers = [
            S5LayerParams(**{n: np.asarray(tensors[f"layers.{i}.{n}"], dtype=np.float32) for n in S5LayerParams.FIELDS})
            for i in range(spec.depth)
        ]
        f32 = lambda k: np.asarray(tensors[k], dtype=np.float32)  # noqa: E731
        return cls(spec, f32("encoder.W"), f32("encoder.b"), layers, f32("decoder.W"), f32("decoder.b"), dict(masks or {}))

    def with_tensors(self, updates: dict, spec: ModelSpec | None = None, masks: dict | None = None) -> "S5Model":
        t = self.tensors()
        t.update(updates)
        return S5Model.from_tensors(spec or self.spec, t, self.masks if masks is None else masks)

    @property
    def n_params(self) -> int:
        return sum(int(a.size) for a in self.tensors().values())


@dataclass(frozen=True)
class SequenceState:
    """Carried recurrent state, one complex vector per layer."""

    x: tuple

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "SequenceState":
        return cls(tuple(np.zeros(spec.n_ssm, dtype=np.complex128) for _ in range(spec.depth)))


@dataclass
class MacCounter:
    """Tally of multiply-accumulates actually executed, keyed by component."""

    counts: dict = field(default_factory=dict)
    frames: int = 0

    def add(self, key: str, n: int) -> None:
        self.counts[key] = self.counts.get(key, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _tau(y, activation: Activation):
    return np.maximum(y, 0.0) if activation is Activation.RELU else gelu(y)


# ---------------------------------------------------------------------------
# float64 operator cache

class _Op:
    """A real matrix usable densely or as event-driven CSR."""

    __slots__ = ("dense", "csr")

    def __init__(self, W: np.ndarray):
        self.dense = np.ascontiguousarray(W, dtype=np.float64)
        self.csr = None

    def apply(self, x, sparse: bool, counter: MacCounter | None, key: str):
        if sparse:
            if self.csr is None:
                self.csr = SparseMatrix.from_dense(self.dense)
            y, macs = spmv_event_driven(self.csr, x)
            if counter is not None:
                counter.add(key, macs)
            return y
        return self.dense @ x


class _PreparedLayer:
    def __init__(self, p: S5LayerParams):
        self.lam = p.lambda_re.astype(np.float64) + 1j * p.lambda_im.astype(np.float64)
        self.B = _Op(np.vstack([p.B_re, p.B_im]))
        self.C = _Op(np.hstack([p.C_re, -p.C_im.astype(np.float64)]))
        self.D = p.D.astype(np.float64)
        self.W = _Op(p.glu_W)
        self.scale = p.norm_scale.astype(np.float64)
        self.shift = p.norm_shift.astype(np.float64)
        self.N = p.lambda_re.shape[0]


class _PreparedModel:
    def __init__(self, m: S5Model):
        self.enc = _Op(m.encoder_W)
        self.enc_b = m.encoder_b.astype(np.float64)
        self.dec = _Op(m.decoder_W)
        self.dec_b = m.decoder_b.astype(np.float64)
        self.layers = [_prepared_layer(p) for p in m.layers]


_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _prepared_layer(p: S5LayerParams) -> _PreparedLayer:
    hit = _CACHE.get(p)
    if hit is None:
        hit = _CACHE[p] = _PreparedLayer(p)
    return hit


def _prepared(m: S5Model) -> _PreparedModel:
    hit = _CACHE.get(m)
    if hit is None:
        hit = _CACHE[m] = _PreparedModel(m)
    return hit


# ---------------------------------------------------------------------------
# step mode

def _layer_step(L: _PreparedLayer, x, h, spec: ModelSpec, sparse, counter, idx):
    relu = spec.relufied
    z = L.scale * h + L.shift
    if relu:
        z = np.maximum(z, 0.0)
    bu = L.B.apply(z, sparse, counter, f"layers.{idx}.s5_hidden")
    x_new = L.lam * x + (bu[: L.N] + 1j * bu[L.N:])
    state = np.concatenate([x_new.real, x_new.imag])
    r = np.maximum(state, 0.0) if relu else state
    y = L.C.apply(r, sparse, counter, f"layers.{idx}.s5_output") + L.D * z
    t = _tau(y, spec.activation)
    gp = L.W.apply(t, sparse, counter, f"layers.{idx}.glu")
    gate = expit(gp)
    g = gate * t
    h_new = h + g
    if counter is not None:
        N, M = L.N, z.shape[0]
        counter.add(f"layers.{idx}.batchnorm", M)
        counter.add(f"layers.{idx}.s5_hidden", 4 * N)
        counter.add(f"layers.{idx}.s5_output", np.count_nonzero(z))
        counter.add(f"layers.{idx}.glu", M)
    taps = {
        "pre_b": z, "state": state, "pre_c": r, "pre_glu": t,
        "gate_pre": gp, "gate": gate, "glu_out": g, "res_out": h_new,
    }
    return x_new, h_new, taps


def layer_step(params: S5LayerParams, x: np.ndarray, u: np.ndarray, spec: ModelSpec, *,
               sparse: bool = False, counter: MacCounter | None = None, layer: int = 0):
    """Advance one block by one frame.

    Returns ``(x_new, out, taps)`` where ``out`` is the block's residual
    output and ``taps`` holds every intermediate site of the block.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (spec.n_model,):
        raise ValueError(f"block input must have length {spec.n_model}")
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite block input")
    return _layer_step(_prepared_layer(params), np.asarray(x, dtype=np.complex128), u, spec, sparse, counter, layer)


def model_forward_step(model: S5Model, state: SequenceState, u: np.ndarray, *,
                       sparse: bool = False, counter: MacCounter | None = None):
    """One frame end to end: encoder, blocks, decoder.

    Returns ``(state, y_hat, taps)``; tap names are ``input``, ``enc_out``,
    ``layers.<i>.<site>``, ``dec_in`` and ``output``.
    """
    spec = model.spec
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (spec.n_input,):
        raise ValueError(f"input frame must have length {spec.n_input}")
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite input frame")
    P = _prepared(model)
    h = P.enc.apply(u, sparse, counter, "encoder") + P.enc_b
    taps = {"input": u, "enc_out": h}
    xs = []
    for i, L in enumerate(P.layers):
        x, h, lt = _layer_step(L, state.x[i], h, spec, sparse, counter, i)
        xs.append(x)
        for k, v in lt.items():
            taps[f"layers.{i}.{k}"] = v
    y = P.dec.apply(h, sparse, counter, "head") + P.dec_b
    taps["dec_in"] = h
    taps["output"] = y
    if counter is not None:
        counter.frames += 1
    return SequenceState(tuple(xs)), y, taps


# ---------------------------------------------------------------------------
# scan mode

def compose(e1, e2):
    """Associative combine of affine maps x -> a x + b, ``e1`` applied first."""
    a1, b1 = e1
    a2, b2 = e2
    return a1 * a2, a2 * b1 + b2


def _chunk_prefix(lam: np.ndarray, b: np.ndarray):
    """Inclusive Hillis-Steele prefix of (lam, b_t) pairs over one chunk."""
    A = np.broadcast_to(lam, b.shape).copy()
    Bc = b.copy()
    d = 1
    n = b.shape[0]
    while d < n:
        A_prev, B_prev = A[:-d], Bc[:-d]
        A_new, B_new = compose((A_prev, B_prev), (A[d:], Bc[d:]))
        A[d:] = A_new
        Bc[d:] = B_new
        d *= 2
    return A, Bc


def linear_scan(lam: np.ndarray, b: np.ndarray, x0: np.ndarray | None = None,
                chunk: int = 64, workers: int = 1) -> np.ndarray:
    """All states of ``x_t = lam * x_{t-1} + b_t`` by chunked prefix scan.

    Chunk-local prefixes are independent and may run on ``workers`` threads;
    chunk carries are then chained in order, so the result does not depend
    on the worker count.
    """
    T = b.shape[0]
    if T == 0:
        return b.copy()
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    x = np.zeros(b.shape[1], dtype=np.complex128) if x0 is None else np.asarray(x0, dtype=np.complex128)
    bounds = [(s, min(s + chunk, T)) for s in range(0, T, chunk)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda se: _chunk_prefix(lam, b[se[0]:se[1]]), bounds))
    else:
        parts = [_chunk_prefix(lam, b[s:e]) for s, e in bounds]
    out = np.empty_like(b, dtype=np.complex128)
    for (s, e), (A, Bc) in zip(bounds, parts):
        out[s:e] = A * x + Bc
        x = out[e - 1]
    return out


def model_forward_scan(model: S5Model, U: np.ndarray, chunk: int = 64, *,
                       state: SequenceState | None = None, workers: int = 1):
    """Whole-sequence evaluation, layer by layer, with a parallel prefix scan.

    Returns ``(Y, taps, final_state)``; each tap is a (T, dim) array.
    """
    spec = model.spec
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[1] != spec.n_input:
        raise ValueError(f"input must be (T, {spec.n_input})")
    T = U.shape[0]
    if T == 0:
        return np.zeros((0, spec.n_output)), {}, state or SequenceState.zeros(spec)
    if not np.all(np.isfinite(U)):
        raise NumericError("non-finite input")
    state = state or SequenceState.zeros(spec)
    P = _prepared(model)
    relu = spec.relufied
    h = U @ P.enc.dense.T + P.enc_b
    taps = {"input": U, "enc_out": h}
    xs = []
    for i, L in enumerate(P.layers):
        z = L.scale * h + L.shift
        if relu:
            z = np.maximum(z, 0.0)
        bu = z @ L.B.dense.T
        X = linear_scan(L.lam, bu[:, : L.N] + 1j * bu[:, L.N:], state.x[i], chunk, workers)
        xs.append(X[-1].copy())
        st = np.concatenate([X.real, X.imag], axis=1)
        r = np.maximum(st, 0.0) if relu else st
        y = r @ L.C.dense.T + L.D * z
        t = _tau(y, spec.activation)
        gp = t @ L.W.dense.T
        gate = expit(gp)
        g = gate * t
        h = h + g
        for k, v in zip(LAYER_SITES, (z, st, r, t, gp, gate, g, h)):
            taps[f"layers.{i}.{k}"] = v
    Y = h @ P.dec.dense.T + P.dec_b
    taps["dec_in"] = h
    taps["output"] = Y
    return Y, taps, SequenceState(tuple(xs))


def run_steps(model: S5Model, U: Iterable, *, sparse: bool = False, counter: MacCounter | None = None,
              state: SequenceState | None = None):
    """Token-by-token evaluation of a whole sequence; taps stacked to (T, dim)."""
    state = state or SequenceState.zeros(model.spec)
    ys, rows = [], []
    for u in U:
        state, y, taps = model_forward_step(model, state, u, sparse=sparse, counter=counter)
        ys.append(y)
        rows.append(taps)
    if not rows:
        return np.zeros((0, model.spec.n_output)), {}, state
    stacked = {k: np.stack([r[k] for r in rows]) for k in rows[0]}
    return np.stack(ys), stacked, state


# ---------------------------------------------------------------------------
# surgery and initialization

def relufy(model: S5Model) -> S5Model:
    """GELU -> ReLU plus the two inserted ReLUs. Weights are shared untouched."""
    if model.spec.relufied and model.spec.activation is Activation.RELU:
        return model
    spec = replace(model.spec, activation=Activation.RELU, relufied=True)
    return S5Model(spec, model.encoder_W, model.encoder_b, model.layers, model.decoder_W, model.decoder_b, dict(model.masks))


def init_random(spec: ModelSpec, seed: int = 0) -> S5Model:
    """Stable random initialization, deterministic in ``seed``.

    |lambda| is log-uniform on [0.5, 0.999) with uniform phase. Projections
    are Gaussian scaled by 1/sqrt(fan_in); each row of B is further scaled by
    sqrt(1 - |lambda|^2) so slow channels do not dominate the state range.
    """
    rng = np.random.default_rng(seed)
    M, N = spec.n_model, spec.n_ssm
    f32 = lambda a: np.asarray(a, dtype=np.float32)  # noqa: E731
    enc_W = rng.standard_normal((M, spec.n_input)) / np.sqrt(spec.n_input)
    enc_b = np.zeros(M)  # the norm shift already supplies a per-channel offset
    layers = []
    for _ in range(spec.depth):
        mag = np.exp(rng.uniform(np.log(0.5), np.log(0.999), N))
        phase = rng.uniform(-np.pi, np.pi, N)
        gamma = np.sqrt(1.0 - mag**2)[:, None]
        layers.append(S5LayerParams(
            lambda_re=f32(mag * np.cos(phase)),
            lambda_im=f32(mag * np.sin(phase)),
            B_re=f32(gamma * rng.standard_normal((N, M)) / np.sqrt(M)),
            B_im=f32(gamma * rng.standard_normal((N, M)) / np.sqrt(M)),
            C_re=f32(rng.standard_normal((M, N)) / np.sqrt(2 * N)),
            C_im=f32(rng.standard_normal((M, N)) / np.sqrt(2 * N)),
            D=f32(rng.uniform(-0.5, 0.5, M)),
            glu_W=f32(rng.standard_normal((M, M)) / np.sqrt(M)),
            norm_scale=f32(1.0 + 0.1 * rng.standard_normal(M)),
            norm_shift=f32(0.1 * rng.standard_normal(M)),
        ))
    dec_W = rng.standard_normal((spec.n_output, M)) / np.sqrt(M)
    dec_b = 0.1 * rng.standard_normal(spec.n_output)
    return S5Model(spec, f32(enc_W), f32(enc_b), layers, f32(dec_W), f32(dec_b))
