"""Cost and quality accounting.

Effective MACs follow a per-component closed form in the model dimensions
and weight/activation densities. When the densities are measured on the
same run that the runtime counter observed (see ``measured_densities``),
the formula and the counter agree exactly; all arithmetic here is done in
``Fraction`` for that reason.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources

import numpy as np

from .s5 import LAYER_SITES, ModelSpec, S5Model

__all__ = [
    "DensitySet",
    "MacRecord",
    "MacProfile",
    "effective_macs",
    "measured_densities",
    "MemoryRecord",
    "MemoryFootprint",
    "memory_footprint",
    "si_snr",
    "SI_SNR_CAP_DB",
    "MismatchRow",
    "MismatchReport",
    "mismatch_report",
    "sparsity_layout",
    "reference_points",
    "COMPONENTS",
]

COMPONENTS = ("encoder", "batchnorm", "s5_hidden", "s5_output", "glu", "head")
SI_SNR_CAP_DB = 60.0
_SI_SNR_EPS = 1e-12

# Activation sites that feed each weighted operator.
_WEIGHT_INPUT = {"encoder": "input", "B": "pre_b", "C": "pre_c", "glu": "pre_glu", "head": "dec_in"}


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


@dataclass
class DensitySet:
    """Activation densities by tap name and weight densities by operator.

    Activation keys: ``input``, ``layers.<i>.pre_b``, ``layers.<i>.pre_c``,
    ``layers.<i>.pre_glu``, ``dec_in``. Weight keys: ``encoder``,
    ``layers.<i>.B``, ``layers.<i>.C``, ``layers.<i>.glu``, ``head``.
    Missing keys read as 1.
    """

    act: dict = field(default_factory=dict)
    wgt: dict = field(default_factory=dict)

    def __post_init__(self):
        for table in (self.act, self.wgt):
            for k, v in list(table.items()):
                v = _frac(v)
                if not 0 <= v <= 1:
                    raise ValueError(f"density {k}={float(v)} outside [0, 1]")
                table[k] = v

    @classmethod
    def ones(cls) -> "DensitySet":
        return cls()

    @classmethod
    def uniform(cls, spec: ModelSpec, d_wgt=1, d_act=1) -> "DensitySet":
        act = {"input": d_act, "dec_in": d_act}
        wgt = {"encoder": d_wgt, "head": d_wgt}
        for i in range(spec.depth):
            for s in ("pre_b", "pre_c", "pre_glu"):
                act[f"layers.{i}.{s}"] = d_act
            for w in ("B", "C", "glu"):
                wgt[f"layers.{i}.{w}"] = d_wgt
        return cls(act, wgt)

    def a(self, key: str) -> Fraction:
        return self.act.get(key, Fraction(1))

    def w(self, key: str) -> Fraction:
        return self.wgt.get(key, Fraction(1))


@dataclass(frozen=True)
class MacRecord:
    component: str
    layer: int | None
    d_wgt: Fraction
    d_act: Fraction
    macs: Fraction


@dataclass
class MacProfile:
    spec: ModelSpec
    records: list

    @property
    def total(self) -> Fraction:
        return sum((r.macs for r in self.records), Fraction(0))

    def by_component(self) -> dict[str, Fraction]:
        out = {c: Fraction(0) for c in COMPONENTS}
        for r in self.records:
            out[r.component] += r.macs
        return out

    def by_key(self) -> dict[str, Fraction]:
        """Totals keyed like the runtime MAC counter."""
        out = {}
        for r in self.records:
            key = r.component if r.layer is None else f"layers.{r.layer}.{r.component}"
            out[key] = out.get(key, Fraction(0)) + r.macs
        return out

    def to_csv(self) -> str:
        s = self.spec
        buf = io.StringIO()
        buf.write("# sparse_s5 macs v1\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "layer", "N_input", "N_model", "N_ssm", "N_output", "d_wgt", "d_act", "macs"])
        for r in self.records:
            w.writerow([r.component, "" if r.layer is None else r.layer, s.n_input, s.n_model, s.n_ssm,
                        s.n_output, f"{float(r.d_wgt):.6f}", f"{float(r.d_act):.6f}", f"{float(r.macs):.3f}"])
        w.writerow(["total", "", "", "", "", "", "", "", f"{float(self.total):.3f}"])
        return buf.getvalue()


def effective_macs(spec: ModelSpec, densities: DensitySet | None = None) -> MacProfile:
    """Per-frame effective MACs, summed over depth."""
    d = densities or DensitySet()
    Ni, M, N, No = spec.n_input, spec.n_model, spec.n_ssm, spec.n_output
    recs = [MacRecord("encoder", None, d.w("encoder"), d.a("input"), Ni * M * d.w("encoder") * d.a("input"))]
    for i in range(spec.depth):
        p = f"layers.{i}."
        a_b, a_c, a_g = d.a(p + "pre_b"), d.a(p + "pre_c"), d.a(p + "pre_glu")
        w_b, w_c, w_g = d.w(p + "B"), d.w(p + "C"), d.w(p + "glu")
        recs += [
            MacRecord("batchnorm", i, Fraction(1), Fraction(1), Fraction(M)),
            MacRecord("s5_hidden", i, w_b, a_b, 2 * M * N * w_b * a_b + 4 * N),
            MacRecord("s5_output", i, w_c, a_c, 2 * N * M * w_c * a_c + M * a_b),
            MacRecord("glu", i, w_g, a_g, M * M * w_g * a_g + M),
        ]
    recs.append(MacRecord("head", None, d.w("head"), d.a("dec_in"), M * No * d.w("head") * d.a("dec_in")))
    return MacProfile(spec, recs)


def _nonzero_fraction(arrs) -> Fraction:
    nz = sum(int(np.count_nonzero(a)) for a in arrs)
    size = sum(int(np.size(a)) for a in arrs)
    if size == 0:
        raise ValueError("empty tap")
    return Fraction(nz, size)


def _operator_columns(source, spec: ModelSpec) -> dict[str, tuple[np.ndarray, int]]:
    """Stored entries per input column and row count of every weighted operator."""
    from .fxp import FxpCheckpoint

    out = {}
    if isinstance(source, FxpCheckpoint):
        c = source.csr
        out["encoder"] = (c["encoder.W"].column_nnz(), c["encoder.W"].rows)
        out["head"] = (c["decoder.W"].column_nnz(), c["decoder.W"].rows)
        for i in range(spec.depth):
            p = f"layers.{i}."
            out[p + "B"] = (c[p + "B_re"].column_nnz() + c[p + "B_im"].column_nnz(), 2 * spec.n_ssm)
            out[p + "C"] = (c[p + "C"].column_nnz(), spec.n_model)
            out[p + "glu"] = (c[p + "glu_W"].column_nnz(), spec.n_model)
        return out
    t = source.tensors()
    nzc = lambda W: np.count_nonzero(W, axis=0)  # noqa: E731
    out["encoder"] = (nzc(t["encoder.W"]), spec.n_model)
    out["head"] = (nzc(t["decoder.W"]), spec.n_output)
    for i in range(spec.depth):
        p = f"layers.{i}."
        out[p + "B"] = (nzc(t[p + "B_re"]) + nzc(t[p + "B_im"]), 2 * spec.n_ssm)
        out[p + "C"] = (np.concatenate([nzc(t[p + "C_re"]), nzc(t[p + "C_im"])]), spec.n_model)
        out[p + "glu"] = (nzc(t[p + "glu_W"]), spec.n_model)
    return out


def measured_densities(taps, spec: ModelSpec, source: S5Model | None = None) -> DensitySet:
    """Densities observed in recorded taps.

    ``taps`` is one tap dict of (T, dim) arrays or a list of them (several
    sequences). Activation density is the nonzero fraction over every frame.
    With ``source`` (a float model or integer checkpoint), the weight
    density of each operator is the fraction of its stored entries that
    active inputs actually touched; with unstructured masks this differs
    from the plain nnz fraction, and it is what makes the closed form match
    the event-driven counter exactly. Without ``source`` weights count as
    dense.
    """
    runs = [taps] if isinstance(taps, dict) else list(taps)
    if not runs or not all(runs):
        raise ValueError("no taps recorded")
    act_keys = ["input", "dec_in"] + [f"layers.{i}.{s}" for i in range(spec.depth) for s in ("pre_b", "pre_c", "pre_glu")]
    act = {k: _nonzero_fraction([r[k] for r in runs]) for k in act_keys}
    wgt = {}
    if source is not None:
        cols = _operator_columns(source, spec)
        op_inputs = {"encoder": "input", "head": "dec_in"}
        for i in range(spec.depth):
            p = f"layers.{i}."
            op_inputs.update({p + "B": p + "pre_b", p + "C": p + "pre_c", p + "glu": p + "pre_glu"})
        for op, tap in op_inputs.items():
            colnnz, rows = cols[op]
            touched = active = 0
            for r in runs:
                live = np.asarray(r[tap]) != 0
                touched += int((live * colnnz).sum())
                active += int(live.sum())
            wgt[op] = Fraction(touched, rows * active) if active else Fraction(int(colnnz.sum()), rows * colnnz.size)
    return DensitySet(act, wgt)


def sparsity_layout(densities: DensitySet, spec: ModelSpec) -> list[tuple[str, int, float]]:
    """(group, layer, sparsity %) rows grouped as Norm / S5 Out / GLU by depth."""
    groups = (("norm", "pre_b"), ("s5_out", "pre_c"), ("glu", "pre_glu"))
    return [(g, i + 1, 100.0 * float(1 - densities.a(f"layers.{i}.{site}")))
            for g, site in groups for i in range(spec.depth)]


# ---------------------------------------------------------------------------
# memory

@dataclass(frozen=True)
class MemoryRecord:
    name: str
    params: int
    nnz: int
    value_bytes: int
    index_bytes: int

    @property
    def total(self) -> int:
        return self.value_bytes + self.index_bytes


@dataclass
class MemoryFootprint:
    layout: str
    records: list

    @property
    def total(self) -> int:
        return sum(r.total for r in self.records)

    @property
    def value_bytes(self) -> int:
        return sum(r.value_bytes for r in self.records)

    @property
    def index_bytes(self) -> int:
        return sum(r.index_bytes for r in self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# sparse_s5 memory v1 layout={self.layout}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tensor", "params", "nnz", "value_bytes", "index_bytes", "total_bytes"])
        for r in self.records:
            w.writerow([r.name, r.params, r.nnz, r.value_bytes, r.index_bytes, r.total])
        w.writerow(["total", sum(r.params for r in self.records), sum(r.nnz for r in self.records),
                    self.value_bytes, self.index_bytes, self.total])
        return buf.getvalue()


_MATRIX_SUFFIXES = ("encoder.W", "decoder.W", ".B_re", ".B_im", ".C_re", ".C_im", ".glu_W")


def memory_footprint(source, layout: str = "dense") -> MemoryFootprint:
    """Storage bytes per tensor.

    Float models count 4 bytes per value, integer checkpoints their integer
    width. ``layout='csr'`` stores weight matrices as CSR: values for
    nonzeros only, a 2-byte column index per nonzero and 4-byte row offsets.
    Vectors (biases, diagonals, norm affine) are always dense.
    """
    from .fxp import FxpCheckpoint

    if layout not in ("dense", "csr"):
        raise ValueError("layout must be 'dense' or 'csr'")
    if isinstance(source, FxpCheckpoint):
        tensors = source.weights
        width = lambda a: a.dtype.itemsize  # noqa: E731
    else:
        tensors = source.tensors()
        width = lambda a: 4  # noqa: E731
    recs = []
    for name, a in tensors.items():
        nnz = int(np.count_nonzero(a))
        if layout == "csr" and a.ndim == 2 and name.endswith(_MATRIX_SUFFIXES):
            recs.append(MemoryRecord(name, int(a.size), nnz, nnz * width(a), 2 * nnz + 4 * (a.shape[0] + 1)))
        else:
            recs.append(MemoryRecord(name, int(a.size), nnz, int(a.size) * width(a), 0))
    return MemoryFootprint(layout, recs)


# ---------------------------------------------------------------------------
# SI-SNR

def si_snr(estimate, target) -> float:
    """Scale-invariant SNR in dB, zero-mean, capped at +60 dB."""
    est = np.asarray(estimate, dtype=np.float64).ravel()
    tgt = np.asarray(target, dtype=np.float64).ravel()
    if est.shape != tgt.shape or est.size == 0:
        raise ValueError("estimate and target must be non-empty and equally long")
    est = est - est.mean()
    tgt = tgt - tgt.mean()
    tt = float(np.dot(tgt, tgt))
    if tt == 0.0:
        raise ValueError("SI-SNR is undefined for an all-zero target")
    s_t = (float(np.dot(est, tgt)) / tt) * tgt
    e = est - s_t
    ps, pe = float(np.dot(s_t, s_t)), float(np.dot(e, e))
    if pe < _SI_SNR_EPS * ps or ps == 0.0 and pe == 0.0:
        return SI_SNR_CAP_DB
    if ps == 0.0:
        return -math.inf
    return min(SI_SNR_CAP_DB, 10.0 * math.log10(ps / pe))


# ---------------------------------------------------------------------------
# mismatch

@dataclass(frozen=True)
class MismatchRow:
    layer: str
    site: str
    mae: float
    mre: float
    count: int
    nonzero: int


@dataclass
class MismatchReport:
    rows: list

    def __getitem__(self, tap: str) -> MismatchRow:
        for r in self.rows:
            if _tap_name(r) == tap:
                return r
        raise KeyError(tap)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# sparse_s5 mismatch v1\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "site", "mae", "mre", "count", "nonzero_ref"])
        for r in self.rows:
            w.writerow([r.layer, r.site, f"{r.mae:.9g}", f"{r.mre:.9g}", r.count, r.nonzero])
        return buf.getvalue()


def _tap_name(row: MismatchRow) -> str:
    return row.site if row.layer in ("encoder", "decoder") else f"layers.{row.layer}.{row.site}"


def _tap_order(spec: ModelSpec) -> list[str]:
    out = ["input", "enc_out"]
    for i in range(spec.depth):
        out += [f"layers.{i}.{s}" for s in LAYER_SITES]
    return out + ["dec_in", "output"]


def mismatch_report(float_taps: dict, fxp_taps: dict, spec: ModelSpec, scales=None) -> MismatchReport:
    """Per-site MAE and MRE of integer taps against a float reference.

    Integer taps are dequantized with ``scales`` when given. MRE averages
    only over entries where the reference is nonzero. Sums are compensated
    (``math.fsum``) so the result does not depend on reduction order.
    """
    order = _tap_order(spec)
    if set(float_taps) != set(fxp_taps):
        raise KeyError(f"tap sets differ: {sorted(set(float_taps) ^ set(fxp_taps))}")
    unknown = set(float_taps) - set(order)
    if unknown:
        raise KeyError(f"unknown taps: {sorted(unknown)}")
    from .quantizer import scale_site_for_tap

    rows = []
    for tap in (t for t in order if t in float_taps):
        ref = np.asarray(float_taps[tap], dtype=np.float64).ravel()
        got = np.asarray(fxp_taps[tap])
        if scales is not None and np.issubdtype(got.dtype, np.integer):
            got = got / scales[scale_site_for_tap(tap, spec)].scale
        got = np.asarray(got, dtype=np.float64).ravel()
        if got.shape != ref.shape:
            raise ValueError(f"tap {tap}: shapes differ")
        err = np.abs(got - ref)
        nz = ref != 0
        mae = math.fsum(err) / err.size if err.size else 0.0
        n_nz = int(nz.sum())
        mre = math.fsum(err[nz] / np.abs(ref[nz])) / n_nz if n_nz else 0.0
        if tap.startswith("layers."):
            _, layer, site = tap.split(".", 2)
        else:
            layer, site = ("encoder" if tap in ("input", "enc_out") else "decoder"), tap
        rows.append(MismatchRow(layer, site, mae, mre, int(err.size), n_nz))
    return MismatchReport(rows)


def reference_points() -> list[dict]:
    """Published reference points shipped with the package (overlay data)."""
    text = resources.files("sparse_s5").joinpath("data/reference_points.csv").read_text()
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    return list(csv.DictReader(lines))
