"""``sparse-s5`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric or
validation failure. Failures print one line to stderr::

    sparse-s5: error code=3 kind=CrcError message=...
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    COMPONENTS,
    effective_macs,
    measured_densities,
    memory_footprint,
    mismatch_report,
    reference_points,
    si_snr,
    sparsity_layout,
)
from .audio import (
    AudioFormatError,
    StftConfig,
    denoise_stream,
    interior,
    read_wav,
    stft,
    synth_mixture,
    write_wav,
)
from .compressor import AllocationError, PruneSchedule, allocation_csv, erk_allocate, prunable_layers, prune_model
from .config import ConfigError, RunConfig, load_config
from .fxp import FreezeError, FxpCheckpoint, OverflowPolicy, freeze, fxp_run
from .quantizer import MissingSiteError, ScaleSet, calibrate, static_quant_eval
from .s5 import MacCounter, ModelSpec, NumericError, S5Model, init_random, model_forward_scan, relufy, run_steps
from .store import StoreError, load_file, save_file

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers

def _config(args) -> RunConfig:
    path = getattr(args, "config", None)
    return load_config(path) if path else RunConfig()


def _load(path, kinds):
    entity, extras = load_file(path)
    if not isinstance(entity, kinds):
        names = "/".join(k.__name__ for k in (kinds if isinstance(kinds, tuple) else (kinds,)))
        raise CliError(EXIT_DATA, f"{path}: expected {names}, found {type(entity).__name__}")
    return entity, extras


def _spec_of(obj) -> ModelSpec:
    return obj.spec


def _features(path, cfg: StftConfig) -> np.ndarray:
    _, wav = read_wav(path, cfg)
    return np.abs(stft(wav, cfg))


def _write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def _fig_path(out) -> Path:
    return Path(out).with_suffix(".png")


def _fmt(x) -> str:
    if isinstance(x, Fraction):
        return str(x.numerator) if x.denominator == 1 else f"{float(x):.6f}"
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


# ---------------------------------------------------------------------------
# subcommands

def cmd_init(args) -> int:
    cfg = load_config(args.spec) if args.spec else _config(args)
    seed = cfg.seed if args.seed is None else args.seed
    model = init_random(cfg.model_spec(), seed)
    save_file(args.out, model)
    print(f"wrote {args.out}: {model.n_params} parameters")
    return EXIT_OK


def cmd_surgery(args) -> int:
    if not args.relufy:
        raise CliError(EXIT_CONFIG, "surgery needs an operation (--relufy)")
    model, extras = _load(args.inp, S5Model)
    save_file(args.out, relufy(model), scales=extras.get("scales"))
    print(f"wrote {args.out}: relufied")
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _config(args)
    model, _ = _load(args.inp, S5Model)
    target = args.target if args.target is not None else cfg.prune.get("target", 0.9)
    epochs = args.epochs or cfg.prune.get("epochs", 10)
    steps = args.steps or cfg.prune.get("steps", 3000)
    sched = PruneSchedule(S_f=target, T=steps, S_i=cfg.prune.get("initial", 0.0), t_i=cfg.prune.get("start", 0),
                          t_f=cfg.prune.get("end"))
    alloc = erk_allocate(prunable_layers(model), target)
    pruned, masks, _ = prune_model(model, alloc)
    save_file(args.out, pruned)
    report = allocation_csv(alloc, masks, sched.trace(epochs))
    if args.report:
        _write_text(args.report, report)
    glob = next(r for r in csv.reader(io.StringIO(report)) if r and r[0] == "global")
    print(f"wrote {args.out}: global sparsity {glob[6]}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    model, _ = _load(args.inp, S5Model)
    st = cfg.stft_config()
    seqs = []
    if args.audio:
        files = sorted(Path(args.audio).glob("*.wav")) if Path(args.audio).is_dir() else [Path(args.audio)]
        if not files:
            raise CliError(EXIT_DATA, f"no .wav files in {args.audio}")
        seqs = [_features(f, st) for f in files]
    for i in range(args.synthetic):
        noisy, _ = synth_mixture(cfg.seed + i, 1.0, 5.0, st.sample_rate)
        seqs.append(np.abs(stft(noisy, st)))
    if not seqs:
        raise CliError(EXIT_DATA, "no calibration data (give --audio or --synthetic N)")
    headroom = args.headroom if args.headroom is not None else cfg.headroom
    scales = calibrate(model, seqs, cfg.recipe(), workers=cfg.workers, headroom=headroom)
    save_file(args.out, scales)
    if args.csv:
        _write_text(args.csv, scales.to_csv())
    print(f"wrote {args.out}: {len(scales)} sites from {len(seqs)} sequences")
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _config(args)
    model, _ = _load(args.inp, S5Model)
    scales, _ = _load(args.scales, ScaleSet)
    ckpt = freeze(model, scales, cfg.recipe())
    save_file(args.out, ckpt)
    print(f"wrote {args.out}: {ckpt.weight_bytes()} weight bytes")
    return EXIT_OK


def cmd_denoise(args) -> int:
    cfg = _config(args)
    st = cfg.stft_config()
    model, _ = _load(args.inp, (S5Model, FxpCheckpoint))
    rate, wav = read_wav(args.wav)
    res = denoise_stream(model, wav, st, args.mode, policy=args.policy, sample_rate=rate)
    write_wav(args.out, res.wave, st.sample_rate)
    print(f"wrote {args.out}: {len(res.masks)} frames, mean {res.mean_frame_ms:.3f} ms/frame")
    return EXIT_OK


def _profile_rows(obj, feats: np.ndarray, st: StftConfig, policy: str):
    spec = _spec_of(obj)
    if isinstance(obj, FxpCheckpoint):
        run = fxp_run(obj, obj.quantize_input(feats), OverflowPolicy(policy))
        taps, counter, frame_ns, overflow = run.taps, run.macs, run.frame_ns, run.overflow.total
        mem = [("fxp_dense", memory_footprint(obj, "dense").total), ("fxp_csr", memory_footprint(obj, "csr").total)]
    else:
        counter = MacCounter()
        _, taps, _ = run_steps(obj, feats, sparse=True, counter=counter)
        frame_ns = None  # timed on the full denoise path by the caller
        overflow = None
        mem = [("fp32_dense", memory_footprint(obj, "dense").total), ("fp32_csr", memory_footprint(obj, "csr").total)]
    dens = measured_densities(taps, spec, obj)
    prof = effective_macs(spec, dens)
    return spec, prof, counter, dens, mem, frame_ns, overflow


def cmd_profile(args) -> int:
    cfg = _config(args)
    st = cfg.stft_config()
    obj, _ = _load(args.inp, (S5Model, FxpCheckpoint))
    rate, wav = read_wav(args.wav, st)
    feats = np.abs(stft(wav, st))
    spec, prof, counter, dens, mem, frame_ns, overflow = _profile_rows(obj, feats, st, args.policy)
    if frame_ns is None:
        frame_ns = denoise_stream(obj, wav, st, "fall_through", sample_rate=rate).frame_ns
    frames = counter.frames
    formula = prof.by_key()
    measured = {k: Fraction(v, frames) for k, v in counter.counts.items()}
    rows = []
    all_match = True
    for key in formula:
        f, m = formula[key], measured.get(key, Fraction(0))
        all_match &= f == m
        rows.append(["macs", key, _fmt(f), _fmt(m), int(f == m), "", "macs/frame"])
    tf, tm = prof.total, Fraction(counter.total, frames)
    all_match &= tf == tm
    rows.append(["macs", "total", _fmt(tf), _fmt(tm), int(tf == tm), "", "macs/frame"])
    for comp, v in prof.by_component().items():
        rows.append(["macs_component", comp, _fmt(v), "", "", "", "macs/frame"])
    for k, v in dens.act.items():
        rows.append(["act_density", k, "", "", "", f"{float(v):.6f}", "fraction"])
    for k, v in dens.wgt.items():
        rows.append(["wgt_density", k, "", "", "", f"{float(v):.6f}", "fraction"])
    for name, b in mem:
        rows.append(["memory", name, "", "", "", b, "bytes"])
    ms = np.array(frame_ns, dtype=np.float64) / 1e6
    budget = 1e3 * st.frame_budget_s
    meets = bool(ms.size) and float(np.percentile(ms, 95)) <= budget
    rows += [
        ["latency", "frames", "", "", "", int(ms.size), "count"],
        ["latency", "mean", "", "", "", f"{ms.mean():.4f}", "ms"],
        ["latency", "p95", "", "", "", f"{np.percentile(ms, 95):.4f}", "ms"],
        ["latency", "max", "", "", "", f"{ms.max():.4f}", "ms"],
        ["latency", "budget", "", "", "", f"{budget:.4f}", "ms"],
        ["latency", "meets_budget", "", "", "", int(meets), "bool"],
    ]
    if overflow is not None:
        rows.append(["overflow", "events", "", "", "", overflow, "count"])
    buf = io.StringIO()
    buf.write("# sparse_s5 profile v1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["section", "item", "formula", "instrumented", "match", "value", "unit"])
    w.writerows(rows)
    _write_text(args.out, buf.getvalue())
    if not args.no_fig:
        from .plotting import plot_profile

        layout = [(f"{g}{layer}", v) for g, layer, v in sparsity_layout(dens, spec)]
        plot_profile({c: v for c, v in prof.by_component().items() if c in COMPONENTS}, layout,
                     list(ms), budget, _fig_path(args.out))
    status = "meets" if meets else "misses"
    print(f"wrote {args.out}: {_fmt(tf)} MACs/frame (formula==instrumented: {all_match}); "
          f"p95 {np.percentile(ms, 95):.3f} ms {status} the {budget:.1f} ms budget")
    if not all_match:
        raise CliError(EXIT_NUMERIC, "formula and instrumented MAC counts disagree")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    st = cfg.stft_config()
    model, _ = _load(args.float, S5Model)
    ckpt, _ = _load(args.fxp, FxpCheckpoint)
    if model.spec != ckpt.spec:
        raise CliError(EXIT_NUMERIC, "float model and FXP checkpoint have different specs")
    feats = _features(args.wav, st)
    run = fxp_run(ckpt, ckpt.quantize_input(feats), OverflowPolicy(args.policy))
    if args.reference == "static":
        _, ref = static_quant_eval(model, ckpt.scales, feats)
    else:
        _, ref, _ = model_forward_scan(model, feats)
    report = mismatch_report(ref, run.taps, model.spec, ckpt.scales)
    text = report.to_csv()
    _write_text(args.out, text + f"# overflow_events={run.overflow.total}\n")
    if not args.no_fig:
        from .plotting import plot_mismatch

        plot_mismatch(report, _fig_path(args.out))
    print(f"wrote {args.out}: {len(report.rows)} sites, {run.overflow.total} overflow events")
    return EXIT_OK


def _pareto_point(task):
    series, k, spec_kw, target, suite, st, seed = task
    spec = ModelSpec.scaled(k, **spec_kw)
    model = init_random(spec, seed)
    layout = "dense"
    if series == "sparse_relu":
        model, _, _ = prune_model(relufy(model), erk_allocate(prunable_layers(model), target))
        layout = "csr"
    scores, taps = [], []
    for i in range(suite["mixtures"]):
        noisy, clean = synth_mixture(suite["seed"] + i, suite["seconds"], suite["snr_db"], st.sample_rate)
        res = denoise_stream(model, noisy, st, ("chunked", 64))
        sl = interior(noisy.size, st)
        scores.append(si_snr(res.wave[sl], clean[sl]))
        _, t, _ = model_forward_scan(model, np.abs(stft(noisy, st)))
        taps.append(t)
    macs = effective_macs(spec, measured_densities(taps, spec, model)).total
    mem = memory_footprint(model, layout).total / 1e6
    return {"source": "measured", "series": series, "label": f"k={k:g}", "width": k,
            "effective_macs": f"{float(macs):.3f}", "memory_mb": f"{mem:.6f}", "si_snr_db": f"{np.mean(scores):.4f}"}


def _reference_rows(path) -> list[dict]:
    if path:
        text = Path(path).read_text()
        pts = list(csv.DictReader([ln for ln in text.splitlines() if ln and not ln.startswith("#")]))
    else:
        pts = reference_points()
    if pts and "quantity" not in pts[0]:
        raise CliError(EXIT_DATA, f"{path}: expected columns figure,series,label,quantity,value")
    merged: dict = {}
    for p in pts:
        if p["figure"] != "pareto":
            continue
        row = merged.setdefault((p["series"], p["label"]), {
            "source": "reference", "series": p["series"], "label": p["label"], "width": "",
            "effective_macs": "", "memory_mb": "", "si_snr_db": ""})
        row[p["quantity"]] = p["value"]
    return list(merged.values())


def cmd_pareto(args) -> int:
    cfg = load_config(args.family) if args.family else _config(args)
    st = cfg.stft_config()
    fam = cfg.family
    dense_w = fam.get("widths", [0.25, 0.5])
    sparse_w = fam.get("sparse_widths", [0.5, 1.0])
    target = fam.get("target", 0.9)
    suite = {"mixtures": 2, "seconds": 1.0, "snr_db": 5.0, "seed": 0}
    suite.update(cfg.suite)
    spec_kw = {k: v for k, v in cfg.model.items() if k in ("depth", "n_input", "n_output")}
    tasks = [("dense_gelu", float(k), spec_kw, target, suite, st, cfg.seed) for k in dense_w]
    tasks += [("sparse_relu", float(k), spec_kw, target, suite, st, cfg.seed) for k in sparse_w]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        measured = list(pool.map(_pareto_point, tasks))
    rows = measured + _reference_rows(args.reference)
    cols = ["source", "series", "label", "width", "effective_macs", "memory_mb", "si_snr_db"]
    buf = io.StringIO()
    buf.write("# sparse_s5 pareto v1\n")
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write_text(args.out, buf.getvalue())
    if not args.no_fig:
        from .plotting import plot_pareto

        plot_pareto(rows, _fig_path(args.out))
    print(f"wrote {args.out}: {len(measured)} measured, {len(rows) - len(measured)} reference rows")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparse-s5", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML run configuration")
        sp.set_defaults(func=fn)
        return sp

    sp = add("init", cmd_init, "random stable model")
    sp.add_argument("--spec", help="YAML config whose model section defines the architecture")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("surgery", cmd_surgery, "model surgery (ReLU insertion)")
    sp.add_argument("--relufy", action="store_true")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)

    sp = add("prune", cmd_prune, "ERK allocation and magnitude masks")
    sp.add_argument("--target", type=float)
    sp.add_argument("--epochs", type=int, help="epochs of the declared schedule (report only)")
    sp.add_argument("--steps", type=int, help="total training steps of the declared schedule (report only)")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")

    sp = add("calibrate", cmd_calibrate, "static activation scales")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--audio", help="directory of 16-bit mono WAV files (or one file)")
    sp.add_argument("--synthetic", type=int, default=0, help="add N synthetic mixtures")
    sp.add_argument("--headroom", type=float)
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv", help="also write the scales as CSV")

    sp = add("quantize", cmd_quantize, "freeze into an integer checkpoint")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--scales", required=True)
    sp.add_argument("--out", required=True)

    sp = add("denoise", cmd_denoise, "denoise a WAV file")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--wav", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", default="fall-through", help="fall-through or chunked:N")
    sp.add_argument("--policy", default="saturate", choices=["saturate", "wrap"])

    sp = add("profile", cmd_profile, "MACs, memory, densities and latency")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--wav", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--policy", default="saturate", choices=["saturate", "wrap"])
    sp.add_argument("--no-fig", action="store_true")

    sp = add("compare", cmd_compare, "per-site FXP vs float mismatch")
    sp.add_argument("--float", required=True)
    sp.add_argument("--fxp", required=True)
    sp.add_argument("--wav", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--reference", default="float", choices=["float", "static"])
    sp.add_argument("--policy", default="saturate", choices=["saturate", "wrap"])
    sp.add_argument("--no-fig", action="store_true")

    sp = add("pareto", cmd_pareto, "width sweep with reference overlay")
    sp.add_argument("--family", help="YAML config with family/suite sections")
    sp.add_argument("--reference", help="reference points CSV (defaults to the packaged set)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-fig", action="store_true")
    return p


def _classify(exc: BaseException) -> int:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (StoreError, AudioFormatError, FileNotFoundError, IsADirectoryError, PermissionError)):
        return EXIT_DATA
    if isinstance(exc, (NumericError, FreezeError, AllocationError, MissingSiteError, ArithmeticError, ValueError)):
        return EXIT_NUMERIC
    return EXIT_NUMERIC


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        code = _classify(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"sparse-s5: error code={code} kind={type(exc).__name__} message={msg}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
