import csv
import io
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import calibrated, sparse_relu_model
from sparse_s5.quantizer import (
    MissingSiteError, QuantRecipe, QuantScale, ScaleSet, activation_sites, calibrate, dequantize, fake_quant,
    fit_scale, quantize, round_half_away, site_tensors, static_quant_eval, weight_sites,
)
from sparse_s5.s5 import ModelSpec, S5Model, init_random, model_forward_scan, relufy


def test_fit_scale_examples():
    assert fit_scale(np.array([0.5, -1.0]), 8).scale == 127.0
    assert fit_scale(np.array([4.0, 1.0]), 16).scale == 32767 / 4
    z = fit_scale(np.zeros(5), 16)
    assert z.degenerate and z.scale == 1.0
    assert z.zero_point == 0 and z.qmax == 32767


def test_bad_scales():
    with pytest.raises(ValueError):
        QuantScale("x", 4, 1.0, 1.0)
    with pytest.raises(ValueError):
        QuantScale("x", 8, 0.0, 1.0)


def test_round_half_away():
    np.testing.assert_array_equal(round_half_away([0.5, -0.5, 1.5, -2.5, 0.49, -0.51]), [1, -1, 2, -3, 0, -1])


def test_quantize_endpoints():
    s = fit_scale(np.array([3.0]), 8)
    assert quantize(0.0, s) == 0
    assert quantize(3.0, s) == 127 and quantize(-3.0, s) == -127
    assert quantize(1e9, s) == 127 and quantize(-1e9, s) == -127
    assert quantize(np.ones(2), fit_scale(np.ones(1), 16)).dtype == np.int16


@given(st.sampled_from([8, 16]), st.floats(1e-3, 1e3), st.lists(st.floats(-1, 1), min_size=1, max_size=50))
def test_fake_quant_bound_and_idempotence(bits, absmax, frac):
    s = fit_scale(np.array([absmax]), bits)
    x = np.array(frac) * absmax
    fq = fake_quant(x, s)
    # float evaluation of x*s and q/s may each land one ulp off a tie
    assert np.all(np.abs(fq - x) <= 0.5 / s.scale + 2 * np.spacing(np.abs(x)))
    np.testing.assert_array_equal(fake_quant(fq, s), fq)
    np.testing.assert_array_equal(dequantize(quantize(x, s), s), fq)


@given(st.sampled_from([8, 16]), st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.floats(0.01, 100))
def test_quantize_range_closed(bits, xs, scale):
    s = QuantScale("x", bits, scale, 1.0)
    q = quantize(np.array(xs), s).astype(np.int64)
    assert q.min() >= -s.qmax and q.max() <= s.qmax


def test_recipe_defaults(tiny_spec):
    r = QuantRecipe()
    assert r.bits("layers.0.lambda") == 16
    assert r.bits("layers.1.B") == 8 and r.bits("encoder.W") == 8
    assert r.bits("layers.0.state") == 16 and r.bits("input") == 16
    sites = r.sites(tiny_spec)
    assert len(sites) == len(set(weight_sites(tiny_spec)) | set(activation_sites(tiny_spec)))


def test_scaleset_require(tiny_relu):
    scales, _ = calibrated(tiny_relu, 0)
    scales.require(tiny_relu.spec)
    partial = ScaleSet({k: v for k, v in scales.items() if k != "layers.1.gate"})
    with pytest.raises(MissingSiteError):
        partial.require(tiny_relu.spec)
    rows = list(csv.reader(io.StringIO(scales.to_csv().split("\n", 1)[1])))
    assert rows[0] == ["site", "bits", "scale", "absmax", "degenerate"]
    assert len(rows) - 1 == len(scales)


def _bias_free(model: S5Model) -> S5Model:
    t = {k: np.zeros_like(v) for k, v in model.tensors().items() if k.endswith(("norm_shift", ".b"))}
    t.update({k: np.zeros_like(v) for k, v in model.tensors().items() if k == "decoder.b"})
    return model.with_tensors(t)


def test_calibrate_zero_sequence_degenerate(tiny_relu, caplog):
    m = _bias_free(tiny_relu)
    with caplog.at_level(logging.WARNING):
        scales = calibrate(m, [np.zeros((10, m.spec.n_input))])
    for site in activation_sites(m.spec):
        # the gate range is the sigmoid codomain, never measured
        assert scales[site].degenerate == (not site.endswith(".gate")), site
    assert "degenerate" in caplog.text


def test_calibrate_linear_site_scaling(tiny_relu, rng):
    U = np.abs(rng.standard_normal((20, tiny_relu.spec.n_input)))
    a = calibrate(tiny_relu, [U])
    b = calibrate(tiny_relu, [2 * U])
    for site in ("input", "enc_out"):
        assert b[site].scale == pytest.approx(a[site].scale / 2, rel=1e-12)
    for site in weight_sites(tiny_relu.spec):
        assert a[site] == b[site]


def test_calibrate_parallel_equals_serial(tiny_relu, rng):
    seqs = [rng.standard_normal((int(rng.integers(3, 30)), tiny_relu.spec.n_input)) for _ in range(7)]
    assert calibrate(tiny_relu, seqs, workers=1) == calibrate(tiny_relu, seqs, workers=4)
    assert calibrate(tiny_relu, seqs) == calibrate(tiny_relu, seqs[::-1])


def test_calibrate_errors(tiny_relu):
    with pytest.raises(ValueError):
        calibrate(tiny_relu, [])
    with pytest.raises(ValueError):
        calibrate(tiny_relu, [np.zeros((2, tiny_relu.spec.n_input))], headroom=0.5)


def test_static_quant_fine_scales_match_float(rng):
    # Weights are snapped onto their own 8/16-bit grids so weight rounding is
    # lossless; biases and shifts are zeroed so every activation stays tiny,
    # and every measured site then gets scale qmax/eps.
    spec = ModelSpec(depth=2, n_input=7, n_model=9, n_ssm=11, n_output=6)
    base = relufy(init_random(spec, 8))
    recipe = QuantRecipe()
    t = base.tensors()
    scales = ScaleSet()
    snapped = {}
    for site in weight_sites(spec):
        vals = np.concatenate([np.abs(t[n]).ravel() for n in site_tensors(site)])
        scales[site] = fit_scale(vals, recipe.bits(site), site)
        for n in site_tensors(site):
            zero = n.endswith((".b", "norm_shift"))
            snapped[n] = np.zeros_like(t[n]) if zero else fake_quant(t[n], scales[site])
    model = base.with_tensors(snapped)
    eps = 1e-3
    for site in activation_sites(spec):
        bits = recipe.bits(site)
        absmax = 1.0 if site.endswith(".gate") else eps  # the sigmoid codomain cannot shrink
        scales[site] = QuantScale(site, bits, ((1 << (bits - 1)) - 1) / absmax, absmax)
    U = 1e-4 * np.abs(rng.standard_normal((12, spec.n_input)))
    _, ft, _ = model_forward_scan(model, U)
    assert max(np.abs(v).max() for k, v in ft.items() if not k.endswith(".gate")) < eps
    Yq, _ = static_quant_eval(model, scales, U)
    Yf, _, _ = model_forward_scan(model, U)
    assert np.abs(Yq - Yf).max() <= 1e-6


def test_static_quant_missing_site_and_determinism(tiny_relu, rng):
    scales, seqs = calibrated(tiny_relu, 1)
    a = static_quant_eval(tiny_relu, scales, seqs[0])
    b = static_quant_eval(tiny_relu, scales, seqs[0])
    np.testing.assert_array_equal(a[0], b[0])
    for k in a[1]:
        np.testing.assert_array_equal(a[1][k], b[1][k])
    broken = ScaleSet(scales)
    del broken["layers.0.state"]
    with pytest.raises(MissingSiteError):
        static_quant_eval(tiny_relu, broken, seqs[0])
    with pytest.raises(ValueError):
        static_quant_eval(tiny_relu, scales, seqs[0], sigmoid="spline")


def _interval_bound(model, scales, U):
    """Elementwise worst-case output error of the fake-quant pass, propagated site by site.

    Uses the exact weight rounding errors, Lipschitz constants (1 for ReLU,
    1/4 for the sigmoid) and half a step of rounding at every activation site.
    """
    spec = model.spec
    assert spec.depth == 1
    _, ft, _ = model_forward_scan(model, U)
    _, qt = static_quant_eval(model, scales, U, recipe=QuantRecipe(act_bits=8))
    t = model.tensors()
    fq = lambda name, site: fake_quant(t[name], scales[site])  # noqa: E731
    err = lambda name, site: np.abs(fq(name, site) - t[name])  # noqa: E731
    half = lambda site: 0.5 / scales[site].scale  # noqa: E731
    p = "layers.0."
    N = spec.n_ssm
    Bq = np.vstack([fq(p + "B_re", p + "B"), fq(p + "B_im", p + "B")])
    Be = np.vstack([err(p + "B_re", p + "B"), err(p + "B_im", p + "B")])
    Cq = np.hstack([fq(p + "C_re", p + "C"), -fq(p + "C_im", p + "C")])
    Ce = np.hstack([err(p + "C_re", p + "C"), err(p + "C_im", p + "C")])
    lr, li = fq(p + "lambda_re", p + "lambda"), fq(p + "lambda_im", p + "lambda")
    lre, lie = err(p + "lambda_re", p + "lambda"), err(p + "lambda_im", p + "lambda")
    e_x = np.zeros(2 * N)
    x_prev = np.zeros(2 * N)
    bounds = []
    for k, u in enumerate(U):
        e_u = np.full(u.shape, half("input"))
        e_h = np.abs(fq("encoder.W", "encoder.W")) @ e_u + err("encoder.W", "encoder.W") @ np.abs(u) \
            + err("encoder.b", "encoder.b") + half("enc_out")
        h = ft["enc_out"][k]
        e_a = np.abs(fq(p + "norm_scale", p + "norm_scale")) * e_h + err(p + "norm_scale", p + "norm_scale") * np.abs(h) \
            + err(p + "norm_shift", p + "norm_shift") + half(p + "pre_b")
        a = ft[p + "pre_b"][k]
        e_bu = np.abs(Bq) @ e_a + Be @ np.abs(a)
        xr, xi = np.abs(x_prev[:N]), np.abs(x_prev[N:])
        er, ei = e_x[:N], e_x[N:]
        e_vr = np.abs(lr) * er + np.abs(li) * ei + lre * xr + lie * xi + e_bu[:N]
        e_vi = np.abs(lr) * ei + np.abs(li) * er + lre * xi + lie * xr + e_bu[N:]
        e_x = np.concatenate([e_vr, e_vi]) + half(p + "state")
        x_prev = ft[p + "state"][k]
        r = ft[p + "pre_c"][k]
        e_y = np.abs(Cq) @ e_x + Ce @ np.abs(r) + np.abs(fq(p + "D", p + "D")) * e_a + err(p + "D", p + "D") * np.abs(a)
        e_t = e_y + half(p + "pre_glu")
        tt = ft[p + "pre_glu"][k]
        e_gp = np.abs(fq(p + "glu_W", p + "glu_W")) @ e_t + err(p + "glu_W", p + "glu_W") @ np.abs(tt) + half(p + "gate_pre")
        e_gate = e_gp / 4 + half(p + "gate")
        e_g = np.abs(qt[p + "gate"][k]) * e_t + np.abs(tt) * e_gate + half(p + "glu_out")
        e_h2 = e_h + e_g + half(p + "res_out")
        h2 = ft[p + "res_out"][k]
        e_out = np.abs(fq("decoder.W", "decoder.W")) @ e_h2 + err("decoder.W", "decoder.W") @ np.abs(h2) \
            + err("decoder.b", "decoder.b") + half("output")
        bounds.append(e_out)
    return np.array(bounds)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_static_quant_coarse_within_interval_bound(seed):
    spec = ModelSpec(depth=1, n_input=6, n_model=8, n_ssm=10, n_output=5)
    model = relufy(init_random(spec, seed))
    recipe = QuantRecipe(act_bits=8)
    scales, seqs = calibrated(model, seed, T=24, n_seq=1, recipe=recipe)
    U = seqs[0]
    Yq, _ = static_quant_eval(model, scales, U, recipe=recipe)
    Yf, _, _ = model_forward_scan(model, U)
    bound = _interval_bound(model, scales, U)
    assert np.all(np.abs(Yq - Yf) <= bound + 1e-12)
    assert np.abs(Yq - Yf).max() > 0


def test_dense_gelu_model_quantizable_in_float(tiny_model, rng):
    scales = calibrate(tiny_model, [rng.standard_normal((16, tiny_model.spec.n_input))], headroom=1.25)
    Y, _ = static_quant_eval(tiny_model, scales, rng.standard_normal((5, tiny_model.spec.n_input)))
    assert np.isfinite(Y).all()


def test_table_sigmoid_close_to_exact():
    model = sparse_relu_model(ModelSpec(depth=2, n_input=12, n_model=16, n_ssm=20, n_output=12), 4)
    scales, seqs = calibrated(model, 4)
    a, ta = static_quant_eval(model, scales, seqs[0], sigmoid="exact")
    b, tb = static_quant_eval(model, scales, seqs[0], sigmoid="table")
    step = 1 / scales["layers.0.gate"].scale
    assert np.abs(ta["layers.0.gate"] - tb["layers.0.gate"]).max() <= 2 * step + 1e-15
