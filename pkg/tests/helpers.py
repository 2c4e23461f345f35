"""Shared builders for the quantization and integer-runtime tests."""
import json
import struct
from fractions import Fraction

import numpy as np

from sparse_s5.compressor import erk_allocate, prunable_layers, prune_model
from sparse_s5.quantizer import calibrate
from sparse_s5.s5 import ModelSpec, init_random, relufy


def random_spec(r: np.random.Generator, max_depth=3, max_model=192) -> ModelSpec:
    M = int(r.integers(4, max_model + 1))
    return ModelSpec(depth=int(r.integers(1, max_depth + 1)), n_input=int(r.integers(4, 40)), n_model=M,
                     n_ssm=int(r.integers(4, max(5, 4 * M // 3))), n_output=int(r.integers(4, 40)))


def sparse_relu_model(spec: ModelSpec, seed: int, sparsity: float = 0.8):
    model = relufy(init_random(spec, seed))
    if sparsity > 0:
        model, _, _ = prune_model(model, erk_allocate(prunable_layers(model), sparsity))
    return model


def calibrated(model, seed: int, T: int = 64, n_seq: int = 2, headroom: float = 1.25, recipe=None):
    r = np.random.default_rng(seed)
    seqs = [np.abs(r.standard_normal((T, model.spec.n_input))) for _ in range(n_seq)]
    return calibrate(model, seqs, recipe, headroom=headroom), seqs


def exact_enc_out(ckpt, u):
    """Unnarrowed enc_out codes in exact rational arithmetic."""
    W, b = ckpt.weights["encoder.W"].astype(int), ckpt.weights["encoder.b"].astype(int)
    qw, qb = ckpt.requant["enc_out:W"], ckpt.requant["enc_out:b"]
    out = []
    for i in range(W.shape[0]):
        acc = sum(int(W[i, j]) * int(u[j]) for j in range(W.shape[1]))
        out.append(round_fraction(acc * qw.value + int(b[i]) * qb.value))
    return out


def round_fraction(q: Fraction) -> int:
    n = (2 * abs(q.numerator) + q.denominator) // (2 * q.denominator)
    return n if q >= 0 else -n


def blob_offsets(data: bytes):
    """(name, payload offset, length) for every blob, walked independently of the loader."""
    _, mlen = struct.unpack_from("<IQ", data, 4)
    manifest = json.loads(data[16:16 + mlen])
    pos = 16 + mlen
    pos += -pos % 8
    out = []
    for e in manifest["entries"]:
        n, crc, _ = struct.unpack_from("<QII", data, pos)
        assert pos % 8 == 0
        out.append((e["name"], pos + 16, n))
        pos += 16 + n
        pos += -pos % 8
    assert pos == len(data)
    return manifest, out
