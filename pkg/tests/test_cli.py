import csv
import io

import numpy as np
import pytest
import yaml

from sparse_s5.audio import synth_mixture, write_wav
from sparse_s5.cli import main
from sparse_s5.config import ConfigError, RunConfig, load_config


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# sparse_s5 ")
    return list(csv.DictReader(io.StringIO("\n".join(ln for ln in lines if not ln.startswith("#")))))


def write_cfg(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_config_defaults_and_validation(tmp_path):
    cfg = RunConfig.from_dict(None)
    assert cfg.model_spec().n_model == 192 and cfg.headroom == 1.25 and cfg.workers == 1
    good = load_config(write_cfg(tmp_path / "g.yaml", {"model": {"width": 0.5, "depth": 2}, "quant": {"act_bits": 16},
                                                       "workers": 2, "family": {"widths": [0.25, 1]}}))
    assert good.model_spec().n_model == 96 and good.model_spec().depth == 2
    for bad in ({"colour": 1}, {"model": {"widht": 1}}, {"model": {"depth": "3"}}, {"quant": {"act_bits": 12}},
                {"workers": 0}, {"model": []}, {"stft": {"hop": 100}}, {"family": {"widths": [-1]}},
                {"model": {"depth": True}}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "broken.yaml").write_text("model: [unclosed")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.yaml")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    noisy, _ = synth_mixture(0, 0.25)
    write_wav(d / "noisy.wav", noisy)
    cfg = write_cfg(d / "small.yaml", {"model": {"width": 0.125, "depth": 2}, "seed": 3,
                                       "prune": {"epochs": 4, "steps": 400}})
    return d, cfg


def test_pipeline(workspace, capsys):
    d, cfg = workspace
    run = lambda *a: main(list(a))  # noqa: E731
    assert run("init", "--spec", cfg, "--out", str(d / "m.srnn")) == 0
    assert run("surgery", "--relufy", "--in", str(d / "m.srnn"), "--out", str(d / "r.srnn")) == 0
    assert run("prune", "--config", cfg, "--target", "0.8", "--in", str(d / "r.srnn"), "--out", str(d / "p.srnn"),
               "--report", str(d / "erk.csv")) == 0
    rows = read_csv(d / "erk.csv")
    assert len([r for r in rows if r["kind"] == "schedule"]) == 4 * 3 + 1
    assert run("calibrate", "--config", cfg, "--in", str(d / "p.srnn"), "--audio", str(d), "--synthetic", "1",
               "--out", str(d / "s.srnn"), "--csv", str(d / "s.csv")) == 0
    assert run("quantize", "--config", cfg, "--in", str(d / "p.srnn"), "--scales", str(d / "s.srnn"),
               "--out", str(d / "q.srnn")) == 0
    for model in ("p.srnn", "q.srnn"):
        for mode in ("fall-through", "chunked:8"):
            assert run("denoise", "--config", cfg, "--in", str(d / model), "--wav", str(d / "noisy.wav"),
                       "--out", str(d / f"{model}.{mode[:5]}.wav"), "--mode", mode) == 0
    assert run("profile", "--config", cfg, "--in", str(d / "q.srnn"), "--wav", str(d / "noisy.wav"),
               "--out", str(d / "prof.csv")) == 0
    prof = read_csv(d / "prof.csv")
    total = next(r for r in prof if r["section"] == "macs" and r["item"] == "total")
    assert total["formula"] == total["instrumented"] and total["match"] == "1"
    assert {r["item"] for r in prof if r["section"] == "latency"} >= {"mean", "p95", "budget", "meets_budget"}
    assert (d / "prof.png").stat().st_size > 0
    assert run("compare", "--config", cfg, "--float", str(d / "p.srnn"), "--fxp", str(d / "q.srnn"),
               "--wav", str(d / "noisy.wav"), "--out", str(d / "mm.csv"), "--reference", "static") == 0
    mm = read_csv(d / "mm.csv")
    assert len(mm) == 2 + 2 * 8 + 2
    assert (d / "mm.png").exists()
    assert "error" not in capsys.readouterr().err


def test_idempotent_outputs(workspace):
    d, cfg = workspace
    for name in ("a", "b"):
        main(["init", "--spec", cfg, "--seed", "9", "--out", str(d / f"i{name}.srnn")])
        main(["prune", "--config", cfg, "--in", str(d / f"i{name}.srnn"), "--out", str(d / f"j{name}.srnn"),
              "--report", str(d / f"j{name}.csv")])
    assert (d / "ia.srnn").read_bytes() == (d / "ib.srnn").read_bytes()
    assert (d / "ja.srnn").read_bytes() == (d / "jb.srnn").read_bytes()
    assert (d / "ja.csv").read_text() == (d / "jb.csv").read_text()


def test_prune_base_report(tmp_path):
    assert main(["init", "--out", str(tmp_path / "m.srnn")]) == 0
    assert main(["prune", "--target", "0.9", "--in", str(tmp_path / "m.srnn"), "--out", str(tmp_path / "p.srnn"),
                 "--report", str(tmp_path / "erk.csv")]) == 0
    g = next(r for r in read_csv(tmp_path / "erk.csv") if r["kind"] == "global")
    assert 0.895 <= float(g["realized_sparsity"]) <= 0.905


def test_profile_dense_base(tmp_path):
    noisy, _ = synth_mixture(1, 0.1)
    write_wav(tmp_path / "x.wav", noisy)
    main(["init", "--out", str(tmp_path / "m.srnn")])
    assert main(["profile", "--in", str(tmp_path / "m.srnn"), "--wav", str(tmp_path / "x.wav"),
                 "--out", str(tmp_path / "p.csv"), "--no-fig"]) == 0
    total = next(r for r in read_csv(tmp_path / "p.csv") if r["section"] == "macs" and r["item"] == "total")
    assert total["formula"] == total["instrumented"] == "803904"
    assert not (tmp_path / "p.png").exists()


def test_pareto_has_reference_row(tmp_path):
    fam = write_cfg(tmp_path / "fam.yaml", {"family": {"widths": [0.125], "sparse_widths": [0.125]},
                                            "suite": {"mixtures": 1, "seconds": 0.25}})
    assert main(["pareto", "--family", fam, "--out", str(tmp_path / "pareto.csv")]) == 0
    rows = read_csv(tmp_path / "pareto.csv")
    assert any(r["series"] == "previous_sota" and float(r["si_snr_db"]) == 15.2 for r in rows)
    assert [r["series"] for r in rows if r["source"] == "measured"] == ["dense_gelu", "sparse_relu"]
    assert (tmp_path / "pareto.png").exists()


def _err(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("sparse-s5: error code=")
    return err[0]


def test_exit_codes(tmp_path, capsys):
    bad = write_cfg(tmp_path / "bad.yaml", {"model": {"sizes": 3}})
    assert main(["init", "--spec", bad, "--out", str(tmp_path / "x.srnn")]) == 2
    assert "code=2" in _err(capsys)
    (tmp_path / "junk.srnn").write_bytes(b"JUNK" + bytes(20))
    assert main(["surgery", "--relufy", "--in", str(tmp_path / "junk.srnn"), "--out", str(tmp_path / "y.srnn")]) == 3
    assert "BadMagicError" in _err(capsys)
    assert main(["surgery", "--relufy", "--in", str(tmp_path / "none.srnn"), "--out", str(tmp_path / "y.srnn")]) == 3
    _err(capsys)
    spec = write_cfg(tmp_path / "s.yaml", {"model": {"width": 0.125, "depth": 1}})
    main(["init", "--spec", spec, "--out", str(tmp_path / "g.srnn")])
    main(["calibrate", "--config", spec, "--in", str(tmp_path / "g.srnn"), "--synthetic", "1",
          "--out", str(tmp_path / "gs.srnn")])
    capsys.readouterr()
    assert main(["quantize", "--in", str(tmp_path / "g.srnn"), "--scales", str(tmp_path / "gs.srnn"),
                 "--out", str(tmp_path / "gq.srnn")]) == 4
    assert "FreezeError" in _err(capsys)
    assert main(["calibrate", "--in", str(tmp_path / "g.srnn"), "--out", str(tmp_path / "e.srnn")]) == 3
    _err(capsys)
    # wrong entity kind: a scale set where a model is expected
    assert main(["surgery", "--relufy", "--in", str(tmp_path / "gs.srnn"), "--out", str(tmp_path / "z.srnn")]) == 3
    _err(capsys)
    assert main(["surgery", "--in", str(tmp_path / "g.srnn"), "--out", str(tmp_path / "z.srnn")]) == 2
    _err(capsys)
    with pytest.raises(SystemExit) as exc:
        main(["denoise", "--in", "x"])
    assert exc.value.code == 2
