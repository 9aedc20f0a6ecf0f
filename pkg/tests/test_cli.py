import json
import subprocess
import sys

import numpy as np
import pytest

from rirflow.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SOLVER, main
from rirflow.core import SignalBuffer, noise_sigma_from_snr, read_wav, rt_to_lambda, synth_rir, write_wav
from rirflow.forward_ops import ConvOperator, ess_sweep
from rirflow.metrics import st_nmse

FS = 8000


@pytest.fixture(scope="module")
def truth():
    return synth_rir([0.4, 0.35, 0.3, 0.25, 0.2], 0.25, 2400, FS, seed=21)


@pytest.fixture
def denoise_files(tmp_path, truth):
    sigma = noise_sigma_from_snr(truth, 30.0, "early_50ms")
    y = truth.samples + sigma * np.random.default_rng(0).standard_normal(len(truth))
    return write_wav(tmp_path / "y.wav", SignalBuffer(y, FS)), write_wav(tmp_path / "x.wav", truth), sigma


def test_denoise_end_to_end(tmp_path, denoise_files):
    y, x, sigma = denoise_files
    out = tmp_path / "est.wav"
    code = main(["denoise", str(y), "--sigma-n", repr(float(sigma)), "--steps", "60", "--seed", "1", "--out", str(out),
                 "--truth", str(x)])
    assert code == EXIT_OK
    report = json.loads(out.with_suffix(".json").read_text())
    assert report["task"] == "denoise" and report["flow"]["steps_T"] == 60
    assert report["wall_clock_s"] >= 0 and out.with_suffix(".stnmse.csv").is_file()
    truth, est = read_wav(x), read_wav(out)
    assert est.samples.dtype == np.float64 and len(est) == len(truth)
    assert st_nmse(truth, est).avg < st_nmse(truth, read_wav(y)).avg
    # same seed, same bytes
    out2 = tmp_path / "est2.wav"
    main(["denoise", str(y), "--sigma-n", repr(float(sigma)), "--steps", "60", "--seed", "1", "--out", str(out2)])
    assert out.read_bytes() == out2.read_bytes()


def test_exit_codes(tmp_path, denoise_files):
    y, _, _ = denoise_files
    out = str(tmp_path / "o.wav")
    assert main(["denoise", str(y), "--out", out]) == EXIT_CONFIG  # no noise level
    assert main(["denoise", str(y), "--sigma-n", "0.01", "--gamma", "3", "--out", out]) == EXIT_CONFIG
    assert main(["denoise", str(tmp_path / "missing.wav"), "--sigma-n", "0.01", "--out", out]) == EXIT_IO
    bad = tmp_path / "bad.toml"
    bad.write_text("[flow]\nstpes = 3\n")
    assert main(["denoise", str(y), "--sigma-n", "0.01", "--config", str(bad), "--out", out]) == EXIT_CONFIG
    assert main(["denoise", str(y), "--sigma-n", "0.01", "--config", str(tmp_path / "no.toml"),
                 "--out", out]) == EXIT_CONFIG
    garbage = tmp_path / "garbage.wav"
    garbage.write_bytes(b"not a wav file")
    assert main(["denoise", str(garbage), "--sigma-n", "0.01", "--out", out]) == EXIT_IO
    (tmp_path / "dir.wav").mkdir()
    assert main(["denoise", str(y), "--sigma-n", "0.01", "--steps", "5", "--out", str(tmp_path / "dir.wav")]) == EXIT_IO
    write_wav(tmp_path / "r16.wav", SignalBuffer(np.ones(100) * 0.1, 16000))
    assert main(["denoise", str(tmp_path / "r16.wav"), "--sigma-n", "0.01", "--out", out]) == EXIT_CONFIG


def test_solver_failure_exit_code(tmp_path, truth):
    h = ess_sweep(0.05, 50.0, sample_rate=FS).samples
    op = ConvOperator(h, len(truth))
    y = write_wav(tmp_path / "y.wav", SignalBuffer(op.apply(truth.samples), FS))
    k = write_wav(tmp_path / "k.wav", SignalBuffer(h, FS))
    cfg = tmp_path / "c.toml"
    cfg.write_text("[solver]\ncg_max_iter = 1\ncg_rel_tol = 1e-14\n")
    code = main(["deconv", str(y), "--kernel", str(k), "--sigma-n", "1e-4", "--steps", "5", "--config", str(cfg),
                 "--out", str(tmp_path / "o.wav")])
    assert code == EXIT_SOLVER


def test_deconv_and_baselines(tmp_path, truth):
    h = ess_sweep(0.05, 50.0, sample_rate=FS).samples
    op = ConvOperator(h, len(truth))
    y = op.apply(truth.samples)
    sigma = 1e-3 * np.sqrt(np.mean(y ** 2))
    y = y + sigma * np.random.default_rng(1).standard_normal(y.size)
    yp = write_wav(tmp_path / "y.wav", SignalBuffer(y, FS))
    kp = write_wav(tmp_path / "k.wav", SignalBuffer(h, FS))
    xp = write_wav(tmp_path / "x.wav", truth)
    common = ["--kernel", str(kp), "--sigma-n", repr(float(sigma)), "--truth", str(xp)]
    assert main(["deconv", str(yp), *common, "--steps", "30", "--out", str(tmp_path / "f.wav")]) == EXIT_OK
    for method in ("l2", "l2_truncshape"):
        out = tmp_path / f"{method}.wav"
        assert main(["baseline", "deconv", str(yp), "--method", method, *common, "--out", str(out)]) == EXIT_OK
        report = json.loads(out.with_suffix(".json").read_text())
        assert report["method"] == method and np.isfinite(report["metrics"]["st_nmse_avg"])
    assert main(["baseline", "deconv", str(yp), "--method", "huber", *common,
                 "--out", str(tmp_path / "h.wav")]) == EXIT_CONFIG
    assert main(["deconv", str(yp), "--kernel", str(kp), "--sigma-n", "0.1", "--length", "7",
                 "--out", str(tmp_path / "g.wav")]) == EXIT_CONFIG


def test_inpaint_keeps_observed_samples(tmp_path, truth):
    sigma = noise_sigma_from_snr(truth, 100.0, "rms_full")
    yp = write_wav(tmp_path / "y.wav", truth)
    out = tmp_path / "est.wav"
    assert main(["inpaint", str(yp), "--sigma-n", repr(float(sigma)), "--gaps", "0.05:0.08,0.15:0.2", "--steps", "40",
                 "--out", str(out)]) == EXIT_OK
    est = read_wav(out).samples
    keep = np.ones(len(truth), bool)
    keep[400:640] = keep[1200:1600] = False
    obs = truth.samples[keep].astype(np.float32).astype(np.float64)
    err = est[keep] - obs
    assert 10 * np.log10(err @ err / (obs @ obs)) < -80.0
    assert main(["inpaint", str(yp), "--sigma-n", "0.1", "--gaps", "oops", "--out", str(out)]) == EXIT_CONFIG


def test_synth_manifest(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[corpus]\nduration_s = 0.2\nrt_min = 0.3\nrt_max = 0.6\n")
    assert main(["synth", "--config", str(cfg), "--n-items", "3", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["synth", "--config", str(cfg), "--n-items", "3", "--out", str(tmp_path / "b")]) == EXIT_OK
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(manifest) == 3
    for entry in manifest:
        np.testing.assert_allclose(entry["lambda"], rt_to_lambda(np.array(entry["rt_seconds"]), FS), rtol=1e-15)
        a = (tmp_path / "a" / entry["file"]).read_bytes()
        assert a == (tmp_path / "b" / entry["file"]).read_bytes()
    assert (tmp_path / "a" / "config.toml").read_text() == cfg.read_text()


def test_experiment_command(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[experiment]\ntask = "denoise"\nmethods = ["noisy", "trunc_shape"]\n\n'
                   "[corpus]\nduration_s = 0.3\nrt_min = 0.2\nrt_max = 0.4\n")
    args = ["experiment", "--config", str(cfg), "--n-items", "2", "--snr-db", "30", "--snr-db", "20"]
    assert main([*args, "--out", str(tmp_path / "r1")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "r2")]) == EXIT_OK
    assert "noisy@30dB" in capsys.readouterr().out
    for name in ("results.csv", "frames.csv", "summary.json", "config.toml"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    assert (tmp_path / "r1" / "config.toml").read_text() == cfg.read_text()
    assert main(["experiment", "--config", str(cfg)]) == EXIT_CONFIG  # no output directory


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rirflow", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "rirflow" in res.stdout
    res = subprocess.run([sys.executable, "-m", "rirflow", "nonsense"], capture_output=True, text=True)
    assert res.returncode == 2
