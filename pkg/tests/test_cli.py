import subprocess
import sys

import numpy as np
import pytest

from nldenoise import models
from nldenoise.cli import main
from nldenoise.imagecore import ImageF32, NoiseSpec, add_awgn, cpsnr, load_png, save_png
from nldenoise.nn.params import save_weights


@pytest.fixture
def clean_png(tmp_path):
    rng = np.random.default_rng(0)
    img = ImageF32(0.3 + 0.4 * rng.random((3, 40, 40), dtype=np.float32))
    path = tmp_path / "clean.png"
    save_png(img, path)
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_model(tmp_path, flexible=False):
    spec = (models.build_flexible(models.FlexNetConfig(widths=(4, 4, 6, 8))) if flexible
            else models.build_fixed(models.FixedNetConfig(K=3, width=4)))
    d = tmp_path / ("flex" if flexible else "fixed")
    d.mkdir()
    save_weights(models.init_params(spec, 0, zero_head=True), d / "weights.nlwt")
    spec.save(d / "model.toml")
    return d


def test_noise_subcommand(tmp_path, clean_png, capsys):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    assert run(["noise", clean_png, a, "--sigma", 25, "--seed", 3], capsys)[0] == 0
    assert run(["noise", clean_png, b, "--sigma", 25, "--seed", 3], capsys)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    z = tmp_path / "z.png"
    run(["noise", clean_png, z, "--sigma", 0], capsys)
    assert np.array_equal(load_png(z).data, load_png(clean_png).data)
    x = load_png(clean_png)
    noise = load_png(a).data - x.data
    assert 22 / 255 < noise.std() < 28 / 255


def test_noise_statistics_through_files(tmp_path, capsys):
    flat = tmp_path / "flat.png"
    save_png(ImageF32(np.full((3, 256, 384), 0.5, np.float32)), flat, bitdepth=16)
    out = tmp_path / "n.png"
    run(["noise", flat, out, "--sigma", 25, "--seed", 1, "--bitdepth", 16], capsys)
    n = load_png(out).data.astype(np.float64) - 0.5
    assert abs(n.mean()) < 0.6 / 255 and 24.7 / 255 <= n.std() <= 25.3 / 255


def test_denoise_prints_cpsnr(tmp_path, clean_png, capsys):
    noisy = tmp_path / "n.png"
    run(["noise", clean_png, noisy, "--sigma", 25, "--seed", 1], capsys)
    out = tmp_path / "d.png"
    meta = tmp_path / "meta.json"
    code, text, _ = run(["denoise", noisy, out, "--sigma", 25, "--method", "bm3d",
                         "--reference", clean_png, "--meta", meta], capsys)
    assert code == 0 and text.startswith("CPSNR ")
    assert float(text.split()[1]) == pytest.approx(cpsnr(load_png(clean_png), load_png(out)), abs=0.01)
    assert '"algorithm": "cbm3d"' in meta.read_text()


def test_denoise_sigma_zero_nlm(tmp_path, clean_png, capsys):
    out = tmp_path / "o.png"
    assert run(["denoise", clean_png, out, "--sigma", 0, "--method", "nlm"], capsys)[0] == 0
    assert np.array_equal(load_png(out).data, load_png(clean_png).data)


def test_denoise_hybrid_with_weights(tmp_path, clean_png, capsys):
    wdir = write_model(tmp_path)
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    assert run(["denoise", clean_png, a, "--sigma", 20, "--method", "hybrid-fixed",
                "--weights", wdir, "--preprocessor", "nlm"], capsys)[0] == 0
    run(["denoise", clean_png, b, "--sigma", 20, "--method", "nlm"], capsys)
    assert a.read_bytes() == b.read_bytes()  # zero residual
    fdir = write_model(tmp_path, flexible=True)
    assert run(["denoise", clean_png, a, "--sigma", 20, "--method", "hybrid-flex",
                "--weights", fdir / "weights.nlwt"], capsys)[0] == 0


def test_missing_weights_exit_3(tmp_path, clean_png, capsys):
    out = tmp_path / "o.png"
    code, _, err = run(["denoise", clean_png, out, "--sigma", 25, "--method", "hybrid-fixed",
                        "--weights", tmp_path / "nope"], capsys)
    assert code == 3 and err.startswith("ERROR:io ") and len(err.strip().splitlines()) == 1
    assert not out.exists()


def test_model_mismatch_exit_4(tmp_path, clean_png, capsys):
    wdir = write_model(tmp_path)
    out = tmp_path / "o.png"
    code, _, err = run(["denoise", clean_png, out, "--sigma", 25, "--method", "hybrid-flex",
                        "--weights", wdir], capsys)
    assert code == 4 and err.startswith("ERROR:model ")
    assert not out.exists()


def test_bad_arguments_exit_2(tmp_path, clean_png, capsys):
    assert run(["denoise", clean_png, tmp_path / "o.png"], capsys)[0] == 2
    assert run(["denoise", clean_png, tmp_path / "o.png", "--sigma", 5, "--method", "hybrid-fixed"],
               capsys)[0] == 2
    code, _, err = run(["flops", "--arch", "wide"], capsys)
    assert code == 2 and err.startswith("ERROR:usage")
    assert run([], capsys)[0] == 2
    assert run(["denoise", tmp_path / "missing.png", tmp_path / "o.png", "--sigma", 5], capsys)[0] == 3


def test_eval_csv_and_determinism(tmp_path, clean_png, capsys):
    data = tmp_path / "set"
    data.mkdir()
    clean_png.rename(data / "b.png")
    save_png(ImageF32(np.full((1, 24, 24), 0.5, np.float32)), data / "a.png")
    o1, o2 = tmp_path / "1.csv", tmp_path / "2.csv"
    args = ["eval", "--dataset", data, "--sigmas", "50,25", "--method", "nlm", "--name", "toy"]
    assert run(args + ["--out", o1], capsys)[0] == 0
    run(args + ["--out", o2], capsys)
    assert o1.read_bytes() == o2.read_bytes()
    lines = o1.read_text().splitlines()
    assert lines[0] == "dataset,sigma,method,cpsnr_db"
    assert [l.split(",")[1] for l in lines[1:]] == ["25", "50"]


def test_eval_single_image_row_is_its_cpsnr(tmp_path, clean_png, capsys):
    from nldenoise.nlm import nlm_denoise
    from nldenoise.pipeline import noise_seed

    data = tmp_path / "one"
    data.mkdir()
    clean_png.rename(data / "x.png")
    code, text, _ = run(["eval", "--dataset", data, "--sigmas", "25", "--method", "nlm"], capsys)
    x = load_png(data / "x.png")
    noise = NoiseSpec(25, noise_seed("one", 0, 25.0))
    want = cpsnr(x, nlm_denoise(add_awgn(x, noise), noise).clamped())
    assert text.splitlines()[1] == f"one,25,nlm,{want:.2f}"


def test_eval_empty_dataset_exit_2(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code, _, err = run(["eval", "--dataset", tmp_path / "empty"], capsys)
    assert code == 2 and err.startswith("ERROR:data")


def test_flops_report(capsys):
    code, text, _ = run(["flops", "--arch", "fixed:10", "--size", "512x512"], capsys)
    assert code == 0
    total = float(text.split("total: ")[1].split()[0])
    assert total == pytest.approx(78.82, rel=0.015)
    assert "model size: 1.21 MB" in text
    _, big, _ = run(["flops", "--arch", "flex", "--size", "1600x1200"], capsys)
    assert float(big.split("total: ")[1].split()[0]) == pytest.approx(33.12, rel=0.15)
    code, _, err = run(["flops", "--arch", "flex", "--size", "100x100"], capsys)
    assert code == 4 and err.startswith("ERROR:model")


def test_config_file_and_override(tmp_path, clean_png, capsys):
    cfg = tmp_path / "run.toml"
    cfg.write_text('sigma = 25\nmethod = "nlm"\nseed = 4\n')
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    assert run(["noise", clean_png, a, "--config", cfg], capsys)[0] == 0
    run(["noise", clean_png, b, "--sigma", 25, "--seed", 4], capsys)
    assert a.read_bytes() == b.read_bytes()
    run(["noise", clean_png, b, "--config", cfg, "--seed", 5], capsys)
    assert a.read_bytes() != b.read_bytes()
    bad = tmp_path / "bad.toml"
    bad.write_text("colour = 3\n")
    assert run(["noise", clean_png, a, "--config", bad], capsys)[0] == 2


def test_train_subcommand(tmp_path, capsys):
    data = tmp_path / "train"
    data.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        save_png(ImageF32(rng.random((3, 40, 40), dtype=np.float32)), data / f"{i}.png")
    out = tmp_path / "run"
    code, text, _ = run(["train", "--dataset", data, "--arch", "fixed:3", "--width", "4",
                         "--preprocessor", "identity", "--steps", 3, "--batch-size", 2,
                         "--patch-size", 16, "--val-count", 1, "--out", out, "--threads", 1], capsys)
    assert code == 0 and "final loss" in text
    assert (out / "final" / "weights.nlwt").exists() and (out / "loss_curve.csv").exists()
    noisy = tmp_path / "n.png"
    run(["noise", data / "0.png", noisy, "--sigma", 10], capsys)
    assert run(["denoise", noisy, tmp_path / "d.png", "--sigma", 10, "--method", "hybrid-fixed",
                "--weights", out / "final"], capsys)[0] == 0


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "nldenoise.cli", "flops", "--arch", "fixed:10"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "78.82 GFLOPs" in r.stdout
