import json

import numpy as np
import pytest

from reconkit import cli, tnsr
from reconkit.model import RamConfig, RamModel
from reconkit.problem import load_instance

TINY = RamConfig(num_scales=1, base_width=4, blocks=1, krylov_depth=1,
                 head_channels=(1,), seed=0)


@pytest.fixture
def clean_image(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.random((1, 16, 16))
    p = tmp_path / "x.tnsr"
    tnsr.save_tensors(p, {"x": x})
    return p, x


@pytest.fixture
def tiny_ckpt(tmp_path):
    p = tmp_path / "model.tnsr"
    RamModel(TINY).save_checkpoint(p)
    return p


class TestEval:
    def test_identical_files(self, tmp_path, capsys):
        a = np.random.default_rng(1).random((1, 16, 16))
        pa, pb = tmp_path / "a.tnsr", tmp_path / "b.tnsr"
        tnsr.save_tensors(pa, {"xhat": a})
        tnsr.save_tensors(pb, {"x": a})
        code = cli.main(["eval", "--pred", str(pa), "--ref", str(pb),
                         "--metrics", "psnr,ssim"])
        out = capsys.readouterr().out.strip().splitlines()
        assert code == 0
        assert out[0] == "metric,value"
        assert out[1] == "psnr,99.0"
        assert out[2] == "ssim,1.0"

    def test_shape_mismatch_exit_2(self, tmp_path):
        tnsr.save_tensors(tmp_path / "a.tnsr", {"x": np.zeros((1, 8, 8))})
        tnsr.save_tensors(tmp_path / "b.tnsr", {"x": np.zeros((1, 9, 9))})
        assert cli.main(["eval", "--pred", str(tmp_path / "a.tnsr"),
                         "--ref", str(tmp_path / "b.tnsr")]) == 2

    def test_unknown_metric_exit_2(self, tmp_path):
        tnsr.save_tensors(tmp_path / "a.tnsr", {"x": np.zeros((1, 8, 8))})
        assert cli.main(["eval", "--pred", str(tmp_path / "a.tnsr"),
                         "--ref", str(tmp_path / "a.tnsr"),
                         "--metrics", "vmaf"]) == 2

    def test_missing_file_exit_2(self, tmp_path):
        assert cli.main(["eval", "--pred", str(tmp_path / "no.tnsr"),
                         "--ref", str(tmp_path / "no.tnsr")]) == 2


class TestUsageErrors:
    def test_unknown_subcommand(self):
        assert cli.main(["transmogrify"]) == 1

    def test_missing_required_flag(self):
        assert cli.main(["simulate", "--task", "denoising"]) == 1


class TestSimulate:
    def test_deterministic_files(self, tmp_path, clean_image):
        p, _ = clean_image
        d1, d2 = tmp_path / "r1", tmp_path / "r2"
        d1.mkdir()
        d2.mkdir()
        for d in (d1, d2):
            assert cli.main(["simulate", "--task", "inpainting", "--in", str(p),
                             "--out", str(d / "inst.json"), "--seed", "7"]) == 0
        assert (d1 / "inst.json").read_bytes() == (d2 / "inst.json").read_bytes()
        assert (d1 / "inst.tnsr").read_bytes() == (d2 / "inst.tnsr").read_bytes()

    def test_seed_changes_output(self, tmp_path, clean_image):
        p, _ = clean_image
        cli.main(["simulate", "--task", "denoising", "--in", str(p),
                  "--out", str(tmp_path / "a.json"), "--seed", "1"])
        cli.main(["simulate", "--task", "denoising", "--in", str(p),
                  "--out", str(tmp_path / "b.json"), "--seed", "2"])
        ya = load_instance(tmp_path / "a.json").y
        yb = load_instance(tmp_path / "b.json").y
        assert not np.array_equal(ya, yb)

    def test_task_spec_file(self, tmp_path, clean_image):
        p, x = clean_image
        spec = tmp_path / "task.json"
        spec.write_text(json.dumps({"kind": "blur", "sigma_range": 0.02,
                                    "params": {"sigma_blur": 0.8, "kernel_size": 5}}))
        assert cli.main(["simulate", "--task", str(spec), "--in", str(p),
                         "--out", str(tmp_path / "inst.json")]) == 0
        inst = load_instance(tmp_path / "inst.json")
        assert inst.op.kind == "blur"
        assert np.array_equal(inst.x, x)

    def test_unknown_task_exit_2(self, tmp_path, clean_image):
        p, _ = clean_image
        assert cli.main(["simulate", "--task", "hologram", "--in", str(p),
                         "--out", str(tmp_path / "o.json")]) == 2


class TestReconstructAndUq:
    def simulate(self, tmp_path, clean_image, task="inpainting"):
        p, _ = clean_image
        inst = tmp_path / "inst.json"
        assert cli.main(["simulate", "--task", task, "--in", str(p),
                         "--out", str(inst), "--seed", "3"]) == 0
        return inst

    def test_reconstruct_outputs(self, tmp_path, clean_image, tiny_ckpt):
        inst = self.simulate(tmp_path, clean_image)
        out = tmp_path / "xhat.tnsr"
        pgm = tmp_path / "xhat.pgm"
        assert cli.main(["reconstruct", "--model", str(tiny_ckpt),
                         "--instance", str(inst), "--out", str(out),
                         "--export-pgm", str(pgm)]) == 0
        xhat = tnsr.load_tensors(out)["xhat"]
        assert xhat.shape == (1, 16, 16)
        assert np.all(np.isfinite(xhat))
        assert pgm.read_bytes().startswith(b"P5\n16 16\n255\n")

    def test_reconstruct_byte_reproducible(self, tmp_path, clean_image, tiny_ckpt):
        inst = self.simulate(tmp_path, clean_image)
        o1, o2 = tmp_path / "a.tnsr", tmp_path / "b.tnsr"
        for o in (o1, o2):
            assert cli.main(["reconstruct", "--model", str(tiny_ckpt),
                             "--instance", str(inst), "--out", str(o)]) == 0
        assert o1.read_bytes() == o2.read_bytes()

    def test_nan_model_exit_3(self, tmp_path, clean_image):
        inst = self.simulate(tmp_path, clean_image)
        model = RamModel(TINY)
        model.param("head1.conv_out").data[:] = np.nan
        bad = tmp_path / "bad.tnsr"
        model.save_checkpoint(bad)
        assert cli.main(["reconstruct", "--model", str(bad),
                         "--instance", str(inst),
                         "--out", str(tmp_path / "x.tnsr")]) == 3

    def test_uq_error_map(self, tmp_path, clean_image, tiny_ckpt):
        inst = self.simulate(tmp_path, clean_image)
        out = tmp_path / "err.tnsr"
        pgm = tmp_path / "err.pgm"
        assert cli.main(["uq", "--model", str(tiny_ckpt), "--instance", str(inst),
                         "--samples", "4", "--out", str(out), "--seed", "5",
                         "--export-pgm", str(pgm)]) == 0
        err = tnsr.load_tensors(out)["error_map"]
        assert err.shape == (16, 16)
        assert np.all(err >= 0)
        assert pgm.exists()


class TestTrainFinetunePipeline:
    def test_full_pipeline(self, tmp_path, clean_image, capsys):
        p, x = clean_image
        cfg = {"model": {"num_scales": 1, "base_width": 4, "blocks": 1,
                         "krylov_depth": 1, "head_channels": [1], "seed": 1},
               "tasks": [{"name": "den", "kind": "identity", "sigma_range": 0.1}],
               "train": {"steps": 3, "batch_size": 1, "patch_size": 16,
                         "lr_decay_step": 2, "log_every": 3, "seed": 2},
               "dataset": {"kind": "piecewise-constant", "count": 4,
                           "shape": [1, 16, 16], "seed": 3}}
        cfg_path = tmp_path / "train.json"
        cfg_path.write_text(json.dumps(cfg))
        ckpt = tmp_path / "ckpt.tnsr"
        assert cli.main(["train", "--config", str(cfg_path), "--out", str(ckpt)]) == 0
        assert ckpt.exists()
        capsys.readouterr()

        inst = tmp_path / "inst.json"
        assert cli.main(["simulate", "--task", "denoising", "--in", str(p),
                         "--out", str(inst), "--seed", "4"]) == 0

        data_dir = tmp_path / "meas"
        data_dir.mkdir()
        assert cli.main(["simulate", "--task", "denoising", "--in", str(p),
                         "--out", str(data_dir / "m0.json"), "--seed", "5"]) == 0
        ft_cfg = tmp_path / "ft.json"
        ft_cfg.write_text(json.dumps({"mc_loss": "sure", "null_loss": "ei",
                                      "steps": 2, "seed": 6}))
        ckpt2 = tmp_path / "ckpt2.tnsr"
        assert cli.main(["finetune", "--config", str(ft_cfg), "--model", str(ckpt),
                         "--data", str(data_dir), "--out", str(ckpt2)]) == 0

        xhat = tmp_path / "xhat.tnsr"
        assert cli.main(["reconstruct", "--model", str(ckpt2),
                         "--instance", str(inst), "--out", str(xhat)]) == 0
        assert cli.main(["eval", "--pred", str(xhat), "--ref", str(p),
                         "--metrics", "psnr"]) == 0
        rows = capsys.readouterr().out.strip().splitlines()
        val = float(rows[-1].split(",")[1])
        assert np.isfinite(val) and val > 0

        err = tmp_path / "err.tnsr"
        assert cli.main(["uq", "--model", str(ckpt2), "--instance", str(inst),
                         "--samples", "3", "--out", str(err)]) == 0
        assert err.exists()

    def test_finetune_empty_dir_exit_2(self, tmp_path, tiny_ckpt):
        data_dir = tmp_path / "empty"
        data_dir.mkdir()
        ft_cfg = tmp_path / "ft.json"
        ft_cfg.write_text(json.dumps({"mc_loss": "split", "steps": 1}))
        assert cli.main(["finetune", "--config", str(ft_cfg), "--model", str(tiny_ckpt),
                         "--data", str(data_dir), "--out", str(tmp_path / "o.tnsr")]) == 2


class TestSelftest:
    def test_runs_clean(self, capsys):
        assert cli.main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert "adjoint-blur: ok" in out
