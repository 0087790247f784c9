"""CLI tests: config resolution, all five subcommands, exit codes,
manifests, and machine-readable record streams."""

import json
import os

import numpy as np
import pytest

import smre.cli as cli
from smre.imaging import (ImagePlane, bicubic_resize, load_png, psnr_from_y,
                          rgb_to_y, save_png, ssim_from_y)
from smre.model import build, load_checkpoint, save_checkpoint

TINY_CFG = """\
# architecture
n_rg = 2
channels = 8
scale = 2
n_experts = 2
ranks = 2,4          # strictly increasing
topk = 1
see_kernel = 3
recursion = 1
ffn_ratio = 2
# training
patch = 8
batch = 2
iters = 4
seed = 3
"""


def run_cli(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    records = [json.loads(line) for line in captured.out.splitlines() if line]
    return code, records, captured.err


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def hr_dir(workdir):
    d = workdir / "hr"
    d.mkdir()
    rng = np.random.default_rng(77)
    for i in range(3):
        block = rng.uniform(0, 255, (8, 8, 3))
        img = np.repeat(np.repeat(block, 4, 0), 4, 1).astype(np.uint8)
        save_png(ImagePlane(img), d / ("img%d.png" % i))
    return d


@pytest.fixture
def tiny_cfg(workdir):
    path = workdir / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


@pytest.fixture
def toy_ckpt(workdir, hr_dir, tiny_cfg, capsys):
    path = workdir / "toy.smre"
    code, _, _ = run_cli(["train", str(tiny_cfg), "--data", str(hr_dir),
                          "--ckpt", str(path)], capsys)
    assert code == 0
    return path


# ---------------------------------------------------------------------------
# count


class TestCount:
    def test_totals_and_breakdown(self, workdir, capsys):
        code, records, err = run_cli(
            ["count", "T", "--scale", "2", "--out-res", "1280x720"], capsys)
        assert code == 0
        totals = [r for r in records if r["record"] == "totals"]
        assert len(totals) == 1
        assert totals[0]["params"] == 204_312
        assert totals[0]["macs"] == 41_760_231_048
        modules = [r for r in records if r["record"] == "module"]
        assert sum(m["params"] for m in modules) == totals[0]["params"]
        assert "204,312" in err

    def test_expectation_pass_and_fail(self, workdir, capsys):
        ok, _, _ = run_cli(["count", "T", "--scale", "2",
                            "--expect-params", "220000",
                            "--expect-macs", "45000000000"], capsys)
        assert ok == 0
        bad, _, err = run_cli(["count", "T", "--scale", "2",
                               "--expect-params", "500000"], capsys)
        assert bad == 4
        assert "expectation" in err

    def test_unknown_preset_exits_2(self, workdir, capsys):
        code, _, err = run_cli(["count", "QQ"], capsys)
        assert code == 2 and "config error" in err

    def test_config_file_and_override(self, workdir, tiny_cfg, capsys):
        code, records, _ = run_cli(
            ["count", str(tiny_cfg), "--out-res", "64x64"], capsys)
        assert code == 0
        base = [r for r in records if r["record"] == "totals"][0]
        code, records, _ = run_cli(
            ["count", str(tiny_cfg), "--out-res", "64x64",
             "--set", "see_kernel=11"], capsys)
        assert code == 0
        wider = [r for r in records if r["record"] == "totals"][0]
        # two stripes per spatial block, 8 channels, + (11-3) taps each
        assert wider["params"] - base["params"] == 2 * 2 * 8 * 8

    def test_dense_strictly_above_sparse(self, workdir, capsys):
        _, sparse, _ = run_cli(["count", "T", "--mode", "sparse"], capsys)
        _, dense, _ = run_cli(["count", "T", "--mode", "dense"], capsys)
        s = [r for r in sparse if r["record"] == "totals"][0]["macs"]
        d = [r for r in dense if r["record"] == "totals"][0]["macs"]
        assert d > s

    def test_malformed_config_file(self, workdir, capsys):
        bad = workdir / "bad.cfg"
        bad.write_text("channels = 8\nwhatever = 1\n")
        code, _, err = run_cli(["count", str(bad)], capsys)
        assert code == 2 and "unknown key" in err

    def test_bad_out_res(self, workdir, capsys):
        code, _, _ = run_cli(["count", "T", "--out-res", "720p"], capsys)
        assert code == 2

    def test_manifest_written(self, workdir, capsys):
        run_cli(["count", "T"], capsys)
        doc = json.loads((workdir / "smre_count_manifest.json").read_text())
        assert doc["command"] == "count"
        assert doc["config"]["channels"] == 36
        assert doc["finished"] >= doc["started"]


# ---------------------------------------------------------------------------
# train


class TestTrain:
    def test_end_to_end_records_and_artifacts(self, workdir, hr_dir, tiny_cfg,
                                              capsys):
        ckpt = workdir / "m.smre"
        code, records, err = run_cli(
            ["train", str(tiny_cfg), "--data", str(hr_dir),
             "--ckpt", str(ckpt)], capsys)
        assert code == 0
        assert [r["iter"] for r in records] == [0, 1, 2, 3]
        assert all({"loss", "pixel", "fft", "lr", "wall_ms"} <= set(r)
                   for r in records)
        assert ckpt.is_file()
        manifest = json.loads((workdir / "m.smre.manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["seed"] == 3
        assert manifest["train_config"]["iters"] == 4
        load_checkpoint(ckpt)  # loadable

    def test_deterministic_checkpoints(self, workdir, hr_dir, tiny_cfg, capsys):
        a, b = workdir / "a.smre", workdir / "b.smre"
        assert run_cli(["train", str(tiny_cfg), "--data", str(hr_dir),
                        "--ckpt", str(a)], capsys)[0] == 0
        assert run_cli(["train", str(tiny_cfg), "--data", str(hr_dir),
                        "--ckpt", str(b)], capsys)[0] == 0
        assert a.read_bytes() == b.read_bytes()

    def test_flag_overrides_config(self, workdir, hr_dir, tiny_cfg, capsys):
        ckpt = workdir / "m.smre"
        code, records, _ = run_cli(
            ["train", str(tiny_cfg), "--data", str(hr_dir), "--ckpt",
             str(ckpt), "--iters", "2", "--seed", "9"], capsys)
        assert code == 0
        assert len(records) == 2
        manifest = json.loads((workdir / "m.smre.manifest.json").read_text())
        assert manifest["seed"] == 9

    def test_empty_dataset_exits_3(self, workdir, tiny_cfg, capsys):
        empty = workdir / "none"
        empty.mkdir()
        code, _, err = run_cli(["train", str(tiny_cfg), "--data", str(empty),
                                "--ckpt", "x.smre"], capsys)
        assert code == 3 and "data error" in err

    def test_save_every_keeps_checkpoint_loadable(self, workdir, hr_dir,
                                                  tiny_cfg, capsys):
        ckpt = workdir / "m.smre"
        code, _, _ = run_cli(
            ["train", str(tiny_cfg), "--data", str(hr_dir), "--ckpt",
             str(ckpt), "--save-every", "2"], capsys)
        assert code == 0
        assert not (workdir / "m.smre.tmp").exists()
        load_checkpoint(ckpt)


# ---------------------------------------------------------------------------
# infer


class TestInfer:
    def test_shapes_and_determinism(self, workdir, hr_dir, toy_ckpt, capsys):
        out1, out2 = workdir / "sr1", workdir / "sr2"
        code, records, _ = run_cli(["infer", "--ckpt", str(toy_ckpt),
                                    "--in", str(hr_dir), "--out", str(out1)],
                                   capsys)
        assert code == 0
        assert [r["image"] for r in records] == ["img0.png", "img1.png",
                                                 "img2.png"]
        assert all(r["out_size"] == "64x64" for r in records)
        img = load_png(out1 / "img0.png")
        assert (img.height, img.width) == (64, 64)
        run_cli(["infer", "--ckpt", str(toy_ckpt), "--in", str(hr_dir),
                 "--out", str(out2)], capsys)
        for name in ("img0.png", "img1.png", "img2.png"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_single_file_input(self, workdir, hr_dir, toy_ckpt, capsys):
        out = workdir / "sr"
        code, records, _ = run_cli(
            ["infer", "--ckpt", str(toy_ckpt), "--in",
             str(hr_dir / "img1.png"), "--out", str(out)], capsys)
        assert code == 0 and len(records) == 1
        assert (out / "img1.png").is_file()
        assert (out / "manifest.json").is_file()

    def test_scale_assertion(self, workdir, hr_dir, toy_ckpt, capsys):
        code, _, err = run_cli(["infer", "--ckpt", str(toy_ckpt), "--in",
                                str(hr_dir), "--out", "sr", "--scale", "3"],
                               capsys)
        assert code == 2 and "scale" in err

    def test_missing_checkpoint_exits_3(self, workdir, hr_dir, capsys):
        code, _, _ = run_cli(["infer", "--ckpt", "missing.smre", "--in",
                              str(hr_dir), "--out", "sr"], capsys)
        assert code == 3

    def test_route_dump(self, workdir, hr_dir, toy_ckpt, capsys):
        code, records, _ = run_cli(
            ["infer", "--ckpt", str(toy_ckpt), "--in", str(hr_dir), "--out",
             "sr", "--dump-routes"], capsys)
        assert code == 0
        for r in records:
            assert [route["layer"] for route in r["routes"]] == [0, 1]
            for route in r["routes"]:
                assert abs(sum(route["weights"]) - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# eval


class TestEval:
    def test_rows_and_mean(self, workdir, hr_dir, toy_ckpt, capsys):
        code, records, _ = run_cli(["eval", "--ckpt", str(toy_ckpt), "--hr",
                                    str(hr_dir)], capsys)
        assert code == 0
        rows = [r for r in records if r["record"] == "eval"]
        mean = [r for r in records if r["record"] == "mean"][0]
        assert [r["image"] for r in rows] == ["img0.png", "img1.png",
                                              "img2.png"]
        assert mean["images"] == 3
        for key in ("psnr", "ssim", "psnr_bicubic", "ssim_bicubic"):
            assert abs(mean[key] - np.mean([r[key] for r in rows])) < 1e-9

    def test_bicubic_column_matches_direct_invocation(self, workdir, hr_dir,
                                                      toy_ckpt, capsys):
        code, records, _ = run_cli(["eval", "--ckpt", str(toy_ckpt), "--hr",
                                    str(hr_dir), "--crop", "2"], capsys)
        assert code == 0
        row = [r for r in records if r["record"] == "eval"][0]
        hr = load_png(hr_dir / "img0.png")
        lr = bicubic_resize(hr, 1, 2)
        base = bicubic_resize(lr, 2, 1)
        assert row["psnr_bicubic"] == psnr_from_y(rgb_to_y(base), rgb_to_y(hr), 2)
        assert row["ssim_bicubic"] == ssim_from_y(rgb_to_y(base), rgb_to_y(hr), 2)

    def test_ground_truth_against_itself_sentinels(self, workdir, toy_ckpt,
                                                   capsys, monkeypatch):
        # when the SR output reproduces the ground truth exactly, every
        # row must read the +inf PSNR sentinel and SSIM 1.0. HR images
        # are nearest-upscales of their LR siblings, and the patched SR
        # hook applies the same nearest-upscale.
        hr2 = workdir / "hr2"
        lr_dir = workdir / "hr2_lrx2"
        hr2.mkdir()
        lr_dir.mkdir()
        rng = np.random.default_rng(5)
        for i in range(2):
            small = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
            save_png(ImagePlane(small), lr_dir / ("g%d.png" % i))
            save_png(ImagePlane(np.repeat(np.repeat(small, 2, 0), 2, 1)),
                     hr2 / ("g%d.png" % i))

        def nearest_sr(model, lr):
            up = np.repeat(np.repeat(lr.pixels, 2, 0), 2, 1)
            return ImagePlane(up), []

        monkeypatch.setattr(cli, "_sr_image", nearest_sr)
        code, records, _ = run_cli(["eval", "--ckpt", str(toy_ckpt), "--hr",
                                    str(hr2)], capsys)
        assert code == 0
        rows = [r for r in records if r["record"] == "eval"]
        assert len(rows) == 2
        for r in rows:
            assert r["psnr"] == "inf"   # JSON sentinel for +infinity
            assert r["ssim"] == 1.0
        mean = [r for r in records if r["record"] == "mean"][0]
        assert mean["psnr"] == "inf" and mean["ssim"] == 1.0

    def test_empty_dir_exits_3(self, workdir, toy_ckpt, capsys):
        empty = workdir / "empty"
        empty.mkdir()
        code, _, _ = run_cli(["eval", "--ckpt", str(toy_ckpt), "--hr",
                              str(empty)], capsys)
        assert code == 3


# ---------------------------------------------------------------------------
# route-stats


class TestRouteStats:
    def test_conservation(self, workdir, hr_dir, toy_ckpt, capsys):
        code, records, _ = run_cli(["route-stats", "--ckpt", str(toy_ckpt),
                                    "--hr", str(hr_dir)], capsys)
        assert code == 0
        assert [r["layer"] for r in records] == [0, 1]
        for r in records:
            assert r["images"] == 3
            assert sum(r["counts"]) == 3  # topk=1: one increment per image

    def test_forced_router_concentrates_all_mass(self, workdir, hr_dir,
                                                 toy_ckpt, capsys):
        model = load_checkpoint(toy_ckpt)
        for name, tensor in model.named_tensors():
            if name.endswith(".router.w"):
                tensor.data = np.zeros_like(tensor.data)  # tie -> expert 0
        forced = workdir / "forced.smre"
        save_checkpoint(model, forced)
        code, records, _ = run_cli(["route-stats", "--ckpt", str(forced),
                                    "--hr", str(hr_dir)], capsys)
        assert code == 0
        for r in records:
            assert r["counts"][0] == 3
            assert sum(r["counts"][1:]) == 0

    def test_manifest(self, workdir, hr_dir, toy_ckpt, capsys):
        run_cli(["route-stats", "--ckpt", str(toy_ckpt), "--hr", str(hr_dir)],
                capsys)
        doc = json.loads((workdir / "smre_route_stats_manifest.json").read_text())
        assert doc["command"] == "route-stats"


# ---------------------------------------------------------------------------
# config helpers


class TestConfigPlumbing:
    def test_comments_and_blanks(self, workdir):
        p = workdir / "c.cfg"
        p.write_text("\n# full line comment\nchannels = 16  # trailing\n\n")
        assert cli.read_config_file(str(p)) == {"channels": 16}

    def test_tuple_and_float_and_bool_parsing(self, workdir):
        p = workdir / "c.cfg"
        p.write_text("ranks = 2,4,8\nlr0 = 5e-4\naugment = false\n"
                     "milestones = 10,20\n")
        values = cli.read_config_file(str(p))
        assert values == {"ranks": (2, 4, 8), "lr0": 5e-4, "augment": False,
                          "milestones": (10, 20)}

    def test_resolve_preset_with_override(self):
        cfg, train_values = cli.resolve_configs("T", scale=3,
                                                overrides=["topk=2"])
        assert cfg.scale == 3 and cfg.topk == 2
        assert train_values == {}

    def test_missing_equals_sign(self, workdir):
        p = workdir / "c.cfg"
        p.write_text("channels 16\n")
        from smre.errors import ConfigError
        with pytest.raises(ConfigError):
            cli.read_config_file(str(p))
