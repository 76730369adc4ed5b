import dataclasses
import subprocess
import sys

import numpy as np
import pytest

from ftaseg.cli import main
from ftaseg.errors import ConfigError, DataError
from ftaseg.pipeline import (
    BenchmarkSpec,
    PipelineConfig,
    generate_benchmark,
    parse_pipeline_config,
    render_overlay,
    run_pipeline,
    slice_dir,
    window_dir,
    write_kv_config,
)
from ftaseg.preprocess import Slice2D, WindowSpec, read_manifest
from ftaseg.volume import (
    NORMALIZED,
    RAW,
    MaskVolume,
    Volume,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
)

FAST = dict(
    synth_dim=12,
    synth_labeled=2,
    synth_unlabeled=3,
    synth_val=1,
    synth_ellipsoids=1,
    synth_radius_min=2.0,
    synth_radius_max=3.0,
    stage1_epochs=1,
    stage1_pseudo_count=1,
    stage2_iters=6,
    val_points=2,
)


def fast_config(**kw):
    return PipelineConfig(**{**FAST, **kw})


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = fast_config(seed=9, fta_mode="standard-fda", fta_lambda=0.5)
        path = tmp_path / "cfg.txt"
        write_kv_config(cfg, path)
        assert parse_pipeline_config(path) == cfg

    def test_empty_config_is_runnable_defaults(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("")
        assert parse_pipeline_config(path) == PipelineConfig()

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("not_a_field = 3\n")
        with pytest.raises(ConfigError):
            parse_pipeline_config(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("stage2_iters = many\n")
        with pytest.raises(ConfigError):
            parse_pipeline_config(path)

    def test_comments_and_blanks_ignored(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("# a comment\n\nseed = 4\n")
        assert parse_pipeline_config(path).seed == 4

    def test_invalid_mode_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig(fta_mode="nope")


class TestBenchmark:
    def test_layout_and_masks(self, tmp_path):
        spec = BenchmarkSpec(dim=10, labeled=2, unlabeled=3, val=1, ellipsoids=1,
                             radius_min=2.0, radius_max=3.0, seed=0)
        generate_benchmark(spec, tmp_path)
        labeled = sorted((tmp_path / "labeled").glob("*.vol"))
        assert len(labeled) == 4  # 2 volumes + 2 masks
        assert len(list((tmp_path / "unlabeled").glob("*.vol"))) == 3  # no masks
        assert len(list((tmp_path / "val").glob("*.vol"))) == 2
        assert (tmp_path / "benchmark.csv").exists()

    def test_deterministic(self, tmp_path):
        spec = BenchmarkSpec(dim=10, labeled=1, unlabeled=1, val=1, ellipsoids=1,
                             radius_min=2.0, radius_max=3.0, seed=5)
        generate_benchmark(spec, tmp_path / "a")
        generate_benchmark(spec, tmp_path / "b")
        for rel in ("labeled/lab_000.vol", "unlabeled/unl_000.vol", "val/val_000.vol"):
            assert (tmp_path / "a" / rel).read_bytes() == (
                tmp_path / "b" / rel
            ).read_bytes()

    def test_unlabeled_and_val_are_shifted(self, tmp_path):
        spec = BenchmarkSpec(dim=10, labeled=1, unlabeled=1, val=1, ellipsoids=0,
                             shift_gain=2.0, shift_bias=0.0, shift_field=0.0, seed=1)
        generate_benchmark(spec, tmp_path)
        lab = load_volume(tmp_path / "labeled" / "lab_000.vol")
        unl = load_volume(tmp_path / "unlabeled" / "unl_000.vol")
        assert float(unl.data.mean()) > 1.5 * float(lab.data.mean())


class TestWindowSliceDirs:
    def make_raw_dir(self, tmp_path, n=2, dims=(4, 5, 6)):
        rng = np.random.default_rng(0)
        src = tmp_path / "raw"
        src.mkdir()
        for i in range(n):
            vol = Volume(rng.uniform(0, 2500, dims).astype(np.float32), RAW)
            save_volume(vol, src / f"v{i}.vol")
            mask = MaskVolume((rng.random(dims) < 0.3).astype(np.uint8))
            save_mask(mask, src / f"v{i}_mask.vol")
        return src

    def test_window_dir_outputs_normalized_and_copies_masks(self, tmp_path):
        src = self.make_raw_dir(tmp_path)
        out = tmp_path / "win"
        count = window_dir(src, out, WindowSpec(500, 2000))
        assert count == 2
        v = load_volume(out / "v0.vol", NORMALIZED)
        assert v.data.min() >= 0.0 and v.data.max() <= 1.0
        assert (out / "v0_mask.vol").read_bytes() == (src / "v0_mask.vol").read_bytes()

    def test_slice_dir_counts_and_mask_slices(self, tmp_path):
        src = self.make_raw_dir(tmp_path, n=1)
        win = tmp_path / "win"
        window_dir(src, win, WindowSpec())
        out = tmp_path / "slices"
        manifest = slice_dir(win, out, val_fraction=0.2, seed=3)
        assert len(manifest) == 4 + 5 + 6
        assert len(manifest.subset("val")) == 3  # floor(0.2 * 15)
        entry = manifest.entries[0]
        assert (out / entry.file).exists()
        mask_file = f"v0_mask_{entry.index}_{entry.axis}.vol"
        assert (out / mask_file).exists()
        reread = read_manifest(out / "manifest.csv")
        assert reread == manifest

    def test_missing_dir_raises(self, tmp_path):
        with pytest.raises(DataError):
            window_dir(tmp_path / "nope", tmp_path / "o", WindowSpec())


class TestOverlay:
    def test_empty_masks_pure_grayscale(self, tmp_path):
        rng = np.random.default_rng(1)
        slc = Slice2D(rng.random((3, 4), dtype=np.float32), "z", 0, "s")
        empty = np.zeros((3, 4), dtype=np.uint8)
        path = tmp_path / "o.ppm"
        render_overlay(slc, empty, empty, path)
        blob = path.read_bytes()
        assert blob.startswith(b"P6\n4 3\n255\n")
        rgb = np.frombuffer(blob.split(b"255\n", 1)[1], dtype=np.uint8).reshape(3, 4, 3)
        assert np.array_equal(rgb[..., 0], rgb[..., 1])
        assert np.array_equal(rgb[..., 1], rgb[..., 2])

    def test_agreement_shows_only_overlap_tint(self, tmp_path):
        slc = Slice2D(np.full((2, 2), 0.5, dtype=np.float32), "z", 0, "s")
        mask = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        path = tmp_path / "o.ppm"
        render_overlay(slc, mask, mask, path)
        rgb = np.frombuffer(
            path.read_bytes().split(b"255\n", 1)[1], dtype=np.uint8
        ).reshape(2, 2, 3)
        overlap = rgb[mask.astype(bool)]
        assert np.all(overlap[:, 2] == 255)  # blue channel saturated
        assert np.all(overlap[:, 0] < 255) and np.all(overlap[:, 1] < 255)
        plain = rgb[~mask.astype(bool)]
        assert np.all(plain[:, 0] == plain[:, 1])

    def test_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(2)
        slc = Slice2D(rng.random((5, 5), dtype=np.float32), "z", 0, "s")
        pred = (rng.random((5, 5)) < 0.3).astype(np.uint8)
        gt = (rng.random((5, 5)) < 0.3).astype(np.uint8)
        render_overlay(slc, pred, gt, tmp_path / "a.ppm")
        render_overlay(slc, pred, gt, tmp_path / "b.ppm")
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    def test_shape_mismatch(self, tmp_path):
        slc = Slice2D(np.zeros((2, 2), dtype=np.float32), "z", 0, "s")
        with pytest.raises(DataError):
            render_overlay(slc, np.zeros((3, 3)), np.zeros((2, 2)), tmp_path / "x.ppm")


class TestRunPipeline:
    def test_completes_and_scores_in_range(self, tmp_path):
        paths = run_pipeline(fast_config(seed=1), tmp_path / "run")
        lines = paths.scores_csv.read_text().strip().splitlines()
        assert lines[0] == "case,dice,iou,hd_raw,hd_norm,score"
        for line in lines[1:]:
            score = float(line.split(",")[-1])
            assert 0.0 <= score <= 1.0
        assert (tmp_path / "run" / "config.txt").exists()
        assert (tmp_path / "run" / "run.log").exists()
        assert (tmp_path / "run" / "stage1" / "manifest.txt").exists()
        assert (tmp_path / "run" / "stage2" / "manifest.txt").exists()

    def test_metrics_csv_header(self, tmp_path):
        paths = run_pipeline(fast_config(seed=2), tmp_path / "run")
        lines = paths.stage2_metrics.read_text().strip().splitlines()
        assert lines[0] == "epoch,split,dice,iou,hd_norm,score,tau"
        assert len(lines) == 1 + 2  # val_points rows

    def test_missing_labeled_dir_fails_in_preprocess(self, tmp_path):
        cfg = fast_config(labeled_dir=str(tmp_path / "missing"))
        with pytest.raises(DataError, match=r"\[preprocess\]"):
            run_pipeline(cfg, tmp_path / "run")
        log = (tmp_path / "run" / "run.log").read_text()
        assert "preprocess failed" in log

    def test_merged_volume_arithmetic(self, tmp_path):
        run_pipeline(fast_config(seed=3), tmp_path / "run")
        manifest = (tmp_path / "run" / "stage1" / "manifest.txt").read_text()
        assert "merged_volume_count = 3" in manifest  # 2 labeled + 1 pseudo

    def test_supervised_only_skips_pseudo_and_unlabeled(self, tmp_path):
        run_pipeline(fast_config(seed=4, supervised_only=True), tmp_path / "run")
        manifest = (tmp_path / "run" / "stage1" / "manifest.txt").read_text()
        assert "pseudo_selected = \n" in manifest
        stage2 = (tmp_path / "run" / "stage2" / "manifest.txt").read_text()
        assert "unlabeled_slices = 0" in stage2
        assert "supervised-only" in stage2


class TestCli:
    def run_cli(self, *args):
        return main(list(args))

    def test_score_subcommand_csv_row(self, tmp_path, capsys):
        rng = np.random.default_rng(3)
        pred = MaskVolume((rng.random((3, 3, 3)) < 0.4).astype(np.uint8))
        gt = MaskVolume((rng.random((3, 3, 3)) < 0.4).astype(np.uint8))
        save_mask(pred, tmp_path / "p.vol")
        save_mask(gt, tmp_path / "g.vol")
        rc = self.run_cli(
            "score", "--pred", str(tmp_path / "p.vol"), "--gt", str(tmp_path / "g.vol"),
            "--case", "k7",
        )
        assert rc == 0
        out = capsys.readouterr().out.strip()
        fields = out.split(",")
        assert fields[0] == "k7"
        assert len(fields) == 6
        assert all("." in f and len(f.split(".")[1]) == 6 for f in fields[1:])

    def test_score_missing_file_exit_3(self, tmp_path, capsys):
        rc = self.run_cli("score", "--pred", str(tmp_path / "no.vol"),
                          "--gt", str(tmp_path / "no.vol"))
        assert rc == 3

    def test_pipeline_bad_config_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.txt"
        cfg.write_text("window_bottom = 3000\n")  # bottom >= top
        rc = self.run_cli("pipeline", "--config", str(cfg), "--out",
                          str(tmp_path / "run"), "--quiet")
        assert rc == 2

    def test_pipeline_missing_labeled_exit_3(self, tmp_path):
        cfg = tmp_path / "cfg.txt"
        write_kv_config(fast_config(labeled_dir=str(tmp_path / "nope")), cfg)
        rc = self.run_cli("pipeline", "--config", str(cfg), "--out",
                          str(tmp_path / "run"), "--quiet")
        assert rc == 3

    def test_fta_subcommand(self, tmp_path, capsys):
        rng = np.random.default_rng(4)
        for name in ("a", "b"):
            data = rng.random((1, 6, 6)).astype(np.float32)
            save_volume(Volume(data, NORMALIZED), tmp_path / f"{name}.vol")
        rc = self.run_cli(
            "fta", "--a", str(tmp_path / "a.vol"), "--b", str(tmp_path / "b.vol"),
            "--out-a", str(tmp_path / "za.vol"), "--out-b", str(tmp_path / "zb.vol"),
            "--lambda", "0.0", "--mode", "standard-fda", "--beta", "0.5",
        )
        assert rc == 0
        za = load_volume(tmp_path / "za.vol")
        a = load_volume(tmp_path / "a.vol")
        assert np.abs(za.data - a.data).max() < 1e-5  # identity at lambda 0

    def test_overlay_subcommand(self, tmp_path):
        rng = np.random.default_rng(5)
        save_volume(
            Volume(rng.random((1, 4, 4)).astype(np.float32), NORMALIZED),
            tmp_path / "s.vol",
        )
        mask = MaskVolume((rng.random((1, 4, 4)) < 0.4).astype(np.uint8))
        save_mask(mask, tmp_path / "m.vol")
        rc = self.run_cli(
            "overlay", "--slice", str(tmp_path / "s.vol"), "--pred",
            str(tmp_path / "m.vol"), "--gt", str(tmp_path / "m.vol"),
            "--out", str(tmp_path / "o.ppm"),
        )
        assert rc == 0
        assert (tmp_path / "o.ppm").read_bytes().startswith(b"P6\n")

    def test_console_entrypoint(self):
        proc = subprocess.run(
            [sys.executable, "-m", "ftaseg.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        for cmd in ("synth", "window", "slice", "fta", "train-stage1",
                    "train-stage2", "score", "overlay", "pipeline"):
            assert cmd in proc.stdout


class TestComposability:
    def test_subcommands_reproduce_pipeline(self, tmp_path):
        seed = 11
        cfg = fast_config(seed=seed)
        run = tmp_path / "run"
        paths = run_pipeline(cfg, run)

        # same stages through the CLI, file by file
        c = tmp_path / "cli"
        spec = c / "spec.txt"
        c.mkdir()
        bench = cfg.benchmark_spec()
        lines = [f"{f.name} = {getattr(bench, f.name)}"
                 for f in dataclasses.fields(bench)]
        spec.write_text("\n".join(lines) + "\n")
        data, win, slc = c / "data", c / "win", c / "slices"
        assert main(["synth", "--spec", str(spec), "--out", str(data)]) == 0
        for sub in ("labeled", "unlabeled", "val"):
            rc = main(["window", "--in", str(data / sub), "--out", str(win / sub),
                       "--bottom", str(cfg.window_bottom),
                       "--top", str(cfg.window_top)])
            assert rc == 0
        assert main(["slice", "--in", str(win / "labeled"), "--out",
                     str(slc / "labeled"), "--val-fraction", str(cfg.val_fraction),
                     "--seed", str(seed)]) == 0
        assert main(["slice", "--in", str(win / "unlabeled"), "--out",
                     str(slc / "unlabeled")]) == 0
        assert main(["train-stage1", "--slices", str(slc / "labeled"),
                     "--unlabeled", str(win / "unlabeled"),
                     "--out", str(c / "stage1"),
                     "--pseudo-slices", str(slc / "pseudo"),
                     "--epochs", str(cfg.stage1_epochs),
                     "--pseudo-count", str(cfg.stage1_pseudo_count),
                     "--lr", str(cfg.lr), "--batch", str(cfg.batch_size),
                     "--seed", str(seed)]) == 0
        assert main(["train-stage2", "--slices", str(slc / "labeled"),
                     "--pseudo-slices", str(slc / "pseudo"),
                     "--unlabeled-slices", str(slc / "unlabeled"),
                     "--val", str(win / "val"),
                     "--init", str(c / "stage1" / "checkpoint.seg"),
                     "--out", str(c / "stage2"),
                     "--iters", str(cfg.stage2_iters), "--lr", str(cfg.lr),
                     "--batch", str(cfg.batch_size),
                     "--val-points", str(cfg.val_points),
                     "--seed", str(seed)]) == 0
        assert main(["score-dir", "--checkpoint", str(c / "stage2" / "checkpoint.seg"),
                     "--val", str(win / "val"),
                     "--out", str(c / "scores.csv")]) == 0

        assert (c / "stage1" / "checkpoint.seg").read_bytes() == \
            paths.stage1_ckpt.read_bytes()
        assert (c / "stage2" / "checkpoint.seg").read_bytes() == \
            paths.stage2_ckpt.read_bytes()
        assert (c / "stage2" / "metrics.csv").read_text() == \
            paths.stage2_metrics.read_text()
        assert (c / "scores.csv").read_text() == paths.scores_csv.read_text()
