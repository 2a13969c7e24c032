"""End-to-end command line runs on a small synthetic survey."""

import os

import pandas as pd
import pytest
from dotenv import dotenv_values

from wildmoco.cli import main
from wildmoco.run_config import from_flat
from wildmoco.tiling import DatasetManifest

TINY = ["--desk", "--set", "batch_size=8", "queue_size=16", "head_hidden=32", "patch_size=64", "epochs=1"]


@pytest.fixture(scope="module")
def survey(tmp_path_factory):
    root = tmp_path_factory.mktemp("survey")
    paths = {name: str(root / name) for name in ("frames", "pretrain", "downstream", "runs", "evals")}
    assert main(["synth", "--frames", "12", "--width", "256", "--height", "256", "--density", "8",
                 "--seed", "0", "--out", paths["frames"]]) == 0
    assert main(["tile", "--frames-dir", paths["frames"], "--size", "64", "--per-frame", "4",
                 "--workers", "1", "--out", paths["pretrain"]]) == 0
    assert main(["build-downstream", "--frames-dir", paths["frames"], "--fg-size", "64", "--bg-size", "128",
                 "--out", paths["downstream"]]) == 0
    assert main(["pretrain", "--preset", "geocld", "--pretrain-manifest", paths["pretrain"], "--max-steps", "2",
                 "--seed", "0", "--out", paths["runs"]] + TINY) == 0
    paths["run"] = os.path.join(paths["runs"], "geocld_s0")
    paths["checkpoint"] = os.path.join(paths["run"], "checkpoints", "ckpt_2.bin")
    return paths


class TestDataCommands:
    def test_synth_is_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--frames", "2", "--width", "96", "--height", "96", "--seed", "4",
                         "--out", str(tmp_path / name)]) == 0
        for fname in ("synth_00000.png", "synth_00001.png", "annotations.csv"):
            assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()

    def test_tile_writes_every_patch(self, survey):
        manifest = DatasetManifest.load(survey["pretrain"])
        assert len(manifest.records) >= 12 * 4
        patch_dir = os.path.join(survey["pretrain"], "patches")
        assert sorted(os.listdir(patch_dir)) == sorted(f"{r.patch_id}.png" for r in manifest.records)

    def test_empty_frames_tile_to_random_patches(self, tmp_path):
        frames = str(tmp_path / "frames")
        assert main(["synth", "--frames", "10", "--width", "128", "--height", "128", "--density", "0",
                     "--out", frames]) == 0
        assert main(["tile", "--frames-dir", frames, "--size", "64", "--per-frame", "4", "--workers", "1",
                     "--out", str(tmp_path / "tiles")]) == 0
        assert len(DatasetManifest.load(str(tmp_path / "tiles")).records) == 40

    def test_downstream_ratio(self, survey):
        counts = DatasetManifest.load(survey["downstream"]).counts()
        n_fg = counts[("train", "foreground")]
        assert n_fg > 0
        assert counts[("train", "background")] == round(18 * n_fg)

    def test_missing_frames_dir(self, tmp_path):
        assert main(["tile", "--frames-dir", str(tmp_path / "nothing"), "--out", str(tmp_path / "t")]) == 2


class TestPretrainCommand:
    def test_config_echo_carries_preset(self, survey):
        echoed = dotenv_values(os.path.join(survey["run"], "config.env"))
        assert echoed["strategy"] == "geocld"
        assert echoed["cld_lam"] == "0.25" and echoed["cld_k"] == "32"
        metrics = pd.read_csv(os.path.join(survey["run"], "metrics.csv"))
        assert metrics["step"].tolist() == [1, 2]
        assert os.path.exists(survey["checkpoint"])

    def test_mixco_flags(self, survey, tmp_path):
        assert main(["pretrain", "--preset", "mixco", "--gamma", "0.8", "--pretrain-manifest", survey["pretrain"],
                     "--max-steps", "1", "--out", str(tmp_path)] + TINY) == 0
        echoed = dotenv_values(str(tmp_path / "mixco_s0" / "config.env"))
        assert (echoed["mix_gamma"], echoed["mix_p"], echoed["mix_beta"]) == ("0.8", "0.3", "1.0")

    def test_sweep_makes_one_run_per_value(self, survey, tmp_path):
        assert main(["pretrain", "--preset", "moco_cld", "--pretrain-manifest", survey["pretrain"],
                     "--sweep", "cld_k=2,4", "--max-steps", "1", "--out", str(tmp_path)] + TINY) == 0
        assert sorted(os.listdir(tmp_path)) == ["moco_cld_s0_cld_k2", "moco_cld_s0_cld_k4"]

    def test_resume_continues_from_checkpoint(self, survey, tmp_path):
        assert main(["pretrain", "--resume", survey["checkpoint"], "--max-steps", "3",
                     "--out", str(tmp_path)]) == 0
        metrics = pd.read_csv(str(tmp_path / "geocld_s0_resume2" / "metrics.csv"))
        assert metrics["step"].tolist() == [3]

    def test_unknown_key_is_rejected(self, survey, tmp_path, capsys):
        code = main(["pretrain", "--pretrain-manifest", survey["pretrain"], "--set", "taus=0.1",
                     "--out", str(tmp_path)])
        assert code == 2
        assert "taus" in capsys.readouterr().out

    def test_existing_run_is_not_overwritten(self, survey):
        code = main(["pretrain", "--preset", "geocld", "--pretrain-manifest", survey["pretrain"],
                     "--max-steps", "1", "--seed", "0", "--out", survey["runs"]] + TINY)
        assert code == 2

    def test_missing_manifest_setting(self, tmp_path):
        assert main(["pretrain", "--out", str(tmp_path)]) == 2


class TestEvaluationCommands:
    def test_random_init_linear_rows(self, survey, tmp_path):
        out = str(tmp_path)
        assert main(["probe", "--random-init", "--manifest", survey["downstream"], "--fraction", "0.5", "1.0",
                     "--out", out] + TINY + ["probe_epochs=2"]) == 0
        results = pd.read_csv(os.path.join(out, "results.csv"))
        assert results["run_id"].tolist() == ["random_init_s0"] * 2
        assert results["mode"].tolist() == ["linear"] * 2
        assert results["fraction"].tolist() == [0.5, 1.0]
        assert results["top1"].between(0, 100).all()
        assert os.path.exists(os.path.join(out, "preds_random_init_s0_linear_0.5.csv"))
        echoed = dotenv_values(os.path.join(out, "config_random_init_s0_linear_0.5.env"))
        assert (echoed["label_fraction"], echoed["probe_epochs"], echoed["run_id"]) == ("0.5", "2", "random_init_s0")
        assert from_flat(dict(echoed)).label_fraction == 0.5
        assert os.path.exists(os.path.join(out, "config_random_init_s0_linear_1.env"))

    def test_checkpoint_linear_and_finetune(self, survey):
        out = survey["evals"]
        assert main(["probe", "--checkpoint", survey["checkpoint"], "--manifest", survey["downstream"],
                     "--fraction", "1.0", "--out", out, "--set", "probe_epochs=2"]) == 0
        assert main(["finetune", "--checkpoint", survey["checkpoint"], "--manifest", survey["downstream"],
                     "--fraction", "1.0", "--eval-split", "test", "--out", out,
                     "--set", "finetune_epochs=1"]) == 0
        results = pd.read_csv(os.path.join(out, "results.csv"))
        assert results["mode"].tolist() == ["linear", "end_to_end"]
        assert set(results["run_id"]) == {"geocld_s0"}
        echoed = dotenv_values(os.path.join(out, "config_geocld_s0_end_to_end_1.env"))
        assert (echoed["strategy"], echoed["finetune_epochs"], echoed["cld_k"]) == ("geocld", "1", "32")
        assert dotenv_values(os.path.join(out, "config_geocld_s0_linear_1.env"))["probe_epochs"] == "2"

    def test_knn_export(self, survey, tmp_path):
        export = str(tmp_path / "emb" / "val.csv")
        assert main(["knn", "--checkpoint", survey["checkpoint"], "--manifest", survey["downstream"],
                     "--k", "3", "--export", export]) == 0
        df = pd.read_csv(export)
        assert list(df.columns[:3]) == ["patch_id", "label", "f0"]
        assert len(df) == sum(1 for r in DatasetManifest.load(survey["downstream"]).records if r.split == "val")
        echoed = dotenv_values(str(tmp_path / "emb" / "config_geocld_s0_knn.env"))
        assert (echoed["knn_k"], echoed["strategy"]) == ("3", "geocld")

    def test_probe_needs_an_encoder(self, survey, tmp_path):
        assert main(["probe", "--manifest", survey["downstream"], "--out", str(tmp_path)]) == 2

    def test_missing_checkpoint(self, survey, tmp_path):
        assert main(["probe", "--checkpoint", str(tmp_path / "none.bin"), "--manifest", survey["downstream"],
                     "--out", str(tmp_path)]) == 2


class TestReportCommand:
    def test_report_outputs(self, survey, tmp_path):
        evals = str(tmp_path / "evals")
        assert main(["probe", "--random-init", "--manifest", survey["downstream"], "--fraction", "1.0",
                     "--out", evals] + TINY + ["probe_epochs=1"]) == 0
        out = tmp_path / "report"
        assert main(["report", "--runs", survey["run"], "--results", os.path.join(evals, "results.csv"),
                     "--out", str(out)]) == 0
        for name in ("loss.png", "knn.png", "results_table.csv", "summary.csv", "warnings.txt"):
            assert (out / name).exists()
        table = pd.read_csv(out / "results_table.csv")
        assert {"Acc", "Prec", "Rec"} <= set(table.columns)
