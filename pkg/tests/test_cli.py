import json
import struct
from pathlib import Path

import pytest
import torch

from octpad.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from octpad.cli import load_config, load_train_patches, main
from octpad.dual_branch import AblationVariant, NetConfig, forward_pass, make_variant
from octpad.errors import CheckpointError, ConfigError

TINY = NetConfig(width_multiplier=0.0625, isam_base_width=2)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        net = make_variant(AblationVariant.FULL_ISAPAD, TINY, seed=3)
        save_checkpoint(net, tmp_path / "m.ckpt", extra={"strategy": "S3"})
        loaded, extra = load_checkpoint(tmp_path / "m.ckpt")
        assert extra == {"strategy": "S3"}
        assert loaded.variant is AblationVariant.FULL_ISAPAD
        for (ka, a), (kb, b) in zip(net.state_dict().items(), loaded.state_dict().items()):
            assert ka == kb and torch.equal(a, b)
        x = torch.rand(1, 1, 256, 256)
        la, _ = forward_pass(net, x)
        lb, _ = forward_pass(loaded, x)
        assert torch.equal(la, lb)

    def test_bad_magic_refused(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 32)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_version_mismatch_refused(self, tmp_path):
        net = make_variant(AblationVariant.BASELINE, TINY, seed=0)
        save_checkpoint(net, tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[8:12] = struct.pack("<I", 99)
        (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_magic_prefix(self, tmp_path):
        net = make_variant(AblationVariant.BASELINE, TINY, seed=0)
        save_checkpoint(net, tmp_path / "m.ckpt")
        assert (tmp_path / "m.ckpt").read_bytes()[:8] == MAGIC


class TestLoadConfig:
    def test_defaults_without_file(self):
        cfg = load_config(None)
        assert cfg.extraction.z_stride == 256
        assert cfg.extraction.x_stride == 64
        assert cfg.extraction.foreground_threshold == 0.01
        assert cfg.train.lambda1 == 0.001 and cfg.train.lambda2 == 1.0
        assert cfg.train.lr_start == 1e-4 and cfg.train.lr_end == 1e-5
        assert cfg.score.n_bscan == 10 and cfg.score.n_instance == 2
        assert cfg.score.m_bscans == 10

    def test_seed_cascades(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 77\nphantom:\n  dims: [320, 2, 384]\n")
        cfg = load_config(p)
        assert cfg.seed == 77
        assert cfg.phantom.seed == 77
        assert cfg.train.seed == 77
        assert cfg.score.seed == 77
        assert cfg.phantom.dims == (320, 2, 384)

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  warmup: 3\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("scoring:\n  n: 3\n")
        with pytest.raises(ConfigError):
            load_config(p)


@pytest.fixture(scope="module")
def mini_config(tmp_path_factory):
    """Small-but-real corpus config: 5+5 volumes, 2 B-scans each."""
    path = tmp_path_factory.mktemp("cfg") / "mini.yaml"
    path.write_text(
        "\n".join(
            [
                "seed: 5",
                "phantom:",
                "  dims: [320, 2, 384]",
                "synth:",
                "  n_bonafide: 5",
                "  n_pa: 5",
                "  n_subjects: 3",
                "  materials_per_kind: 1",
                "train:",
                "  batch_size: 4",
                "  epochs_pretrain: 1",
                "  epochs_main: 2",
                "  width_multiplier: 0.0625",
                "score:",
                "  m_bscans: 2",
            ]
        )
    )
    return path


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory, mini_config):
    """synth -> extract -> train once for the CLI integration tests."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    patches = root / "patches"
    ckpt = root / "model.ckpt"
    assert main(["synth", "--config", str(mini_config), "--out", str(data)]) == 0
    assert main(
        ["extract", "--config", str(mini_config), "--manifest", str(data / "manifest.json"),
         "--out", str(patches)]
    ) == 0
    assert main(
        ["train", "--config", str(mini_config), "--patches", str(patches),
         "--variant", "full_isapad", "--strategy", "S3", "--out", str(ckpt)]
    ) == 0
    return mini_config, data, patches, ckpt


@pytest.mark.slow
class TestPipeline:
    def test_synth_outputs(self, pipeline_dirs):
        _, data, _, _ = pipeline_dirs
        assert (data / "manifest.json").exists()
        assert (data / "run.json").exists()
        run = json.loads((data / "run.json").read_text())
        assert set(run) == {"config_sha256", "seed", "command", "version"}
        assert run["seed"] == 5 and run["command"] == "synth"
        assert len(run["config_sha256"]) == 64
        # bona volumes carry mask stacks
        assert (data / "vol_bona-0000_mask").is_dir()
        assert not (data / "vol_pa-0000_mask").exists()

    def test_extract_outputs(self, pipeline_dirs):
        _, _, patches, _ = pipeline_dirs
        rows = [json.loads(l) for l in (patches / "index.jsonl").read_text().splitlines()]
        assert rows, "no patches extracted"
        assert {"file", "sample_id", "y", "x", "z", "label"} <= set(rows[0])
        bona_rows = [r for r in rows if r["label"] == "bonafide"]
        assert all("mask_file" in r for r in bona_rows)
        samples = load_train_patches(patches)
        assert any(s.label == 1 and s.mask is not None for s in samples)

    def test_train_outputs(self, pipeline_dirs):
        _, _, _, ckpt = pipeline_dirs
        assert ckpt.exists()
        assert ckpt.with_suffix(".history.csv").exists()
        net, extra = load_checkpoint(ckpt)
        assert extra["strategy"] == "S3"

    def test_full_pipeline_report(self, pipeline_dirs, tmp_path):
        cfg, data, _, ckpt = pipeline_dirs
        scores = tmp_path / "scores.csv"
        report = tmp_path / "report.json"
        det = tmp_path / "det.csv"
        assert main(
            ["score", "--config", str(cfg), "--ckpt", str(ckpt),
             "--manifest", str(data / "manifest.json"), "--level", "instance",
             "--out", str(scores)]
        ) == 0
        assert main(
            ["eval", "--scores", str(scores), "--out", str(report), "--det", str(det)]
        ) == 0
        result = json.loads(report.read_text())
        assert {"eer", "hter", "auc", "n_bona", "n_pa", "fold"} == set(result)
        assert result["n_bona"] == 5 and result["n_pa"] == 5
        assert det.read_text().splitlines()[0] == "threshold,fpr,fnr"

    def test_score_rerun_byte_identical(self, pipeline_dirs, tmp_path):
        cfg, data, _, ckpt = pipeline_dirs
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert main(
                ["score", "--config", str(cfg), "--ckpt", str(ckpt),
                 "--manifest", str(data / "manifest.json"), "--level", "bscan",
                 "--out", str(out)]
            ) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_viz_heatmap_and_features(self, pipeline_dirs, tmp_path):
        _, _, patches, ckpt = pipeline_dirs
        rows = [json.loads(l) for l in (patches / "index.jsonl").read_text().splitlines()]
        patch_file = patches / rows[0]["file"]
        heat = tmp_path / "heat.png"
        assert main(
            ["viz", "--ckpt", str(ckpt), "--patch", str(patch_file), "--out", str(heat)]
        ) == 0
        from PIL import Image

        img = Image.open(heat)
        assert img.size == (256, 256) and img.mode == "RGB"

        feats = tmp_path / "features.csv"
        assert main(
            ["viz", "--ckpt", str(ckpt), "--features", "--patches", str(patches),
             "--out", str(feats)]
        ) == 0
        lines = feats.read_text().splitlines()
        assert len(lines) == len(rows) + 1
        assert lines[0].startswith("sample_id,label,f0,")


class TestRawBinaryPipeline:
    def test_synth_and_extract_roundtrip(self, tmp_path):
        cfg = tmp_path / "raw.yaml"
        cfg.write_text(
            "\n".join(
                [
                    "seed: 11",
                    "phantom:",
                    "  dims: [320, 2, 384]",
                    "synth:",
                    "  n_bonafide: 2",
                    "  n_pa: 2",
                    "  n_subjects: 2",
                    "  format: raw_binary",
                ]
            )
        )
        data = tmp_path / "data"
        patches = tmp_path / "patches"
        assert main(["synth", "--config", str(cfg), "--out", str(data)]) == 0
        assert (data / "vol_bona-0000.octv").is_file()
        assert (data / "vol_bona-0000.octv.meta.json").is_file()
        assert (data / "vol_bona-0000_mask").is_dir()
        assert main(
            ["extract", "--config", str(cfg), "--manifest", str(data / "manifest.json"),
             "--out", str(patches)]
        ) == 0
        rows = (patches / "index.jsonl").read_text().splitlines()
        assert rows
        bona_rows = [json.loads(r) for r in rows if json.loads(r)["label"] == "bonafide"]
        assert bona_rows and all("mask_file" in r for r in bona_rows)


class TestEvalFolds:
    def _write_manifest(self, path, n_bona=6, n_pa=6):
        rows = []
        for i in range(n_bona):
            rows.append(
                {"path": f"b{i}", "meta": {"sample_id": f"b{i}", "label": "bonafide",
                                           "material": "", "pa_category": "none",
                                           "subject_id": f"s{i % 3}"}}
            )
        for i in range(n_pa):
            rows.append(
                {"path": f"p{i}", "meta": {"sample_id": f"p{i}", "label": "pa",
                                           "material": f"m{i % 3}", "pa_category": "external",
                                           "subject_id": ""}}
            )
        path.write_text(json.dumps(rows))

    def test_fold_reports_written(self, tmp_path):
        manifest = tmp_path / "manifest.json"
        self._write_manifest(manifest)
        scores = tmp_path / "scores.csv"
        lines = ["sample_id,label,score"]
        lines += [f"b{i},bonafide,0.9{i}" for i in range(6)]
        lines += [f"p{i},pa,0.0{i}" for i in range(6)]
        scores.write_text("\n".join(lines) + "\n")
        report = tmp_path / "report.json"
        assert main(
            ["eval", "--scores", str(scores), "--out", str(report),
             "--folds", "3", "--manifest", str(manifest), "--seed", "4"]
        ) == 0
        summary = json.loads(report.read_text())
        assert summary["fold"] == -1 and len(summary["folds"]) == 3
        assert summary["eer"] == 0.0 and summary["auc"] == 1.0
        for i in range(3):
            fold_report = json.loads((tmp_path / f"report_fold{i}.json").read_text())
            assert fold_report["fold"] == i
            assert {"eer", "hter", "auc", "n_bona", "n_pa", "fold"} == set(fold_report)


class TestEvalFixture:
    def test_worked_example_scores(self, tmp_path):
        # 3 + 3 fixture with a known equal-error crossing at one third
        fixture = Path(__file__).parent / "data" / "scores_3plus3.csv"
        report = tmp_path / "report.json"
        assert main(["eval", "--scores", str(fixture), "--out", str(report)]) == 0
        result = json.loads(report.read_text())
        assert result["eer"] == pytest.approx(1 / 3)
        assert result["auc"] == pytest.approx(8 / 9)

    def test_error_line_on_stderr(self, tmp_path, capsys):
        rc = main(["eval", "--scores", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "r.json")])
        assert rc != 0
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1
        assert err[0].startswith("ERROR ") and ":" in err[0]

    def test_folds_requires_manifest(self, tmp_path):
        fixture = Path(__file__).parent / "data" / "scores_3plus3.csv"
        rc = main(
            ["eval", "--scores", str(fixture), "--out", str(tmp_path / "r.json"), "--folds", "3"]
        )
        assert rc != 0
