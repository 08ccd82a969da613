import json

import pytest

from hdrfuse.cli import main
from hdrfuse.scene import load_manifest


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    summary = json.loads(captured.out) if captured.out.strip() else None
    error = json.loads(captured.err) if captured.err.strip() else None
    return code, summary, error


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


TINY_SCENE = {
    "scene": {
        "resolution": [24, 24],
        "num_frames": 4,
        "counts": {"A": 2, "B": 1},
        "domains": {
            "A": {"backgrounds": ["gradient-sky"], "lighting": [0.9, 1.1]},
            "B": {"backgrounds": ["night-lights"], "lighting": [0.9, 1.1]},
        },
    },
    "model": {"epochs": 2, "crop": 16, "base_channels": 8, "depth": 3,
              "calibration_samples": 1},
    "adapter": {"epochs": 2, "crop": 16},
}


@pytest.fixture
def generated(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY_SCENE)
    out = tmp_path / "gen"
    code, summary, _ = run_cli(capsys, "gen", "--config", cfg, "--out", str(out), "--seed", "3")
    assert code == 0 and summary["sequences"] == 3
    return cfg, out


class TestGen:
    def test_single_sequence(self, tmp_path, capsys):
        doc = {"scene": {"resolution": [16, 16], "num_frames": 3, "counts": {"A": 1},
                         "domains": {"A": {"backgrounds": ["gradient-sky"]}}}}
        cfg = write_config(tmp_path, doc)
        code, summary, _ = run_cli(capsys, "gen", "--config", cfg,
                                   "--out", str(tmp_path / "o"))
        assert code == 0
        items = load_manifest(tmp_path / "o" / "manifest.json", kind="sequences")
        assert len(items) == 1

    def test_domain_split_counts(self, generated):
        _, out = generated
        items = load_manifest(out / "manifest.json", kind="sequences")
        domains = [it["domain"] for it in items]
        assert domains.count("A") == 2 and domains.count("B") == 1

    def test_seed_determinism_byte_identical(self, tmp_path, capsys):
        cfg = write_config(tmp_path, TINY_SCENE)
        outs = []
        for name in ("g1", "g2"):
            out = tmp_path / name
            code, _, _ = run_cli(capsys, "gen", "--config", cfg, "--out", str(out),
                                 "--seed", "7")
            assert code == 0
            outs.append(out)
        frames_a = sorted((outs[0] / "sequences").rglob("*.pfm"))
        frames_b = sorted((outs[1] / "sequences").rglob("*.pfm"))
        assert len(frames_a) == len(frames_b) > 0
        for a, b in zip(frames_a, frames_b):
            assert a.read_bytes() == b.read_bytes()

    def test_unknown_config_key_exit_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"scene": {"resolutionn": [8, 8]}})
        code, _, error = run_cli(capsys, "gen", "--config", cfg, "--out", str(tmp_path / "x"))
        assert code == 2
        assert error["error"] == "config"
        assert "resolutionn" in error["message"]

    def test_invalid_json_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code, _, error = run_cli(capsys, "gen", "--config", str(bad),
                                 "--out", str(tmp_path / "x"))
        assert code == 2

    def test_config_snapshot_written(self, generated):
        _, out = generated
        snapshot = json.loads((out / "config.json").read_text())
        assert snapshot["scene"]["counts"] == {"A": 2, "B": 1}


class TestSynthAnalyze:
    def test_synth_and_analyze(self, generated, tmp_path, capsys):
        cfg, gen_out = generated
        synth_out = tmp_path / "brackets"
        code, summary, _ = run_cli(capsys, "synth", "--config", cfg,
                                   "--manifest", str(gen_out / "manifest.json"),
                                   "--out", str(synth_out), "--seed", "3")
        assert code == 0 and summary["brackets"] == 3
        items = load_manifest(synth_out / "manifest.json", kind="brackets")
        assert {it["domain"] for it in items} == {"A", "B"}

        an_out = tmp_path / "analysis"
        code, summary, _ = run_cli(capsys, "analyze",
                                   "--manifest", str(gen_out / "manifest.json"),
                                   "--out", str(an_out))
        assert code == 0
        assert summary["images"] == 12  # 3 sequences x 4 frames
        report = json.loads((an_out / "report.json").read_text())
        assert len(report["per_image"]) == 12
        csv_text = (an_out / "report.csv").read_text().splitlines()
        assert csv_text[0].startswith("dataset,size,fhlp,ehl,si,cf,stdl,all,dr")
        assert len(csv_text) >= 3  # A, B, all

    def test_missing_manifest_exit_3(self, tmp_path, capsys):
        code, _, error = run_cli(capsys, "analyze", "--manifest",
                                 str(tmp_path / "absent.json"), "--out", str(tmp_path / "r"))
        assert code == 3
        assert error["error"] == "data"


class TestHelp:
    def test_help_lists_all_commands(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for cmd in ("gen", "synth", "analyze", "train", "finetune", "adapt",
                    "tta", "eval", "merge", "ablate"):
            assert cmd in text


class TestPipelineCommands:
    @pytest.fixture
    def pipeline(self, tmp_path, capsys):
        doc = {
            "scene": {"resolution": [24, 24], "num_frames": 4, "counts": {"A": 2},
                      "domains": {"A": {"backgrounds": ["gradient-sky"]}}},
            "model": {"epochs": 2, "crop": 16, "base_channels": 8, "depth": 3,
                      "calibration_samples": 1},
            "adapter": {"epochs": 1, "crop": 16},
            "tta": {"lr": 1e-4, "view_noise": 0.0},
        }
        cfg = write_config(tmp_path, doc)
        gen = tmp_path / "gen"
        assert run_cli(capsys, "gen", "--config", cfg, "--out", str(gen))[0] == 0
        synth = tmp_path / "br"
        assert run_cli(capsys, "synth", "--config", cfg,
                       "--manifest", str(gen / "manifest.json"), "--out", str(synth))[0] == 0
        ckpt = tmp_path / "model.ckpt"
        code, summary, _ = run_cli(capsys, "train", "--config", cfg,
                                   "--manifest", str(synth / "manifest.json"),
                                   "--out", str(ckpt))
        assert code == 0 and summary["uncertainty_scale"] > 0
        return cfg, synth, ckpt, tmp_path

    def test_adapt_tta_eval_merge(self, pipeline, capsys):
        cfg, synth, ckpt, tmp_path = pipeline
        manifest = str(synth / "manifest.json")
        adapted = tmp_path / "adapted.ckpt"
        code, _, _ = run_cli(capsys, "adapt", "--config", cfg, "--manifest", manifest,
                             "--checkpoint", str(ckpt), "--out", str(adapted))
        assert code == 0
        tta_out = tmp_path / "tta"
        code, summary, _ = run_cli(capsys, "tta", "--config", cfg, "--manifest", manifest,
                                   "--checkpoint", str(ckpt), "--out", str(tta_out))
        assert code == 0 and summary["samples"] == 2
        assert (tta_out / "diagnostics.jsonl").exists()
        code, summary, _ = run_cli(capsys, "eval", "--config", cfg, "--pred", str(tta_out),
                                   "--manifest", manifest, "--out", str(tmp_path / "ev"))
        assert code == 0 and summary["pairs"] == 2
        merged = tmp_path / "merged.ckpt"
        code, summary, _ = run_cli(capsys, "merge", "--checkpoint", str(adapted),
                                   "--out", str(merged))
        assert code == 0 and summary["max_deviation"] < 1e-5

    def test_merge_without_adapters_exit_3(self, pipeline, capsys):
        _, _, ckpt, tmp_path = pipeline
        code, _, error = run_cli(capsys, "merge", "--checkpoint", str(ckpt),
                                 "--out", str(tmp_path / "m.ckpt"))
        assert code == 3 and error["error"] == "data"

    def test_finetune_command(self, pipeline, capsys):
        cfg, synth, ckpt, tmp_path = pipeline
        out = tmp_path / "ft.ckpt"
        code, _, _ = run_cli(capsys, "finetune", "--config", cfg,
                             "--manifest", str(synth / "manifest.json"),
                             "--checkpoint", str(ckpt), "--out", str(out), "--epochs", "1")
        assert code == 0 and out.exists()

    def test_ablate_single_row_is_single_run(self, pipeline, capsys):
        cfg, synth, ckpt, tmp_path = pipeline
        manifest = str(synth / "manifest.json")
        out = tmp_path / "abl"
        code, summary, _ = run_cli(capsys, "ablate", "--config", cfg, "--grid", "tta",
                                   "--rows", "frozen", "--manifest", manifest,
                                   "--checkpoint", str(ckpt), "--out", str(out))
        assert code == 0 and summary["rows"] == ["frozen"]
        table = json.loads((out / "ablation_tta.json").read_text())
        assert len(table) == 1
        header = (out / "ablation_tta.csv").read_text().splitlines()[0]
        assert header == "row,PSNR-mu,PSNR-l,SSIM-mu,SSIM-l"

    def test_ablate_adapter_grid_schema(self, pipeline, capsys):
        cfg, synth, ckpt, tmp_path = pipeline
        manifest = str(synth / "manifest.json")
        out = tmp_path / "abl2"
        code, summary, _ = run_cli(capsys, "ablate", "--config", cfg, "--grid", "adapter",
                                   "--rows", "fine-tune,share-only", "--epochs", "1",
                                   "--manifest", manifest, "--train-manifest", manifest,
                                   "--checkpoint", str(ckpt), "--out", str(out))
        assert code == 0 and summary["rows"] == ["fine-tune", "share-only"]
        table = json.loads((out / "ablation_adapter.json").read_text())
        assert {r["row"] for r in table} == {"fine-tune", "share-only"}
        for row in table:
            assert set(row) == {"row", "psnr_mu", "psnr_l", "ssim_mu", "ssim_l"}

    def test_ablate_unknown_row_exit_2(self, pipeline, capsys):
        cfg, synth, ckpt, tmp_path = pipeline
        code, _, error = run_cli(capsys, "ablate", "--config", cfg, "--grid", "tta",
                                 "--rows", "nonsense", "--manifest",
                                 str(synth / "manifest.json"),
                                 "--checkpoint", str(ckpt), "--out", str(tmp_path / "x"))
        assert code == 2


class TestParallelism:
    def test_jobs_do_not_change_outputs(self, tmp_path, capsys):
        cfg = write_config(tmp_path, TINY_SCENE)
        seq, par = tmp_path / "seq", tmp_path / "par"
        assert run_cli(capsys, "gen", "--config", cfg, "--out", str(seq),
                       "--seed", "4", "--jobs", "1")[0] == 0
        assert run_cli(capsys, "gen", "--config", cfg, "--out", str(par),
                       "--seed", "4", "--jobs", "2")[0] == 0
        a = sorted((seq / "sequences").rglob("*.pfm"))
        b = sorted((par / "sequences").rglob("*.pfm"))
        assert len(a) == len(b) > 0
        for fa, fb in zip(a, b):
            assert fa.read_bytes() == fb.read_bytes()

    def test_jobs_env_default(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("S2R_JOBS", "2")
        cfg = write_config(tmp_path, TINY_SCENE)
        out = tmp_path / "env"
        assert run_cli(capsys, "gen", "--config", cfg, "--out", str(out), "--seed", "4")[0] == 0
        assert (out / "manifest.json").exists()


class TestNumericContract:
    def test_merge_violation_exit_4(self, tmp_path, capsys):
        # adapter weights so large that float32 rounding breaks 1e-5 equivalence
        from hdrfuse.adapter import adapted_layers, full_checkpoint, inject
        from hdrfuse.model import FusionNet, FusionNetConfig

        net = FusionNet(FusionNetConfig(base_channels=8, depth=3), seed=0)
        inject(net, seed=1)
        for ad in adapted_layers(net).values():
            ad.transfer.u.data[:] = 3e3
            ad.transfer.v.data[:] = 3e3
        path = tmp_path / "huge.ckpt"
        full_checkpoint(net).save(path)
        code, _, error = run_cli(capsys, "merge", "--checkpoint", str(path),
                                 "--out", str(tmp_path / "m.ckpt"))
        assert code == 4
        assert error["error"] == "numeric-contract"


class TestIdempotence:
    def test_synth_byte_identical_rerun(self, generated, tmp_path, capsys):
        cfg, gen_out = generated
        outs = []
        for name in ("s1", "s2"):
            out = tmp_path / name
            assert run_cli(capsys, "synth", "--config", cfg,
                           "--manifest", str(gen_out / "manifest.json"),
                           "--out", str(out), "--seed", "3")[0] == 0
            outs.append(out)
        files_a = sorted(p for p in outs[0].rglob("*") if p.is_file())
        files_b = sorted(p for p in outs[1].rglob("*") if p.is_file())
        assert len(files_a) == len(files_b) > 0
        for fa, fb in zip(files_a, files_b):
            if fa.name == "manifest.json":
                # manifests embed their own output paths
                a = fa.read_text().replace(str(outs[0]), "@")
                b = fb.read_text().replace(str(outs[1]), "@")
                assert a == b
            else:
                assert fa.read_bytes() == fb.read_bytes(), fa.name


def test_commands_do_not_mutate_inputs(generated, tmp_path, capsys):
    cfg, gen_out = generated
    import hashlib

    def tree_hash(root):
        digest = hashlib.sha256()
        for p in sorted(root.rglob("*")):
            if p.is_file():
                digest.update(p.name.encode())
                digest.update(p.read_bytes())
        return digest.hexdigest()

    before = tree_hash(gen_out)
    assert run_cli(capsys, "synth", "--config", cfg,
                   "--manifest", str(gen_out / "manifest.json"),
                   "--out", str(tmp_path / "out"))[0] == 0
    assert run_cli(capsys, "analyze", "--manifest", str(gen_out / "manifest.json"),
                   "--out", str(tmp_path / "an"))[0] == 0
    assert tree_hash(gen_out) == before
