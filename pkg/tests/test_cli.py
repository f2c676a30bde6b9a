import json

import numpy as np
import pytest

from mmvit.cli import main
from mmvit.config import AugmentConfig, MMViTConfig, RunConfig, TrainConfig
from mmvit.data import make_synthetic
from mmvit.formats import read_ntc, write_wav
from mmvit.model import MMViT
from mmvit.train import save_model

MICRO = MMViTConfig(input=(1, 16, 8), embed_dim=8, stage_self_counts=(0, 1), heads=(1, 2), num_classes=4, task="single-label")


@pytest.fixture
def micro_cfg(tmp_path):
    cfg = RunConfig(model=MICRO, aug=AugmentConfig(enabled=False), train=TrainConfig(lr=3e-3, weight_decay=0.0, epochs=20))
    path = tmp_path / "micro.cfg"
    path.write_text(cfg.dumps())
    return path


@pytest.fixture
def micro_data(tmp_path):
    root = tmp_path / "data"
    assert main(["synth-data", "--out", str(root), "--samples", "8", "--classes", "4", "--shape", "1,16,8"]) == 0
    return root


def run(capsys, *argv):
    capsys.readouterr()
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestInspect:
    def test_default_schedule_table(self, capsys):
        code, out, _ = run(capsys, "inspect", "--config", "audio")
        assert code == 0
        rows = [line.split() for line in out.splitlines() if line.split() and line.split()[0].isdigit()]
        assert [int(r[0]) for r in rows] == list(range(1, 17))
        kinds = {int(r[0]): r[2] for r in rows}
        assert [int(r[1]) for r in rows] == [1, 1, 2, 2] + [3] * 11 + [4]
        assert [i for i, k in kinds.items() if k == "cross"] == [1, 3, 14]
        assert [i for i, k in kinds.items() if k == "scaled"] == [2, 4, 15]
        header = next(line for line in out.splitlines() if "kind" in line)
        assert "params" in header and "FLOPs" in header
        assert "model.embed_dim=96" in out

    def test_unknown_key_is_usage_error(self, capsys):
        code, _, err = run(capsys, "inspect", "--set", "model.embed_dims=8")
        assert code == 2 and "embed_dims" in err

    def test_no_command(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2


class TestTrainEval:
    def test_train_resume_eval(self, capsys, tmp_path, micro_cfg, micro_data):
        out = tmp_path / "run"
        code, text, _ = run(capsys, "train", "--config", micro_cfg, "--data", micro_data, "--out", out, "--epochs", 10, "--seed", 1)
        assert code == 0, text
        assert "train.seed=1" in text and "train.epochs=10" in text
        assert (out / "best.ckpt").is_file() and (out / "metrics.csv").is_file()
        code, text, _ = run(capsys, "train", "--config", micro_cfg, "--data", micro_data, "--out", out, "--epochs", 40, "--seed", 1, "--resume")
        assert code == 0
        steps = [int(line.split(",")[1]) for line in (out / "metrics.csv").read_text().splitlines()[1:]]
        assert steps == list(range(1, 41))

        code, text, _ = run(capsys, "eval", "--config", micro_cfg, "--ckpt", out / "best.ckpt", "--data", micro_data)
        assert code == 0
        assert "top1=1.000000 over 8 samples" in text
        record = json.loads((out / "best.ckpt.eval.jsonl").read_text().splitlines()[-1])
        assert record["metric"] == "top1" and record["value"] == 1.0

    def test_no_cutmix_flag_resolves(self, capsys, tmp_path, micro_cfg, micro_data):
        code, text, _ = run(capsys, "train", "--config", micro_cfg, "--data", micro_data, "--out", tmp_path / "r", "--epochs", 1, "--no-cutmix")
        assert code == 0 and "aug.cutmix=false" in text

    def test_resume_without_checkpoint(self, capsys, tmp_path, micro_cfg, micro_data):
        code, _, err = run(capsys, "train", "--config", micro_cfg, "--data", micro_data, "--out", tmp_path / "none", "--resume")
        assert code == 2 and "last.ckpt" in err

    def test_missing_checkpoint_exit_2(self, capsys, tmp_path, micro_cfg, micro_data):
        code, _, err = run(capsys, "eval", "--config", micro_cfg, "--ckpt", tmp_path / "nope.ckpt", "--data", micro_data)
        assert code == 2 and "not found" in err

    def test_multilabel_data_with_single_label_config(self, capsys, tmp_path, micro_cfg):
        make_synthetic(tmp_path / "ml", 6, 4, shape=(1, 16, 8), multilabel=True, seed=3)
        code, _, err = run(capsys, "train", "--config", micro_cfg, "--data", tmp_path / "ml", "--out", tmp_path / "r")
        assert code == 2 and "model.task" in err

    def test_corrupt_checkpoint_exit_1(self, capsys, tmp_path, micro_cfg, micro_data):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"MMVC\x01\x00")
        code, _, err = run(capsys, "eval", "--config", micro_cfg, "--ckpt", bad, "--data", micro_data)
        assert code == 1 and "truncated" in err

    def test_foreign_checkpoint_exit_2(self, capsys, tmp_path, micro_cfg, micro_data):
        other = RunConfig(model=MICRO.__class__(**{**MICRO.__dict__, "embed_dim": 4}))
        save_model(MMViT(other.model), other, tmp_path / "other.ckpt")
        code, _, err = run(capsys, "eval", "--config", micro_cfg, "--ckpt", tmp_path / "other.ckpt", "--data", micro_data)
        assert code == 2 and "fingerprint" in err

    def test_missing_dataset_exit_1(self, capsys, tmp_path, micro_cfg):
        code, _, err = run(capsys, "train", "--config", micro_cfg, "--data", tmp_path / "void", "--out", tmp_path / "r")
        assert code == 1 and "manifest" in err


class TestExtract:
    def test_ten_second_clip(self, capsys, tmp_path):
        rng = np.random.default_rng(0)
        write_wav(tmp_path / "clip.wav", 0.1 * rng.standard_normal(160000), 16000)
        code, text, _ = run(capsys, "extract-features", "--wav", tmp_path / "clip.wav", "--out", tmp_path / "feat")
        assert code == 0
        assert read_ntc(tmp_path / "feat" / "clip.ntc").shape == (1024, 128)

    def test_empty_directory(self, capsys, tmp_path):
        (tmp_path / "empty").mkdir()
        code, _, err = run(capsys, "extract-features", "--wav-dir", tmp_path / "empty", "--out", tmp_path / "feat")
        assert code == 0 and "warning" in err
        assert not (tmp_path / "feat").exists() or not any((tmp_path / "feat").iterdir())

    def test_corrupt_file_listed(self, capsys, tmp_path):
        wavs = tmp_path / "wavs"
        wavs.mkdir()
        write_wav(wavs / "good.wav", np.zeros(16000), 16000)
        (wavs / "bad.wav").write_bytes(b"RIFF\x00\x00")
        code, text, err = run(capsys, "extract-features", "--wav-dir", wavs, "--out", tmp_path / "feat")
        assert code == 1
        assert "bad.wav" in err and "1 written, 1 failed" in text
        assert (tmp_path / "feat" / "good.ntc").is_file()


class TestTransferAndPreview:
    def test_transfer_writes_audit_log(self, capsys, tmp_path):
        src_cfg = RunConfig(model=MMViTConfig(input=(3, 32, 32), embed_dim=8, stage_self_counts=(0, 1), heads=(1, 2), num_classes=10, task="single-label"))
        save_model(MMViT(src_cfg.model), src_cfg, tmp_path / "img.ckpt")
        dst = tmp_path / "dst.cfg"
        dst.write_text(RunConfig(model=MICRO).dumps())
        code, text, _ = run(capsys, "transfer", "--from", tmp_path / "img.ckpt", "--to-config", dst, "--out", tmp_path / "aud.ckpt")
        assert code == 0
        assert "ChannelAverage  embed.views.0.patch.weight" in text
        assert "Interpolate     embed.views.0.pos.spatial_h  (16 -> 8)" in text
        assert (tmp_path / "aud.ckpt").is_file()
        code, text, _ = run(capsys, "inspect", "--config", tmp_path / "aud.ckpt.cfg")
        assert code == 0

    def test_transfer_mismatch_exit_2(self, capsys, tmp_path):
        save_model(MMViT(MICRO), RunConfig(model=MICRO), tmp_path / "a.ckpt")
        code, _, err = run(capsys, "transfer", "--from", tmp_path / "a.ckpt", "--to-config", "tiny", "--out", tmp_path / "b.ckpt")
        assert code == 2 and "model.embed_dim" in err

    def test_preview_prints_lambdas_deterministically(self, capsys, tmp_path, micro_data):
        args = ("augment-preview", "--config", "tiny", "--data", micro_data, "--out", tmp_path / "p", "--seed", 5)
        code, first, _ = run(capsys, *args)
        assert code == 0
        assert first.count("lambda=") == 4 and "op=cutmix" in first and "op=mixup" in first
        _, second, _ = run(capsys, *args)
        assert first == second
        assert len(list((tmp_path / "p").glob("*.ntc"))) == 8
