import json

import numpy as np
import pytest

from vqvcplus.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, RunConfig, UsageError, _pad_frames, main
from vqvcplus.features import FeatureExtractor, load_wav, read_manifest, read_mel
from vqvcplus.training import load_checkpoint, parse_curve

TINY_MODEL = {"channel_schedule": [16, 16, 16], "codebook_size": 8, "groups": 4}
TINY = {
    "model": TINY_MODEL,
    "train": {"learning_rate": 0.001, "batch_size": 2, "steps": 6, "checkpoint_interval": 3},
    "probe": {"hidden": 16, "steps": 20, "eval_every": 10, "patience": 20},
    "data": {"holdout_per_speaker": 1},
}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["make-corpus", "--speakers", "2", "--utterances", "4", "--seconds", "1.0", "--out", str(out), "--force"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("run")
    cfg = write_config(out.parent / "tiny.json", TINY)
    assert main(["train", "--config", cfg, "--corpus", str(corpus_dir), "--out", str(out)]) == EXIT_OK
    return out


class TestRunConfig:
    def test_round_trip(self):
        cfg = RunConfig.from_dict(TINY)
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("bad", [{"modle": {}}, {"train": {"lr": 1}}, {"model": {"width": 3}}])
    def test_unknown_key(self, bad):
        with pytest.raises(UsageError, match="unknown config key"):
            RunConfig.from_dict(bad)

    def test_invalid_value(self):
        with pytest.raises(UsageError):
            RunConfig.from_dict({"train": {"steps": 0}})


class TestMakeCorpus:
    def test_counts(self, tmp_path):
        assert main(["make-corpus", "--speakers", "8", "--utterances", "40", "--seconds", "0.3", "--out", str(tmp_path / "c")]) == 0
        assert len(list((tmp_path / "c").rglob("*.wav"))) == 320
        assert len(read_manifest(tmp_path / "c")) == 320
        assert (tmp_path / "c" / "resolved_config.json").exists()

    def test_same_seed_identical(self, tmp_path):
        for name in ("a", "b"):
            args = ["make-corpus", "--speakers", "2", "--utterances", "2", "--seconds", "0.5", "--seed", "4"]
            assert main(args + ["--out", str(tmp_path / name)]) == 0
        assert tree(tmp_path / "a") == tree(tmp_path / "b")

    def test_one_speaker_usage_error(self, tmp_path, capsys):
        assert main(["make-corpus", "--speakers", "1", "--out", str(tmp_path / "x")]) == EXIT_USAGE
        assert "speakers" in capsys.readouterr().err

    def test_non_empty_needs_force(self, tmp_path):
        (tmp_path / "keep.txt").write_text("x")
        args = ["make-corpus", "--speakers", "2", "--utterances", "1", "--seconds", "0.3", "--out", str(tmp_path)]
        assert main(args) == EXIT_USAGE
        assert main(args + ["--force"]) == EXIT_OK

    def test_missing_required_flag(self):
        assert main(["make-corpus", "--speakers", "2"]) == EXIT_USAGE


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "final.vqvc").exists()
        rows = parse_curve((trained / "loss.csv").read_text())
        assert len(rows) == 6
        echo = json.loads((trained / "resolved_config.json").read_text())
        assert echo["command"] == "train" and echo["config"]["model"]["codebook_size"] == 8

    def test_steps_zero_config_error(self, tmp_path, corpus_dir):
        assert main(["train", "--corpus", str(corpus_dir), "--out", str(tmp_path), "--steps", "0"]) == EXIT_USAGE

    def test_malformed_key_named(self, tmp_path, corpus_dir, capsys):
        cfg = write_config(tmp_path / "bad.json", {"train": {"learning_rte": 0.1}})
        assert main(["train", "--config", cfg, "--corpus", str(corpus_dir), "--out", str(tmp_path / "o")]) == EXIT_USAGE
        assert "learning_rte" in capsys.readouterr().err

    def test_resume_matches(self, tmp_path, trained, corpus_dir):
        out = tmp_path / "resumed"
        out.mkdir()
        rows = (trained / "loss.csv").read_text().splitlines()
        (out / "loss.csv").write_text("\n".join(rows[:4]) + "\n")
        assert main(["train", "--resume", str(trained / "ckpt_000003.vqvc"), "--corpus", str(corpus_dir), "--out", str(out)]) == 0
        assert (out / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()

    def test_divergence_exit_code(self, tmp_path, corpus_dir):
        cfg = dict(TINY, train={"learning_rate": 1e6, "batch_size": 2, "steps": 20, "divergence_window": 2})
        path = write_config(tmp_path / "hot.json", cfg)
        args = ["train", "--config", path, "--corpus", str(corpus_dir), "--out", str(tmp_path / "o"), "--no-fallback"]
        assert main(args) == EXIT_NUMERIC


class TestConvert:
    def test_self_conversion_and_duration(self, tmp_path, trained, corpus_dir):
        wav = str(corpus_dir / "spk000" / "utt0000.wav")
        out = tmp_path / "same.wav"
        args = ["convert", "--ckpt", str(trained / "final.vqvc"), "--src", wav, "--tgt", wav, "--out", str(out)]
        assert main(args + ["--mel-out", str(tmp_path / "same.mel"), "--iterations", "2"]) == 0
        converted = read_mel(tmp_path / "same.mel").values

        fx = FeatureExtractor()
        src = fx.prepare(load_wav(wav))
        mel = fx(src).values.astype(np.float32)
        model = load_checkpoint(trained / "final.vqvc").build_model()
        padded = _pad_frames(mel, 8, 1e-5)
        np.testing.assert_array_equal(converted, model.reconstruct(padded).x_hat.data[:, : mel.shape[1]])
        assert abs(len(load_wav(out)) - len(src)) <= 256
        assert (tmp_path / "resolved_config.json").exists()

    def test_cross_speaker_runs(self, tmp_path, trained, corpus_dir):
        args = [
            "convert", "--ckpt", str(trained / "final.vqvc"),
            "--src", str(corpus_dir / "spk000" / "utt0001.wav"),
            "--tgt", str(corpus_dir / "spk001" / "utt0001.wav"),
            "--out", str(tmp_path / "x.wav"), "--iterations", "1",
        ]
        assert main(args) == 0

    def test_short_input_rejected(self, tmp_path, trained):
        from vqvcplus.features import AudioClip, save_wav

        save_wav(tmp_path / "short.wav", AudioClip(0.3 * np.sin(np.arange(4000) * 0.2), 22050))
        args = ["convert", "--ckpt", str(trained / "final.vqvc"), "--src", str(tmp_path / "short.wav")]
        assert main(args + ["--tgt", str(tmp_path / "short.wav"), "--out", str(tmp_path / "o.wav")]) == EXIT_USAGE

    def test_config_mismatch(self, tmp_path, trained, corpus_dir, capsys):
        cfg = write_config(tmp_path / "wide.json", {"model": dict(TINY_MODEL, channel_schedule=[32, 32, 32])})
        wav = str(corpus_dir / "spk000" / "utt0000.wav")
        args = ["convert", "--ckpt", str(trained / "final.vqvc"), "--src", wav, "--tgt", wav]
        assert main(args + ["--out", str(tmp_path / "o.wav"), "--config", cfg]) == EXIT_USAGE
        assert "channel_schedule" in capsys.readouterr().err


class TestFeatureCommands:
    def test_extract_and_render(self, tmp_path, corpus_dir):
        wav = str(corpus_dir / "spk001" / "utt0002.wav")
        assert main(["extract", "--wav", wav, "--out", str(tmp_path / "a.mel"), "--csv"]) == 0
        mel = read_mel(tmp_path / "a.mel")
        assert mel.n_mels == 80 and (tmp_path / "a.csv").exists()
        assert main(["render", "--mel", str(tmp_path / "a.mel"), "--out", str(tmp_path / "a.wav"), "--iterations", "2"]) == 0
        assert len(load_wav(tmp_path / "a.wav")) == 256 * (mel.frames - 1)


class TestProbeAblate:
    def test_probe_c_levels(self, tmp_path, trained, corpus_dir, capsys):
        cfg = write_config(tmp_path / "p.json", TINY)
        args = ["probe", "--ckpt", str(trained / "final.vqvc"), "--corpus", str(corpus_dir), "--out", str(tmp_path)]
        assert main(args + ["--which", "C", "--config", cfg]) == 0
        lines = (tmp_path / "probe.csv").read_text().splitlines()
        assert lines[0] == "embedding,level,accuracy" and len(lines) == 4
        assert all(0 <= float(l.split(",")[2]) <= 100 for l in lines[1:])
        assert (tmp_path / "embeddings_c0.csv").exists()
        assert "C2" in capsys.readouterr().out

    def test_bad_level(self, tmp_path, trained, corpus_dir):
        args = ["probe", "--ckpt", str(trained / "final.vqvc"), "--corpus", str(corpus_dir), "--out", str(tmp_path)]
        assert main(args + ["--levels", "5"]) == EXIT_USAGE

    def test_ablate_default_variants(self, tmp_path, corpus_dir):
        cfg = write_config(tmp_path / "a.json", dict(TINY, train={"learning_rate": 0.001, "batch_size": 2, "steps": 2}))
        outs = []
        for name in ("a", "b"):
            args = ["ablate", "--corpus", str(corpus_dir), "--out", str(tmp_path / name), "--seeds", "0", "--config", cfg]
            assert main(args) == 0
            outs.append((tmp_path / name / "ablation.csv").read_text())
        lines = outs[0].splitlines()
        assert lines[0] == "variant,acc_c0,acc_c1,acc_c2,acc_s0,acc_s1,acc_s2,l1"
        assert [l.split(",")[0] for l in lines[1:]] == ["Q32", "Q64", "Q256", "IN-only"]
        assert outs[0] == outs[1]

    def test_unknown_variant(self, tmp_path, corpus_dir):
        assert main(["ablate", "--corpus", str(corpus_dir), "--out", str(tmp_path), "--variants", "Q64,VQ9"]) == EXIT_USAGE
