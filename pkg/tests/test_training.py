import numpy as np
import pytest

from vqvcplus.autodiff import Tensor
from vqvcplus.features import AudioClip, default_speakers, synth_corpus
from vqvcplus.model import ModelConfig, VQVCPlus
from vqvcplus.training import (
    LOSS_HEADER,
    Adam,
    Checkpoint,
    MelCorpus,
    TrainConfig,
    TrainingDiverged,
    clip_gradients,
    format_curve,
    load_checkpoint,
    parse_curve,
    reseed_dead_codes,
    save_checkpoint,
    split_by_speaker,
    train,
    train_with_fallback,
)

SMALL = ModelConfig(channel_schedule=(16, 16, 16), codebook_size=8, groups=4)


@pytest.fixture(scope="module")
def corpus():
    c = MelCorpus(synth_corpus(default_speakers(2), 3, seconds=3.0, seed=0))
    for i in range(len(c)):
        c.mel(i)
    return c


def quick(**kw):
    base = dict(learning_rate=1e-3, batch_size=2, steps=12, seed=3, reseed_interval=5)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.batch_size) == (0.01, 0.9, 0.999, 8)
        assert cfg.clip_norm is None

    @pytest.mark.parametrize(
        "kw", [{"steps": 0}, {"learning_rate": 0.0}, {"beta1": 1.0}, {"beta2": 0.0}, {"batch_size": 0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(KeyError, match="lr"):
            TrainConfig.from_dict({"lr": 0.1})


class TestAdam:
    def test_zero_gradient_first_step(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.01)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert not opt.m["p"].any() and not opt.v["p"].any()

    @pytest.mark.parametrize("g", [0.3, -4.0, 1e-3])
    def test_constant_gradient_step_size(self, g):
        # with a constant gradient both bias-corrected moments are exact: m_hat = g, v_hat = g^2
        p = Tensor(np.zeros(1), requires_grad=True)
        opt = Adam({"p": p}, lr=0.01, eps=1e-8)
        prev = 0.0
        for _ in range(50):
            p.grad = np.array([g])
            opt.step()
            delta = p.data[0] - prev
            prev = p.data[0]
            assert abs(delta) == pytest.approx(0.01 * abs(g) / (abs(g) + 1e-8), rel=1e-9)
            assert np.sign(delta) == -np.sign(g)

    def test_nan_names_parameter(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam({"enc.weight": p})
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(FloatingPointError, match="enc.weight"):
            opt.step()

    def test_clip_gradients(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([3.0, 4.0])
        assert clip_gradients([a], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(a.grad, [0.6, 0.8])


class TestCorpus:
    def test_mel_shape(self, corpus):
        assert corpus.mel(0).shape == (80, 256)
        assert corpus.batch(np.random.default_rng(0), 3).shape == (3, 80, 256)

    def test_short_clip_rejected(self):
        with pytest.raises(ValueError, match="hop"):
            MelCorpus([(0, AudioClip(np.zeros(100), 22050))])

    def test_empty(self):
        with pytest.raises(ValueError):
            MelCorpus([])

    def test_short_clip_tiled(self):
        c = MelCorpus([(0, AudioClip(np.sin(np.arange(5000) * 0.1) * 0.3, 22050))])
        assert c.mel(0).shape == (80, 256)

    def test_split_by_speaker(self):
        train_idx, held = split_by_speaker(np.array([0, 0, 0, 1, 1, 1]), 1)
        assert train_idx == [0, 1, 3, 4] and held == [2, 5]

    def test_subset(self, corpus):
        sub = corpus.subset([1, 4])
        assert sub.speakers.tolist() == [corpus.speakers[1], corpus.speakers[4]]
        np.testing.assert_array_equal(sub.mel(1), corpus.mel(4))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, corpus):
        result = train(quick(steps=3), corpus, SMALL)
        save_checkpoint(tmp_path / "a.vqvc", result.checkpoint)
        back = load_checkpoint(tmp_path / "a.vqvc")
        assert back.step == 3 and back.model_config == SMALL.to_dict()
        assert back.rng_state == result.checkpoint.rng_state and len(back.rng_state) == 32
        for name, arr in result.checkpoint.params.items():
            np.testing.assert_array_equal(back.params[name], arr)
            np.testing.assert_array_equal(back.moments[name][0], result.checkpoint.moments[name][0])
        x = corpus.mel(0)
        np.testing.assert_array_equal(back.build_model().reconstruct(x).x_hat.data, result.model.reconstruct(x).x_hat.data)

    def test_layout(self, tmp_path):
        ckpt = Checkpoint(7, SMALL.to_dict(), {}, {"w": np.ones((2, 3), np.float32)}, {"w": (np.zeros((2, 3)), np.ones((2, 3)))})
        save_checkpoint(tmp_path / "b.vqvc", ckpt)
        raw = (tmp_path / "b.vqvc").read_bytes()
        assert raw[:4] == b"VQVC"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert raw[-32:] == bytes(32)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.vqvc").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "c.vqvc")

    def test_curve_round_trip(self):
        rows = [(1, 0.5, 0.25, 0.525), (2, 1 / 3, 0.0, 1 / 3)]
        text = format_curve(rows)
        assert text.splitlines()[0] == LOSS_HEADER
        assert parse_curve(text) == rows


class TestTrain:
    def test_outputs(self, tmp_path, corpus):
        result = train(quick(checkpoint_interval=5), corpus, SMALL, out_dir=tmp_path)
        assert (tmp_path / "final.vqvc").exists() and (tmp_path / "ckpt_000005.vqvc").exists()
        rows = parse_curve((tmp_path / "loss.csv").read_text())
        assert [r[0] for r in rows] == list(range(1, 13))
        for step, l_rec, l_lat, total in rows:
            assert np.isfinite(total) and total == pytest.approx(l_rec + 0.1 * l_lat, rel=1e-5)
        assert result.checkpoint.step == 12

    def test_deterministic(self, tmp_path, corpus):
        train(quick(), corpus, SMALL, out_dir=tmp_path / "a")
        train(quick(), corpus, SMALL, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
        assert (tmp_path / "a" / "final.vqvc").read_bytes() == (tmp_path / "b" / "final.vqvc").read_bytes()

    def test_seed_matters(self, corpus):
        a = train(quick(steps=3), corpus, SMALL).curve
        b = train(quick(steps=3, seed=4), corpus, SMALL).curve
        assert a != b

    def test_resume_matches(self, tmp_path, corpus):
        full = train(quick(steps=15), corpus, SMALL, out_dir=tmp_path / "full")
        train(quick(steps=15, checkpoint_interval=5), corpus, SMALL, out_dir=tmp_path / "part")
        ckpt = load_checkpoint(tmp_path / "part" / "ckpt_000005.vqvc")
        resumed = train(quick(steps=15), corpus, resume=ckpt, out_dir=tmp_path / "part")
        assert resumed.curve == full.curve
        assert (tmp_path / "part" / "loss.csv").read_bytes() == (tmp_path / "full" / "loss.csv").read_bytes()
        for name, p in full.model.named_parameters():
            np.testing.assert_array_equal(dict(resumed.model.named_parameters())[name].data, p.data)

    def test_overfit_single_utterance(self, corpus):
        one = corpus.subset([0])
        curve = train(TrainConfig(learning_rate=1e-3, batch_size=1, steps=500, seed=0), one, ModelConfig()).curve
        assert curve[499][1] < curve[9][1]

    def test_codebook_usage_after_warmup(self, corpus):
        result = train(quick(steps=200, learning_rate=1e-3), corpus, SMALL)
        levels = result.model.encode(np.stack([corpus.mel(i) for i in range(4)]))
        assert all(len(np.unique(t.codes)) >= 2 for t in levels)

    def test_divergence_and_fallback(self, corpus):
        cfg = quick(steps=30, learning_rate=1e6, divergence_window=3, fallback_learning_rate=1e-3)
        with pytest.raises(TrainingDiverged):
            train(cfg, corpus, SMALL)
        result = train_with_fallback(cfg, corpus, SMALL)
        assert result.checkpoint.train_config["learning_rate"] == 1e-3
        assert len(result.curve) == 30


class TestReseed:
    def test_dead_codes_move_to_encoder_columns(self):
        model = VQVCPlus(SMALL, seed=0)
        levels = model.encode(np.random.default_rng(0).normal(size=(80, 16)).astype(np.float32))
        usage = [np.zeros(8) for _ in range(3)]
        usage[0][:4] = 1
        before = model.down[0].codebook.codes.data.copy()
        moved = reseed_dead_codes(model, usage, levels, np.random.default_rng(1))
        after = model.down[0].codebook.codes.data
        assert moved == 4 + 8 + 8
        np.testing.assert_array_equal(after[:4], before[:4])
        cols = levels[0].v_norm.data.T
        for row in after[4:]:
            assert any(np.array_equal(row, c) for c in cols)
        assert all(not u.any() for u in usage)
