import csv

import numpy as np
import pytest

from vqvcplus.features import default_speakers, synth_corpus
from vqvcplus.model import ModelConfig, VQVCPlus
from vqvcplus.probes import (
    ABLATION_HEADER,
    AblationReport,
    EmbeddingSet,
    ProbeConfig,
    VariantRun,
    conversion_probe_test,
    eval_l1,
    export_embeddings_csv,
    extract_embeddings,
    run_ablation,
    stratified_split,
    train_probe,
    variant_config,
)
from vqvcplus.training import MelCorpus, TrainConfig, train

SMALL = ModelConfig(channel_schedule=(16, 16, 16), codebook_size=8, groups=4)
FAST = ProbeConfig(hidden=32, steps=150, eval_every=10, patience=60, batch_size=16)


@pytest.fixture(scope="module")
def corpus():
    c = MelCorpus(synth_corpus(default_speakers(4), 6, seconds=3.0, seed=2))
    for i in range(len(c)):
        c.mel(i)
    return c


@pytest.fixture(scope="module")
def model():
    return VQVCPlus(SMALL, seed=0)


class TestExtract:
    def test_s_columns_identical(self, model, corpus):
        emb = extract_embeddings(model, corpus, "S", 1)
        assert len(emb.embeddings) == len(corpus)
        for e in emb.embeddings:
            assert e.shape == (16, 32)
            np.testing.assert_array_equal(e, np.repeat(e[:, :1], 32, axis=1))

    @pytest.mark.parametrize("level", [0, 1, 2])
    def test_c_columns_are_codes(self, model, corpus, level):
        emb = extract_embeddings(model, corpus, "C", level)
        codes = model.down[level].codebook.codes.data
        assert emb.embeddings[0].shape == (16, 128 >> level)
        for col in emb.embeddings[0].T:
            assert (codes == col).all(axis=1).any()

    def test_deterministic(self, model, corpus):
        a = extract_embeddings(model, corpus, "C", 0)
        b = extract_embeddings(model, corpus, "C", 0)
        for x, y in zip(a.embeddings, b.embeddings):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(a.labels, corpus.speakers)

    @pytest.mark.parametrize("level", [-1, 3])
    def test_level_out_of_range(self, model, corpus, level):
        with pytest.raises(ValueError):
            extract_embeddings(model, corpus, "C", level)


class TestProbe:
    def test_config_fixed_depth(self):
        with pytest.raises(ValueError):
            ProbeConfig(conv_layers=2)

    def test_split_stratified(self):
        labels = np.repeat(np.arange(4), 10)
        tr, va, te = stratified_split(labels, 0.2, np.random.default_rng(0))
        assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(40))
        assert np.bincount(labels[te]).tolist() == [2, 2, 2, 2]
        assert np.all(np.bincount(labels[va]) >= 1)

    def test_class_with_one_utterance(self):
        x = [np.zeros((4, 8))] * 5
        with pytest.raises(ValueError, match="fewer than two"):
            train_probe(x, [0, 0, 0, 0, 1], FAST)

    def test_single_class(self):
        with pytest.raises(ValueError):
            train_probe([np.zeros((4, 8))] * 4, [0] * 4, FAST)

    def test_separable_features(self):
        rng = np.random.default_rng(0)
        labels = np.repeat(np.arange(4), 10)
        x = [rng.normal(size=(6, 16)) + 2.0 * np.eye(6)[k][:, None] for k in labels]
        assert train_probe(x, labels, FAST).accuracy == 100.0

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(1)
        labels = np.repeat(np.arange(8), 40)
        x = [rng.normal(size=(6, 16)) + 2.0 * np.eye(6)[k % 6][:, None] for k in labels]
        shuffled = rng.permutation(labels)
        acc = train_probe(x, shuffled, FAST).accuracy
        assert abs(acc - 100 / 8) <= 10

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        labels = np.repeat(np.arange(3), 8)
        x = [rng.normal(size=(4, 8)) for _ in labels]
        assert train_probe(x, labels, FAST).accuracy == train_probe(x, labels, FAST).accuracy

    def test_raw_log_mel_above_chance(self, corpus):
        x = [corpus.mel(i) for i in range(len(corpus))]
        acc = train_probe(x, corpus.speakers, FAST).accuracy
        assert acc > 2 * 100 / 4

    def test_predict(self):
        rng = np.random.default_rng(3)
        labels = np.repeat([5, 9], 10)
        x = [rng.normal(size=(4, 8)) + (3.0 if k == 9 else -3.0) for k in labels]
        result = train_probe(x, labels, FAST)
        assert set(result.predict(x[:3] + x[-3:]).tolist()) <= {5, 9}
        assert result.predict(x[-3:]).tolist() == [9, 9, 9]


class TestL1:
    def test_training_reduces_l1(self, corpus):
        untrained = VQVCPlus(SMALL, seed=0)
        trained = train(TrainConfig(learning_rate=1e-3, batch_size=4, steps=40, seed=0), corpus, SMALL).model
        assert eval_l1(trained, corpus) < eval_l1(untrained, corpus)

    def test_matches_reconstruction(self, model, corpus):
        sub = corpus.subset([0, 1])
        expected = np.mean([np.abs(model.reconstruct(sub.mel(i)).x_hat.data - sub.mel(i)).mean() for i in range(2)])
        assert eval_l1(model, sub) == pytest.approx(expected, rel=1e-5)


class TestExport:
    def test_csv(self, tmp_path, model, corpus):
        emb = extract_embeddings(model, corpus, "C", 0)
        export_embeddings_csv(emb, tmp_path / "e.csv")
        with open(tmp_path / "e.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["speaker_id"] + [f"e{i}" for i in range(16)]
        assert len(rows) == len(corpus) + 1 and all(len(r) == 17 for r in rows)
        pooled = emb.pooled()
        np.testing.assert_array_equal(np.array(rows[1][1:], dtype=np.float32), pooled[0].astype(np.float32))
        assert int(rows[-1][0]) == corpus.speakers[-1]

    def test_empty(self, tmp_path):
        with pytest.raises(ValueError):
            export_embeddings_csv(EmbeddingSet("C", 0, [], np.zeros(0)), tmp_path / "x.csv")


class TestAblation:
    def test_variant_names(self):
        assert variant_config("Q32").codebook_size == 32
        assert variant_config("IN-only").codebook_size is None
        with pytest.raises(ValueError):
            variant_config("Z9")

    def test_report_csv_and_diverged(self):
        acc = {k: 50.0 for k in ABLATION_HEADER[1:-1]}
        report = AblationReport(
            [
                VariantRun("Q64", 0, acc, 0.3),
                VariantRun("Q64", 1, {**acc, "acc_c0": 70.0}, 0.5),
                VariantRun("Q64", 2, {**acc, "acc_c0": 60.0}, 0.4),
                VariantRun("IN-only", 0, acc, float("nan"), diverged=True),
            ]
        )
        lines = report.to_csv().splitlines()
        assert lines[0] == ",".join(ABLATION_HEADER)
        assert lines[1] == "Q64,60.0,50.0,50.0,50.0,50.0,50.0,0.4000"
        assert lines[2].startswith("IN-only,diverged")
        assert "Q64" in report.table()

    def test_run_small(self, corpus):
        report = run_ablation(
            ["Q32", ("tiny", SMALL)],
            corpus,
            seeds=(0,),
            train_cfg=TrainConfig(learning_rate=1e-3, batch_size=2, steps=3),
            probe_cfg=ProbeConfig(hidden=16, steps=20, eval_every=10, patience=20),
            holdout_per_speaker=2,
        )
        rows = report.rows()
        assert [r[0] for r in rows] == ["Q32", "tiny"]
        for r in report.runs:
            assert all(0 <= a <= 100 for a in r.accuracies.values()) and r.l1 >= 0
        again = run_ablation(
            ["Q32", ("tiny", SMALL)],
            corpus,
            seeds=(0,),
            train_cfg=TrainConfig(learning_rate=1e-3, batch_size=2, steps=3),
            probe_cfg=ProbeConfig(hidden=16, steps=20, eval_every=10, patience=20),
            holdout_per_speaker=2,
        )
        assert again.to_csv() == report.to_csv()

    def test_divergent_variant_marked(self, corpus):
        report = run_ablation(
            [("hot", SMALL)],
            corpus,
            seeds=(0,),
            train_cfg=TrainConfig(learning_rate=1e6, fallback_learning_rate=1e6, batch_size=2, steps=20, divergence_window=2),
            probe_cfg=FAST,
            holdout_per_speaker=2,
        )
        assert report.rows()[0][1] == "diverged"


class TestConversionProbe:
    def test_counts(self, model, corpus):
        emb = extract_embeddings(model, corpus, "S", 0)
        probe = train_probe(emb.embeddings, emb.labels, FAST)
        tgt, src, pairs = conversion_probe_test(model, probe, corpus, pairs=4, seed=0)
        assert len(pairs) == 4 and all(s != t for s, t, _ in pairs)
        assert tgt == sum(p == t for _, t, p in pairs)
        assert src == sum(p == s for s, _, p in pairs)
