"""Train a small model, probe its embeddings and convert between speakers.

The defaults finish in a few minutes on one core; raise ``--steps`` and
``--utterances`` toward the desk scale (2000 steps, 40 utterances) for
probe numbers worth reading.

    python3 demos/train_and_convert.py [--steps 300] [--utterances 12] [--out DIR]
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from vqvcplus.features import MelSpectrogram, default_speakers, save_wav, synth_corpus, write_mel, griffin_lim
from vqvcplus.model import ModelConfig
from vqvcplus.probes import ProbeConfig, conversion_probe_test, eval_l1, extract_embeddings, train_probe
from vqvcplus.training import MelCorpus, TrainConfig, split_by_speaker, train_with_fallback


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--utterances", type=int, default=12)
    parser.add_argument("--out", type=Path, default=Path("demo_out/train"))
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    corpus = MelCorpus(synth_corpus(default_speakers(8), args.utterances, seed=0))
    train_idx, held_idx = split_by_speaker(corpus.speakers, 2)
    print(f"{len(corpus)} utterances, training on {len(train_idx)}, holding out {len(held_idx)}")

    # the default 0.01 trips the divergence rule on this corpus within ~200
    # steps and restarts at 1e-3, so start there
    cfg = TrainConfig(learning_rate=1e-3, steps=args.steps)
    result = train_with_fallback(cfg, corpus.subset(train_idx), ModelConfig(), out_dir=args.out, log_every=50)
    model = result.model
    held = corpus.subset(held_idx)
    print(f"finished at lr {result.checkpoint.train_config['learning_rate']:g}; held-out L1 {eval_l1(model, held):.3f}")

    probe_cfg = ProbeConfig(steps=600)
    for which in ("C", "S"):
        emb = extract_embeddings(model, corpus, which, 0)
        print(f"{which}0 speaker probe: {train_probe(emb.embeddings, emb.labels, probe_cfg).accuracy:.1f}% (chance 12.5%)")

    emb = extract_embeddings(model, corpus, "S", 0)
    probe = train_probe(emb.embeddings, emb.labels, probe_cfg)
    tgt, src, pairs = conversion_probe_test(model, probe, held, pairs=10, seed=0)
    print(f"converted speech classified as target {tgt}/10, as source {src}/10")

    src_mel, tgt_mel = held.mel(0), held.mel(len(held) - 1)
    converted = model.convert(src_mel, tgt_mel).data
    mel = MelSpectrogram(converted.astype(np.float64))
    write_mel(args.out / "converted.mel", mel)
    save_wav(args.out / "converted.wav", griffin_lim(mel, 32))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
