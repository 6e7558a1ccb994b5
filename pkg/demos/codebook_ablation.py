"""Compare codebook sizes against the unquantized model on a small corpus.

Prints the same table as ``python3 -m vqvcplus ablate``: speaker-probe
accuracy on every level's content (C) and speaker (S) embeddings, plus
held-out L1. Expect smaller codebooks to leak less speaker identity into C
and to reconstruct less accurately.

    python3 demos/codebook_ablation.py [--steps 400] [--seeds 0]
"""

import argparse
import logging

from vqvcplus.features import default_speakers, synth_corpus
from vqvcplus.probes import DEFAULT_VARIANTS, ProbeConfig, run_ablation
from vqvcplus.training import MelCorpus, TrainConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=400)
    parser.add_argument("--utterances", type=int, default=16)
    parser.add_argument("--seeds", default="0", help="comma-separated training seeds")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    corpus = MelCorpus(synth_corpus(default_speakers(8), args.utterances, seed=0))
    report = run_ablation(
        DEFAULT_VARIANTS,
        corpus,
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        train_cfg=TrainConfig(learning_rate=1e-3, steps=args.steps),
        probe_cfg=ProbeConfig(steps=600),
        holdout_per_speaker=4,
    )
    print(report.table())


if __name__ == "__main__":
    main()
