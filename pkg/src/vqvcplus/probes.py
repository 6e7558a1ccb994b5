"""Speaker probes on content/speaker embeddings, L1 evaluation and the codebook ablation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import csv_text
from .layers import Conv1d, Module
from .model import ModelConfig, VQVCPlus
from .training import Adam, MelCorpus, TrainConfig, TrainingDiverged, split_by_speaker, train_with_fallback

log = logging.getLogger(__name__)

ABLATION_HEADER = ["variant", "acc_c0", "acc_c1", "acc_c2", "acc_s0", "acc_s1", "acc_s2", "l1"]
DEFAULT_VARIANTS = ("Q32", "Q64", "Q256", "IN-only")


@dataclass
class ProbeConfig:
    """Three kernel-3 convs of width ``hidden``, mean pool over time, one linear layer."""

    conv_layers: int = 3
    hidden: int = 256
    steps: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 16
    patience: int = 200
    eval_every: int = 25
    train_crop: int = 32
    s_frames: int = 32
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.conv_layers != 3:
            raise ValueError("the probe architecture is fixed to three conv layers")


@dataclass
class EmbeddingSet:
    which: str
    level: int
    embeddings: list[np.ndarray]
    labels: np.ndarray

    def pooled(self) -> np.ndarray:
        return np.stack([e.mean(axis=-1) for e in self.embeddings])


def _encode_all(model: VQVCPlus, corpus: MelCorpus, chunk: int = 16):
    out = []
    for start in range(0, len(corpus), chunk):
        batch = np.stack([corpus.mel(i) for i in range(start, min(start + chunk, len(corpus)))])
        levels = model.encode(batch)
        for b in range(len(batch)):
            out.append([(t.c.data[b], t.s.data[b]) for t in levels])
    return out


def extract_embeddings(model: VQVCPlus, corpus: MelCorpus, which: str, level: int, s_frames: int = 32) -> EmbeddingSet:
    """Per-utterance content embedding C (C x T_l) or time-repeated speaker vector s (C x s_frames)."""
    sets = extract_all(model, corpus, s_frames)
    key = (which.upper(), level)
    if key not in sets:
        raise ValueError(f"no embedding {which}{level}")
    return sets[key]


def extract_all(model: VQVCPlus, corpus: MelCorpus, s_frames: int = 32) -> dict[tuple[str, int], EmbeddingSet]:
    encoded = _encode_all(model, corpus)
    labels = np.asarray(corpus.speakers)
    sets = {}
    for lvl in range(model.config.n_levels):
        sets[("C", lvl)] = EmbeddingSet("C", lvl, [e[lvl][0] for e in encoded], labels)
        sets[("S", lvl)] = EmbeddingSet("S", lvl, [np.repeat(e[lvl][1][:, None], s_frames, axis=1) for e in encoded], labels)
    return sets


class SpeakerProbe(Module):
    def __init__(self, c_in: int, n_classes: int, hidden: int = 256, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.convs = [Conv1d(c_in, hidden, 1, rng), Conv1d(hidden, hidden, 1, rng), Conv1d(hidden, hidden, 1, rng)]
        bound = 1.0 / math.sqrt(hidden)
        self.fc_w = Tensor(rng.uniform(-bound, bound, (hidden, n_classes)).astype(np.float32), requires_grad=True)
        self.fc_b = Tensor(np.zeros(n_classes, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.convs:
            h = ad.leaky_relu(conv(h), 0.2)
        return ad.matmul(ad.reduce_mean_time(h), self.fc_w) + self.fc_b


def stratified_split(labels: np.ndarray, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class shuffle into train / validation / test index arrays."""
    train, val, test = [], [], []
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        if len(idx) < 2:
            raise ValueError(f"class {cls} has fewer than two utterances")
        n_test = max(1, int(round(test_fraction * len(idx))))
        rest = idx[n_test:]
        n_val = max(1, len(rest) // 8) if len(rest) > 1 else 0
        test += idx[:n_test].tolist()
        val += rest[:n_val].tolist()
        train += rest[n_val:].tolist()
    return np.array(sorted(train)), np.array(sorted(val)), np.array(sorted(test))


@dataclass
class ProbeResult:
    accuracy: float
    probe: SpeakerProbe = field(repr=False)
    classes: np.ndarray = field(repr=False)
    mean: np.ndarray = field(repr=False)
    std: np.ndarray = field(repr=False)
    steps_run: int = 0

    def predict(self, embeddings) -> np.ndarray:
        x = (np.stack(embeddings).astype(np.float32) - self.mean) / self.std
        logits = self.probe(Tensor(x)).data
        return self.classes[np.argmax(logits, axis=1)]


def _accuracy(probe, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    pred = np.argmax(probe(Tensor(x)).data, axis=1)
    return 100.0 * float(np.mean(pred == y))


def train_probe(embeddings, labels, cfg: ProbeConfig | None = None) -> ProbeResult:
    """Fit a speaker classifier on frozen embeddings; return held-out accuracy in percent.

    The split is stratified by utterance. A validation slice of the training
    part drives early stopping; the reported accuracy is on the test part at
    the best validation step.
    """
    cfg = cfg or ProbeConfig()
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(cfg.seed)
    tr, va, te = stratified_split(labels, cfg.test_fraction, rng)

    lengths = {e.shape[-1] for e in embeddings}
    if len(lengths) != 1:
        raise ValueError("embeddings must share one frame count")
    x = np.stack(embeddings).astype(np.float32)
    mean = x[tr].mean(axis=(0, 2), keepdims=True)[0]
    std = x[tr].std(axis=(0, 2), keepdims=True)[0] + 1e-5
    x = (x - mean) / std

    probe = SpeakerProbe(x.shape[1], len(classes), cfg.hidden, rng)
    params = dict(probe.named_parameters())
    opt = Adam(params, cfg.learning_rate)
    frames = x.shape[-1]
    crop = min(cfg.train_crop or frames, frames)

    best_val, best_test, since_best, step = -1.0, float("nan"), 0, 0
    for step in range(1, cfg.steps + 1):
        pick = tr[rng.integers(0, len(tr), cfg.batch_size)]
        start = rng.integers(0, frames - crop + 1)
        xb = x[pick, :, start: start + crop]
        probe.zero_grad()
        ad.cross_entropy(probe(Tensor(xb)), y[pick]).backward()
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.steps:
            val_acc = _accuracy(probe, x[va], y[va]) if len(va) else _accuracy(probe, x[tr], y[tr])
            if val_acc > best_val:
                best_val = val_acc
                best_test = _accuracy(probe, x[te], y[te])
                since_best = 0
            else:
                since_best += cfg.eval_every
            if since_best >= cfg.patience:
                break
    return ProbeResult(best_test, probe, classes, mean, std, step)


def eval_l1(model: VQVCPlus, corpus: MelCorpus, chunk: int = 16) -> float:
    """Mean over utterances of mean |x_hat - x| in log-mel units."""
    per_utt = []
    for start in range(0, len(corpus), chunk):
        batch = np.stack([corpus.mel(i) for i in range(start, min(start + chunk, len(corpus)))])
        x_hat = model.reconstruct(batch).x_hat.data
        per_utt.extend(np.abs(x_hat - batch).mean(axis=(1, 2)).tolist())
    return float(np.mean(per_utt))


def export_embeddings_csv(emb: EmbeddingSet, path) -> None:
    """One row per utterance: speaker id then the time-pooled embedding."""
    if not emb.embeddings:
        raise ValueError("empty embedding set")
    pooled = emb.pooled()
    header = ["speaker_id"] + [f"e{i}" for i in range(pooled.shape[1])]
    rows = [[int(lbl)] + [f"{v:.9g}" for v in vec] for lbl, vec in zip(emb.labels, pooled)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(rows, header))


def variant_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """``Qn`` -> codebook size n; ``IN-only`` -> no quantizer."""
    d = (base or ModelConfig()).to_dict()
    if name.upper() == "IN-ONLY":
        d["codebook_size"] = None
    elif name.upper().startswith("Q") and name[1:].isdigit():
        d["codebook_size"] = int(name[1:])
    else:
        raise ValueError(f"unknown variant {name!r}")
    return ModelConfig.from_dict(d)


@dataclass
class VariantRun:
    name: str
    seed: int
    accuracies: dict[str, float]
    l1: float
    diverged: bool = False
    model: VQVCPlus | None = field(default=None, repr=False)
    curve: list = field(default_factory=list, repr=False)
    learning_rate: float | None = None


@dataclass
class AblationReport:
    runs: list[VariantRun]

    def median(self, variant: str, key: str) -> float:
        vals = [r.l1 if key == "l1" else r.accuracies[key] for r in self.runs if r.name == variant and not r.diverged]
        return float(np.median(vals)) if vals else float("nan")

    def variants(self) -> list[str]:
        seen = []
        for r in self.runs:
            if r.name not in seen:
                seen.append(r.name)
        return seen

    def rows(self) -> list[list]:
        out = []
        for v in self.variants():
            if all(r.diverged for r in self.runs if r.name == v):
                out.append([v] + ["diverged"] * (len(ABLATION_HEADER) - 1))
                continue
            vals = [self.median(v, k) for k in ABLATION_HEADER[1:]]
            out.append([v] + [f"{x:.4f}" if k == "l1" else f"{x:.1f}" for k, x in zip(ABLATION_HEADER[1:], vals)])
        return out

    def to_csv(self) -> str:
        return csv_text(self.rows(), ABLATION_HEADER)

    def table(self) -> str:
        widths = [max(len(str(c)) for c in col) for col in zip(ABLATION_HEADER, *self.rows())]
        lines = ["  ".join(str(c).rjust(w) for c, w in zip(row, widths)) for row in [ABLATION_HEADER] + self.rows()]
        return "\n".join(lines)


def probe_model(model: VQVCPlus, corpus: MelCorpus, probe_cfg: ProbeConfig, keys=None) -> dict[str, float]:
    """Probe accuracy for every (C|S, level) key like ``acc_c0``."""
    sets = extract_all(model, corpus, probe_cfg.s_frames)
    out = {}
    for (which, lvl), emb in sets.items():
        key = f"acc_{which.lower()}{lvl}"
        if keys is not None and key not in keys:
            continue
        out[key] = train_probe(emb.embeddings, emb.labels, probe_cfg).accuracy
    return out


def run_ablation(
    variants,
    corpus: MelCorpus,
    seeds=(0, 1, 2),
    train_cfg: TrainConfig | None = None,
    probe_cfg: ProbeConfig | None = None,
    holdout_per_speaker: int = 8,
    keep_models: bool = False,
) -> AblationReport:
    """Train every (variant, seed), then probe C/S at all levels and measure held-out L1.

    ``variants`` holds names (``"Q64"``) or ``(name, ModelConfig)`` pairs. The
    VC model trains on all but the last ``holdout_per_speaker`` utterances of
    each speaker; L1 is measured on those held-out utterances and probes use
    the whole corpus with their own stratified split.
    """
    train_cfg = train_cfg or TrainConfig()
    probe_cfg = probe_cfg or ProbeConfig()
    tr_idx, held_idx = split_by_speaker(corpus.speakers, holdout_per_speaker)
    train_corpus, held_corpus = corpus.subset(tr_idx), corpus.subset(held_idx)
    runs = []
    for item in variants:
        name, mcfg = (item, variant_config(item)) if isinstance(item, str) else item
        for seed in seeds:
            cfg = TrainConfig(**{**asdict(train_cfg), "seed": seed})
            try:
                result = train_with_fallback(cfg, train_corpus, mcfg)
            except TrainingDiverged as exc:
                log.warning("variant %s seed %d diverged: %s", name, seed, exc)
                runs.append(VariantRun(name, seed, {k: float("nan") for k in ABLATION_HEADER[1:-1]}, float("nan"), True))
                continue
            pcfg = ProbeConfig(**{**asdict(probe_cfg), "seed": probe_cfg.seed + seed})
            acc = probe_model(result.model, corpus, pcfg)
            l1 = eval_l1(result.model, held_corpus)
            log.info("%s seed %d: l1 %.4f %s", name, seed, l1, acc)
            lr = result.checkpoint.train_config["learning_rate"]
            runs.append(VariantRun(name, seed, acc, l1, False, result.model if keep_models else None, result.curve, lr))
    return AblationReport(runs)


def conversion_probe_test(
    model: VQVCPlus,
    probe: ProbeResult,
    corpus: MelCorpus,
    pairs: int = 20,
    seed: int = 0,
    level: int = 0,
    s_frames: int = 32,
) -> tuple[int, int, list[tuple[int, int, int]]]:
    """Classify the level-``level`` speaker vector of converted mels.

    Returns (target hits, source hits, [(src_speaker, tgt_speaker, predicted)]).
    """
    rng = np.random.default_rng(seed)
    speakers = np.asarray(corpus.speakers)
    results = []
    while len(results) < pairs:
        i, j = rng.integers(0, len(corpus), 2)
        if speakers[i] == speakers[j]:
            continue
        converted = model.convert(corpus.mel(int(i)), corpus.mel(int(j))).data
        s = model.encode(converted)[level].s.data
        pred = probe.predict([np.repeat(s[:, None], s_frames, axis=1)])[0]
        results.append((int(speakers[i]), int(speakers[j]), int(pred)))
    tgt = sum(p == t for _, t, p in results)
    src = sum(p == s for s, _, p in results)
    return tgt, src, results
