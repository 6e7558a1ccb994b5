"""ADAM training loop, batching, dead-code reseeding and checkpoint files."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .features import AudioClip, FeatureConfig, FeatureExtractor, crop_frames, resample, segment_fixed
from .layers import _columns
from .model import ModelConfig, VQVCPlus

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_HEADER = "step,l_rec,l_latent,l_total"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step
        self.reason = reason


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    checkpoint_interval: int = 0
    reseed_interval: int = 40
    clip_norm: float | None = None
    divergence_window: int = 200
    fallback_learning_rate: float = 1e-3

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("betas must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Bias-corrected ADAM over named parameters; arithmetic stays in the parameter dtype."""

    def __init__(self, params: dict[str, ad.Tensor], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            dt = p.data.dtype.type
            b1, b2 = dt(self.beta1), dt(self.beta2)
            m = self.m[name] = b1 * self.m[name] + (dt(1) - b1) * g
            v = self.v[name] = b2 * self.v[name] + (dt(1) - b2) * g * g
            m_hat = m / dt(1 - self.beta1 ** self.t)
            v_hat = v / dt(1 - self.beta2 ** self.t)
            p.data = p.data - dt(self.lr) * m_hat / (np.sqrt(v_hat) + dt(self.eps))


def clip_gradients(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(factor)
    return total


class MelCorpus:
    """Labelled clips with on-demand 3 s segmentation and cached log-mels for exact-length clips."""

    def __init__(
        self,
        clips: list[tuple[int, AudioClip]],
        features: FeatureConfig | None = None,
        time_multiple: int = 8,
        trim: bool = False,
    ):
        if not clips:
            raise ValueError("corpus is empty")
        self.extractor = FeatureExtractor(features)
        self.time_multiple = time_multiple
        cfg = self.extractor.config
        self.speakers = np.array([s for s, _ in clips])
        self.clips = []
        for speaker, clip in clips:
            if trim:
                clip = self.extractor.prepare(clip)
            elif clip.sample_rate != cfg.sample_rate:
                clip = resample(clip, cfg.sample_rate)
            if len(clip) < cfg.hop:
                raise ValueError(f"clip of speaker {speaker} shorter than one hop")
            self.clips.append(clip)
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def segment_samples(self) -> int:
        return self.extractor.config.segment_samples

    def mel(self, index: int, rng: np.random.Generator | None = None) -> np.ndarray:
        """Log-mel of a 3 s segment, cropped to a multiple of the model's time stride."""
        clip = self.clips[index]
        fixed = len(clip) == self.segment_samples
        if fixed and index in self._cache:
            return self._cache[index]
        seg = segment_fixed(clip, self.extractor.config.segment_seconds, rng if rng is not None else np.random.default_rng(index))
        mel = crop_frames(self.extractor(seg).values, self.time_multiple).astype(np.float32)
        if fixed:
            self._cache[index] = mel
        return mel

    def batch(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.integers(0, len(self), size)
        return np.stack([self.mel(int(i), rng) for i in idx])

    def subset(self, indices) -> "MelCorpus":
        sub = object.__new__(MelCorpus)
        sub.extractor = self.extractor
        sub.time_multiple = self.time_multiple
        sub.speakers = self.speakers[list(indices)]
        sub.clips = [self.clips[i] for i in indices]
        sub._cache = {new: self._cache[old] for new, old in enumerate(indices) if old in self._cache}
        return sub


def split_by_speaker(speakers: np.ndarray, holdout_per_speaker: int) -> tuple[list[int], list[int]]:
    """Last ``holdout_per_speaker`` utterances of each speaker are held out."""
    train, held = [], []
    for spk in np.unique(speakers):
        idx = np.flatnonzero(speakers == spk).tolist()
        cut = len(idx) - holdout_per_speaker
        train += idx[:cut]
        held += idx[cut:]
    return sorted(train), sorted(held)


@dataclass
class Checkpoint:
    step: int
    model_config: dict
    train_config: dict
    params: dict[str, np.ndarray]
    moments: dict[str, tuple[np.ndarray, np.ndarray]]
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: bytes = b"\0" * 32

    def build_model(self) -> VQVCPlus:
        model = VQVCPlus(ModelConfig.from_dict(self.model_config))
        model.load_state_dict(self.params)
        return model


def _write_name(fh, name: str) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_name(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Binary container: magic, version, JSON config, tensors, moments, 32-byte RNG state."""
    header = json.dumps(
        {"step": ckpt.step, "model": ckpt.model_config, "train": ckpt.train_config}, sort_keys=True
    ).encode("utf-8")
    tensors = dict(ckpt.params)
    tensors.update({f"extra:{k}": v for k, v in ckpt.extras.items()})
    with open(path, "wb") as fh:
        fh.write(b"VQVC")
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            _write_name(fh, name)
            ad.write_tensor(fh, arr)
        fh.write(struct.pack("<I", len(ckpt.moments)))
        for name, (m, v) in ckpt.moments.items():
            _write_name(fh, name)
            ad.write_tensor(fh, m)
            ad.write_tensor(fh, v)
        if len(ckpt.rng_state) != 32:
            raise ValueError("rng state must be 32 bytes")
        fh.write(ckpt.rng_state)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != b"VQVC":
            raise ValueError(f"{path} is not a VQVC checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        params, extras = {}, {}
        for _ in range(count):
            name = _read_name(fh)
            arr = ad.read_tensor(fh)
            if name.startswith("extra:"):
                extras[name[len("extra:"):]] = arr
            else:
                params[name] = arr
        (count,) = struct.unpack("<I", fh.read(4))
        moments = {}
        for _ in range(count):
            name = _read_name(fh)
            moments[name] = (ad.read_tensor(fh), ad.read_tensor(fh))
        rng_state = fh.read(32)
    return Checkpoint(header["step"], header["model"], header["train"], params, moments, extras, rng_state)


def _rng_bytes(rng: np.random.Generator) -> bytes:
    st = rng.bit_generator.state["state"]
    return st["state"].to_bytes(16, "little") + st["inc"].to_bytes(16, "little")


def _rng_from_bytes(raw: bytes) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": int.from_bytes(raw[:16], "little"), "inc": int.from_bytes(raw[16:], "little")},
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bg)


@dataclass
class TrainResult:
    model: VQVCPlus
    checkpoint: Checkpoint
    curve: list[tuple[int, float, float, float]]


def format_curve(rows) -> str:
    lines = [LOSS_HEADER] + [f"{s},{a!r},{b!r},{c!r}" for s, a, b, c in rows]
    return "\n".join(lines) + "\n"


def parse_curve(text: str) -> list[tuple[int, float, float, float]]:
    lines = text.strip().splitlines()
    if not lines or lines[0] != LOSS_HEADER:
        raise ValueError("not a loss curve CSV")
    rows = []
    for line in lines[1:]:
        step, *vals = line.split(",")
        rows.append((int(step), *(float(v) for v in vals)))
    return rows


def reseed_dead_codes(model: VQVCPlus, usage: list[np.ndarray], levels, rng, adam: Adam | None = None) -> int:
    """Move codes unused since the last reseed onto random encoder output columns."""
    moved = 0
    names = {id(p): n for n, p in model.named_parameters()}
    for lvl, (down, triple) in enumerate(zip(model.down, levels)):
        if down.codebook is None:
            continue
        dead = np.flatnonzero(usage[lvl] == 0)
        if len(dead):
            cols = _columns(triple.v_norm.data)
            pick = rng.integers(0, len(cols), len(dead))
            codes = down.codebook.codes.data.copy()
            codes[dead] = cols[pick]
            down.codebook.codes.data = codes
            if adam is not None:
                name = names[id(down.codebook.codes)]
                adam.m[name][dead] = 0
                adam.v[name][dead] = 0
            moved += len(dead)
        usage[lvl][:] = 0
    return moved


def train(
    cfg: TrainConfig,
    corpus: MelCorpus,
    model_config: ModelConfig | None = None,
    resume: Checkpoint | None = None,
    out_dir=None,
    log_every: int = 0,
) -> TrainResult:
    """Minimise L_rec + lambda * sum of per-level latent losses with ADAM.

    Each step draws a child generator from the master PCG64 stream, samples a
    batch of 3 s segments with it, and updates all parameters. Checkpoints and
    ``loss.csv`` go to ``out_dir`` when given.
    """
    if resume is not None:
        model_config = ModelConfig.from_dict(resume.model_config)
        model = resume.build_model()
        start = resume.step
        master = _rng_from_bytes(resume.rng_state)
    else:
        model_config = model_config or ModelConfig()
        model = VQVCPlus(model_config, seed=cfg.seed)
        start = 0
        master = np.random.Generator(np.random.PCG64(cfg.seed))

    params = dict(model.named_parameters())
    adam = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    usage = [np.zeros(d.codebook.size if d.codebook else 0) for d in model.down]
    if resume is not None:
        adam.t = resume.step
        for name, (m, v) in resume.moments.items():
            adam.m[name] = m.astype(params[name].dtype)
            adam.v[name] = v.astype(params[name].dtype)
        for lvl in range(len(usage)):
            if f"usage{lvl}" in resume.extras:
                usage[lvl] = resume.extras[f"usage{lvl}"].astype(np.float64)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            step,
            model_config.to_dict(),
            asdict(cfg),
            {k: p.data.copy() for k, p in params.items()},
            {k: (adam.m[k].copy(), adam.v[k].copy()) for k in params},
            {
                **{f"usage{lvl}": u.astype(np.float32) for lvl, u in enumerate(usage)},
                "divergence": np.array([np.nan if initial is None else initial, over], np.float32),
            },
            _rng_bytes(master),
        )

    curve: list[tuple[int, float, float, float]] = []
    initial = None
    over = 0
    if resume is not None and "divergence" in resume.extras:
        first, over = resume.extras["divergence"].tolist()
        initial = None if np.isnan(first) else first
        over = int(over)
    if resume is not None and out_dir is not None and (out_dir / "loss.csv").exists():
        curve = [row for row in parse_curve((out_dir / "loss.csv").read_text(encoding="utf-8")) if row[0] <= start]
    for step in range(start + 1, cfg.steps + 1):
        child = np.random.default_rng(int(master.bit_generator.random_raw()))
        batch = corpus.batch(child, cfg.batch_size)
        model.zero_grad()
        # overflow surfaces as FloatingPointError from the graph; numpy's own warnings are redundant
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                rec = model.reconstruct(batch)
                total = rec.l_total.item()
                if not np.isfinite(total):
                    raise FloatingPointError("non-finite loss")
                rec.l_total.backward()
                if cfg.clip_norm is not None:
                    clip_gradients(list(params.values()), cfg.clip_norm)
                adam.step()
            except FloatingPointError as exc:
                raise TrainingDiverged(step, str(exc)) from exc

        for lvl, t in enumerate(rec.levels):
            if t.codes is not None:
                usage[lvl] += np.bincount(t.codes.reshape(-1), minlength=len(usage[lvl]))
        if cfg.reseed_interval and step % cfg.reseed_interval == 0:
            reseed_dead_codes(model, usage, rec.levels, child, adam)

        latent = float(sum(l.item() for l in rec.l_latent))
        curve.append((step, rec.l_rec.item(), latent, total))
        if initial is None:
            initial = total
        over = over + 1 if total > 2 * initial else 0
        if cfg.divergence_window and over >= cfg.divergence_window:
            raise TrainingDiverged(step, f"loss above twice its initial value for {over} steps")
        if log_every and step % log_every == 0:
            log.info("step %d l_rec %.4f l_latent %.4f", step, curve[-1][1], latent)
        if out_dir is not None and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
            save_checkpoint(out_dir / f"ckpt_{step:06d}.vqvc", snapshot(step))

    final = snapshot(max(start, cfg.steps))
    if out_dir is not None:
        save_checkpoint(out_dir / "final.vqvc", final)
        (out_dir / "loss.csv").write_text(format_curve(curve), encoding="utf-8")
    return TrainResult(model, final, curve)


def train_with_fallback(cfg: TrainConfig, corpus: MelCorpus, model_config: ModelConfig | None = None, **kwargs) -> TrainResult:
    """Train at the configured rate; on divergence retry once at ``fallback_learning_rate``."""
    try:
        return train(cfg, corpus, model_config, **kwargs)
    except TrainingDiverged as exc:
        log.warning("%s; retrying at lr=%g", exc, cfg.fallback_learning_rate)
        d = asdict(cfg)
        d["learning_rate"] = cfg.fallback_learning_rate
        return train(TrainConfig(**d), corpus, model_config, **kwargs)
