"""Command-line entry point: ``python3 -m vqvcplus <command>``.

Every command writes ``resolved_config.json`` next to its outputs before doing
any work. Exit codes: 0 success, 1 usage or config error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import (
    FeatureConfig,
    FeatureExtractor,
    MelSpectrogram,
    default_speakers,
    load_corpus,
    load_wav,
    mel_to_csv,
    read_mel,
    save_wav,
    synth_corpus,
    write_corpus,
    write_mel,
)
from .model import ModelConfig
from .probes import (
    DEFAULT_VARIANTS,
    ProbeConfig,
    export_embeddings_csv,
    extract_all,
    run_ablation,
    train_probe,
    variant_config,
)
from .training import MelCorpus, TrainConfig, TrainingDiverged, load_checkpoint, train, train_with_fallback

log = logging.getLogger("vqvcplus")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
MIN_CONVERT_SECONDS = 0.5


class UsageError(Exception):
    pass


@dataclass
class CorpusConfig:
    speakers: int = 8
    utterances: int = 40
    seconds: float = 3.0
    seed: int = 0
    f0_range: tuple[float, float] = (115.0, 150.0)
    formant_scale_range: tuple[float, float] = (0.93, 1.07)


@dataclass
class DataConfig:
    trim: bool = False
    holdout_per_speaker: int = 8


@dataclass
class RunConfig:
    """Union of every section a command may read; serialised as nested JSON."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in self.__dataclass_fields__}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = cls.__dataclass_fields__
        for key in d:
            if key not in sections:
                raise UsageError(f"unknown config key {key!r}")
        built = {}
        for name in sections:
            default = getattr(cls(), name)
            merged = asdict(default) if name != "model" else default.to_dict()
            given = d.get(name, {})
            if not isinstance(given, dict):
                raise UsageError(f"config section {name!r} must be an object")
            for key in given:
                if key not in merged:
                    raise UsageError(f"unknown config key {name}.{key}")
            merged.update(given)
            try:
                built[name] = type(default)(**merged)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"invalid config section {name!r}: {exc}") from exc
        return cls(**built)


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    return RunConfig.from_dict(raw)


def override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Apply non-None command-line overrides and re-validate."""
    d = cfg.to_dict()
    d[section].update({k: v for k, v in values.items() if v is not None})
    return RunConfig.from_dict(d)


def write_resolved(out_dir: Path, cfg: RunConfig, command: str, args: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, "arguments": args, "config": cfg.to_dict()}
    (out_dir / "resolved_config.json").write_text(json.dumps(echo, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _arg_echo(args: argparse.Namespace) -> dict:
    # the output location is where the echo lives, so it is left out to keep reruns byte-identical
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in ("func", "out")}


def _load_mel_corpus(path, cfg: RunConfig, time_multiple: int) -> MelCorpus:
    try:
        clips = load_corpus(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read corpus {path}: {exc}") from exc
    return MelCorpus(clips, cfg.features, time_multiple, trim=cfg.data.trim)


# ---------------------------------------------------------------------------
# commands


def cmd_make_corpus(args) -> int:
    cfg = override(
        load_run_config(args.config),
        "corpus",
        speakers=args.speakers,
        utterances=args.utterances,
        seed=args.seed,
        seconds=args.seconds,
    )
    c = cfg.corpus
    if c.speakers < 2:
        raise UsageError("--speakers must be at least 2")
    if c.utterances < 1:
        raise UsageError("--utterances must be at least 1")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    write_resolved(out, cfg, "make-corpus", _arg_echo(args))
    specs = default_speakers(c.speakers, c.seed, tuple(c.f0_range), tuple(c.formant_scale_range))
    corpus = synth_corpus(specs, c.utterances, c.seconds, c.seed, cfg.features.sample_rate)
    manifest = write_corpus(out, corpus)
    print(f"wrote {len(corpus)} clips and {manifest}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    write_resolved(out.parent, cfg, "extract", _arg_echo(args))
    fx = FeatureExtractor(cfg.features)
    clip = load_wav(args.wav)
    if cfg.data.trim:
        clip = fx.prepare(clip)
    mel = fx(clip)
    write_mel(out, mel)
    if args.csv:
        mel_to_csv(out.with_suffix(".csv"), mel)
    print(f"{mel.n_mels}x{mel.frames} log-mel -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and args.config is None:
        # without a config the checkpoint's own settings are the run config
        d = cfg.to_dict()
        d["model"], d["train"] = resume.model_config, resume.train_config
        cfg = RunConfig.from_dict(d)
    cfg = override(cfg, "train", steps=args.steps, seed=args.seed)
    if resume is not None and resume.model_config != cfg.model.to_dict():
        raise UsageError("checkpoint model config differs from the run config")
    out = Path(args.out)
    write_resolved(out, cfg, "train", _arg_echo(args))
    corpus = _load_mel_corpus(args.corpus, cfg, cfg.model.time_multiple)
    runner = train if args.no_fallback or resume is not None else train_with_fallback
    result = runner(cfg.train, corpus, cfg.model, resume=resume, out_dir=out, log_every=args.log_every)
    last = result.curve[-1] if result.curve else None
    if last:
        print(f"step {last[0]}: l_rec {last[1]:.4f} l_latent {last[2]:.4f} l_total {last[3]:.4f}")
    print(f"checkpoint -> {out / 'final.vqvc'}")
    return EXIT_OK


def _prepared_mel(path, fx: FeatureExtractor) -> tuple[np.ndarray, int]:
    clip = fx.prepare(load_wav(path))
    if clip.duration < MIN_CONVERT_SECONDS:
        raise UsageError(f"{path}: {clip.duration:.2f} s after silence trim, need at least {MIN_CONVERT_SECONDS} s")
    return fx(clip).values.astype(np.float32), len(clip)


def _pad_frames(mel: np.ndarray, multiple: int, floor: float) -> np.ndarray:
    extra = -mel.shape[1] % multiple
    return np.pad(mel, ((0, 0), (0, extra)), constant_values=np.float32(np.log(floor)))


def cmd_convert(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    write_resolved(out.parent, cfg, "convert", _arg_echo(args))
    ckpt = load_checkpoint(args.ckpt)
    if args.config is not None and ckpt.model_config != cfg.model.to_dict():
        ours, theirs = cfg.model.to_dict(), ckpt.model_config
        diff = sorted(k for k in ours if ours[k] != theirs.get(k))
        raise UsageError(f"checkpoint/config mismatch in model keys {diff}")
    model = ckpt.build_model()
    fx = FeatureExtractor(cfg.features)
    src, _ = _prepared_mel(args.src, fx)
    tgt, _ = _prepared_mel(args.tgt, fx)
    m = model.config.time_multiple
    frames = src.shape[1]
    converted = model.convert(_pad_frames(src, m, fx.config.log_floor), _pad_frames(tgt, m, fx.config.log_floor)).data[:, :frames]
    mel = MelSpectrogram(converted.astype(np.float32), fx.config.hop, fx.config.sample_rate)
    if args.mel_out:
        write_mel(args.mel_out, mel)
    save_wav(out, fx.griffin_lim(mel, args.iterations))
    print(f"converted {args.src} -> speaker of {args.tgt}: {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    write_resolved(out.parent, cfg, "render", _arg_echo(args))
    save_wav(out, FeatureExtractor(cfg.features).griffin_lim(read_mel(args.mel), args.iterations))
    print(f"rendered {args.mel} -> {out}")
    return EXIT_OK


def _parse_levels(text: str, n_levels: int) -> list[int]:
    try:
        levels = [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad level list {text!r}") from exc
    if any(not 0 <= lvl < n_levels for lvl in levels):
        raise UsageError(f"levels must lie in 0..{n_levels - 1}")
    return levels


def cmd_probe(args) -> int:
    cfg = override(load_run_config(args.config), "probe", seed=args.seed)
    out = Path(args.out)
    write_resolved(out, cfg, "probe", _arg_echo(args))
    model = load_checkpoint(args.ckpt).build_model()
    corpus = _load_mel_corpus(args.corpus, cfg, model.config.time_multiple)
    levels = _parse_levels(args.levels, model.config.n_levels)
    which = [w.strip().upper() for w in args.which.split(",")]
    if any(w not in ("C", "S") for w in which):
        raise UsageError("--which takes C, S or C,S")
    sets = extract_all(model, corpus, cfg.probe.s_frames)
    rows = []
    for w in which:
        for lvl in levels:
            emb = sets[(w, lvl)]
            acc = train_probe(emb.embeddings, emb.labels, cfg.probe).accuracy
            export_embeddings_csv(emb, out / f"embeddings_{w.lower()}{lvl}.csv")
            rows.append((w, lvl, acc))
    text = "embedding,level,accuracy\n" + "".join(f"{w},{lvl},{acc:.2f}\n" for w, lvl, acc in rows)
    (out / "probe.csv").write_text(text, encoding="utf-8")
    for w, lvl, acc in rows:
        print(f"{w}{lvl}  {acc:6.2f}%")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    write_resolved(out, cfg, "ablate", _arg_echo(args))
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad seed list {args.seeds!r}") from exc
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    try:
        variants = [(n, variant_config(n, cfg.model)) for n in names]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    corpus = _load_mel_corpus(args.corpus, cfg, cfg.model.time_multiple)
    report = run_ablation(variants, corpus, seeds, cfg.train, cfg.probe, cfg.data.holdout_per_speaker)
    (out / "ablation.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.table())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="python3 -m vqvcplus", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-corpus", help="synthesize a multi-speaker WAV corpus with a manifest")
    s.add_argument("--speakers", type=int)
    s.add_argument("--utterances", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--seconds", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_make_corpus)

    s = sub.add_parser("extract", help="WAV -> log-mel file")
    s.add_argument("--wav", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--csv", action="store_true", help="also write a CSV next to the mel file")
    s.add_argument("--config")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train a model on a corpus directory")
    s.add_argument("--config")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-fallback", action="store_true", help="abort instead of retrying at the fallback rate")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("convert", help="content of --src spoken by the speaker of --tgt")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--src", required=True)
    s.add_argument("--tgt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mel-out")
    s.add_argument("--iterations", type=int, default=32)
    s.add_argument("--config")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("render", help="log-mel file -> WAV via Griffin-Lim")
    s.add_argument("--mel", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int, default=32)
    s.add_argument("--config")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("probe", help="speaker probes on a checkpoint's embeddings")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--which", default="C,S")
    s.add_argument("--levels", default="0,1,2")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("ablate", help="codebook-size ablation with probes and L1")
    s.add_argument("--variants", default=",".join(DEFAULT_VARIANTS))
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
