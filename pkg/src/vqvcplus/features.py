"""Audio I/O, the log-mel feature pipeline, Griffin-Lim inversion and a synthetic speaker corpus."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import asdict, dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 22050
N_FFT = 1024
HOP = 256
N_MELS = 80


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray
    hop_samples: int = HOP
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] != N_MELS:
            raise ValueError(f"mel values must be {N_MELS} x T, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("mel contains non-finite values")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass
class FeatureConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = N_FFT
    hop: int = HOP
    n_mels: int = N_MELS
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-5
    segment_seconds: float = 3.0
    trim_db: float = 20.0

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def segment_samples(self) -> int:
        return int(np.floor(self.segment_seconds * self.sample_rate))


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path) -> AudioClip:
    """Read a PCM16 or float WAV file, averaging stereo to mono."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read WAV file {path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV encoding {data.dtype.name} in {path}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(np.clip(x, -1.0, 1.0), int(rate))


def save_wav(path, clip: AudioClip, encoding: str = "pcm16") -> None:
    x = np.clip(clip.samples, -1.0, 1.0)
    if encoding == "pcm16":
        data = np.round(x * 32767.0).astype(np.int16)
    elif encoding == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unsupported encoding {encoding!r}")
    wavfile.write(path, clip.sample_rate, data)


# ---------------------------------------------------------------------------
# preprocessing


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase resampling; output length is round(N * target / source)."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    g = gcd(int(target_rate), int(clip.sample_rate))
    up, down = target_rate // g, clip.sample_rate // g
    n_out = int(round(len(clip) * target_rate / clip.sample_rate))
    if len(clip) == 0:
        return AudioClip(np.zeros(0), target_rate)
    y = signal.resample_poly(clip.samples, up, down)
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return AudioClip(np.clip(y[:n_out], -1.0, 1.0), target_rate)


def frame_rms(x: np.ndarray, frame: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """RMS of zero-padded frames centred at multiples of ``hop``."""
    padded = np.pad(x, frame // 2)
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame)[::hop]
    return np.sqrt(np.mean(frames * frames, axis=1))


def trim_silence(clip: AudioClip, threshold_db: float = 20.0, frame: int = N_FFT, hop: int = HOP) -> AudioClip:
    """Drop leading/trailing frames more than ``threshold_db`` below the loudest frame."""
    if threshold_db <= 0:
        raise ValueError("threshold_db must be positive")
    if len(clip) == 0:
        return clip
    rms = frame_rms(clip.samples, frame, hop)
    peak = rms.max()
    if peak <= 0:
        return AudioClip(np.zeros(0), clip.sample_rate)
    active = np.flatnonzero(20 * np.log10(np.maximum(rms, 1e-300) / peak) > -threshold_db)
    start = active[0] * hop
    stop = min(len(clip), (active[-1] + 1) * hop)
    return AudioClip(clip.samples[start:stop].copy(), clip.sample_rate)


def segment_fixed(clip: AudioClip, seconds: float = 3.0, rng: np.random.Generator | None = None) -> AudioClip:
    """Exactly floor(seconds * rate) samples: tile short clips, take a random window of long ones."""
    if len(clip) == 0:
        raise ValueError("cannot segment an empty clip")
    n = int(np.floor(seconds * clip.sample_rate))
    x = clip.samples
    if len(x) < n:
        x = np.tile(x, -(-n // len(x)))[:n]
    elif len(x) > n:
        rng = np.random.default_rng() if rng is None else rng
        start = int(rng.integers(0, len(x) - n + 1))
        x = x[start: start + n]
    return AudioClip(x.copy(), clip.sample_rate)


# ---------------------------------------------------------------------------
# spectral analysis


def _window(n_fft: int) -> np.ndarray:
    return signal.get_window("hann", n_fft, fftbins=True)


def stft(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Complex STFT, Hann window, reflect centre padding: (n_fft//2 + 1) x (1 + len // hop)."""
    pad = n_fft // 2
    if len(x) <= pad:
        raise ValueError(f"signal of {len(x)} samples too short for reflect padding of {pad}")
    padded = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop]
    return np.fft.rfft(frames * _window(n_fft), axis=1).T


def istft(spec: np.ndarray, hop: int = HOP, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    n_fft = 2 * (spec.shape[0] - 1)
    win = _window(n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * win
    n_frames = frames.shape[0]
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        out[i * hop: i * hop + n_fft] += frames[i]
        norm[i * hop: i * hop + n_fft] += win * win
    out /= np.where(norm > 1e-10, norm, 1.0)
    pad = n_fft // 2
    out = out[pad:]
    length = hop * (n_frames - 1) if length is None else length
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out[:length]


def stft_magnitude(clip: AudioClip, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    return np.abs(stft(clip.samples, n_fft, hop))


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep, mels)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(
    sample_rate: int = SAMPLE_RATE,
    n_fft: int = N_FFT,
    n_mels: int = N_MELS,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """Triangular filters on the Slaney mel scale with unit peak: n_mels x (n_fft//2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower = edges[:-2, None]
    center = edges[1:-1, None]
    upper = edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(mag: np.ndarray, filterbank: np.ndarray, floor: float = 1e-5, hop: int = HOP, sample_rate: int = SAMPLE_RATE) -> MelSpectrogram:
    if filterbank.shape[1] != mag.shape[0]:
        raise ValueError(f"filterbank expects {filterbank.shape[1]} bins, magnitude has {mag.shape[0]}")
    return MelSpectrogram(np.log(np.maximum(filterbank @ mag, floor)), hop, sample_rate)


class FeatureExtractor:
    """Clip -> log-mel with a cached filterbank."""

    def __init__(self, config: FeatureConfig | None = None):
        self.config = cfg = config or FeatureConfig()
        self.filterbank = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
        self._pinv = None

    def __call__(self, clip: AudioClip) -> MelSpectrogram:
        cfg = self.config
        if clip.sample_rate != cfg.sample_rate:
            clip = resample(clip, cfg.sample_rate)
        mag = stft_magnitude(clip, cfg.n_fft, cfg.hop)
        return log_mel(mag, self.filterbank, cfg.log_floor, cfg.hop, cfg.sample_rate)

    def prepare(self, clip: AudioClip) -> AudioClip:
        """Resample then trim silence; the clip is ready for :func:`segment_fixed`."""
        if clip.sample_rate != self.config.sample_rate:
            clip = resample(clip, self.config.sample_rate)
        return trim_silence(clip, self.config.trim_db, self.config.n_fft, self.config.hop)

    @property
    def pseudo_inverse(self) -> np.ndarray:
        if self._pinv is None:
            self._pinv = np.linalg.pinv(self.filterbank)
        return self._pinv

    def griffin_lim(self, mel: MelSpectrogram, iterations: int = 32, return_history: bool = False):
        """Invert a log-mel by pseudo-inverse magnitude plus Griffin-Lim phase recovery.

        Starts from zero phase, so ``iterations=0`` is the zero-phase inversion.
        With ``return_history`` the clip after every iteration count 0..n is returned.
        """
        cfg = self.config
        mag = np.maximum(self.pseudo_inverse @ np.exp(mel.values), 0.0)
        length = cfg.hop * (mag.shape[1] - 1)
        spec = mag.astype(np.complex128)
        x = istft(spec, cfg.hop, length)
        history = [x]
        for _ in range(iterations):
            rebuilt = stft(x, cfg.n_fft, cfg.hop)
            spec = mag * np.exp(1j * np.angle(rebuilt))
            x = istft(spec, cfg.hop, length)
            history.append(x)
        clips = [AudioClip(np.clip(h, -1.0, 1.0), cfg.sample_rate) for h in history]
        return clips if return_history else clips[-1]


def griffin_lim(mel: MelSpectrogram, iterations: int = 32, config: FeatureConfig | None = None) -> AudioClip:
    return FeatureExtractor(config).griffin_lim(mel, iterations)


def crop_frames(mel: np.ndarray, multiple: int) -> np.ndarray:
    """Drop trailing frames so the frame count is a multiple of ``multiple``."""
    t = (mel.shape[-1] // multiple) * multiple
    if t == 0:
        raise ValueError(f"only {mel.shape[-1]} frames, need at least {multiple}")
    return mel[..., :t]


# ---------------------------------------------------------------------------
# MELS binary format and CSV export

_MELS = b"MELS"


def write_mel(path, mel: MelSpectrogram) -> None:
    values = np.ascontiguousarray(mel.values, dtype="<f4")
    f, t = values.shape
    with open(path, "wb") as fh:
        fh.write(_MELS)
        fh.write(struct.pack("<5I", 1, f, t, mel.sample_rate, mel.hop_samples))
        fh.write(values.tobytes())


def read_mel(path) -> MelSpectrogram:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MELS:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, f, t, rate, hop = struct.unpack("<5I", fh.read(20))
        if version != 1:
            raise ValueError(f"{path}: unsupported MELS version {version}")
        values = np.frombuffer(fh.read(4 * f * t), dtype="<f4").reshape(f, t).astype(np.float32)
    return MelSpectrogram(values, hop, rate)


def mel_to_csv(path, mel: MelSpectrogram) -> None:
    np.savetxt(path, mel.values, delimiter=",", fmt="%.9g")


# ---------------------------------------------------------------------------
# synthetic multi-speaker corpus

# Relative formant shifts per "phone"; shared by every speaker so content is speaker independent.
PHONE_TABLE = np.array(
    [
        [1.00, 1.00, 1.00, 1.00],
        [0.45, 1.85, 1.10, 1.00],
        [0.50, 0.70, 0.95, 1.00],
        [1.25, 1.35, 1.05, 1.00],
        [0.75, 1.55, 1.00, 1.05],
        [0.60, 0.90, 0.85, 0.95],
        [1.10, 0.80, 1.15, 1.00],
        [0.85, 1.20, 0.90, 1.00],
    ]
)
NOTE_TABLE = np.array([-3.0, -1.0, 0.0, 2.0, 4.0])
BASE_FORMANTS = np.array([700.0, 1220.0, 2600.0, 3400.0])


@dataclass
class SyntheticSpeakerSpec:
    speaker_id: int
    f0_base: float
    f0_jitter: float
    formant_centers: list[float] = field(default_factory=lambda: BASE_FORMANTS.tolist())
    amplitude_envelope_rate: float = 4.0

    def __post_init__(self):
        if self.f0_base <= 0:
            raise ValueError("f0_base must be positive")
        fc = np.asarray(self.formant_centers, dtype=float)
        if np.any(np.diff(fc) <= 0):
            raise ValueError("formant_centers must be strictly increasing")

    def validate(self, sample_rate: int) -> None:
        if max(self.formant_centers) >= sample_rate / 2:
            raise ValueError("formant centres must lie below Nyquist")


def default_speakers(
    n: int = 8,
    seed: int = 0,
    f0_range: tuple[float, float] = (115.0, 150.0),
    formant_scale_range: tuple[float, float] = (0.93, 1.07),
) -> list[SyntheticSpeakerSpec]:
    """``n`` speakers spread over pitch and vocal-tract scale.

    The default spread is deliberately narrow (about 4.6 semitones of pitch and
    +-7% formant scale) so speaker identity is not trivially readable from any
    single frame; wider spreads let every embedding, quantized or not, classify
    speakers almost perfectly.
    """
    if n < 2:
        raise ValueError("need at least two speakers")
    rng = np.random.default_rng([seed, 7919])
    f0s = np.geomspace(*f0_range, n)
    scales = np.linspace(*formant_scale_range, n)
    order = rng.permutation(n)
    specs = []
    for i in range(n):
        specs.append(
            SyntheticSpeakerSpec(
                speaker_id=i,
                f0_base=float(f0s[i]),
                f0_jitter=float(rng.uniform(1.0, 4.0)),
                formant_centers=(BASE_FORMANTS * scales[order[i]]).tolist(),
                amplitude_envelope_rate=float(rng.uniform(3.0, 7.0)),
            )
        )
    return specs


def _formant_gain(freqs: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # freqs (N,), centers (N, K): sum of Lorentzian resonances plus a small floor
    gain = np.full(freqs.shape, 0.02)
    for k in range(centers.shape[1]):
        fc = centers[:, k]
        bw = 60.0 + 0.06 * fc
        gain += (0.85 ** k) / (1.0 + ((freqs - fc) / bw) ** 2)
    return gain


def synth_utterance(
    spec: SyntheticSpeakerSpec,
    rng: np.random.Generator,
    seconds: float = 3.0,
    sample_rate: int = SAMPLE_RATE,
    control_hop: int = 64,
) -> AudioClip:
    """Harmonic source at the speaker's pitch through its formants, with random phone/note content."""
    spec.validate(sample_rate)
    n = int(np.floor(seconds * sample_rate))
    n_ctrl = -(-n // control_hop) + 1
    ctrl_t = np.arange(n_ctrl) * control_hop / sample_rate

    # content: a random segment sequence shared in kind across speakers
    bounds = [0.0]
    while bounds[-1] < seconds:
        bounds.append(bounds[-1] + rng.uniform(0.12, 0.4))
    n_seg = len(bounds) - 1
    phones = rng.integers(0, len(PHONE_TABLE), n_seg)
    notes = NOTE_TABLE[rng.integers(0, len(NOTE_TABLE), n_seg)]
    voiced = rng.random(n_seg) > 0.12
    seg = np.clip(np.searchsorted(bounds, ctrl_t, side="right") - 1, 0, n_seg - 1)

    smooth = np.hanning(9)
    smooth /= smooth.sum()
    semis = np.convolve(np.pad(notes[seg], 4, mode="edge"), smooth, mode="valid")
    walk = np.cumsum(rng.normal(0.0, 0.15, n_ctrl))
    walk -= np.linspace(0, walk[-1], n_ctrl)
    f0 = spec.f0_base * 2.0 ** (semis / 12.0) + spec.f0_jitter * np.tanh(walk)

    centers = np.asarray(spec.formant_centers)[None, :] * PHONE_TABLE[phones[seg]]
    kernel = np.hanning(17)
    kernel /= kernel.sum()
    centers = np.stack(
        [np.convolve(np.pad(centers[:, k], 8, mode="edge"), kernel, mode="valid") for k in range(centers.shape[1])],
        axis=1,
    )

    seg_start = np.asarray(bounds)[seg]
    seg_end = np.asarray(bounds)[seg + 1]
    ramp = np.minimum(np.clip((ctrl_t - seg_start) / 0.03, 0, 1), np.clip((seg_end - ctrl_t) / 0.03, 0, 1))
    tremolo = 1.0 + 0.15 * np.sin(2 * np.pi * spec.amplitude_envelope_rate * ctrl_t + rng.uniform(0, 2 * np.pi))
    amp = np.where(voiced[seg], ramp, 0.0) * tremolo

    f0_s = np.interp(np.arange(n), np.arange(n_ctrl) * control_hop, f0)
    phase = 2 * np.pi * np.cumsum(f0_s) / sample_rate
    n_harm = int(0.95 * (sample_rate / 2) / f0.max())
    x = np.zeros(n)
    pos = np.arange(n) / control_hop
    lo = np.minimum(pos.astype(np.int64), n_ctrl - 2)
    frac = pos - lo
    for h in range(1, n_harm + 1):
        g = _formant_gain(h * f0, centers) * amp / np.sqrt(h)
        g_s = g[lo] * (1 - frac) + g[lo + 1] * frac
        x += g_s * np.sin(h * phase)
    x += rng.normal(0.0, 1e-4, n)
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= 0.5 / peak
    return AudioClip(x, sample_rate)


def synth_corpus(
    specs: list[SyntheticSpeakerSpec],
    utterances_per_speaker: int,
    seconds: float = 3.0,
    seed: int = 0,
    sample_rate: int = SAMPLE_RATE,
) -> list[tuple[int, AudioClip]]:
    """Every utterance draws from its own child seed (seed, speaker_id, index)."""
    if len(specs) < 2:
        raise ValueError("need at least two speakers")
    corpus = []
    for spec in specs:
        for u in range(utterances_per_speaker):
            rng = np.random.default_rng([seed, spec.speaker_id, u])
            corpus.append((spec.speaker_id, synth_utterance(spec, rng, seconds, sample_rate)))
    return corpus


# ---------------------------------------------------------------------------
# corpus on disk


def write_corpus(directory, corpus: list[tuple[int, AudioClip]]) -> Path:
    """WAV files plus a ``manifest.tsv`` of ``<speaker_id>\\t<relative_path>`` lines."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    counts: dict[int, int] = {}
    for speaker, clip in corpus:
        u = counts.get(speaker, 0)
        counts[speaker] = u + 1
        rel = Path(f"spk{speaker:03d}") / f"utt{u:04d}.wav"
        (directory / rel.parent).mkdir(exist_ok=True)
        save_wav(directory / rel, clip)
        lines.append(f"{speaker}\t{rel.as_posix()}")
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path) -> list[tuple[int, Path]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            speaker, rel = line.split("\t")
            entries.append((int(speaker), path.parent / rel))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed manifest line {line!r}") from exc
    return entries


def load_corpus(path) -> list[tuple[int, AudioClip]]:
    return [(speaker, load_wav(p)) for speaker, p in read_manifest(path)]


def csv_text(rows, header) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()
