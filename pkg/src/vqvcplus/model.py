"""The three-level VQVC+ U-Net: encoder, decoder, losses and conversion."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Conv1d, LayerTriple, Module, VQDownConv, VQUpConv, expand_time


@dataclass
class ModelConfig:
    """Architecture hyper-parameters.

    ``codebook_size=None`` builds the IN-only variant (no quantizer).
    ``channel_schedule`` lists the encoder output width of each level; when a
    decoder level's doubled width does not match the level above it, a
    kernel-3 bridge conv maps it across.
    """

    n_levels: int = 3
    mel_bins: int = 80
    channel_schedule: tuple[int, ...] = (64, 64, 64)
    codebook_size: int | None = 64
    latent_weight: float = 0.1
    leaky_slope: float = 0.2
    groups: int | None = None
    norm_eps: float = 1e-5
    speaker_source: str = "pre_norm"
    convert_all_levels: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.channel_schedule = tuple(int(c) for c in self.channel_schedule)
        if len(self.channel_schedule) != self.n_levels:
            raise ValueError(f"channel_schedule needs {self.n_levels} entries, got {len(self.channel_schedule)}")
        if self.codebook_size is not None and self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.latent_weight < 0:
            raise ValueError("latent_weight must be non-negative")

    @property
    def time_multiple(self) -> int:
        return 2 ** self.n_levels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_schedule"] = list(self.channel_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Reconstruction:
    x_hat: Tensor
    l_rec: Tensor
    l_latent: list[Tensor]
    l_total: Tensor
    levels: list[LayerTriple] = field(repr=False)


class VQVCPlus(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = cfg = config or ModelConfig()
        rng = np.random.default_rng(seed)
        dtype = np.dtype(cfg.dtype)
        widths = cfg.channel_schedule
        self.in_proj = Conv1d(cfg.mel_bins, widths[0], 1, rng, dtype)
        self.down = []
        for lvl, w in enumerate(widths):
            c_in = widths[lvl - 1] if lvl else widths[0]
            self.down.append(
                VQDownConv(c_in, w, cfg.codebook_size, cfg.leaky_slope, cfg.norm_eps, cfg.speaker_source, rng, dtype)
            )
        self.up = [VQUpConv(w, cfg.groups, cfg.leaky_slope, cfg.norm_eps, rng, dtype) for w in widths]
        self.bridge = []
        for lvl in range(1, cfg.n_levels):
            if 2 * widths[lvl] != widths[lvl - 1]:
                self.bridge.append(Conv1d(2 * widths[lvl], widths[lvl - 1], 1, rng, dtype))
            else:
                self.bridge.append(None)
        self.out_proj = Conv1d(2 * widths[0], cfg.mel_bins, 1, rng, dtype)

    def codebooks(self):
        return [d.codebook for d in self.down if d.codebook is not None]

    def _check_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.config.dtype))
        if x.shape[-2] != self.config.mel_bins:
            raise ValueError(f"expected {self.config.mel_bins} mel bins, got {x.shape[-2]}")
        if x.shape[-1] % self.config.time_multiple:
            raise ValueError(f"frame count {x.shape[-1]} not divisible by {self.config.time_multiple}")
        return x

    def encode(self, x) -> list[LayerTriple]:
        """One LayerTriple per level; level l has T / 2**(l+1) frames."""
        h = self.in_proj(self._check_input(x))
        levels = []
        for down in self.down:
            triple = down(h)
            levels.append(triple)
            h = triple.v
        return levels

    def decode(self, skips: list[tuple[Tensor, Tensor]]) -> Tensor:
        """Run the decoder from per-level (C, S) skips, deepest level first fed a zero V."""
        if len(skips) != self.config.n_levels:
            raise ValueError(f"need {self.config.n_levels} skip pairs, got {len(skips)}")
        h = None
        for lvl in reversed(range(self.config.n_levels)):
            c, s = skips[lvl]
            y = self.up[lvl](h, c, s)
            if lvl:
                bridge = self.bridge[lvl - 1]
                h = bridge(y) if bridge is not None else y
        return self.out_proj(y)

    def reconstruct(self, x) -> Reconstruction:
        """Forward pass with L_rec (mean absolute error), per-level latent losses and their weighted total."""
        x = self._check_input(x)
        levels = self.encode(x)
        x_hat = self.decode([(t.c, t.S) for t in levels])
        l_rec = ad.mean(ad.absolute(x_hat - x))
        l_latent = [ad.mean(ad.square(t.v_norm - ad.stop_gradient(t.c))) for t in levels]
        latent_sum = l_latent[0]
        for term in l_latent[1:]:
            latent_sum = latent_sum + term
        l_total = l_rec + ad.scale(latent_sum, self.config.latent_weight)
        return Reconstruction(x_hat, l_rec, l_latent, l_total, levels)

    def convert(self, x_src, x_tgt, all_levels: bool | None = None) -> Tensor:
        """Decode the source's content with the target's speaker embeddings."""
        all_levels = self.config.convert_all_levels if all_levels is None else all_levels
        src = self.encode(x_src)
        tgt = self.encode(x_tgt)
        deepest = self.config.n_levels - 1
        skips = []
        for lvl, (a, b) in enumerate(zip(src, tgt)):
            if all_levels or lvl == deepest:
                skips.append((a.c, expand_time(b.s, a.c.shape[-1])))
            else:
                skips.append((a.c, a.S))
        return self.decode(skips)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            if p.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}: {p.shape} vs {state[name].shape}")
            p.data = np.array(state[name], dtype=p.dtype)
