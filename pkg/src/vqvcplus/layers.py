"""VQVC+ building blocks: codebook quantization, speaker embedding, down/up-conv modules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1, rng=None, dtype=np.float32):
        rng = np.random.default_rng() if rng is None else rng
        bound = 1.0 / np.sqrt(3 * c_in)
        self.stride = stride
        self.weight = Tensor(rng.uniform(-bound, bound, (c_out, c_in, 3)).astype(dtype), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, c_out).astype(dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias, self.stride)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5, dtype=np.float32):
        self.groups = groups
        self.eps = eps
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.groups, self.weight, self.bias, self.eps)


def default_groups(channels: int) -> int:
    return 16 if channels >= 16 and channels % 16 == 0 else channels


class Codebook(Module):
    """K learnable codes of dimension D, initialised uniformly on [-1/K, 1/K]."""

    def __init__(self, size: int, dim: int, rng=None, dtype=np.float32):
        if size < 2:
            raise ValueError("codebook needs at least two codes")
        rng = np.random.default_rng() if rng is None else rng
        codes = rng.uniform(-1.0 / size, 1.0 / size, (size, dim)).astype(dtype)
        while len(np.unique(codes, axis=0)) < size:
            codes = rng.uniform(-1.0 / size, 1.0 / size, (size, dim)).astype(dtype)
        self.codes = Tensor(codes, requires_grad=True)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]


def nearest_codes(columns: np.ndarray, codes: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Index of the nearest code (squared L2) for each row of ``columns``; lowest index wins ties."""
    if len(codes) == 0:
        raise ValueError("empty codebook")
    out = np.empty(len(columns), dtype=np.int64)
    for start in range(0, len(columns), chunk):
        block = columns[start: start + chunk]
        diff = block[:, None, :] - codes[None, :, :]
        out[start: start + chunk] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return out


def _columns(x: np.ndarray) -> np.ndarray:
    # (..., C, T) -> (N, C) with time-major order inside each batch element
    return np.moveaxis(x, -1, -2).reshape(-1, x.shape[-2])


def quantize(v: Tensor, codebook: Codebook) -> tuple[Tensor, np.ndarray]:
    """Replace each time column of ``v`` by its nearest code.

    Returns the quantized tensor and the selected indices shaped like ``v``
    without its channel axis. The backward pass is straight-through for ``v``;
    each selected code accumulates the output gradient of the columns it replaced.
    """
    codes = codebook.codes
    if v.shape[-2] != codes.shape[1]:
        raise ValueError(f"column dim {v.shape[-2]} != code dim {codes.shape[1]}")
    cols = _columns(v.data)
    idx = nearest_codes(cols, codes.data)
    q_cols = codes.data[idx]
    moved_shape = v.shape[:-2] + (v.shape[-1], v.shape[-2])
    out = np.moveaxis(q_cols.reshape(moved_shape), -1, -2)

    def backward(g):
        g_cols = _columns(g)
        g_codes = np.zeros_like(codes.data)
        np.add.at(g_codes, idx, g_cols)
        return g, g_codes

    result = Tensor._from_op(np.ascontiguousarray(out), (v, codes), backward, "quantize")
    return result, idx.reshape(v.shape[:-2] + (v.shape[-1],))


def speaker_embed(v: Tensor, c_q: Tensor) -> tuple[Tensor, Tensor]:
    """s = time mean of (v - c_q); S = s repeated along time to the shape of ``c_q``."""
    if v.shape != c_q.shape:
        raise ValueError(f"shape mismatch {v.shape} vs {c_q.shape}")
    s = ad.reduce_mean_time(v - c_q)
    return s, expand_time(s, c_q.shape[-1])


def expand_time(s: Tensor, frames: int) -> Tensor:
    return ad.repeat_time(ad.reshape(s, s.shape + (1,)), frames)


@dataclass
class LayerTriple:
    """Outputs of one encoder level.

    ``v`` is the pre-normalization conv output that feeds the next level,
    ``v_norm`` its instance-normalized version, ``c`` the quantized content
    embedding, ``s`` the speaker vector and ``S`` its time-repeated form.
    """

    v: Tensor
    v_norm: Tensor
    c: Tensor
    s: Tensor
    S: Tensor
    codes: np.ndarray | None


class VQDownConv(Module):
    """conv(stride 1) -> LeakyReLU -> conv(stride 2) -> IN -> VQ -> speaker embedding.

    With ``codebook_size=None`` there is no quantizer (the IN-only ablation):
    the content embedding is the normalized output itself.
    ``speaker_source`` picks which tensor the speaker residual is measured
    from: ``"pre_norm"`` uses the conv output V, ``"post_norm"`` uses IN(V).
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        codebook_size: int | None = 64,
        slope: float = 0.2,
        eps: float = 1e-5,
        speaker_source: str = "pre_norm",
        rng=None,
        dtype=np.float32,
    ):
        if speaker_source not in ("pre_norm", "post_norm"):
            raise ValueError(f"unknown speaker_source {speaker_source!r}")
        rng = np.random.default_rng() if rng is None else rng
        self.slope = slope
        self.eps = eps
        self.speaker_source = speaker_source
        self.conv_a = Conv1d(c_in, c_out, 1, rng, dtype)
        self.conv_b = Conv1d(c_out, c_out, 2, rng, dtype)
        self.codebook = Codebook(codebook_size, c_out, rng, dtype) if codebook_size else None

    def __call__(self, x: Tensor) -> LayerTriple:
        if x.shape[-1] % 2:
            raise ValueError(f"time extent must be even, got {x.shape[-1]}")
        v = self.conv_b(ad.leaky_relu(self.conv_a(x), self.slope))
        v_norm = ad.instance_norm(v, self.eps)
        if self.codebook is None:
            c, idx = v_norm, None
        else:
            c, idx = quantize(v_norm, self.codebook)
        s, S = speaker_embed(v if self.speaker_source == "pre_norm" else v_norm, c)
        return LayerTriple(v, v_norm, c, s, S, idx)


class GBlock(Module):
    """Two conv -> GroupNorm -> LeakyReLU stages with a residual add; shape preserving."""

    def __init__(self, channels: int, groups: int | None = None, slope: float = 0.2, eps: float = 1e-5, rng=None, dtype=np.float32):
        rng = np.random.default_rng() if rng is None else rng
        groups = default_groups(channels) if groups is None else groups
        self.slope = slope
        self.conv1 = Conv1d(channels, channels, 1, rng, dtype)
        self.norm1 = GroupNorm(channels, groups, eps, dtype)
        self.conv2 = Conv1d(channels, channels, 1, rng, dtype)
        self.norm2 = GroupNorm(channels, groups, eps, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.leaky_relu(self.norm1(self.conv1(x)), self.slope)
        h = ad.leaky_relu(self.norm2(self.conv2(h)), self.slope)
        return x + h


def time_upsample(x: Tensor) -> Tensor:
    """Duplicate each time column: column t lands at 2t and 2t+1."""
    return ad.repeat_time(x, 2)


class FreqUpsample(Module):
    """Keep the input as the low half and append a conv-generated high half."""

    def __init__(self, channels: int, rng=None, dtype=np.float32):
        self.conv = Conv1d(channels, channels, 1, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.concat_channels([x, self.conv(x)])


class VQUpConv(Module):
    """GBlock(C + S) + V_prev, then time and frequency upsampling: C x T -> 2C x 2T."""

    def __init__(self, channels: int, groups: int | None = None, slope: float = 0.2, eps: float = 1e-5, rng=None, dtype=np.float32):
        rng = np.random.default_rng() if rng is None else rng
        self.gblock = GBlock(channels, groups, slope, eps, rng, dtype)
        self.freq = FreqUpsample(channels, rng, dtype)

    def __call__(self, v_prev: Tensor | None, c_skip: Tensor, s_skip: Tensor) -> Tensor:
        if c_skip.shape != s_skip.shape:
            raise ValueError(f"skip shapes differ: {c_skip.shape} vs {s_skip.shape}")
        h = self.gblock(c_skip + s_skip)
        if v_prev is not None:
            if v_prev.shape != h.shape:
                raise ValueError(f"v_prev shape {v_prev.shape} != skip shape {h.shape}")
            h = h + v_prev
        return self.freq(time_upsample(h))
