"""Conformer-lite acoustic encoder with intermediate-layer taps.

Block layout (pre-norm sub-modules, final LayerNorm)::

    h1  = h + 1/2 FFN(h)
    h2  = h1 + MHA(LN(h1))
    h3  = h2 + Conv(h2)
    out = LN(h3 + 1/2 FFN(h3))

The convolution module is LN -> pointwise (D -> 2D) -> GLU -> depthwise
conv (kernel k) -> LN -> swish -> pointwise (D -> D).

Parameter count, with D = dim, F = ff_dim, k = conv_kernel,
s = subsample and d_in the feature size::

    ffn   = 2D + (D F + F) + (F D + D)
    mha   = 2D + 4 (D^2 + D)
    conv  = 2D + (2D^2 + 2D) + (k D + D) + 2D + (D^2 + D)
    block = 2 ffn + mha + conv + 2D
    total = (s d_in D + D) + N block

See :func:`encoder_parameter_count`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor


@dataclass
class EncoderConfig:
    num_layers: int = 6
    dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    conv_kernel: int = 7
    subsample: int = 1
    dropout: float = 0.1

    def validate(self):
        if self.dim % self.heads:
            raise ValueError(f"encoder dim {self.dim} not divisible by {self.heads} heads")
        if self.num_layers < 2:
            raise ValueError("encoder needs at least 2 layers")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv kernel must be odd")
        if self.subsample < 1:
            raise ValueError("subsample factor must be >= 1")


def tap_layers(m: int, n: int) -> list[int]:
    """Encoder layers feeding the M intermediate losses: floor(m N / (M + 1)), m = 1..M."""
    if m < 0 or m >= n:
        raise ValueError(f"need 0 <= M < N, got M={m}, N={n}")
    return [(i * n) // (m + 1) for i in range(1, m + 1)]


def encoder_parameter_count(cfg: EncoderConfig, feat_dim: int) -> int:
    d, f, k = cfg.dim, cfg.ff_dim, cfg.conv_kernel
    ffn = 2 * d + (d * f + f) + (f * d + d)
    mha = 2 * d + 4 * (d * d + d)
    conv = 2 * d + (2 * d * d + 2 * d) + (k * d + d) + 2 * d + (d * d + d)
    block = 2 * ffn + mha + conv + 2 * d
    return (cfg.subsample * feat_dim * d + d) + cfg.num_layers * block


class ConvModule(nn.Module):
    def __init__(self, rng, dim: int, kernel: int, dropout: float):
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Linear(rng, dim, 2 * dim)
        lim = np.sqrt(3.0 / kernel)
        self.dw_weight = nn.param(rng.uniform(-lim, lim, size=(kernel, dim)))
        self.dw_bias = nn.param(np.zeros(dim))
        self.dw_norm = nn.LayerNorm(dim)
        self.pw2 = nn.Linear(rng, dim, dim)
        self.dropout = dropout

    def __call__(self, x: Tensor, frames: np.ndarray | None, rng=None) -> Tensor:
        h = T.glu(self.pw1(self.norm(x)))
        if frames is not None:
            h = h * frames  # keep padding out of the temporal receptive field
        h = T.depthwise_conv1d(h, self.dw_weight, self.dw_bias)
        h = T.swish(self.dw_norm(h))
        return nn.drop(self.pw2(h), rng, self.dropout)


class ConformerBlock(nn.Module):
    def __init__(self, rng, cfg: EncoderConfig):
        d = cfg.dim
        self.ff1 = nn.FeedForward(rng, d, cfg.ff_dim, cfg.dropout)
        self.att_norm = nn.LayerNorm(d)
        self.att = nn.MultiHeadAttention(rng, d, cfg.heads, cfg.dropout)
        self.conv = ConvModule(rng, d, cfg.conv_kernel, cfg.dropout)
        self.ff2 = nn.FeedForward(rng, d, cfg.ff_dim, cfg.dropout)
        self.out_norm = nn.LayerNorm(d)

    def __call__(self, x: Tensor, frames=None, att_mask=None, rng=None) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.out_norm.gain.shape[0]:
            raise T.ShapeError(f"conformer_block: expected (B, T, {self.out_norm.gain.shape[0]}), got {x.shape}")
        h = x + T.scale(self.ff1(x, rng), 0.5)
        a = self.att_norm(h)
        h = h + self.att(a, a, att_mask, rng)
        h = h + self.conv(h, frames, rng)
        return self.out_norm(h + T.scale(self.ff2(h, rng), 0.5))


@dataclass
class EncoderOutput:
    final: Tensor
    taps: dict[int, Tensor] = field(default_factory=dict)
    lengths: np.ndarray | None = None


class ConformerEncoder(nn.Module):
    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig, feat_dim: int):
        cfg.validate()
        self.cfg = cfg
        self.input_proj = nn.Linear(rng, feat_dim * cfg.subsample, cfg.dim)
        self.blocks = [ConformerBlock(rng, cfg) for _ in range(cfg.num_layers)]

    def _subsample(self, x: np.ndarray, lengths: np.ndarray):
        s = self.cfg.subsample
        if s == 1:
            return x, lengths
        b, t, d = x.shape
        t_out = -(-t // s)
        x = np.pad(x, ((0, 0), (0, t_out * s - t), (0, 0)))
        return x.reshape(b, t_out, s * d), -(-np.asarray(lengths) // s)

    def __call__(self, x, lengths=None, taps=(), rng=None) -> EncoderOutput:
        """Encode padded features (B, T, d_in), or a single (T, d_in) utterance.

        ``taps`` lists 1-based layers whose outputs are kept; the layer-l tap
        is the output of block l, i.e. the input of block l+1.
        """
        taps = sorted(taps)
        n = self.cfg.num_layers
        if any(not 1 <= t <= n - 1 for t in taps):
            raise ValueError(f"tap layers {taps} must lie in [1, {n - 1}]")
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=T.DTYPE)
        single = data.ndim == 2
        if single:
            data = data[None]
        if lengths is None:
            lengths = np.full(data.shape[0], data.shape[1])
        data, lengths = self._subsample(data, np.asarray(lengths))
        t_len = data.shape[1]
        frames = nn.frame_mask(lengths, t_len)
        att_mask = nn.key_mask(lengths, t_len)

        h = self.input_proj(Tensor(data))
        h = h + nn.sinusoidal_positions(t_len, self.cfg.dim)
        h = nn.drop(h, rng, self.cfg.dropout)
        out = EncoderOutput(h, {}, lengths)
        for layer, block in enumerate(self.blocks, start=1):
            h = block(h, frames, att_mask, rng)
            if layer in taps:
                out.taps[layer] = h
        out.final = h
        if single:
            out.final = out.final[0]
            out.taps = {k: v[0] for k, v in out.taps.items()}
        return out


class CtcHead(nn.Module):
    """Affine map from encoder features to logits over V plus blank.

    One head serves the final layer and every interCTC tap. Softmax is
    applied by the loss and the decoders, not here.
    """

    def __init__(self, rng, dim: int, n_classes: int):
        self.proj = nn.Linear(rng, dim, n_classes)

    def __call__(self, h: Tensor) -> Tensor:
        return self.proj(h)
