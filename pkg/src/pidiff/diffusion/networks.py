"""Denoiser UNet, image conditioners and latent codecs."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from ..tensor import (
    AdamW,
    Conv2d,
    Linear,
    Module,
    Tensor,
    add_channel,
    avg_pool2d,
    concat,
    no_grad,
    ops,
    upsample_nearest2x,
)


def timestep_embedding(t, dim: int = 64, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features (B, dim) for integer timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class ResBlock(Module):
    """Pre-activation residual block with an additive per-channel time signal."""

    def __init__(self, ch: int, temb_dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(ch, ch, 3, rng)
        self.temb = Linear(temb_dim, ch, rng)
        self.conv2 = Conv2d(ch, ch, 3, rng)

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ops.silu(x))
        h = add_channel(h, self.temb(temb))
        h = self.conv2(ops.silu(h))
        return x + h


class Denoiser(Module):
    """Two-level UNet predicting noise from ``concat(z_t, cond)`` and ``t``."""

    def __init__(self, latent_c: int, cond_c: int, widths: Sequence[int] = (32, 64), temb_dim: int = 64,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        w1, w2 = widths
        self.latent_c, self.cond_c, self.widths, self.temb_dim = latent_c, cond_c, tuple(widths), temb_dim
        hidden = 2 * temb_dim
        self.t_mlp1 = Linear(temb_dim, hidden, rng)
        self.t_mlp2 = Linear(hidden, hidden, rng)
        self.inp = Conv2d(latent_c + cond_c, w1, 3, rng)
        self.res1 = ResBlock(w1, hidden, rng)
        self.down = Conv2d(w1, w2, 3, rng)
        self.res2 = ResBlock(w2, hidden, rng)
        self.mid = ResBlock(w2, hidden, rng)
        self.up = Conv2d(w2 + w1, w1, 3, rng)
        self.res3 = ResBlock(w1, hidden, rng)
        self.out = Conv2d(w1, latent_c, 3, rng)
        self.out.weight.data *= 0.1

    def forward(self, z_t: Tensor, t, cond: Tensor) -> Tensor:
        if z_t.ndim != 4 or cond.ndim != 4:
            raise ValueError("denoiser expects NCHW latent and condition")
        if z_t.shape[0] != cond.shape[0] or z_t.shape[2:] != cond.shape[2:]:
            raise ValueError(f"condition {cond.shape} does not match latent {z_t.shape} spatially")
        if z_t.shape[1] != self.latent_c or cond.shape[1] != self.cond_c:
            raise ValueError(f"expected {self.latent_c} latent and {self.cond_c} condition channels, "
                             f"got {z_t.shape[1]} and {cond.shape[1]}")
        H, W = z_t.shape[2:]
        if H % 2 or W % 2:
            raise ValueError(f"latent size {H}x{W} must be even")
        t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
        temb = Tensor(timestep_embedding(t, self.temb_dim), dtype=z_t.dtype)
        temb = self.t_mlp2(ops.silu(self.t_mlp1(temb)))
        h1 = self.res1(self.inp(concat([z_t, cond], axis=1)), temb)
        h2 = self.res2(self.down(avg_pool2d(h1, 2)), temb)
        h2 = self.mid(h2, temb)
        u = self.up(concat([upsample_nearest2x(h2), h1], axis=1))
        u = self.res3(u, temb)
        return self.out(ops.silu(u))


# ---------------------------------------------------------------------------
# codecs
# ---------------------------------------------------------------------------

class IdentityCodec(Module):
    """Pixel-space diffusion: the latent is the image itself."""

    kind = "identity"
    factor = 1
    latent_c = 1

    def encode(self, x: Tensor) -> Tensor:
        return x

    def decode(self, z: Tensor) -> Tensor:
        return z

    @property
    def frozen(self) -> bool:
        return True


class ConvCodec(Module):
    """Small convolutional autoencoder with spatial factor ``f`` in {1, 2, 4}."""

    kind = "learned"

    def __init__(self, factor: int = 2, latent_c: int = 4, width: int = 32, seed: int = 0):
        if factor not in (1, 2, 4):
            raise ValueError(f"codec factor must be 1, 2 or 4, got {factor}")
        rng = np.random.default_rng(seed)
        self.factor, self.latent_c, self.width = factor, latent_c, width
        n = int(np.log2(factor))
        self.enc_in = Conv2d(1, width, 3, rng)
        self.enc_down = [Conv2d(width, width, 3, rng, stride=2) for _ in range(n)]
        self.enc_out = Conv2d(width, latent_c, 1, rng)
        self.dec_in = Conv2d(latent_c, width, 3, rng)
        self.dec_up = [Conv2d(width, width, 3, rng) for _ in range(n)]
        self.dec_out = Conv2d(width, 1, 3, rng)

    def encode(self, x: Tensor) -> Tensor:
        H, W = x.shape[2:]
        if H % self.factor or W % self.factor:
            raise ValueError(f"image {H}x{W} not divisible by codec factor {self.factor}")
        h = ops.silu(self.enc_in(x))
        for conv in self.enc_down:
            h = ops.silu(conv(h))
        return self.enc_out(h)

    def decode(self, z: Tensor) -> Tensor:
        h = ops.silu(self.dec_in(z))
        for conv in self.dec_up:
            h = ops.silu(conv(upsample_nearest2x(h)))
        return self.dec_out(h)

    def forward(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


def make_codec(kind: str, factor: int = 2, latent_c: int = 4, seed: int = 0) -> Module:
    if kind == "identity":
        if factor != 1:
            raise ValueError("the identity codec has factor 1")
        return IdentityCodec()
    if kind == "learned":
        return ConvCodec(factor, latent_c, seed=seed)
    raise ValueError(f"unknown codec kind {kind!r}")


def codec_train(codec: Module, images: np.ndarray, epochs: int, lr: float = 1e-3, seed: int = 0,
                batch_size: int = 16) -> List[float]:
    """Fit a learned codec to reconstruct (N, H, W) images in [-1, 1], then freeze it."""
    if isinstance(codec, IdentityCodec) or getattr(codec, "kind", None) != "learned":
        raise ValueError("only a learned codec can be trained")
    images = np.asarray(images)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("codec_train needs a non-empty (N, H, W) image array")
    history: List[float] = []
    opt = AdamW(codec.trainable_parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    dtype = codec.enc_in.weight.dtype
    for _ in range(epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for i in range(0, len(images), batch_size):
            x = Tensor(images[order[i:i + batch_size]][:, None], dtype=dtype)
            opt.zero_grad()
            loss = ops.mse(codec(x), x)
            loss.backward()
            opt.step()
            total += loss.item() * x.shape[0]
        history.append(total / len(images))
    codec.freeze()
    return history


def codec_roundtrip(codec: Module, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(np.asarray(images[i:i + batch_size])[:, None])
            out.append(codec.decode(codec.encode(x)).data[:, 0])
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# conditioners
# ---------------------------------------------------------------------------

def rgb_to_tensor(visible: np.ndarray, dtype=None) -> Tensor:
    """(B, H, W, 3) visible images -> (B, 3, H, W) tensor."""
    visible = np.asarray(visible)
    if visible.ndim != 4 or visible.shape[-1] != 3:
        raise ValueError(f"expected (B, H, W, 3) visible images, got {visible.shape}")
    return Tensor(np.ascontiguousarray(visible.transpose(0, 3, 1, 2)), dtype=dtype)


class MLPConditioner(Module):
    """Average-pool the RGB image by ``f`` and apply a three-layer pointwise MLP (trainable)."""

    kind = "mlp"

    def __init__(self, factor: int = 1, out_c: int = 4, hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.factor, self.out_c = factor, out_c
        self.l1 = Conv2d(3, hidden, 1, rng)
        self.l2 = Conv2d(hidden, hidden, 1, rng)
        self.l3 = Conv2d(hidden, out_c, 1, rng)

    def forward(self, rgb: Tensor) -> Tensor:
        x = avg_pool2d(rgb, self.factor)
        return self.l3(ops.silu(self.l2(ops.silu(self.l1(x)))))


class EncoderConditioner(Module):
    """Frozen codec encoder applied to the luminance of the RGB image."""

    kind = "encoder"

    def __init__(self, codec: Module):
        self.codec = codec
        self.out_c = codec.latent_c
        codec.freeze()

    def forward(self, rgb: Tensor) -> Tensor:
        B, _, H, W = rgb.shape
        weights = np.array([0.299, 0.587, 0.114], dtype=rgb.dtype)
        # luminance of a [-1, 1] image stays in [-1, 1] since the weights sum to one
        lum = Tensor(np.tensordot(weights, rgb.data, axes=([0], [1]))[:, None], dtype=rgb.dtype)
        return self.codec.encode(lum)
