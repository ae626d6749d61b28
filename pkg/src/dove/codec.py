"""Miniature convolutional codec: encoder to a latent grid, VQ codebook with
straight-through gradients, decoder back to pixels, a patch discriminator,
and a frozen perceptual feature extractor.

The encoder downsamples by the patch size (a power of two, one stride-2
conv per factor of two), producing an (N_h, d_c) latent grid per image
with N_h = (H/p) * (W/p). The decoder mirrors it with transposed convs and
a sigmoid output head, so decoded pixels always land in [0, 1].
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .nncore import ConfigError, ShapeMismatch, Tensor, constant, param


@dataclass(frozen=True)
class CodecConfig:
    canvas: int = 32
    patch: int = 8
    d_codec: int = 64
    base_channels: int = 32
    codebook_size: int = 512

    @property
    def stages(self) -> int:
        p = self.patch
        if p < 2 or p & (p - 1):
            raise ConfigError(f"patch size must be a power of two >= 2, got {p}")
        return int(np.log2(p))

    @property
    def grid_side(self) -> int:
        if self.canvas % self.patch:
            raise ConfigError(f"canvas {self.canvas} not a multiple of patch {self.patch}")
        return self.canvas // self.patch

    @property
    def n_latents(self) -> int:
        return self.grid_side * self.grid_side


def _stage_channels(cfg: CodecConfig) -> list[int]:
    chans = [3]
    for s in range(cfg.stages):
        chans.append(cfg.d_codec if s == cfg.stages - 1 else cfg.base_channels * (s + 1))
    return chans


class CodecEncoder:
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator, prefix: str = "codec.enc"):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        chans = _stage_channels(cfg)
        for s in range(cfg.stages):
            w = param(nn.he_init(rng, (3, 3, chans[s], chans[s + 1])), f"{prefix}.conv{s}.w")
            b = param(nn.zeros_init((chans[s + 1],)), f"{prefix}.conv{s}.b")
            self.params[w.name] = w
            self.params[b.name] = b

    def forward(self, x: Tensor, with_taps: bool = False):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[3] != 3:
            raise ShapeMismatch(f"encoder expects (N,H,W,3), got {x.shape}")
        if x.shape[1] % cfg.patch or x.shape[2] % cfg.patch:
            raise ShapeMismatch(
                f"image {x.shape[1]}x{x.shape[2]} not a multiple of patch {cfg.patch}")
        taps = []
        h = x
        prefix = next(iter(self.params)).rsplit(".conv", 1)[0]
        for s in range(cfg.stages):
            w = self.params[f"{prefix}.conv{s}.w"]
            b = self.params[f"{prefix}.conv{s}.b"]
            h = nn.gelu(nn.add(nn.conv2d(h, w, stride=2), b))
            taps.append(h)
        n = h.shape[0]
        grid = nn.reshape(h, (n, cfg.n_latents, cfg.d_codec))
        return (grid, taps) if with_taps else grid


class CodecDecoder:
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator, prefix: str = "codec.dec"):
        self.cfg = cfg
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        chans = list(reversed(_stage_channels(cfg)))  # e.g. [64, 64, 32, 3]
        for s in range(cfg.stages):
            cin = chans[s]
            cout = chans[s + 1] if s + 1 < cfg.stages else cfg.base_channels
            w = param(nn.he_init(rng, (3, 3, cin, cout)), f"{prefix}.tconv{s}.w")
            b = param(nn.zeros_init((cout,)), f"{prefix}.tconv{s}.b")
            self.params[w.name] = w
            self.params[b.name] = b
        w = param(nn.he_init(rng, (3, 3, cfg.base_channels, 3)), f"{prefix}.out.w")
        b = param(nn.zeros_init((3,)), f"{prefix}.out.b")
        self.params[w.name] = w
        self.params[b.name] = b

    def forward(self, grid: Tensor) -> Tensor:
        cfg = self.cfg
        if grid.ndim != 3 or grid.shape[1] != cfg.n_latents or grid.shape[2] != cfg.d_codec:
            raise ShapeMismatch(
                f"decoder expects (N,{cfg.n_latents},{cfg.d_codec}), got {grid.shape}")
        n = grid.shape[0]
        h = nn.reshape(grid, (n, cfg.grid_side, cfg.grid_side, cfg.d_codec))
        for s in range(cfg.stages):
            w = self.params[f"{self.prefix}.tconv{s}.w"]
            b = self.params[f"{self.prefix}.tconv{s}.b"]
            h = nn.gelu(nn.add(nn.transposed_conv2d(h, w, stride=2), b))
        w = self.params[f"{self.prefix}.out.w"]
        b = self.params[f"{self.prefix}.out.b"]
        return nn.sigmoid(nn.add(nn.conv2d(h, w, stride=1), b))


class Codebook:
    """VQ embedding table with straight-through quantization."""

    def __init__(self, cfg: CodecConfig, rng: np.random.Generator, prefix: str = "codec.book"):
        if cfg.codebook_size < 2:
            raise ConfigError(f"codebook needs at least 2 rows, got {cfg.codebook_size}")
        self.cfg = cfg
        self.table = param(nn.normal_init(rng, (cfg.codebook_size, cfg.d_codec), std=0.5),
                           f"{prefix}.table")
        self.params = {self.table.name: self.table}

    def quantize(self, grid: Tensor):
        """Snap each latent vector to its nearest codebook row (L2).

        Returns (indices, quantized, codebook_loss, commitment_loss). The
        quantized tensor carries straight-through gradients: backward
        treats quantization as identity.
        """
        if grid.shape[-1] != self.cfg.d_codec:
            raise ShapeMismatch(
                f"quantize: latent dim {grid.shape[-1]} != codebook dim {self.cfg.d_codec}")
        z = grid.data
        flat = z.reshape(-1, self.cfg.d_codec)
        table = self.table.data
        d2 = (flat ** 2).sum(axis=1, keepdims=True) - 2.0 * flat @ table.T + (table ** 2).sum(axis=1)
        indices = d2.argmin(axis=1).reshape(z.shape[:-1])
        q = table[indices]
        quantized = nn.straight_through(grid, q)
        rows = nn.embedding_lookup(self.table, indices)
        codebook_loss = nn.mean(nn.mul(nn.sub(rows, constant(z)), nn.sub(rows, constant(z))))
        commit_loss = nn.mean(nn.mul(nn.sub(grid, constant(q)), nn.sub(grid, constant(q))))
        return indices, quantized, codebook_loss, commit_loss


class Discriminator:
    """Small conv stack mapping an image to a grid of patch logits."""

    def __init__(self, cfg: CodecConfig, rng: np.random.Generator, prefix: str = "disc"):
        self.prefix = prefix
        c = cfg.base_channels
        self.params: dict[str, Tensor] = {}
        for name, arr in [
            ("conv0.w", nn.he_init(rng, (3, 3, 3, c))),
            ("conv0.b", nn.zeros_init((c,))),
            ("conv1.w", nn.he_init(rng, (3, 3, c, 2 * c))),
            ("conv1.b", nn.zeros_init((2 * c,))),
            # zero-init head: fresh discriminators sit at the symmetric point
            ("head.w", nn.zeros_init((3, 3, 2 * c, 1))),
            ("head.b", nn.zeros_init((1,))),
        ]:
            t = param(arr, f"{prefix}.{name}")
            self.params[t.name] = t

    def forward(self, x: Tensor) -> Tensor:
        p = self.params
        h = nn.relu(nn.add(nn.conv2d(x, p[f"{self.prefix}.conv0.w"], stride=2),
                           p[f"{self.prefix}.conv0.b"]))
        h = nn.relu(nn.add(nn.conv2d(h, p[f"{self.prefix}.conv1.w"], stride=2),
                           p[f"{self.prefix}.conv1.b"]))
        return nn.add(nn.conv2d(h, p[f"{self.prefix}.head.w"], stride=1),
                      p[f"{self.prefix}.head.b"])


def generator_gan_loss(disc: Discriminator, fake: Tensor) -> Tensor:
    """Non-saturating logistic loss pushing fake patches toward 'real'.

    Returns one value per batch item (mean over the patch-logit grid).
    """
    logits = disc.forward(fake)
    return nn.mean(nn.softplus(nn.neg(logits)), axis=(1, 2, 3))


def discriminator_loss(disc: Discriminator, real: Tensor, fake: Tensor) -> Tensor:
    """Symmetric logistic discriminator loss; log(4)/2 per side at logit 0."""
    if real.shape != fake.shape:
        raise ShapeMismatch(f"discriminator_loss: shapes differ {real.shape} vs {fake.shape}")
    lr = disc.forward(real)
    lf = disc.forward(fake)
    return nn.mul(nn.add(nn.mean(nn.softplus(nn.neg(lr))), nn.mean(nn.softplus(lf))), 0.5)


class PerceptualExtractor:
    """Frozen copy of a codec encoder's first two conv stages.

    Parameters are captured at construction time and never updated; the
    fingerprint hash lets tests assert the freeze.
    """

    def __init__(self, encoder: CodecEncoder):
        self.cfg = encoder.cfg
        prefix = next(iter(encoder.params)).rsplit(".conv", 1)[0]
        self._weights = []
        for s in range(min(2, self.cfg.stages)):
            w = encoder.params[f"{prefix}.conv{s}.w"].data.copy()
            b = encoder.params[f"{prefix}.conv{s}.b"].data.copy()
            self._weights.append((w, b))

    def features(self, x: Tensor) -> list[Tensor]:
        taps = []
        h = x
        for w, b in self._weights:
            h = nn.gelu(nn.add(nn.conv2d(h, constant(w), stride=2), constant(b)))
            taps.append(h)
        return taps

    def distance(self, a: Tensor, b: Tensor) -> Tensor:
        """Mean squared activation distance, averaged over tap layers; (N,)."""
        if a.shape != b.shape:
            raise ShapeMismatch(f"perceptual_distance: shapes differ {a.shape} vs {b.shape}")
        fa = self.features(a)
        fb = self.features(b)
        total = None
        for ta, tb in zip(fa, fb):
            d = nn.sub(ta, tb)
            term = nn.mean(nn.mul(d, d), axis=(1, 2, 3))
            total = term if total is None else nn.add(total, term)
        return nn.mul(total, 1.0 / len(fa))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for w, b in self._weights:
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()


def _as_batched(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float32)
    return constant(arr[None] if arr.ndim == 3 else arr)


def perceptual_distance(extractor: PerceptualExtractor, a, b) -> Tensor:
    return extractor.distance(_as_batched(a), _as_batched(b))


class Codec:
    """Encoder + decoder + codebook + discriminator bundle."""

    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = CodecEncoder(cfg, rng)
        self.decoder = CodecDecoder(cfg, rng)
        self.codebook = Codebook(cfg, rng)
        self.discriminator = Discriminator(cfg, rng)

    def encode(self, x, with_taps: bool = False):
        if not isinstance(x, Tensor):
            x = constant(np.asarray(x, dtype=np.float32))
            if x.ndim == 3:
                x = constant(x.data[None])
        return self.encoder.forward(x, with_taps=with_taps)

    def decode(self, grid: Tensor) -> Tensor:
        return self.decoder.forward(grid)

    def ae_params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.encoder.params)
        out.update(self.decoder.params)
        out.update(self.codebook.params)
        return out

    def all_params(self) -> dict[str, Tensor]:
        out = self.ae_params()
        out.update(self.discriminator.params)
        return out

    def param_fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.ae_params()):
            h.update(self.ae_params()[name].data.tobytes())
        return h.hexdigest()
