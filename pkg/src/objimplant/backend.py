"""Toy latent diffusion backend: codec, conditioned denoiser, pretraining.

Everything here is sized for CPU-seconds, not quality.  The codec maps
64x64 RGB to a 4x8x8 latent; the denoiser is a two-level UNet with one
cross-attention block per level.  Pretraining is fully seeded and the
result is cached on disk, keyed by a hash of the configuration, so test
runs pay the training cost once.
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, save_archive
from .diffusion import NoiseSchedule, add_noise, ddim_sample, guided_eps_model
from .encoders import (
    MultimodalEncoders,
    TextEmbedding,
    UNK_TOKEN,
    Vocabulary,
    build_encoders,
    tokenize,
)
from .shapes import CLASSES, COLOR_NAMES, sample_batch
from .util import DTYPE, dict_hash, normal_tensor, seeded_rng

log = logging.getLogger(__name__)

CACHE_ENV_VAR = "OBJIMPLANT_CACHE"
_FORMAT_VERSION = 6

NULL_PROMPT = " ".join([UNK_TOKEN] * 4)

BASE_WORDS = (
    "a", "photo", "of", "and", "the", "in", "on", "next", "to", "with",
) + CLASSES + COLOR_NAMES


@dataclass(frozen=True)
class BackendConfig:
    seed: int = 0
    embedding_dim: int = 32
    latent_channels: int = 4
    image_size: int = 64
    num_train_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    text_layers: int = 1
    codec_steps: int = 1200
    codec_lr: float = 2e-3
    codec_batch: int = 16
    denoiser_steps: int = 12000
    denoiser_lr: float = 2e-3
    denoiser_batch: int = 16
    guidance_drop_prob: float = 0.1

    def cache_key(self) -> str:
        payload = asdict(self)
        payload["format_version"] = _FORMAT_VERSION
        return dict_hash(payload)[:16]


def _init_conv(conv: nn.Conv2d, rng: np.random.Generator) -> None:
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    conv.weight = nn.Parameter(normal_tensor(rng, *conv.weight.shape, std=fan_in**-0.5))
    conv.bias = nn.Parameter(torch.zeros(conv.out_channels, dtype=DTYPE))


def _init_convt(conv: nn.ConvTranspose2d, rng: np.random.Generator) -> None:
    # ConvTranspose2d weight layout is (in, out, kH, kW); fan-in is the input side
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    conv.weight = nn.Parameter(normal_tensor(rng, *conv.weight.shape, std=fan_in**-0.5))
    conv.bias = nn.Parameter(torch.zeros(conv.out_channels, dtype=DTYPE))


def _init_linear(linear: nn.Linear, rng: np.random.Generator) -> None:
    linear.weight = nn.Parameter(normal_tensor(rng, *linear.weight.shape, std=linear.in_features**-0.5))
    if linear.bias is not None:
        linear.bias = nn.Parameter(torch.zeros(linear.out_features, dtype=DTYPE))


class ToyCodec(nn.Module):
    """Strided conv autoencoder: (3, 64, 64) <-> (4, 8, 8)."""

    def __init__(self, latent_channels: int, rng: np.random.Generator):
        super().__init__()
        self.latent_channels = latent_channels
        self.enc1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(32, latent_channels, 3, stride=2, padding=1)
        self.dec1 = nn.ConvTranspose2d(latent_channels, 32, 4, stride=2, padding=1)
        self.dec2 = nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1)
        self.dec3 = nn.ConvTranspose2d(16, 3, 4, stride=2, padding=1)
        for conv in (self.enc1, self.enc2, self.enc3):
            _init_conv(conv, rng)
        for conv in (self.dec1, self.dec2, self.dec3):
            _init_convt(conv, rng)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(self.enc1(x))
        h = torch.tanh(self.enc2(h))
        return self.enc3(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(self.dec1(z))
        h = torch.tanh(self.dec2(h))
        return torch.sigmoid(self.dec3(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


class CrossAttentionBlock(nn.Module):
    """Single-head cross-attention from spatial tokens to the prompt sequence.

    Queries carry a frozen random positional code so different latent
    cells can attend differently; without it every cell would read the
    same mixture of the prompt.
    """

    def __init__(self, channels: int, context_dim: int, n_positions: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(context_dim, channels, bias=False)
        self.v = nn.Linear(context_dim, channels, bias=False)
        self.o = nn.Linear(channels, channels, bias=False)
        for proj in (self.q, self.k, self.v, self.o):
            _init_linear(proj, rng)
        self.register_buffer("positional", normal_tensor(rng, n_positions, channels))

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        q = self.q(tokens + self.positional[None])
        k, v = self.k(context), self.v(context)
        attn = torch.softmax(q @ k.transpose(1, 2) / c**0.5, dim=-1)
        out = self.o(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class PaintBlock(nn.Module):
    """Output-level cross-attention from positional codes to the prompt.

    Unlike the in-stack attention blocks, the queries are a frozen
    positional table rather than image features, so the output is a
    spatial map determined by the prompt alone.  That gives prompt-side
    parameters a direct, convolution-free handle on what the sampler
    paints, which is what one-shot implantation leans on.
    """

    def __init__(self, channels: int, context_dim: int, n_positions: int, rng: np.random.Generator):
        super().__init__()
        self.attn_dim = context_dim
        self.q = nn.Linear(context_dim, context_dim, bias=False)
        self.k = nn.Linear(context_dim, context_dim, bias=False)
        self.v = nn.Linear(context_dim, channels, bias=False)
        self.o = nn.Linear(channels, channels, bias=False)
        for proj in (self.q, self.k, self.v, self.o):
            _init_linear(proj, rng)
        self.register_buffer("positional", normal_tensor(rng, n_positions, context_dim))

    def forward(self, context: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
        b = context.shape[0]
        q = self.q(self.positional)[None].expand(b, -1, -1)
        k, v = self.k(context), self.v(context)
        attn = torch.softmax(q @ k.transpose(1, 2) / self.attn_dim**0.5, dim=-1)
        out = self.o(attn @ v)
        return out.transpose(1, 2).reshape(b, -1, *hw)


class ToyDenoiser(nn.Module):
    """Two-level UNet noise predictor conditioned on a prompt sequence.

    The prompt enters three ways: mean-pooled through a linear projection
    added like the time embedding (cheap global appearance path),
    per-token through in-stack cross-attention (feature routing), and
    through an output-level paint block scaled by sqrt(1 - abar_t), which
    contributes to the implied clean latent with weight (1 - abar_t):
    negligible at low noise where the input carries the content, dominant
    at high noise where sampling has nothing else to go on.

    Internally the network regresses the velocity
    v = sqrt(abar) eps - sqrt(1 - abar) z0 and converts to a noise
    prediction through the forward-process identity.  Both conversion
    factors are bounded by 1, so no timestep blows up the training loss,
    while the clean-latent content still carries real loss weight at high
    noise levels, which is what pure-noise sampling quality depends on.
    """

    CROSS_ATTENTION_PROJECTIONS = (
        "attn0.q", "attn0.k", "attn0.v", "attn0.o",
        "attn1.q", "attn1.k", "attn1.v", "attn1.o",
        "paint.q", "paint.k", "paint.v", "paint.o",
    )

    def __init__(
        self,
        latent_channels: int,
        context_dim: int,
        num_train_steps: int,
        rng: np.random.Generator,
        alpha_bars: torch.Tensor,
    ):
        super().__init__()
        if alpha_bars.shape != (num_train_steps,):
            raise ValueError(f"alpha_bars must have shape ({num_train_steps},)")
        self.register_buffer("alpha_bars", alpha_bars.to(DTYPE))
        c0, c1 = 32, 64
        self.time_table = nn.Parameter(normal_tensor(rng, num_train_steps, c0, std=0.02))
        self.conv_in = nn.Conv2d(latent_channels, c0, 3, padding=1)
        self.t_proj0 = nn.Linear(c0, c0)
        self.ctx_proj0 = nn.Linear(context_dim, c0)
        self.block0 = nn.Conv2d(c0, c0, 3, padding=1)
        self.attn0 = CrossAttentionBlock(c0, context_dim, 8 * 8, rng)
        self.down = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.t_proj1 = nn.Linear(c0, c1)
        self.ctx_proj1 = nn.Linear(context_dim, c1)
        self.block1 = nn.Conv2d(c1, c1, 3, padding=1)
        self.attn1 = CrossAttentionBlock(c1, context_dim, 4 * 4, rng)
        self.up = nn.ConvTranspose2d(c1, c0, 4, stride=2, padding=1)
        self.block2 = nn.Conv2d(2 * c0, c0, 3, padding=1)
        self.conv_out = nn.Conv2d(c0, latent_channels, 3, padding=1)
        self.paint = PaintBlock(latent_channels, context_dim, 8 * 8, rng)
        for conv in (self.conv_in, self.block0, self.down, self.block1, self.block2, self.conv_out):
            _init_conv(conv, rng)
        _init_convt(self.up, rng)
        for linear in (self.t_proj0, self.t_proj1, self.ctx_proj0, self.ctx_proj1):
            _init_linear(linear, rng)

    def predict_velocity(self, z: torch.Tensor, t: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        temb = self.time_table[t]
        pooled = context.mean(dim=1)
        h = F.silu(self.conv_in(z) + (self.t_proj0(temb) + self.ctx_proj0(pooled))[:, :, None, None])
        h = F.silu(self.block0(h))
        h = self.attn0(h, context)
        h0 = h
        h = F.silu(self.down(h) + (self.t_proj1(temb) + self.ctx_proj1(pooled))[:, :, None, None])
        h = F.silu(self.block1(h))
        h = self.attn1(h, context)
        h = F.silu(self.up(h))
        h = F.silu(self.block2(torch.cat([h, h0], dim=1)))
        return self.conv_out(h)

    def forward(self, z: torch.Tensor, t: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        abar = self.alpha_bars[t][:, None, None, None]
        v = self.predict_velocity(z, t, context)
        v = v - torch.sqrt(1.0 - abar) * self.paint(context, z.shape[-2:])
        return torch.sqrt(abar) * v + torch.sqrt(1.0 - abar) * z


class ToyBackend:
    """Bundled encoders, codec, denoiser, and schedule with scale bookkeeping."""

    def __init__(
        self,
        config: BackendConfig,
        encoders: MultimodalEncoders,
        codec: ToyCodec,
        denoiser: ToyDenoiser,
        latent_scale: float,
    ):
        self.config = config
        self.encoders = encoders
        self.codec = codec
        self.denoiser = denoiser
        self.latent_scale = float(latent_scale)
        self.schedule = NoiseSchedule.linear(config.num_train_steps, config.beta_start, config.beta_end)
        self.latent_hw = (config.image_size // 8, config.image_size // 8)

    @property
    def vocabulary(self) -> Vocabulary:
        return self.encoders.vocabulary

    def freeze(self) -> None:
        for module in (self.codec, self.denoiser, self.encoders.text, self.encoders.image):
            for p in module.parameters():
                p.requires_grad_(False)

    def image_to_latent(self, image: np.ndarray) -> torch.Tensor:
        x = torch.from_numpy(np.asarray(image, dtype=np.float64)).permute(2, 0, 1)[None]
        return (self.codec.encode(x)[0] * self.latent_scale).detach()

    def latent_to_image(self, z: torch.Tensor) -> np.ndarray:
        x = self.codec.decode((z / self.latent_scale)[None])[0]
        return x.detach().permute(1, 2, 0).clamp(0.0, 1.0).numpy()

    def encode_prompt(self, prompt: str, rows_override=None) -> TextEmbedding:
        return self.encoders.text.encode(tokenize(prompt, self.vocabulary), rows_override)

    def null_context(self) -> TextEmbedding:
        return self.encode_prompt(NULL_PROMPT)

    def eps_model(self, context: TextEmbedding):
        """Single-sample (z, t) -> eps closure for the DDIM sampler."""

        def predict(z: torch.Tensor, t: int) -> torch.Tensor:
            t_idx = torch.tensor([self.schedule.validate_t(t)], dtype=torch.long)
            return self.denoiser(z[None], t_idx, context.sequence[None])[0]

        return predict

    def generate_latent(
        self,
        context: TextEmbedding,
        rng: np.random.Generator,
        num_sample_steps: int = 25,
        guidance_scale: float = 1.0,
        z_init: torch.Tensor | None = None,
    ) -> torch.Tensor:
        c, (h, w) = self.config.latent_channels, self.latent_hw
        if z_init is None:
            z_init = normal_tensor(rng, c, h, w)
        model = self.eps_model(context)
        if guidance_scale != 1.0:
            model = guided_eps_model(model, self.eps_model(self.null_context()), guidance_scale)
        with torch.no_grad():
            return ddim_sample(model, self.schedule, z_init, num_sample_steps)

    def generate_image(self, context: TextEmbedding, rng: np.random.Generator, **kwargs) -> np.ndarray:
        with torch.no_grad():
            return self.latent_to_image(self.generate_latent(context, rng, **kwargs))


def build_vocabulary(embedding_dim: int) -> Vocabulary:
    return Vocabulary.build(BASE_WORDS, embedding_dim)


def _image_batch(samples) -> torch.Tensor:
    arr = np.stack([s.image for s in samples])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(DTYPE)


def _pretrain_codec(codec: ToyCodec, config: BackendConfig) -> None:
    rng = seeded_rng(config.seed, "codec-data")
    optimizer = torch.optim.Adam(codec.parameters(), lr=config.codec_lr)
    for step in range(config.codec_steps):
        batch = _image_batch(sample_batch(rng, config.codec_batch, size=config.image_size))
        optimizer.zero_grad()
        loss = ((codec(batch) - batch) ** 2).mean()
        loss.backward()
        optimizer.step()
        if step % 200 == 0:
            log.info("codec step %d loss %.6f", step, float(loss.detach()))


def _calibrate_latent_scale(codec: ToyCodec, config: BackendConfig) -> float:
    rng = seeded_rng(config.seed, "latent-scale")
    batch = _image_batch(sample_batch(rng, 64, size=config.image_size))
    with torch.no_grad():
        latents = codec.encode(batch)
    return float(1.0 / latents.std())


def _caption(sample, u: float) -> str:
    """Pretraining caption for a procedural sample.

    Most captions name the object color (and sometimes the background), so
    the denoiser can only reach a low loss by reading appearance out of the
    prompt.  That keeps the conditioning pathway strong enough for
    prompt-side fine-tuning to steer what gets painted.
    """
    if u < 0.15:
        return f"a photo of {sample.class_name}"
    if u < 0.40:
        return f"a photo of {sample.color_name} {sample.class_name} on {sample.background_name}"
    return f"a photo of {sample.color_name} {sample.class_name}"


def _pretrain_denoiser(
    denoiser: ToyDenoiser,
    codec: ToyCodec,
    encoders: MultimodalEncoders,
    latent_scale: float,
    schedule: NoiseSchedule,
    config: BackendConfig,
) -> None:
    rng = seeded_rng(config.seed, "denoiser-data")
    vocab = encoders.vocabulary
    unk = vocab.token_index(UNK_TOKEN)
    ctx_cache: dict[tuple[int, ...], torch.Tensor] = {}

    def context_for(padded: tuple[int, ...]) -> torch.Tensor:
        if padded not in ctx_cache:
            with torch.no_grad():
                ctx_cache[padded] = encoders.text.encode(list(padded)).sequence
        return ctx_cache[padded]

    optimizer = torch.optim.Adam(denoiser.parameters(), lr=config.denoiser_lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=config.denoiser_steps, eta_min=config.denoiser_lr * 0.05
    )
    for step in range(config.denoiser_steps):
        samples = sample_batch(rng, config.denoiser_batch, size=config.image_size)
        with torch.no_grad():
            z0 = codec.encode(_image_batch(samples)) * latent_scale
        t = torch.from_numpy(rng.integers(0, schedule.num_steps, size=config.denoiser_batch))
        eps = normal_tensor(rng, *z0.shape)
        abar = schedule.alpha_bars[t][:, None, None, None]
        z_t = torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps
        drop = rng.random(config.denoiser_batch) < config.guidance_drop_prob
        pattern = rng.random(config.denoiser_batch)
        prompts = [
            NULL_PROMPT if drop[i] else _caption(s, float(pattern[i])) for i, s in enumerate(samples)
        ]
        token_lists = [tokenize(p, vocab) for p in prompts]
        width = max(len(ts) for ts in token_lists)
        # right-pad with <unk> so mixed-length captions stack into one batch
        context = torch.stack(
            [context_for(tuple(ts) + (unk,) * (width - len(ts))) for ts in token_lists]
        )
        optimizer.zero_grad()
        loss = ((denoiser(z_t, t, context) - eps) ** 2).mean()
        loss.backward()
        optimizer.step()
        scheduler.step()
        if step % 400 == 0:
            log.info("denoiser step %d loss %.6f", step, float(loss.detach()))


def _build_models(config: BackendConfig) -> tuple[MultimodalEncoders, ToyCodec, ToyDenoiser]:
    encoders = build_encoders(
        build_vocabulary(config.embedding_dim), seeded_rng(config.seed, "encoders"), n_layers=config.text_layers
    )
    codec = ToyCodec(config.latent_channels, seeded_rng(config.seed, "codec-init"))
    schedule = NoiseSchedule.linear(config.num_train_steps, config.beta_start, config.beta_end)
    denoiser = ToyDenoiser(
        config.latent_channels,
        config.embedding_dim,
        config.num_train_steps,
        seeded_rng(config.seed, "denoiser-init"),
        schedule.alpha_bars,
    )
    return encoders, codec, denoiser


def cache_dir() -> Path:
    override = os.environ.get(CACHE_ENV_VAR)
    if override:
        return Path(override)
    return Path.home() / ".cache" / "objimplant"


def _backend_entries(codec: ToyCodec, denoiser: ToyDenoiser) -> dict[str, torch.Tensor]:
    entries = {}
    for prefix, module in (("codec", codec), ("denoiser", denoiser)):
        for name, param in module.named_parameters():
            entries[f"{prefix}/{name}"] = param.detach().clone()
    return entries


def pretrain_backend(config: BackendConfig | None = None, use_cache: bool = True) -> ToyBackend:
    """Train (or load from cache) the frozen base models.

    The cache file is keyed by a hash of the full configuration, so any
    change to sizes, schedules, or budgets trains a fresh backend
    instead of reusing a stale one.
    """
    config = config or BackendConfig()
    path = cache_dir() / f"backend-{config.cache_key()}.ntar"
    encoders, codec, denoiser = _build_models(config)
    schedule = NoiseSchedule.linear(config.num_train_steps, config.beta_start, config.beta_end)

    if use_cache and path.exists():
        entries, meta = load_archive(path)
        with torch.no_grad():
            for prefix, module in (("codec", codec), ("denoiser", denoiser)):
                for name, param in module.named_parameters():
                    param.copy_(entries[f"{prefix}/{name}"])
        backend = ToyBackend(config, encoders, codec, denoiser, meta["latent_scale"])
        backend.freeze()
        log.info("loaded pretrained backend from %s", path)
        return backend

    log.info("pretraining backend (seed %d); cached at %s", config.seed, path)
    _pretrain_codec(codec, config)
    latent_scale = _calibrate_latent_scale(codec, config)
    _pretrain_denoiser(denoiser, codec, encoders, latent_scale, schedule, config)
    if use_cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_archive(
            path,
            _backend_entries(codec, denoiser),
            meta={"latent_scale": latent_scale, "config": asdict(config), "vocabulary": list(encoders.vocabulary.tokens)},
        )
    backend = ToyBackend(config, encoders, codec, denoiser, latent_scale)
    backend.freeze()
    return backend
