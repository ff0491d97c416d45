"""Small pixel-space conditional diffusion model for desk-scale reconstruction experiments.

Every cross-attention layer of the denoiser is a decoupled (text + scaled image) attention.
Training is standard noise-prediction on a linear beta schedule; sampling is ancestral
denoising over an evenly strided subset of the training timesteps.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..core import EEGReconError, ShapeError, pack_container, torch_generator, unpack_container
from .attention import DecoupledCrossAttention, ImageProjection

log = logging.getLogger(__name__)

BACKEND_MAGIC = b"EEGD"


class GenerationError(EEGReconError):
    pass


@dataclass(frozen=True)
class ToyBackendConfig:
    image_size: int = 8
    channels: int = 32
    n_blocks: int = 2
    d_text: int = 16
    n_text_tokens: int = 8
    d_img: int = 32
    n_img_tokens: int = 4
    train_timesteps: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1

    def __post_init__(self):
        if self.image_size > 16:
            raise ValueError("the toy backend is meant for images of at most 16x16")
        if self.channels % 8:
            raise ValueError("channels must be a multiple of 8 (group norm)")


@dataclass(frozen=True)
class ToyTrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    p_drop_text: float = 0.1
    p_drop_image: float = 0.1
    cond_noise: float = 0.0
    image_scale: float = 1.0


def linear_alpha_bars(config: ToyBackendConfig) -> torch.Tensor:
    betas = torch.linspace(config.beta_start, config.beta_end, config.train_timesteps, dtype=torch.float64)
    return torch.cumprod(1.0 - betas, dim=0)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.temb = nn.Linear(ch, ch)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class ToyDenoiser(nn.Module):
    def __init__(self, config: ToyBackendConfig):
        super().__init__()
        ch = config.channels
        self.config = config
        self.in_conv = nn.Conv2d(3, ch, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(ch, ch), nn.SiLU(), nn.Linear(ch, ch))
        self.pos = nn.Parameter(torch.zeros(1, ch, config.image_size, config.image_size))
        self.image_proj = ImageProjection(config.d_img, ch, config.n_img_tokens)
        self.image_norm = nn.LayerNorm(ch)
        self.res = nn.ModuleList(_ResBlock(ch) for _ in range(config.n_blocks))
        self.attn = nn.ModuleList(DecoupledCrossAttention(ch, config.d_text, ch) for _ in range(config.n_blocks))
        self.out_norm = nn.GroupNorm(8, ch)
        self.out_conv = nn.Conv2d(ch, 3, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, text_tokens: torch.Tensor,
                image_embedding: torch.Tensor, scale: float | torch.Tensor = 1.0) -> torch.Tensor:
        b, _, hgt, wid = x.shape
        temb = self.time_mlp(timestep_embedding(t, self.config.channels))
        image_tokens = self.image_norm(self.image_proj(image_embedding))
        if isinstance(scale, torch.Tensor):
            scale = scale.reshape(-1, 1, 1)
        h = self.in_conv(x) + self.pos
        for res, attn in zip(self.res, self.attn):
            h = res(h, temb)
            tokens = h.flatten(2).transpose(1, 2)
            tokens = attn(tokens, text_tokens, image_tokens, scale)
            h = tokens.transpose(1, 2).reshape(b, -1, hgt, wid)
        return self.out_conv(F.silu(self.out_norm(h)))


class ToyBackend:
    """Trained denoiser plus the null-text embedding used when the text condition is dropped."""

    kind = "toy"

    def __init__(self, config: ToyBackendConfig, model: ToyDenoiser, null_text: np.ndarray):
        self.config = config
        self.model = model.eval()
        self.null_text = np.asarray(null_text, dtype=np.float32)
        self.alpha_bars = linear_alpha_bars(config)
        if self.null_text.shape != (config.n_text_tokens, config.d_text):
            raise ShapeError(f"null text embedding shape {self.null_text.shape} does not match config")

    @property
    def text_shape(self) -> tuple[int, int]:
        return (self.config.n_text_tokens, self.config.d_text)

    @property
    def image_embedding_dim(self) -> int:
        return self.config.d_img

    def inference_timesteps(self, steps: int) -> list[int]:
        T = self.config.train_timesteps
        if not 1 <= steps <= T:
            raise ValueError(f"inference steps must lie in [1, {T}]")
        ts = np.unique(np.round(np.linspace(0, T - 1, steps)).astype(int))
        return [int(t) for t in ts[::-1]]

    @torch.no_grad()
    def sample(self, text_tokens: np.ndarray, image_embeddings: np.ndarray, scales: list[float],
               seeds: list[int], steps: int = 25) -> np.ndarray:
        """Batched ancestral sampling; returns ``[batch, H, W, 3]`` in [0, 1].

        Each item draws its noise from its own seeded generator.
        """
        cfg = self.config
        text = torch.as_tensor(np.asarray(text_tokens, dtype=np.float32))
        img = torch.as_tensor(np.asarray(image_embeddings, dtype=np.float32))
        b = text.shape[0]
        scale = torch.tensor(scales, dtype=torch.float32)
        if all(s == 0 for s in scales):
            scale = 0.0
        gens = [torch_generator(s, "sample") for s in seeds]
        shape = (3, cfg.image_size, cfg.image_size)
        x = torch.stack([torch.randn(shape, generator=g) for g in gens])
        ts = self.inference_timesteps(steps)
        abar = self.alpha_bars
        x0 = x
        for i, t in enumerate(ts):
            ab_t = abar[t].item()
            ab_prev = abar[ts[i + 1]].item() if i + 1 < len(ts) else 1.0
            eps = self.model(x, torch.full((b,), t, dtype=torch.long), text, img, scale)
            if not torch.all(torch.isfinite(eps)):
                raise GenerationError(f"non-finite denoiser output at sampling step {i} (t={t})")
            x0 = ((x - math.sqrt(1 - ab_t) * eps) / math.sqrt(ab_t)).clamp(-1.0, 1.0)
            if i + 1 == len(ts):
                break
            beta = 1.0 - ab_t / ab_prev
            mean = (math.sqrt(ab_prev) * beta / (1 - ab_t)) * x0 + (math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab_t)) * x
            var = beta * (1 - ab_prev) / (1 - ab_t)
            z = torch.stack([torch.randn(shape, generator=g) for g in gens])
            x = mean + math.sqrt(var) * z
        return ((x0 + 1.0) / 2.0).clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy()

    def to_bytes(self) -> bytes:
        arrays = {k: v.detach().numpy() for k, v in self.model.state_dict().items()}
        arrays["__null_text__"] = self.null_text
        return pack_container(BACKEND_MAGIC, {"kind": "toy-backend", "config": asdict(self.config)}, arrays)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path


def load_toy_backend(path: str | os.PathLike) -> tuple[ToyBackend, str]:
    header, arrays, digest = unpack_container(Path(path).read_bytes(), BACKEND_MAGIC, str(path))
    if header.get("kind") != "toy-backend":
        raise ValueError(f"{path}: not a toy backend checkpoint")
    cfg = ToyBackendConfig(**header["config"])
    null_text = arrays.pop("__null_text__")
    model = ToyDenoiser(cfg)
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    return ToyBackend(cfg, model, null_text), digest


def train_toy_backend(images: np.ndarray, text_tokens: np.ndarray, image_embeddings: np.ndarray,
                      null_text: np.ndarray, config: ToyBackendConfig,
                      train: ToyTrainConfig) -> tuple[ToyBackend, list[float]]:
    """Fit the denoiser on ``images [n, H, W, 3]`` paired with their conditioning.

    Conditions are independently dropped per sample (text replaced by ``null_text``, image
    scale set to 0) so the model also serves the single-branch ablations.
    """
    images = np.asarray(images, dtype=np.float32)
    n = images.shape[0]
    if images.shape[1:] != (config.image_size, config.image_size, 3):
        raise ShapeError(f"expected images [n, {config.image_size}, {config.image_size}, 3], got {images.shape}")
    if text_tokens.shape[1:] != (config.n_text_tokens, config.d_text) or image_embeddings.shape[1:] != (config.d_img,):
        raise ShapeError("conditioning shapes do not match the backend config")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(train.seed)
        model = ToyDenoiser(config)
    x_all = torch.from_numpy(images).permute(0, 3, 1, 2) * 2.0 - 1.0
    txt_all = torch.from_numpy(np.asarray(text_tokens, dtype=np.float32))
    img_all = torch.from_numpy(np.asarray(image_embeddings, dtype=np.float32))
    null = torch.from_numpy(np.asarray(null_text, dtype=np.float32))
    abar = linear_alpha_bars(config).float()
    opt = torch.optim.Adam(model.parameters(), lr=train.lr)
    gen = torch_generator(train.seed, "toy-train")

    losses: list[float] = []
    model.train()
    for step in range(train.steps):
        idx = torch.randint(0, n, (train.batch_size,), generator=gen)
        x0 = x_all[idx]
        t = torch.randint(0, config.train_timesteps, (train.batch_size,), generator=gen)
        noise = torch.randn(x0.shape, generator=gen)
        ab = abar[t].view(-1, 1, 1, 1)
        x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * noise

        txt, img = txt_all[idx], img_all[idx]
        if train.cond_noise > 0:
            txt = txt + train.cond_noise * torch.randn(txt.shape, generator=gen)
            img = img + train.cond_noise * torch.randn(img.shape, generator=gen)
        drop_t = torch.rand(train.batch_size, generator=gen) < train.p_drop_text
        drop_i = torch.rand(train.batch_size, generator=gen) < train.p_drop_image
        txt = torch.where(drop_t[:, None, None], null.expand_as(txt), txt)
        if train.image_scale == 0:
            scale: float | torch.Tensor = 0.0
        else:
            scale = torch.where(drop_i, 0.0, train.image_scale)

        loss = F.mse_loss(model(x_t, t, txt, img, scale), noise)
        if not torch.isfinite(loss):
            raise GenerationError(f"non-finite toy-backend loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())

    k = max(1, len(losses) // 10)
    if np.mean(losses[-k:]) >= np.mean(losses[:k]):
        log.warning("toy backend loss did not decrease (first %.4f, last %.4f)",
                    np.mean(losses[:k]), np.mean(losses[-k:]))
    return ToyBackend(config, model, null_text), losses
