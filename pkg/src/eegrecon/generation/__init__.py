"""Reconstruction from the two EEG embeddings through a conditioned diffusion backend."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from ..core import EEGReconError, ShapeError
from .attention import (
    DecoupledCrossAttention,
    ImageProjection,
    attention,
    decoupled_cross_attention,
    project_image_embedding,
)
from .toy import (
    GenerationError,
    ToyBackend,
    ToyBackendConfig,
    ToyDenoiser,
    ToyTrainConfig,
    load_toy_backend,
    train_toy_backend,
)

WEIGHTS_ENV = "EEGRECON_WEIGHTS_DIR"

__all__ = [
    "BackendConfig", "BackendUnavailableError", "ConditioningBundle", "DecoupledCrossAttention",
    "GenerationError", "GenerationResult", "ImageProjection", "RealAdapterBackend", "ToyBackend",
    "ToyBackendConfig", "ToyDenoiser", "ToyTrainConfig", "attention", "decoupled_cross_attention",
    "generate", "generate_batch", "load_backend", "load_toy_backend", "project_image_embedding",
    "train_toy_backend",
]


class BackendUnavailableError(EEGReconError):
    pass


@dataclass(frozen=True, eq=False)
class ConditioningBundle:
    text_tokens: np.ndarray  # [n_tokens, d_text]
    image_embedding: np.ndarray  # [d_img]
    image_scale: float = 1.0
    drop_text: bool = False
    drop_image: bool = False

    def __post_init__(self):
        txt = np.asarray(self.text_tokens, dtype=np.float32)
        img = np.asarray(self.image_embedding, dtype=np.float32)
        if txt.ndim == 1:
            txt = txt[None, :]  # pooled text target: a single token
        if txt.ndim != 2 or img.ndim != 1:
            raise ShapeError(f"bundle needs text [n_tokens, d_text] and image [d_img], got {txt.shape}, {img.shape}")
        if not (np.all(np.isfinite(txt)) and np.all(np.isfinite(img))):
            raise ValueError("conditioning contains non-finite values")
        if not math.isfinite(self.image_scale) or self.image_scale < 0:
            raise ValueError(f"image_scale must be finite and >= 0, got {self.image_scale}")
        object.__setattr__(self, "text_tokens", txt)
        object.__setattr__(self, "image_embedding", img)


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "toy"  # or "real_adapter"
    inference_steps: int = 25
    sampler: str = "ddpm-ancestral"
    image_size: int = 8
    seed: int = 0
    checkpoint: str | None = None
    guidance_scale: float = 7.5  # real backend only

    def __post_init__(self):
        if self.inference_steps < 1:
            raise ValueError("inference_steps must be >= 1")
        if self.kind not in ("toy", "real_adapter"):
            raise ValueError(f"unknown backend kind {self.kind!r}")


@dataclass
class GenerationResult:
    image: np.ndarray  # [H, W, 3] in [0, 1]
    provenance: dict = field(default_factory=dict)


class Backend(Protocol):
    kind: str
    null_text: np.ndarray

    @property
    def text_shape(self) -> tuple[int, int]: ...

    @property
    def image_embedding_dim(self) -> int: ...

    def sample(self, text_tokens, image_embeddings, scales, seeds, steps: int = 25) -> np.ndarray: ...


class RealAdapterBackend:
    """Pretrained latent diffusion model with an image-prompt adapter (optional, needs ``diffusers``).

    Contract: text token grid ``[77, 768]``, image embedding ``[1024]``, image scale, number of
    inference steps (PNDM scheduler) and seed in; an RGB image in [0, 1] out. Expects
    ``<weights_dir>/stable-diffusion-v1-5`` and ``<weights_dir>/ip-adapter`` (holding
    ``ip-adapter_sd15.bin``).
    """

    kind = "real_adapter"

    def __init__(self, weights_dir: str | None = None, image_size: int = 512, guidance_scale: float = 7.5):
        weights_dir = weights_dir or os.environ.get(WEIGHTS_ENV)
        if not weights_dir or not Path(weights_dir).is_dir():
            raise BackendUnavailableError(
                f"real diffusion backend needs pretrained weights; set {WEIGHTS_ENV} to a directory "
                f"(got {weights_dir!r})")
        sd_dir = Path(weights_dir) / "stable-diffusion-v1-5"
        ip_dir = Path(weights_dir) / "ip-adapter"
        if not sd_dir.is_dir() or not ip_dir.is_dir():
            raise BackendUnavailableError(f"expected {sd_dir} and {ip_dir} under {weights_dir}")
        try:
            import torch
            from diffusers import PNDMScheduler, StableDiffusionPipeline
        except ImportError as exc:
            raise BackendUnavailableError(f"diffusers is required for the real backend: {exc}") from exc
        self._torch = torch
        pipe = StableDiffusionPipeline.from_pretrained(str(sd_dir), safety_checker=None)
        pipe.scheduler = PNDMScheduler.from_config(pipe.scheduler.config)
        pipe.load_ip_adapter(str(ip_dir), subfolder="", weight_name="ip-adapter_sd15.bin")
        self.pipe = pipe
        self.image_size = image_size
        self.guidance_scale = guidance_scale
        with torch.no_grad():
            self.null_text = pipe.encode_prompt("", "cpu", 1, False)[0][0].numpy()

    @property
    def text_shape(self) -> tuple[int, int]:
        return tuple(self.null_text.shape)

    @property
    def image_embedding_dim(self) -> int:
        return 1024

    def sample(self, text_tokens, image_embeddings, scales, seeds, steps: int = 25) -> np.ndarray:
        torch = self._torch
        out = []
        null = torch.from_numpy(self.null_text)[None]
        for txt, img, scale, seed in zip(text_tokens, image_embeddings, scales, seeds):
            self.pipe.set_ip_adapter_scale(float(scale))
            img_t = torch.from_numpy(np.asarray(img, dtype=np.float32)).reshape(1, 1, -1)
            result = self.pipe(
                prompt_embeds=torch.from_numpy(np.asarray(txt, dtype=np.float32))[None],
                negative_prompt_embeds=null,
                ip_adapter_image_embeds=[torch.cat([torch.zeros_like(img_t), img_t])],
                num_inference_steps=steps,
                guidance_scale=self.guidance_scale,
                height=self.image_size, width=self.image_size,
                generator=torch.Generator().manual_seed(int(seed)),
                output_type="np",
            )
            out.append(result.images[0])
        return np.stack(out).astype(np.float32)


def load_backend(config: BackendConfig) -> tuple[Backend, str]:
    """Return ``(backend, checkpoint_hash)``; never falls back silently to another kind."""
    if config.kind == "real_adapter":
        return RealAdapterBackend(image_size=config.image_size, guidance_scale=config.guidance_scale), "pretrained"
    if not config.checkpoint:
        raise BackendUnavailableError("toy backend needs a checkpoint path (train one with `train-backend`)")
    if not Path(config.checkpoint).exists():
        raise BackendUnavailableError(f"toy backend checkpoint not found: {config.checkpoint}")
    return load_toy_backend(config.checkpoint)


def _resolve(backend: Backend, bundle: ConditioningBundle) -> tuple[np.ndarray, float]:
    if tuple(bundle.text_tokens.shape) != tuple(backend.text_shape):
        raise ShapeError(f"text tokens {bundle.text_tokens.shape} do not match backend {backend.text_shape}")
    if bundle.image_embedding.shape[0] != backend.image_embedding_dim:
        raise ShapeError(f"image embedding dim {bundle.image_embedding.shape[0]} does not match backend "
                         f"{backend.image_embedding_dim}")
    text = backend.null_text if bundle.drop_text else bundle.text_tokens
    scale = 0.0 if bundle.drop_image else float(bundle.image_scale)
    return text, scale


def generate_batch(backend: Backend, bundles: list[ConditioningBundle], config: BackendConfig,
                   seeds: list[int], provenance: list[dict] | None = None) -> list[GenerationResult]:
    if len(bundles) != len(seeds):
        raise ValueError("one seed per bundle is required")
    if not bundles:
        return []
    resolved = [_resolve(backend, b) for b in bundles]
    images = backend.sample(np.stack([r[0] for r in resolved]), np.stack([b.image_embedding for b in bundles]),
                            [r[1] for r in resolved], list(seeds), steps=config.inference_steps)
    results = []
    for i, (bundle, seed) in enumerate(zip(bundles, seeds)):
        prov = {"backend": asdict(config), "image_scale": resolved[i][1], "seed": int(seed),
                "drop_text": bundle.drop_text, "drop_image": bundle.drop_image}
        if provenance is not None:
            prov.update(provenance[i])
        results.append(GenerationResult(images[i], prov))
    return results


def generate(backend: Backend, bundle: ConditioningBundle, config: BackendConfig,
             seed: int | None = None, provenance: dict | None = None) -> GenerationResult:
    """Reconstruct one image from a conditioning bundle; deterministic in (seed, bundle, config)."""
    seed = config.seed if seed is None else seed
    return generate_batch(backend, [bundle], config, [seed], [provenance or {}])[0]
