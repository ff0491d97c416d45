"""Embedding providers that produce alignment targets.

``StandInProvider`` is a deterministic substitute for the pretrained image and text
encoders: a fixed, seeded random linear projection followed by layer normalization.
``ClipProvider`` wraps pretrained weights found on disk and is optional.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Protocol

import numpy as np

from .core import EEGReconError, rng_for

WEIGHTS_ENV = "EEGRECON_WEIGHTS_DIR"


class ProviderUnavailableError(EEGReconError):
    pass


class EmbeddingProvider(Protocol):
    extractor_id: str

    def embed_image(self, pixels: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


class StandInProvider:
    """Seeded random-projection embedder for images ([d_img]) and captions ([n_tokens, d_text])."""

    def __init__(self, d_img: int = 1024, d_text: int = 768, n_tokens: int = 77, seed: int = 0):
        self.d_img, self.d_text, self.n_tokens, self.seed = d_img, d_text, n_tokens, seed
        self.extractor_id = f"standin-v1:img{d_img}:txt{n_tokens}x{d_text}:seed{seed}"
        self._img_proj: dict[tuple[int, ...], np.ndarray] = {}
        n_feat = 256 + n_tokens + 1
        self._txt_proj = rng_for(seed, "text-proj", n_feat, d_text).normal(0, 1 / np.sqrt(n_feat), (n_feat, d_text))

    def _image_projection(self, shape: tuple[int, ...]) -> np.ndarray:
        if shape not in self._img_proj:
            n_in = int(np.prod(shape))
            rng = rng_for(self.seed, "image-proj", *shape, self.d_img)
            self._img_proj[shape] = rng.normal(0, 1 / np.sqrt(n_in), (n_in, self.d_img))
        return self._img_proj[shape]

    def embed_image(self, pixels: np.ndarray) -> np.ndarray:
        px = np.asarray(pixels, dtype=np.float64)
        out = px.reshape(-1) @ self._image_projection(px.shape)
        return _layer_norm(out).astype(np.float32)

    def tokenize(self, text: str) -> np.ndarray:
        words = text.split()[: self.n_tokens]
        feats = np.zeros((self.n_tokens, 256 + self.n_tokens + 1))
        for i in range(self.n_tokens):
            feats[i, 256 + i] = 1.0
            if i < len(words):
                for b in words[i].encode("utf-8"):
                    feats[i, b] += 1.0
            else:
                feats[i, -1] = 1.0
        return feats

    def embed_text(self, text: str) -> np.ndarray:
        return _layer_norm(self.tokenize(text) @ self._txt_proj).astype(np.float32)


class ClipProvider:
    """Pretrained CLIP encoders loaded from local directories (needs ``transformers``).

    ``image_model_dir`` should hold a vision model with projection (the huge variant used by
    image-prompt adapters); ``text_model_dir`` the text model used by the diffusion backbone.
    Both default to subdirectories of ``$EEGRECON_WEIGHTS_DIR``.
    """

    def __init__(self, image_model_dir: str | None = None, text_model_dir: str | None = None,
                 device: str = "cpu"):
        base = os.environ.get(WEIGHTS_ENV)
        image_model_dir = image_model_dir or (base and str(Path(base) / "clip-image"))
        text_model_dir = text_model_dir or (base and str(Path(base) / "clip-text"))
        for d in (image_model_dir, text_model_dir):
            if not d or not Path(d).is_dir():
                raise ProviderUnavailableError(
                    f"pretrained CLIP weights not found ({d!r}); set {WEIGHTS_ENV} or pass model directories")
        try:
            import torch
            from transformers import (CLIPImageProcessor, CLIPTextModel, CLIPTokenizer,
                                      CLIPVisionModelWithProjection)
        except ImportError as exc:
            raise ProviderUnavailableError(f"transformers is required for ClipProvider: {exc}") from exc
        self._torch = torch
        self.device = device
        self.processor = CLIPImageProcessor.from_pretrained(image_model_dir)
        self.vision = CLIPVisionModelWithProjection.from_pretrained(image_model_dir).to(device).eval()
        self.tokenizer = CLIPTokenizer.from_pretrained(text_model_dir)
        self.text = CLIPTextModel.from_pretrained(text_model_dir).to(device).eval()
        self.extractor_id = f"clip:{Path(image_model_dir).name}:{Path(text_model_dir).name}"

    def embed_image(self, pixels: np.ndarray) -> np.ndarray:
        inputs = self.processor(images=np.asarray(pixels), return_tensors="pt", do_rescale=False)
        with self._torch.no_grad():
            out = self.vision(pixel_values=inputs["pixel_values"].to(self.device)).image_embeds
        return out[0].cpu().numpy().astype(np.float32)

    def embed_text(self, text: str) -> np.ndarray:
        tok = self.tokenizer(text, padding="max_length", max_length=self.tokenizer.model_max_length,
                             truncation=True, return_tensors="pt")
        with self._torch.no_grad():
            out = self.text(input_ids=tok["input_ids"].to(self.device)).last_hidden_state
        return out[0].cpu().numpy().astype(np.float32)


def make_provider(kind: str = "standin", **kw) -> EmbeddingProvider:
    if kind == "standin":
        return StandInProvider(**kw)
    if kind == "clip":
        return ClipProvider(**kw)
    raise ValueError(f"unknown provider kind {kind!r}")
