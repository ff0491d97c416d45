"""Recurrent EEG encoder used for both the image-space and the text-space branch."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import ShapeError, pack_container, unpack_container

CHECKPOINT_MAGIC = b"EEGC"


@dataclass(frozen=True)
class EncoderConfig:
    n_channels: int = 128
    n_timesteps: int = 440
    output_shape: tuple[int, ...] = (1024,)
    rnn_layers: int = 3
    hidden_dim: int = 512
    head_hidden_dim: int = 512
    leaky_slope: float = 0.01
    orientation: str = "time"  # "time": recur over time, channels are features; "channel": the reverse

    def __post_init__(self):
        object.__setattr__(self, "output_shape", tuple(int(d) for d in self.output_shape))
        dims = (self.n_channels, self.n_timesteps, self.rnn_layers, self.hidden_dim,
                self.head_hidden_dim, *self.output_shape)
        if not self.output_shape or any(d < 1 for d in dims):
            raise ValueError(f"encoder dimensions must all be >= 1: {self}")
        if self.orientation not in ("time", "channel"):
            raise ValueError(f"unknown orientation {self.orientation!r}")

    @property
    def input_size(self) -> int:
        return self.n_channels if self.orientation == "time" else self.n_timesteps

    @property
    def output_size(self) -> int:
        return math.prod(self.output_shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["output_shape"] = list(self.output_shape)
        return d


class EEGEncoder(nn.Module):
    """LSTM stack over the signal followed by Linear -> BatchNorm -> LeakyReLU -> Linear.

    Accepts ``[channels, time]`` or ``[batch, channels, time]``; the final-step hidden state of
    the top layer feeds the head, whose output is reshaped to ``config.output_shape``.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.rnn = nn.LSTM(config.input_size, config.hidden_dim, num_layers=config.rnn_layers, batch_first=True)
        self.head = nn.Sequential(
            nn.Linear(config.hidden_dim, config.head_hidden_dim),
            nn.BatchNorm1d(config.head_hidden_dim),
            nn.LeakyReLU(config.leaky_slope),
            nn.Linear(config.head_hidden_dim, config.output_size),
        )

    def forward(self, signal: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        unbatched = signal.dim() == 2
        x = signal.unsqueeze(0) if unbatched else signal
        if x.dim() != 3 or tuple(x.shape[1:]) != (cfg.n_channels, cfg.n_timesteps):
            raise ShapeError(f"expected signal of shape [batch, {cfg.n_channels}, {cfg.n_timesteps}] "
                             f"or [{cfg.n_channels}, {cfg.n_timesteps}], got {list(signal.shape)}")
        if self.training and x.shape[0] < 2:
            raise ValueError("batch-norm training needs at least 2 samples per batch")
        seq = x.transpose(1, 2) if cfg.orientation == "time" else x
        _, (h_n, _) = self.rnn(seq)
        out = self.head(h_n[-1]).reshape(x.shape[0], *cfg.output_shape)
        return out[0] if unbatched else out


def build_encoder(config: EncoderConfig, seed: int = 0) -> EEGEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        enc = EEGEncoder(config)
    return enc


def count_parameters(encoder: EEGEncoder | EncoderConfig) -> int:
    """Trainable parameter count computed from the configuration alone."""
    cfg = encoder.config if isinstance(encoder, EEGEncoder) else encoder
    h, hh, out = cfg.hidden_dim, cfg.head_hidden_dim, cfg.output_size
    # each LSTM layer: 4 gates x (input weights + recurrent weights + two bias vectors)
    rnn = 4 * (cfg.input_size * h + h * h + 2 * h)
    rnn += (cfg.rnn_layers - 1) * 4 * (h * h + h * h + 2 * h)
    head = (h * hh + hh) + 2 * hh + (hh * out + out)
    return rnn + head


@dataclass
class EncoderCheckpoint:
    config: EncoderConfig
    state: dict[str, np.ndarray]
    step: int = 0
    space: str = "image"
    content_hash: str = field(default="", compare=False)

    @classmethod
    def from_module(cls, encoder: EEGEncoder, step: int = 0, space: str = "image") -> "EncoderCheckpoint":
        state = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in encoder.state_dict().items()}
        ckpt = cls(encoder.config, state, step, space)
        ckpt.content_hash = unpack_container(ckpt.to_bytes(), CHECKPOINT_MAGIC)[2]
        return ckpt

    def to_bytes(self) -> bytes:
        header = {"kind": "eeg-encoder", "config": self.config.to_dict(), "step": self.step, "space": self.space}
        return pack_container(CHECKPOINT_MAGIC, header, self.state)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    def build(self) -> EEGEncoder:
        enc = EEGEncoder(self.config)
        current = enc.state_dict()
        enc.load_state_dict({k: torch.from_numpy(np.array(v)).to(current[k].dtype) for k, v in self.state.items()})
        enc.eval()
        return enc


def load_checkpoint(path: str | os.PathLike) -> EncoderCheckpoint:
    header, arrays, digest = unpack_container(Path(path).read_bytes(), CHECKPOINT_MAGIC, str(path))
    if header.get("kind") != "eeg-encoder":
        raise ValueError(f"{path}: not an encoder checkpoint")
    cfg = EncoderConfig(**header["config"])
    return EncoderCheckpoint(cfg, arrays, int(header["step"]), header["space"], digest)
