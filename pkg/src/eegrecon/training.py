"""Alignment of EEG encoders to frozen image/text embedding targets with an MSE objective."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .caption import CaptionProvider
from .core import (
    AlignmentTarget,
    DatasetManifest,
    EEGReconError,
    ShapeError,
    content_hash,
    load_png,
    pack_container,
    read_container,
    torch_generator,
    unpack_container,
)
from .dataset import load_signals
from .encoder import EEGEncoder, EncoderCheckpoint
from .providers import EmbeddingProvider

log = logging.getLogger(__name__)

CACHE_MAGIC = b"EEGT"
HISTORY_HEADER = ["epoch", "train_mse", "val_mse", "lr"]


class TargetCacheError(EEGReconError):
    pass


class TrainingDivergedError(EEGReconError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 1e-4
    lr_lambda: float = 0.999
    seed: int = 0
    space: str = "image"
    lr_decay_per: str = "epoch"  # or "step"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 < self.lr_lambda <= 1:
            raise ValueError("lr_lambda must lie in (0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch-norm needs two samples)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.space not in ("image", "text"):
            raise ValueError(f"unknown space {self.space!r}")
        if self.lr_decay_per not in ("epoch", "step"):
            raise ValueError(f"lr_decay_per must be 'epoch' or 'step', got {self.lr_decay_per!r}")


# ---------------------------------------------------------------------------
# target cache
# ---------------------------------------------------------------------------


@dataclass
class TargetCache:
    extractor_id: str
    space: str
    targets: dict[str, np.ndarray]
    key: str = ""
    content_hash: str = field(default="", compare=False)

    @property
    def target_shape(self) -> tuple[int, ...]:
        return next(iter(self.targets.values())).shape if self.targets else ()

    def target(self, recording_id: str) -> AlignmentTarget:
        return AlignmentTarget(self.space, self.targets[recording_id], self.extractor_id)

    def stack(self, recording_ids: list[str]) -> np.ndarray:
        missing = [r for r in recording_ids if r not in self.targets]
        if missing:
            raise TargetCacheError(f"target cache lacks {len(missing)} recordings, e.g. {missing[:3]}")
        return np.stack([self.targets[r] for r in recording_ids]).astype(np.float32)

    def to_bytes(self, complete: bool = True) -> bytes:
        ids = sorted(self.targets)
        header = {"kind": "target-cache", "extractor_id": self.extractor_id, "space": self.space,
                  "key": self.key, "ids": ids, "complete": complete}
        arrays = {"targets": np.stack([self.targets[i] for i in ids])} if ids else {}
        return pack_container(CACHE_MAGIC, header, arrays)

    def save(self, path: str | os.PathLike, complete: bool = True) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        raw = self.to_bytes(complete)
        path.write_bytes(raw)
        self.content_hash = unpack_container(raw, CACHE_MAGIC)[2]
        return path


def load_target_cache(path: str | os.PathLike) -> tuple[TargetCache, bool]:
    """Return the cache and whether it was marked complete."""
    header, arrays, digest = read_container(path, CACHE_MAGIC)
    stacked = arrays.get("targets")
    targets = {rid: stacked[i] for i, rid in enumerate(header["ids"])} if stacked is not None else {}
    cache = TargetCache(header["extractor_id"], header["space"], targets, header["key"], digest)
    return cache, bool(header["complete"])


def _cache_items(manifest: DatasetManifest, space: str, captions: CaptionProvider | None) -> dict[str, str]:
    items = {}
    for rid in sorted(manifest.recordings):
        meta = manifest.recordings[rid]
        if space == "image":
            items[rid] = meta.stimulus_id
        else:
            if captions is None:
                raise ValueError("text-space targets need a caption provider")
            items[rid] = captions.caption_for(class_id=meta.class_id, stimulus_id=meta.stimulus_id).text
    return items


def build_target_cache(manifest: DatasetManifest, provider: EmbeddingProvider, space: str,
                       path: str | os.PathLike | None = None, captions: CaptionProvider | None = None,
                       pooled: bool = False) -> TargetCache:
    """Embed every recording's stimulus (image space) or caption (text space) once.

    With ``path`` set, a complete cache with a matching key is reused without calling the
    provider, and a partial cache left by an earlier failure is resumed.
    """
    if space not in ("image", "text"):
        raise ValueError(f"unknown space {space!r}")
    items = _cache_items(manifest, space, captions)
    key = content_hash({"dataset": manifest.dataset_id, "extractor": provider.extractor_id,
                        "space": space, "pooled": pooled, "items": items})

    done: dict[str, np.ndarray] = {}
    if path is not None and Path(path).exists():
        try:
            old, complete = load_target_cache(path)
        except EEGReconError as exc:
            log.warning("ignoring unreadable target cache %s: %s", path, exc)
        else:
            if old.key == key:
                if complete:
                    return old
                done = dict(old.targets)

    by_item: dict[str, np.ndarray] = {}
    for rid, arr in done.items():
        by_item.setdefault(items[rid], arr)
    cache = TargetCache(provider.extractor_id, space, done, key)
    for rid in sorted(items):
        if rid in cache.targets:
            continue
        item = items[rid]
        if item not in by_item:
            try:
                if space == "image":
                    vec = provider.embed_image(load_png(manifest.root_path() / manifest.stimuli[item]))
                else:
                    vec = provider.embed_text(item)
                    if pooled:
                        vec = vec.mean(axis=0)
                vec = np.asarray(vec, dtype=np.float32)
                if not np.all(np.isfinite(vec)):
                    raise ValueError("non-finite embedding")
            except Exception as exc:
                if path is not None:
                    cache.save(path, complete=False)
                what = f"stimulus {item}" if space == "image" else f"caption {item!r}"
                raise TargetCacheError(f"provider failed on recording {rid} ({what}): {exc}") from exc
            by_item[item] = vec
        cache.targets[rid] = by_item[item]

    shapes = {v.shape for v in cache.targets.values()}
    if len(shapes) > 1:
        raise TargetCacheError(f"provider returned non-uniform target shapes {sorted(shapes)}")
    if path is not None:
        cache.save(path)
    else:
        cache.content_hash = unpack_container(cache.to_bytes(), CACHE_MAGIC)[2]
    return cache


# ---------------------------------------------------------------------------
# loss and optimisation
# ---------------------------------------------------------------------------


def mse_loss(pred, target):
    """Mean over all elements of the squared difference; works on tensors and arrays."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if isinstance(pred, torch.Tensor):
        return ((pred - target) ** 2).mean()
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(diff * diff))


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=config.lr, betas=config.betas, eps=config.eps,
                             weight_decay=config.weight_decay)


def make_scheduler(optimizer: torch.optim.Optimizer, config: TrainConfig):
    lam = config.lr_lambda
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda k: lam ** k)


def lr_at(config: TrainConfig, k: int) -> float:
    return config.lr * config.lr_lambda ** k


@torch.no_grad()
def encode(encoder: EEGEncoder, signals: np.ndarray | torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Inference-mode forward over a stack of signals."""
    was_training = encoder.training
    encoder.eval()
    x = torch.as_tensor(signals)
    outs = [encoder(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)]
    encoder.train(was_training)
    return torch.cat(outs) if outs else torch.zeros((0, *encoder.config.output_shape))


def train_alignment(encoder: EEGEncoder, manifest: DatasetManifest, cache: TargetCache,
                    config: TrainConfig, train_split: str = "train", val_split: str = "val",
                    subject: int | None = None) -> tuple[EncoderCheckpoint, list[dict]]:
    """Minibatch AdamW on the MSE between encoder output and cached targets.

    The learning rate is multiplied by ``lr_lambda`` after every epoch (or step). The returned
    checkpoint holds the parameters with the lowest validation MSE (train MSE when there is
    no validation split); ``encoder`` is left holding those parameters too.
    """
    train_ids = manifest.recording_ids(train_split, subject)
    val_ids = manifest.recording_ids(val_split, subject)
    if len(train_ids) < 2:
        raise ValueError(f"split {train_split!r} has {len(train_ids)} recordings; need at least 2")
    if cache.space != config.space:
        raise ShapeError(f"cache space {cache.space!r} does not match training space {config.space!r}")
    if tuple(cache.target_shape) != tuple(encoder.config.output_shape):
        raise ShapeError(f"encoder output_shape {encoder.config.output_shape} does not match target "
                         f"shape {cache.target_shape}")
    expected_in = (manifest.n_channels, manifest.effective_timesteps())
    if (encoder.config.n_channels, encoder.config.n_timesteps) != expected_in:
        raise ShapeError(f"encoder expects signals {(encoder.config.n_channels, encoder.config.n_timesteps)}, "
                         f"dataset provides {expected_in}")

    x_train = torch.from_numpy(load_signals(manifest, train_ids))
    y_train = torch.from_numpy(cache.stack(train_ids))
    x_val = torch.from_numpy(load_signals(manifest, val_ids)) if val_ids else None
    y_val = torch.from_numpy(cache.stack(val_ids)) if val_ids else None

    gen = torch_generator(config.seed, "batches")
    opt = make_optimizer(encoder.parameters(), config)
    sched = make_scheduler(opt, config)
    n = len(train_ids)
    bs = min(config.batch_size, n)

    history: list[dict] = []
    best = (math.inf, None, 0)
    step = 0
    for epoch in range(config.epochs):
        lr_now = opt.param_groups[0]["lr"]
        encoder.train()
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            if len(idx) < 2:
                continue  # batch-norm cannot normalise a single sample
            loss = mse_loss(encoder(x_train[idx]), y_train[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if config.lr_decay_per == "step":
                sched.step()
            total += loss.item() * len(idx)
            count += len(idx)
        if config.lr_decay_per == "epoch":
            sched.step()
        train_mse = total / count
        val_mse = mse_loss(encode(encoder, x_val), y_val).item() if x_val is not None else float("nan")
        history.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse, "lr": lr_now})
        score = val_mse if x_val is not None else train_mse
        if score < best[0]:
            best = (score, copy.deepcopy(encoder.state_dict()), step)

    if best[1] is not None:
        encoder.load_state_dict(best[1])
    encoder.eval()
    return EncoderCheckpoint.from_module(encoder, step=best[2], space=config.space), history


def write_history(path: str | os.PathLike, history: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_mse"]), repr(row["val_mse"]), repr(row["lr"])])
    return path


def retrieval_top1(outputs: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of rows whose output is cosine-nearest to their own target among the distinct targets."""
    out = np.asarray(outputs, dtype=np.float64).reshape(len(outputs), -1)
    tgt = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
    candidates, own = np.unique(tgt, axis=0, return_inverse=True)
    own = np.asarray(own).reshape(-1)
    cn = candidates / np.linalg.norm(candidates, axis=1, keepdims=True)
    on = out / np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-300)
    nearest = np.argmax(on @ cn.T, axis=1)
    return float(np.mean(nearest == own))


def eval_alignment(encoder: EEGEncoder, manifest: DatasetManifest, cache: TargetCache, split: str,
                   subject: int | None = None) -> dict:
    ids = manifest.recording_ids(split, subject)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    outputs = encode(encoder, load_signals(manifest, ids)).numpy()
    targets = cache.stack(ids)
    return {"split": split, "n": len(ids), "mse": mse_loss(outputs, targets),
            "retrieval_top1": retrieval_top1(outputs, targets)}


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["betas"] = list(config.betas)
    return d
