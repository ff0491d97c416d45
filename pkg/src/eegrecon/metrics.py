"""Image-reconstruction metrics: N-way top-K accuracy, Inception Score, Frechet distance, SSIM and
embedding (CLIP-style) similarity."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import xlogy

from .core import EEGReconError, ShapeError, rng_for

REPORT_COLUMNS = ["acc", "is_mean", "is_std", "fid", "ssim", "cs"]
LUMA_601 = np.array([0.299, 0.587, 0.114])


class MetricError(EEGReconError, ValueError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    acc_n: int = 50
    acc_k: int = 1
    acc_trials: int = 40
    is_splits: int = 10
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    ssim_data_range: float = 1.0
    feature_extractor_id: str = "standin"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.acc_k < self.acc_n:
            raise ValueError(f"need 1 <= acc_k < acc_n, got k={self.acc_k}, n={self.acc_n}")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be a positive odd integer")
        if self.acc_trials < 1 or self.is_splits < 1:
            raise ValueError("acc_trials and is_splits must be >= 1")


@dataclass
class MetricReport:
    acc: float
    is_mean: float
    is_std: float
    fid: float
    ssim: float
    clip_sim: float
    config: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def row(self) -> list[float]:
        return [self.acc, self.is_mean, self.is_std, self.fid, self.ssim, self.clip_sim]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def csv_row(self, condition: str | None = None) -> str:
        buf = io.StringIO()
        cells = [repr(float(v)) for v in self.row()]
        csv.writer(buf, lineterminator="\n").writerow(([condition] if condition is not None else []) + cells)
        return buf.getvalue()


# ---------------------------------------------------------------------------
# N-way top-K accuracy
# ---------------------------------------------------------------------------


def nway_topk_acc(class_probs: np.ndarray, true_class, config: MetricConfig = MetricConfig()) -> float:
    """Restricted-class ranking accuracy averaged over images and ``acc_trials`` distractor draws.

    Each trial keeps the true class plus N-1 distractors drawn uniformly without replacement
    from the remaining classes; success when the true class ranks within the top K of the N
    restricted scores. Ties are broken uniformly at random.
    """
    probs = np.atleast_2d(np.asarray(class_probs, dtype=np.float64))
    truth = np.atleast_1d(np.asarray(true_class, dtype=np.int64))
    n_img, n_cls = probs.shape
    if truth.shape[0] != n_img:
        raise ShapeError(f"{n_img} score rows but {truth.shape[0]} true classes")
    N, K, trials = config.acc_n, config.acc_k, config.acc_trials
    if n_cls < N:
        raise MetricError(f"classifier has {n_cls} classes, fewer than N={N}")
    if np.any((truth < 0) | (truth >= n_cls)):
        raise MetricError("true class outside the classifier's label set")

    rng = rng_for(config.seed, "nway-acc")
    hits = 0
    for i in range(n_img):
        t = truth[i]
        others = np.delete(probs[i], t)
        if N - 1 == others.shape[0]:
            distract = np.broadcast_to(others, (trials, N - 1))
        else:
            keys = rng.random((trials, others.shape[0]))
            distract = others[np.argpartition(keys, N - 2, axis=1)[:, : N - 1]]
        s = probs[i, t]
        greater = (distract > s).sum(axis=1)
        ties = (distract == s).sum(axis=1)
        rank = greater + rng.integers(0, ties + 1)
        hits += int((rank < K).sum())
    return hits / (n_img * trials)


# ---------------------------------------------------------------------------
# Inception Score
# ---------------------------------------------------------------------------


def inception_score(class_probs: np.ndarray, n_splits: int = 10) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))) per split, returned as (mean, std) over splits."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ShapeError(f"expected [n, C] probabilities, got {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
        raise MetricError("class_probs rows must be probability vectors (non-negative, summing to 1)")
    scores = []
    for part in np.array_split(p, min(n_splits, p.shape[0])):
        marginal = part.mean(axis=0, keepdims=True)
        kl = (xlogy(part, part) - xlogy(part, marginal)).sum(axis=1)
        scores.append(math.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Tr((A B)^{1/2}) for PSD A, B, via the symmetric form A^{1/2} B A^{1/2}."""
    sa = _psd_sqrt(cov_a)
    m = sa @ cov_b @ sa
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature sets must be [n, d] with equal d, got {a.shape} and {b.shape}")
    if a.shape[1] == 0:
        raise MetricError("feature dimension is zero")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise MetricError("need at least 2 samples per set for a covariance estimate")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise MetricError("features contain non-finite values")
    diff = a.mean(axis=0) - b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))
    fd = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt_product(cov_a, cov_b)
    return max(float(fd), 0.0)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def to_gray(img: np.ndarray) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 3 and x.shape[2] == 3:
        return x @ LUMA_601
    if x.ndim == 2:
        return x
    raise ShapeError(f"expected [H, W] or [H, W, 3] image, got {x.shape}")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _valid_filter(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    x = sliding_window_view(x, g.shape[0], axis=0) @ g
    return sliding_window_view(x, g.shape[0], axis=1) @ g


def ssim(img_a: np.ndarray, img_b: np.ndarray, config: MetricConfig = MetricConfig()) -> float:
    """Gaussian-windowed SSIM averaged over all fully-covered window positions."""
    a, b = to_gray(img_a), to_gray(img_b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    w = config.ssim_window
    if a.shape[0] < w or a.shape[1] < w:
        raise MetricError(f"image {a.shape} is smaller than the {w}x{w} SSIM window")
    g = gaussian_window(w, config.ssim_sigma)
    c1 = (config.ssim_k1 * config.ssim_data_range) ** 2
    c2 = (config.ssim_k2 * config.ssim_data_range) ** 2
    mu_a, mu_b = _valid_filter(a, g), _valid_filter(b, g)
    s_aa = _valid_filter(a * a, g) - mu_a * mu_a
    s_bb = _valid_filter(b * b, g) - mu_b * mu_b
    s_ab = _valid_filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


def mean_ssim(gen: Sequence[np.ndarray], gt: Sequence[np.ndarray], config: MetricConfig = MetricConfig()) -> float:
    if len(gen) != len(gt):
        raise ShapeError("generated and ground-truth lists differ in length")
    return float(np.mean([ssim(x, y, config) for x, y in zip(gen, gt)]))


# ---------------------------------------------------------------------------
# embedding similarity
# ---------------------------------------------------------------------------


def embedding_similarity(gen_images: Sequence[np.ndarray], gt_images: Sequence[np.ndarray],
                         extractor: Callable[[np.ndarray], np.ndarray],
                         names: Sequence[str] | None = None) -> float:
    """Mean cosine similarity between extractor embeddings of paired images."""
    if len(gen_images) != len(gt_images):
        raise ShapeError("generated and ground-truth lists differ in length")
    if not gen_images:
        raise MetricError("no image pairs")
    names = list(names) if names is not None else [str(i) for i in range(len(gen_images))]
    sims = []
    for name, x, y in zip(names, gen_images, gt_images):
        ex = np.asarray(extractor(x), dtype=np.float64).ravel()
        ey = np.asarray(extractor(y), dtype=np.float64).ravel()
        nx, ny = np.linalg.norm(ex), np.linalg.norm(ey)
        if nx == 0 or ny == 0:
            raise MetricError(f"zero-norm embedding for image {name}")
        sims.append(ex @ ey / (nx * ny))
    return float(np.mean(sims))


# ---------------------------------------------------------------------------
# classifiers and the combined report
# ---------------------------------------------------------------------------


class Classifier(Protocol):
    n_classes: int

    def predict_proba(self, images: Sequence[np.ndarray]) -> np.ndarray: ...


class ColorPrototypeClassifier:
    """Softmax over negative squared distance between an image's mean colour and class prototypes."""

    def __init__(self, prototypes: np.ndarray, temperature: float = 0.01):
        self.prototypes = np.asarray(prototypes, dtype=np.float64)
        self.temperature = temperature
        self.n_classes = self.prototypes.shape[0]

    def predict_proba(self, images: Sequence[np.ndarray]) -> np.ndarray:
        means = np.stack([np.asarray(im, dtype=np.float64).reshape(-1, 3).mean(axis=0) for im in images])
        d2 = ((means[:, None, :] - self.prototypes[None]) ** 2).sum(axis=-1)
        logits = -d2 / self.temperature
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, images: Sequence[np.ndarray]) -> np.ndarray:
        means = np.stack([np.asarray(im, dtype=np.float64).reshape(-1, 3).mean(axis=0) for im in images])
        return np.argmin(((means[:, None, :] - self.prototypes[None]) ** 2).sum(axis=-1), axis=1)


def evaluate_images(gen: Sequence[np.ndarray], gt: Sequence[np.ndarray], true_classes: Sequence[int],
                    classifier: Classifier, extractor: Callable[[np.ndarray], np.ndarray],
                    config: MetricConfig = MetricConfig(), names: Sequence[str] | None = None) -> MetricReport:
    if len(gen) != len(gt) or len(gen) != len(true_classes):
        raise ShapeError("generated images, ground truth and classes must be paired")
    probs = classifier.predict_proba(gen)
    acc = nway_topk_acc(probs, np.asarray(true_classes), config)
    is_mean, is_std = inception_score(probs, config.is_splits)
    fid = frechet_distance(np.stack([extractor(x) for x in gen]), np.stack([extractor(x) for x in gt]))
    return MetricReport(
        acc=acc, is_mean=is_mean, is_std=is_std, fid=fid,
        ssim=mean_ssim(gen, gt, config),
        clip_sim=embedding_similarity(gen, gt, extractor, names),
        config=asdict(config),
        counts={"images": len(gen), "classes": int(classifier.n_classes)},
    )
