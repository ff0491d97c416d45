"""Dataset ingestion, stimulus-level splitting, signal preprocessing and synthetic stand-in data."""

from __future__ import annotations

import colorsys
import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (
    DatasetManifest,
    EEGReconError,
    EEGRecording,
    PreprocessConfig,
    RecordingMeta,
    StimulusImage,
    ValidationError,
    load_png,
    read_signal,
    rng_for,
    save_manifest,
    save_png,
    validate_manifest,
    write_signal,
)

log = logging.getLogger(__name__)

LABELS_HEADER = ["recording_id", "stimulus_id", "class_id", "subject_id"]

# templates must not depend on the run seed: two seeds share templates, differ in noise
_TEMPLATE_SEED = 20_240_901

_CLASS_NAMES = [
    "panda", "electric locomotive", "folding chair", "mushroom", "acoustic guitar", "canoe",
    "pizza", "daisy", "airliner", "banana", "anemone fish", "golf ball", "piano", "revolver",
    "sorrel", "lycaenid", "jack-o'-lantern", "mountain bike", "parachute", "radio telescope",
    "coffee mug", "desktop computer", "digital watch", "espresso maker", "German shepherd",
    "grand piano", "iron", "Egyptian cat", "capuchin", "missile", "mitten", "running shoe",
    "convertible", "pool table", "reflex camera", "bolete", "brown bear", "African elephant",
    "airship", "dial telephone",
]


class DatasetError(EEGReconError, ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    n_subjects: int = 1
    n_channels: int = 16
    n_timesteps: int = 64
    samples_per_class: int = 32
    noise_sigma: float = 0.5
    seed: int = 0
    stimuli_per_class: int = 8
    image_size: int = 8

    def __post_init__(self):
        for name in ("n_classes", "n_subjects", "n_channels", "n_timesteps",
                     "samples_per_class", "stimuli_per_class", "image_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


# ---------------------------------------------------------------------------
# preprocessing / loading
# ---------------------------------------------------------------------------


def preprocess_signal(signal: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    sig = np.asarray(signal, dtype=np.float64)
    if config.crop is not None:
        t0, t1 = config.crop
        if t1 > sig.shape[1]:
            raise ValueError(f"crop {config.crop} exceeds {sig.shape[1]} timesteps")
        sig = sig[:, t0:t1]
    if config.normalize == "per_channel_zscore":
        mu = sig.mean(axis=1, keepdims=True)
        sd = sig.std(axis=1, keepdims=True)
        centered = sig - mu
        # constant channels stay at zero instead of dividing by zero
        sig = np.divide(centered, sd, out=np.zeros_like(centered), where=sd > 0)
    return sig.astype(np.float32)


def load_recording(manifest: DatasetManifest, recording_id: str) -> EEGRecording:
    meta = manifest.recordings[recording_id]
    raw = read_signal(manifest.root_path() / meta.signal_path)
    return EEGRecording(
        signal=preprocess_signal(raw, manifest.preprocess),
        subject_id=meta.subject_id,
        class_id=meta.class_id,
        stimulus_id=meta.stimulus_id,
        recording_id=recording_id,
    )


def load_signals(manifest: DatasetManifest, recording_ids: list[str]) -> np.ndarray:
    """Stack preprocessed signals into a [n, channels, time] float32 array."""
    if not recording_ids:
        return np.zeros((0, manifest.n_channels, manifest.effective_timesteps()), dtype=np.float32)
    return np.stack([load_recording(manifest, rid).signal for rid in recording_ids])


def load_stimulus(manifest: DatasetManifest, stimulus_id: str) -> StimulusImage:
    class_id = next((m.class_id for m in manifest.recordings.values() if m.stimulus_id == stimulus_id), -1)
    return StimulusImage(load_png(manifest.root_path() / manifest.stimuli[stimulus_id]), stimulus_id, class_id)


def stimulus_classes(manifest: DatasetManifest) -> dict[str, int]:
    out: dict[str, int] = {}
    for rid in sorted(manifest.recordings):
        meta = manifest.recordings[rid]
        prev = out.setdefault(meta.stimulus_id, meta.class_id)
        if prev != meta.class_id:
            raise DatasetError(f"stimulus {meta.stimulus_id} is labelled with classes {prev} and {meta.class_id}")
    return out


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def _read_labels(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != LABELS_HEADER:
            raise DatasetError(f"{path}: header must be {','.join(LABELS_HEADER)}, got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DatasetError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                rows.append({"recording_id": row[0].strip(), "stimulus_id": row[1].strip(),
                             "class_id": int(row[2]), "subject_id": int(row[3])})
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
        return rows


def ingest(root_path: str | os.PathLike, preprocess: PreprocessConfig | None = None,
           dataset_id: str | None = None, workers: int = 4) -> DatasetManifest:
    """Build a validated manifest from a dataset directory.

    Layout: ``labels.csv`` (recording_id,stimulus_id,class_id,subject_id), ``classes.txt`` (one
    class name per line, line i is class i), ``signals/<recording_id>.eeg`` and
    ``stimuli/<stimulus_id>.png``. Every accepted recording starts in the ``train`` split;
    run :func:`make_splits` afterwards.
    """
    root = Path(root_path)
    preprocess = preprocess or PreprocessConfig()
    labels_path = root / "labels.csv"
    rows = _read_labels(labels_path) if labels_path.exists() else []
    if not rows:
        raise DatasetError(f"no recordings found in {root}")

    seen: set[str] = set()
    for row in rows:
        if row["recording_id"] in seen:
            raise DatasetError(f"duplicate recording_id {row['recording_id']} in labels.csv")
        seen.add(row["recording_id"])

    missing = sorted({r["stimulus_id"] for r in rows if not (root / "stimuli" / f"{r['stimulus_id']}.png").exists()})
    if missing:
        raise DatasetError(f"missing stimulus images for {len(missing)} stimuli: {', '.join(missing)}")

    classes_path = root / "classes.txt"
    if classes_path.exists():
        class_names = [ln.rstrip("\n") for ln in classes_path.read_text(encoding="utf-8").splitlines()
                       if ln.strip()]
    else:
        n = max(r["class_id"] for r in rows) + 1
        log.warning("no classes.txt in %s; naming %d classes by index", root, n)
        class_names = [str(i) for i in range(n)]

    rows.sort(key=lambda r: r["recording_id"])

    def _check(row: dict) -> tuple[str, tuple[int, int] | None]:
        sig = read_signal(root / "signals" / f"{row['recording_id']}.eeg")
        return row["recording_id"], (sig.shape if np.all(np.isfinite(sig)) else None)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        shapes = dict(pool.map(_check, rows))

    rejected = sorted(rid for rid, shp in shapes.items() if shp is None)
    if rejected:
        log.warning("rejected %d recordings with non-finite samples", len(rejected))
    good = [r for r in rows if shapes[r["recording_id"]] is not None]
    if not good:
        raise DatasetError(f"no usable recordings in {root} ({len(rejected)} rejected)")
    distinct = {shapes[r["recording_id"]] for r in good}
    if len(distinct) != 1:
        raise DatasetError(f"recordings have differing shapes: {sorted(distinct)}")
    n_channels, n_timesteps = distinct.pop()

    manifest = DatasetManifest(
        dataset_id=dataset_id or root.resolve().name,
        n_classes=len(class_names),
        class_names=class_names,
        root=str(root.resolve()),
        n_channels=int(n_channels),
        n_timesteps=int(n_timesteps),
        recordings={r["recording_id"]: RecordingMeta(r["stimulus_id"], r["class_id"], r["subject_id"],
                                                     f"signals/{r['recording_id']}.eeg") for r in good},
        stimuli={s: f"stimuli/{s}.png" for s in sorted({r["stimulus_id"] for r in good})},
        splits={"train": [r["recording_id"] for r in good], "val": [], "test": []},
        preprocess=preprocess,
        rejected=rejected,
    )
    problems = validate_manifest(manifest)
    if problems:
        raise ValidationError(problems)
    log.info("ingested %d recordings, %d classes, %d subjects (%d rejected)", len(good),
             len({r['class_id'] for r in good}), len({r['subject_id'] for r in good}), len(rejected))
    return manifest


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def _largest_remainder(n: int, fractions: list[float]) -> list[int]:
    exact = [f * n for f in fractions]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def make_splits(manifest: DatasetManifest, fractions: dict[str, float] | tuple[float, float, float],
                seed: int) -> DatasetManifest:
    """Stratified, stimulus-level train/val/test assignment (all recordings of a stimulus share a split)."""
    if not isinstance(fractions, dict):
        fractions = dict(zip(("train", "val", "test"), fractions))
    fr = [float(fractions.get(name, 0.0)) for name in ("train", "val", "test")]
    if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fr}")
    requested = sum(f > 0 for f in fr)

    stim_class = stimulus_classes(manifest)
    by_class: dict[int, list[str]] = {}
    for sid in sorted(stim_class):
        by_class.setdefault(stim_class[sid], []).append(sid)

    assignment: dict[str, str] = {}
    for cls in sorted(by_class):
        stims = by_class[cls]
        if len(stims) < requested:
            name = manifest.class_names[cls] if 0 <= cls < len(manifest.class_names) else str(cls)
            raise DatasetError(f"class {cls} ({name}) has {len(stims)} stimuli, fewer than the "
                               f"{requested} splits requested")
        perm = rng_for(seed, "split", cls).permutation(len(stims))
        counts = _largest_remainder(len(stims), fr)
        pos = 0
        for name, k in zip(("train", "val", "test"), counts):
            for idx in perm[pos:pos + k]:
                assignment[stims[idx]] = name
            pos += k

    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for rid in sorted(manifest.recordings):
        splits[assignment[manifest.recordings[rid].stimulus_id]].append(rid)
    return replace(manifest, splits=splits)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def class_name(c: int) -> str:
    base = _CLASS_NAMES[c % len(_CLASS_NAMES)]
    return base if c < len(_CLASS_NAMES) else f"{base} {c // len(_CLASS_NAMES)}"


def class_template(class_id: int, n_channels: int, n_timesteps: int, n_waves: int = 3) -> np.ndarray:
    """Sum of class-keyed sinusoids, with per-channel amplitude and phase."""
    rng = rng_for(_TEMPLATE_SEED, class_id, n_channels, n_timesteps)
    t = np.arange(n_timesteps, dtype=np.float64) / n_timesteps
    freqs = rng.uniform(1.0, 6.0, size=n_waves)
    amps = rng.uniform(0.5, 1.5, size=(n_channels, n_waves))
    phases = rng.uniform(0.0, 2 * np.pi, size=(n_channels, n_waves))
    waves = amps[:, :, None] * np.sin(2 * np.pi * freqs[None, :, None] * t[None, None, :] + phases[:, :, None])
    return waves.sum(axis=1)


def class_color(class_id: int, n_classes: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(class_id / n_classes, 0.9, 0.95))


def class_stimulus(class_id: int, n_classes: int, size: int) -> np.ndarray:
    """Solid-colour class shape on a dark background."""
    img = np.full((size, size, 3), 0.1)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    r = size * 0.38
    kind = class_id % 4
    if kind == 0:
        mask = (np.abs(yy - c) <= r) & (np.abs(xx - c) <= r)
    elif kind == 1:
        mask = (yy - c) ** 2 + (xx - c) ** 2 <= r ** 2
    elif kind == 2:
        mask = (yy >= c - r) & (yy <= c + r) & (np.abs(xx - c) <= (yy - (c - r)) / 2)
    else:
        mask = (np.abs(yy - c) <= r / 2.5) | (np.abs(xx - c) <= r / 2.5)
    img[mask] = class_color(class_id, n_classes)
    return img


def generate_synthetic(spec: SyntheticSpec, out_dir: str | os.PathLike,
                       preprocess: PreprocessConfig | None = None) -> DatasetManifest:
    """Write a desk-scale dataset tree to ``out_dir`` and return its manifest (saved as manifest.json)."""
    out = Path(out_dir)
    (out / "signals").mkdir(parents=True, exist_ok=True)
    (out / "stimuli").mkdir(parents=True, exist_ok=True)

    names = [class_name(c) for c in range(spec.n_classes)]
    (out / "classes.txt").write_text("".join(n + "\n" for n in names), encoding="utf-8")

    recordings: dict[str, RecordingMeta] = {}
    stimuli: dict[str, str] = {}
    rows = []
    for c in range(spec.n_classes):
        template = class_template(c, spec.n_channels, spec.n_timesteps)
        pixels = class_stimulus(c, spec.n_classes, spec.image_size)
        n_stim = min(spec.stimuli_per_class, spec.samples_per_class)
        for j in range(n_stim):
            sid = f"stim_c{c:03d}_{j:03d}"
            save_png(out / "stimuli" / f"{sid}.png", pixels)
            stimuli[sid] = f"stimuli/{sid}.png"
        for k in range(spec.samples_per_class):
            rid = f"rec_c{c:03d}_{k:04d}"
            sid = f"stim_c{c:03d}_{k % n_stim:03d}"
            noise = rng_for(spec.seed, "noise", c, k).normal(0.0, 1.0, size=template.shape)
            write_signal(out / "signals" / f"{rid}.eeg", template + spec.noise_sigma * noise)
            subject = k % spec.n_subjects
            recordings[rid] = RecordingMeta(sid, c, subject, f"signals/{rid}.eeg")
            rows.append([rid, sid, c, subject])

    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LABELS_HEADER)
        writer.writerows(rows)

    manifest = DatasetManifest(
        dataset_id=f"synthetic-{spec.n_classes}c-seed{spec.seed}",
        n_classes=spec.n_classes,
        class_names=names,
        root=str(out.resolve()),
        n_channels=spec.n_channels,
        n_timesteps=spec.n_timesteps,
        recordings=recordings,
        stimuli=stimuli,
        splits={"train": sorted(recordings), "val": [], "test": []},
        preprocess=preprocess or PreprocessConfig(),
    )
    save_manifest(manifest, out / "manifest.json")
    return manifest
