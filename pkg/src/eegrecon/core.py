"""Domain types, manifests and on-disk formats shared by every stage of the pipeline."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import torch
from PIL import Image

MANIFEST_SCHEMA_VERSION = 1
RUN_MANIFEST_SCHEMA_VERSION = 1
SIGNAL_SCHEMA_VERSION = 1
CONTAINER_VERSION = 1

SIGNAL_MAGIC = b"EEGR"
SPLIT_NAMES = ("train", "val", "test")


class EEGReconError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(EEGReconError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ManifestParseError(EEGReconError, ValueError):
    pass


class SchemaVersionError(EEGReconError):
    pass


class CorruptFileError(EEGReconError, ValueError):
    pass


class ShapeError(EEGReconError, ValueError):
    pass


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


def _frozen_array(a: Any, dtype=np.float32) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class EEGRecording:
    signal: np.ndarray  # [n_channels, n_timesteps]
    subject_id: int
    class_id: int
    stimulus_id: str
    recording_id: str

    def __post_init__(self):
        sig = _frozen_array(self.signal)
        if sig.ndim != 2 or sig.shape[0] < 1 or sig.shape[1] < 1:
            raise ShapeError(f"recording {self.recording_id}: signal must be [channels, time], got {sig.shape}")
        if not np.all(np.isfinite(sig)):
            raise ValueError(f"recording {self.recording_id}: non-finite signal values")
        object.__setattr__(self, "signal", sig)

    @property
    def n_channels(self) -> int:
        return self.signal.shape[0]

    @property
    def n_timesteps(self) -> int:
        return self.signal.shape[1]


@dataclass(frozen=True, eq=False)
class StimulusImage:
    pixels: np.ndarray  # [height, width, 3] in [0, 1]
    stimulus_id: str
    class_id: int

    def __post_init__(self):
        px = _frozen_array(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeError(f"stimulus {self.stimulus_id}: expected [H, W, 3], got {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(f"stimulus {self.stimulus_id}: pixel values outside [0, 1]")
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class Caption:
    text: str
    source: str  # "label_template" | "external_file"
    stimulus_id: str | None = None
    class_id: int | None = None

    def __post_init__(self):
        if not self.text:
            raise ValueError("caption text must be non-empty")
        if self.source not in ("label_template", "external_file"):
            raise ValueError(f"unknown caption source {self.source!r}")


@dataclass(frozen=True, eq=False)
class AlignmentTarget:
    space: str  # "image" -> [d_img], "text" -> [n_tokens, d_text] (or [d_text] when pooled)
    data: np.ndarray
    extractor_id: str

    def __post_init__(self):
        data = _frozen_array(self.data)
        if self.space == "image" and data.ndim != 1:
            raise ShapeError(f"image-space target must be a vector, got {data.shape}")
        if self.space == "text" and data.ndim not in (1, 2):
            raise ShapeError(f"text-space target must be [n_tokens, d_text], got {data.shape}")
        if self.space not in ("image", "text"):
            raise ValueError(f"unknown space {self.space!r}")
        if not np.all(np.isfinite(data)):
            raise ValueError("alignment target has non-finite entries")
        object.__setattr__(self, "data", data)


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreprocessConfig:
    normalize: str = "per_channel_zscore"  # or "none"
    crop: tuple[int, int] | None = None

    def __post_init__(self):
        if self.normalize not in ("none", "per_channel_zscore"):
            raise ValueError(f"unknown normalization {self.normalize!r}")
        if self.crop is not None:
            t0, t1 = (int(v) for v in self.crop)
            if not (0 <= t0 < t1):
                raise ValueError(f"crop must satisfy 0 <= t_start < t_end, got {self.crop}")
            object.__setattr__(self, "crop", (t0, t1))


@dataclass(frozen=True)
class RecordingMeta:
    stimulus_id: str
    class_id: int
    subject_id: int
    signal_path: str  # relative to the dataset root


@dataclass
class DatasetManifest:
    dataset_id: str
    n_classes: int
    class_names: list[str]
    root: str
    n_channels: int
    n_timesteps: int
    recordings: dict[str, RecordingMeta] = field(default_factory=dict)
    stimuli: dict[str, str] = field(default_factory=dict)  # stimulus_id -> png path relative to root
    splits: dict[str, list[str]] = field(default_factory=dict)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    target_caches: dict[str, str] = field(default_factory=dict)
    rejected: list[str] = field(default_factory=list)

    def split_of(self) -> dict[str, str]:
        out = {}
        for name, ids in self.splits.items():
            for rid in ids:
                out.setdefault(rid, name)
        return out

    def recording_ids(self, split: str | None = None, subject: int | None = None) -> list[str]:
        ids = sorted(self.recordings) if split is None else sorted(self.splits.get(split, []))
        if subject is not None:
            ids = [r for r in ids if self.recordings[r].subject_id == subject]
        return ids

    def effective_timesteps(self) -> int:
        if self.preprocess.crop is None:
            return self.n_timesteps
        return self.preprocess.crop[1] - self.preprocess.crop[0]

    def root_path(self) -> Path:
        return Path(self.root)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["preprocess"] = {"normalize": self.preprocess.normalize,
                           "crop": list(self.preprocess.crop) if self.preprocess.crop else None}
        return {"schema_version": MANIFEST_SCHEMA_VERSION, **d}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DatasetManifest":
        version = d.get("schema_version")
        if version is None:
            raise ManifestParseError("manifest has no schema_version field")
        if version != MANIFEST_SCHEMA_VERSION:
            raise SchemaVersionError(
                f"manifest schema_version {version} is not supported (expected {MANIFEST_SCHEMA_VERSION})")
        try:
            pre = d.get("preprocess") or {}
            crop = pre.get("crop")
            return cls(
                dataset_id=str(d["dataset_id"]),
                n_classes=int(d["n_classes"]),
                class_names=[str(c) for c in d["class_names"]],
                root=str(d["root"]),
                n_channels=int(d["n_channels"]),
                n_timesteps=int(d["n_timesteps"]),
                recordings={k: RecordingMeta(**v) for k, v in d["recordings"].items()},
                stimuli=dict(d.get("stimuli", {})),
                splits={k: list(v) for k, v in d.get("splits", {}).items()},
                preprocess=PreprocessConfig(pre.get("normalize", "per_channel_zscore"),
                                            tuple(crop) if crop else None),
                target_caches=dict(d.get("target_caches", {})),
                rejected=list(d.get("rejected", [])),
            )
        except (KeyError, TypeError) as exc:
            raise ManifestParseError(f"manifest is missing or has malformed field: {exc}") from exc


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Return one human-readable message per broken invariant; empty when the manifest is sound."""
    problems: list[str] = []
    if manifest.n_classes < 1:
        problems.append(f"n_classes must be >= 1, got {manifest.n_classes}")
    if len(manifest.class_names) != manifest.n_classes:
        problems.append(f"n_classes={manifest.n_classes} but {len(manifest.class_names)} class names given")
    for i, name in enumerate(manifest.class_names):
        if not name:
            problems.append(f"class {i} has an empty name")
    if manifest.n_channels < 1:
        problems.append(f"n_channels must be >= 1, got {manifest.n_channels}")
    if manifest.n_timesteps < 1:
        problems.append(f"n_timesteps must be >= 1, got {manifest.n_timesteps}")
    crop = manifest.preprocess.crop
    if crop is not None and crop[1] > manifest.n_timesteps:
        problems.append(f"crop {list(crop)} exceeds n_timesteps={manifest.n_timesteps}")

    for rid in sorted(manifest.recordings):
        meta = manifest.recordings[rid]
        if not 0 <= meta.class_id < manifest.n_classes:
            problems.append(f"recording {rid} has class_id {meta.class_id} outside [0, {manifest.n_classes})")
        if meta.stimulus_id not in manifest.stimuli:
            problems.append(f"recording {rid} references unknown stimulus {meta.stimulus_id}")

    for name in manifest.splits:
        if name not in SPLIT_NAMES:
            problems.append(f"unknown split name {name!r}")
    seen: dict[str, list[str]] = {}
    for name in SPLIT_NAMES:
        for rid in manifest.splits.get(name, []):
            seen.setdefault(rid, []).append(name)
    for rid in sorted(seen):
        if rid not in manifest.recordings:
            problems.append(f"split {seen[rid][0]} references unknown recording {rid}")
        elif len(seen[rid]) > 1:
            problems.append(f"recording {rid} in {' and '.join(seen[rid])}")
    for rid in sorted(set(manifest.recordings) - set(seen)):
        problems.append(f"recording {rid} is not assigned to any split")
    return problems


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(obj: Any) -> str:
    if isinstance(obj, (bytes, bytearray)):
        return hashlib.sha256(obj).hexdigest()
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _dump_json(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_dump_json(manifest.to_dict()))
    return path


def _read_json(path: str | os.PathLike) -> Any:
    raw = Path(path).read_bytes()  # OSError propagates: unreadable is not a validation failure
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestParseError(f"{path}: not valid JSON ({exc})") from exc


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ManifestParseError(f"{path}: top-level JSON value must be an object")
    return DatasetManifest.from_dict(data)


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    run_id: str
    command: str
    config: dict
    seed: int | None
    checkpoints: dict[str, str] = field(default_factory=dict)
    created: str = ""
    config_hash: str = ""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = content_hash(self.config)
        if not self.created:
            self.created = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")

    def to_dict(self) -> dict:
        return {"schema_version": RUN_MANIFEST_SCHEMA_VERSION, **asdict(self)}


def save_run_manifest(run: RunManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_dump_json(run.to_dict()))
    return path


def load_run_manifest(path: str | os.PathLike) -> RunManifest:
    data = _read_json(path)
    version = data.get("schema_version") if isinstance(data, dict) else None
    if version != RUN_MANIFEST_SCHEMA_VERSION:
        raise SchemaVersionError(f"run manifest schema_version {version!r} is not supported")
    data = {k: v for k, v in data.items() if k != "schema_version"}
    run = RunManifest(**data)
    if run.config_hash != content_hash(run.config):
        raise CorruptFileError(f"{path}: config hash does not match config snapshot")
    return run


# ---------------------------------------------------------------------------
# signal files
# ---------------------------------------------------------------------------


def write_signal(path: str | os.PathLike, signal: np.ndarray) -> None:
    sig = np.asarray(signal)
    if sig.ndim != 2:
        raise ShapeError(f"signal must be 2-D, got shape {sig.shape}")
    header = SIGNAL_MAGIC + struct.pack("<III", SIGNAL_SCHEMA_VERSION, sig.shape[0], sig.shape[1])
    Path(path).write_bytes(header + sig.astype("<f4", copy=False).tobytes(order="C"))


def read_signal(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != SIGNAL_MAGIC:
        raise CorruptFileError(f"{path}: not an EEGR signal file")
    version, n_ch, n_t = struct.unpack("<III", raw[4:16])
    if version != SIGNAL_SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: signal schema version {version} not supported")
    expected = 16 + 4 * n_ch * n_t
    if len(raw) != expected:
        raise CorruptFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(n_ch, n_t).astype(np.float32)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: str | os.PathLike, pixels: np.ndarray) -> None:
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG")


def load_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


# ---------------------------------------------------------------------------
# float32 containers (checkpoints, target caches)
# ---------------------------------------------------------------------------


def pack_container(magic: bytes, header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    """JSON header + little-endian float32 payload + sha256 trailer over everything before it."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    specs = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    head = canonical_json({**header, "arrays": specs}).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in arrays.values())
    body = magic + struct.pack("<IQ", CONTAINER_VERSION, len(head)) + head + payload
    return body + hashlib.sha256(body).digest()


def unpack_container(raw: bytes, magic: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray], str]:
    if len(raw) < 48 or raw[:4] != magic:
        raise CorruptFileError(f"{source}: bad magic (expected {magic!r})")
    body, trailer = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CorruptFileError(f"{source}: hash trailer mismatch (file truncated or modified)")
    version, head_len = struct.unpack("<IQ", raw[4:16])
    if version != CONTAINER_VERSION:
        raise SchemaVersionError(f"{source}: container version {version} not supported")
    header = json.loads(raw[16:16 + head_len].decode("utf-8"))
    offset = 16 + head_len
    arrays = {}
    for spec in header.pop("arrays"):
        n = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset).reshape(spec["shape"])
        arrays[spec["name"]] = arr.astype(np.float32)
        offset += 4 * n
    if offset != len(body):
        raise CorruptFileError(f"{source}: payload size does not match header")
    return header, arrays, trailer.hex()


def read_container(path: str | os.PathLike, magic: bytes) -> tuple[dict, dict[str, np.ndarray], str]:
    return unpack_container(Path(path).read_bytes(), magic, str(path))


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------


def _key_int(key: Any) -> int:
    if isinstance(key, (int, np.integer)) and key >= 0:
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def rng_for(seed: int, *keys: Any) -> np.random.Generator:
    """Independent numpy stream for (seed, keys); keyed by index so results ignore scheduling order."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in keys)))


def torch_generator(seed: int, *keys: Any) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(rng_for(seed, *keys).integers(0, 2**63 - 1)))
    return g


def seed_for(seed: int, *keys: Any) -> int:
    return int(rng_for(seed, *keys).integers(0, 2**31 - 1))


def sorted_unique(items: Iterable[str]) -> list[str]:
    return sorted(set(items))
