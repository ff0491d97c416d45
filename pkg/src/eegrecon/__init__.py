"""Reconstruct viewed images from EEG by aligning recordings to image and text embedding spaces."""

from .caption import CaptionProvider, CaptionProviderConfig
from .core import DatasetManifest, PreprocessConfig, load_manifest, save_manifest
from .dataset import SyntheticSpec, generate_synthetic, ingest, make_splits
from .encoder import EEGEncoder, EncoderConfig, build_encoder, load_checkpoint
from .metrics import MetricConfig, MetricReport
from .training import TrainConfig, build_target_cache, train_alignment

__version__ = "0.1.0"

__all__ = [
    "CaptionProvider", "CaptionProviderConfig", "DatasetManifest", "PreprocessConfig", "load_manifest",
    "save_manifest", "SyntheticSpec", "generate_synthetic", "ingest", "make_splits", "EEGEncoder", "EncoderConfig",
    "build_encoder", "load_checkpoint", "MetricConfig", "MetricReport", "TrainConfig", "build_target_cache",
    "train_alignment",
]
