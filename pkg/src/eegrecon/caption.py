"""Caption sources for text-space alignment targets.

The default caption is the class label appended to "an image of". Captions from
vision-language models (general-purpose or layout-oriented) are produced offline and
ingested from a CSV file with header ``stimulus_id,caption``. For layout-oriented
captions the generating model was given the instruction::

    Write a description of the image layout. EXAMPLE OUTPUT: [object] is in the top left
    of the image, facing right.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

from .core import Caption, EEGReconError, StimulusImage

DEFAULT_TEMPLATE = "an image of {label}"
PLACEHOLDER = "{label}"


class CaptionError(EEGReconError, ValueError):
    pass


@dataclass(frozen=True)
class CaptionProviderConfig:
    mode: str = "label_template"  # or "external_file"
    template: str = DEFAULT_TEMPLATE
    path: str | None = None

    def __post_init__(self):
        if self.mode == "label_template":
            if self.template.count(PLACEHOLDER) != 1:
                raise ValueError(f"template must contain exactly one {PLACEHOLDER} placeholder: {self.template!r}")
        elif self.mode == "external_file":
            if not self.path:
                raise ValueError("external_file mode needs a caption file path")
        else:
            raise ValueError(f"unknown caption mode {self.mode!r}")


def load_external_captions(path: str | os.PathLike) -> dict[str, str]:
    captions: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["stimulus_id", "caption"]:
            raise CaptionError(f"{path}:1: header must be 'stimulus_id,caption'")
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != 2:
                raise CaptionError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            sid, text = row[0].strip(), row[1]
            if not sid:
                raise CaptionError(f"{path}:{lineno}: empty stimulus_id")
            if not text.strip():
                raise CaptionError(f"{path}:{lineno}: empty caption for stimulus {sid}")
            if sid in captions:
                raise CaptionError(f"{path}:{lineno}: duplicate stimulus_id {sid}")
            captions[sid] = text
    return captions


class CaptionProvider:
    def __init__(self, config: CaptionProviderConfig, class_names: list[str]):
        self.config = config
        self.class_names = list(class_names)
        self._external = load_external_captions(config.path) if config.mode == "external_file" else None

    def caption_for(self, stimulus: StimulusImage | int | None = None, *, class_id: int | None = None,
                    stimulus_id: str | None = None) -> Caption:
        if isinstance(stimulus, StimulusImage):
            class_id, stimulus_id = stimulus.class_id, stimulus.stimulus_id
        elif isinstance(stimulus, int):
            class_id = stimulus

        if self.config.mode == "external_file":
            if stimulus_id is None:
                raise CaptionError("external captions are keyed by stimulus_id")
            if stimulus_id not in self._external:
                raise CaptionError(f"no external caption for stimulus {stimulus_id}")
            return Caption(self._external[stimulus_id], "external_file", stimulus_id, class_id)

        if class_id is None or not 0 <= class_id < len(self.class_names):
            raise CaptionError(f"class_id {class_id} has no class name")
        label = self.class_names[class_id]
        # literal substitution: labels may contain braces or commas
        text = self.config.template.replace(PLACEHOLDER, label)
        return Caption(text, "label_template", stimulus_id, class_id)


def caption_for(provider: CaptionProvider, stimulus: StimulusImage | int, **kw) -> Caption:
    return provider.caption_for(stimulus, **kw)
