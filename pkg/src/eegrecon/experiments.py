"""Ablation orchestration: generate over a split, score with the five metrics, tabulate and plot."""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field, fields
from decimal import Decimal, InvalidOperation
from pathlib import Path

import numpy as np

from .core import (
    DatasetManifest,
    EEGReconError,
    RunManifest,
    load_manifest,
    load_png,
    save_png,
    save_run_manifest,
    seed_for,
)
from .dataset import load_signals
from .encoder import load_checkpoint
from .generation import (
    BackendConfig,
    ConditioningBundle,
    ToyBackend,
    ToyBackendConfig,
    ToyTrainConfig,
    generate_batch,
    load_backend,
    train_toy_backend,
)
from .metrics import REPORT_COLUMNS, ColorPrototypeClassifier, MetricConfig, MetricReport, evaluate_images
from .providers import make_provider
from .training import TargetCache, encode

log = logging.getLogger(__name__)

RESULTS_HEADER = ["condition", *REPORT_COLUMNS]
TABLE_COLUMNS = [("acc", "ACC ↑"), ("is_mean", "IS ↑"), ("fid", "FID ↓"), ("ssim", "SSIM ↑"), ("cs", "CS ↑")]


class PlanError(EEGReconError, ValueError):
    pass


class ReportError(EEGReconError, ValueError):
    pass


@dataclass
class Condition:
    name: str
    image_encoder: str | None = None
    text_encoder: str | None = None
    caption_provider: dict = field(default_factory=lambda: {"mode": "label_template"})
    drop_text: bool = False
    drop_image: bool = False
    image_scale: float = 1.0
    backend: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)


@dataclass
class ExperimentPlan:
    manifest: str
    out_dir: str
    seed: int
    backend: dict
    conditions: list[Condition] = field(default_factory=list)
    split: str = "test"
    n_images: int | None = None
    metrics: dict = field(default_factory=dict)
    provider: dict = field(default_factory=lambda: {"kind": "standin"})
    name: str = "ablation"


def _resolve_path(base: Path, p: str | None) -> str | None:
    if p is None:
        return None
    q = Path(p)
    return str(q if q.is_absolute() else (base / q))


def load_plan(path: str | os.PathLike) -> ExperimentPlan:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PlanError(f"{path}: invalid JSON ({exc})") from exc
    base = path.parent
    if "seed" not in data:
        raise PlanError(f"{path}: plans must set an explicit seed")
    known = {f.name for f in fields(Condition)}
    conds = []
    for c in data.get("conditions", []):
        extra = set(c) - known
        if extra:
            raise PlanError(f"condition {c.get('name')!r} has unknown keys {sorted(extra)}")
        c = dict(c)
        for k in ("image_encoder", "text_encoder"):
            c[k] = _resolve_path(base, c.get(k))
        if "path" in c.get("caption_provider", {}):
            c["caption_provider"] = {**c["caption_provider"], "path": _resolve_path(base, c["caption_provider"]["path"])}
        conds.append(Condition(**c))
    backend = dict(data.get("backend", {}))
    if backend.get("checkpoint"):
        backend["checkpoint"] = _resolve_path(base, backend["checkpoint"])
    plan = ExperimentPlan(
        manifest=_resolve_path(base, data["manifest"]), out_dir=_resolve_path(base, data["out_dir"]),
        seed=int(data["seed"]), backend=backend, conditions=conds, split=data.get("split", "test"),
        n_images=data.get("n_images"), metrics=data.get("metrics", {}),
        provider=data.get("provider", {"kind": "standin"}), name=data.get("name", "ablation"),
    )
    return plan


def validate_plan(plan: ExperimentPlan) -> list[str]:
    problems = []
    names = [c.name for c in plan.conditions]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        problems.append(f"duplicate condition names: {', '.join(dupes)}")
    if not Path(plan.manifest).exists():
        problems.append(f"manifest not found: {plan.manifest}")
    for c in plan.conditions:
        for label, ref, needed in (("image_encoder", c.image_encoder, not c.drop_image),
                                   ("text_encoder", c.text_encoder, not c.drop_text)):
            if ref is None and needed:
                problems.append(f"condition {c.name}: {label} required unless its branch is dropped")
            elif ref is not None and not Path(ref).exists():
                problems.append(f"condition {c.name}: {label} checkpoint not found: {ref}")
        ckpt = {**plan.backend, **c.backend}.get("checkpoint")
        if {**plan.backend, **c.backend}.get("kind", "toy") == "toy" and (not ckpt or not Path(ckpt).exists()):
            problems.append(f"condition {c.name}: backend checkpoint not found: {ckpt}")
    return problems


def train_backend_from_caches(manifest: DatasetManifest, image_cache: TargetCache, text_cache: TargetCache,
                              null_text: np.ndarray, config: ToyBackendConfig, train: ToyTrainConfig,
                              split: str = "train") -> tuple[ToyBackend, list[float]]:
    """Fit the toy backend on a split's stimuli paired with their frozen target embeddings."""
    ids = manifest.recording_ids(split)
    if not ids:
        raise PlanError(f"split {split!r} is empty")
    images = np.stack([load_png(manifest.root_path() / manifest.stimuli[manifest.recordings[r].stimulus_id])
                       for r in ids])
    text = text_cache.stack(ids)
    if text.ndim == 2:
        text = text[:, None, :]
    return train_toy_backend(images, text, image_cache.stack(ids), null_text, config, train)


# ---------------------------------------------------------------------------
# generation over a split
# ---------------------------------------------------------------------------


def class_prototypes(manifest: DatasetManifest) -> np.ndarray:
    """Mean colour of each class's stimulus images."""
    sums = np.zeros((manifest.n_classes, 3))
    counts = np.zeros(manifest.n_classes)
    stim_class = {m.stimulus_id: m.class_id for m in manifest.recordings.values()}
    for sid in sorted(stim_class):
        px = load_png(manifest.root_path() / manifest.stimuli[sid])
        sums[stim_class[sid]] += px.reshape(-1, 3).mean(axis=0)
        counts[stim_class[sid]] += 1
    return sums / np.maximum(counts, 1)[:, None]


def generate_split(manifest: DatasetManifest, backend_config: BackendConfig, out_dir: str | os.PathLike,
                   seed: int, image_encoder: str | None = None, text_encoder: str | None = None,
                   split: str = "test", n_images: int | None = None, image_scale: float = 1.0,
                   drop_text: bool = False, drop_image: bool = False, batch_size: int = 50) -> list[str]:
    """Reconstruct images for recordings of ``split``; writes ``gen/`` (PNG + JSON sidecar) and ``gt/``.

    With ``n_images`` larger than the split, recordings are revisited with fresh per-image seeds.
    """
    ids = manifest.recording_ids(split)
    if not ids:
        raise PlanError(f"split {split!r} is empty")
    n_images = len(ids) if n_images is None else n_images
    items = [(ids[j % len(ids)], j // len(ids)) for j in range(n_images)]
    backend, backend_hash = load_backend(backend_config)

    needed = sorted({rid for rid, _ in items})
    signals = load_signals(manifest, needed)
    hashes = {"backend": backend_hash}
    if image_encoder is not None:
        ck = load_checkpoint(image_encoder)
        img_emb = dict(zip(needed, encode(ck.build(), signals).numpy()))
        hashes["image_encoder"] = ck.content_hash
    else:
        img_emb = {rid: np.zeros(backend.image_embedding_dim, dtype=np.float32) for rid in needed}
    if text_encoder is not None:
        ck = load_checkpoint(text_encoder)
        txt_emb = dict(zip(needed, encode(ck.build(), signals).numpy()))
        hashes["text_encoder"] = ck.content_hash
    else:
        txt_emb = {rid: backend.null_text for rid in needed}

    out = Path(out_dir)
    (out / "gen").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    names = []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        bundles = [ConditioningBundle(txt_emb[rid], img_emb[rid], image_scale, drop_text, drop_image)
                   for rid, _ in chunk]
        seeds = [seed_for(seed, rid, rep) for rid, rep in chunk]
        prov = []
        for j, (rid, rep) in enumerate(chunk, start=start):
            meta = manifest.recordings[rid]
            prov.append({"recording_id": rid, "repeat": rep, "stimulus_id": meta.stimulus_id,
                         "class_id": meta.class_id, "checkpoints": hashes})
        for j, res in enumerate(generate_batch(backend, bundles, backend_config, seeds, prov), start=start):
            rid = res.provenance["recording_id"]
            name = f"{j:05d}_{rid}"
            save_png(out / "gen" / f"{name}.png", res.image)
            (out / "gen" / f"{name}.json").write_text(json.dumps(res.provenance, sort_keys=True, indent=2) + "\n",
                                                     encoding="utf-8")
            shutil.copyfile(manifest.root_path() / manifest.stimuli[res.provenance["stimulus_id"]],
                            out / "gt" / f"{name}.png")
            names.append(name)
    return names


def evaluate_dirs(gen_dir: str | os.PathLike, gt_dir: str | os.PathLike, manifest: DatasetManifest,
                  config: MetricConfig, provider: dict | None = None) -> MetricReport:
    """Score PNGs in ``gen_dir`` against same-named PNGs in ``gt_dir``.

    Class labels come from the JSON sidecars written next to generated images (or ground truth).
    """
    gen_dir, gt_dir = Path(gen_dir), Path(gt_dir)
    names = sorted(p.stem for p in gen_dir.glob("*.png"))
    if not names:
        raise EEGReconError(f"no PNG images in {gen_dir}")
    missing = [n for n in names if not (gt_dir / f"{n}.png").exists()]
    if missing:
        raise EEGReconError(f"ground truth missing for {len(missing)} images, e.g. {missing[:3]}")
    classes = []
    for n in names:
        side = next((d / f"{n}.json" for d in (gen_dir, gt_dir) if (d / f"{n}.json").exists()), None)
        if side is None:
            raise EEGReconError(f"no class label sidecar for image {n}")
        classes.append(int(json.loads(side.read_text(encoding="utf-8"))["class_id"]))
    gen = [load_png(gen_dir / f"{n}.png") for n in names]
    gt = [load_png(gt_dir / f"{n}.png") for n in names]
    provider = provider or {"kind": "standin"}
    extractor = make_provider(**provider).embed_image
    classifier = ColorPrototypeClassifier(class_prototypes(manifest))
    report = evaluate_images(gen, gt, classes, classifier, extractor, config, names)
    report.config["provider"] = provider
    return report


# ---------------------------------------------------------------------------
# results CSV and ablation
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def run_ablation(plan: ExperimentPlan) -> Path:
    problems = validate_plan(plan) if plan.conditions else []
    if problems:
        raise PlanError("; ".join(problems))
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    manifest = load_manifest(plan.manifest) if plan.conditions else None
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULTS_HEADER)
        fh.flush()
        for cond in plan.conditions:
            try:
                backend_cfg = BackendConfig(**{**plan.backend, **cond.backend})
                metric_cfg = MetricConfig(**{**plan.metrics, **cond.metrics, "seed": plan.seed})
                cond_dir = out / cond.name
                generate_split(manifest, backend_cfg, cond_dir, plan.seed,
                               image_encoder=None if cond.drop_image else cond.image_encoder,
                               text_encoder=None if cond.drop_text else cond.text_encoder,
                               split=plan.split, n_images=plan.n_images, image_scale=cond.image_scale,
                               drop_text=cond.drop_text, drop_image=cond.drop_image)
                report = evaluate_dirs(cond_dir / "gen", cond_dir / "gt", manifest, metric_cfg, plan.provider)
                (cond_dir / "metrics.json").write_text(report.to_json(), encoding="utf-8")
            except Exception:
                writer.writerow([cond.name, "FAILED", "", "", "", "", ""])
                fh.flush()
                raise
            writer.writerow([cond.name, *(_fmt(v) for v in report.row())])
            fh.flush()
    save_run_manifest(RunManifest(run_id=f"{plan.name}-seed{plan.seed}", command="ablate",
                                  config=plan_to_dict(plan), seed=plan.seed), out / "run_manifest.json")
    return csv_path


def plan_to_dict(plan: ExperimentPlan) -> dict:
    return asdict(plan)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def read_results(path: str | os.PathLike) -> list[dict]:
    """Parse a results CSV, keeping cell text; ``-`` or an empty cell marks a missing value."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ReportError(f"{path}:1: empty file")
        header = [h.strip() for h in header]
        required = ["condition", "acc", "is_mean", "fid", "ssim", "cs"]
        missing = [c for c in required if c not in header]
        if missing:
            raise ReportError(f"{path}:1: header lacks columns {missing}")
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ReportError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rec = dict(zip(header, (c.strip() for c in row)))
            if rec.get("acc") == "FAILED":
                rec["failed"] = True
                rows.append(rec)
                continue
            for col in REPORT_COLUMNS:
                cell = rec.get(col, "")
                if cell in ("", "-"):
                    rec[col] = ""
                    continue
                try:
                    Decimal(cell)
                    float(cell)
                except (InvalidOperation, ValueError):
                    raise ReportError(f"{path}:{lineno}: column {col!r} has non-numeric value {cell!r}") from None
            rows.append(rec)
    return rows


def _render_cell(col: str, cell: str) -> str:
    if cell == "":
        return "-"
    if col == "acc":
        pct = Decimal(cell) * 100
        text = format(pct.normalize(), "f")
        return text
    return cell


def render_table(rows: list[dict], title: str = "Results") -> str:
    header = ["Methods"] + [label for _, label in TABLE_COLUMNS]
    body = []
    for r in rows:
        if r.get("failed"):
            body.append([r["condition"]] + ["FAILED"] * len(TABLE_COLUMNS))
        else:
            body.append([r["condition"]] + [_render_cell(c, r.get(c, "")) for c, _ in TABLE_COLUMNS])
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

    def fmt(cells):
        return "| " + " | ".join(c.center(w) for c, w in zip(cells, widths)) + " |"

    out = [title, line, fmt(header), line, *(fmt(b) for b in body), line]
    return "\n".join(out) + "\n"


def report(results_csv: str | os.PathLike, out_dir: str | os.PathLike, title: str = "Results") -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_results(results_csv)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = render_table(rows, title)
    (out / "table.txt").write_text(table, encoding="utf-8")
    ok = [r for r in rows if not r.get("failed")]
    for col, label in TABLE_COLUMNS:
        names = [r["condition"] for r in ok if r.get(col, "") != ""]
        vals = [float(Decimal(r[col]) * (100 if col == "acc" else 1)) for r in ok if r.get(col, "") != ""]
        fig, ax = plt.subplots(figsize=(max(3.0, 1.2 * len(names) + 1), 3.0))
        ax.bar(range(len(vals)), vals, color="tab:blue")
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
        ax.set_title(label)
        fig.tight_layout()
        fig.savefig(out / f"{col}.png", dpi=100)
        plt.close(fig)
    return table
