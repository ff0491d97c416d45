"""Command-line entry point: ``eegrecon <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (JSON or YAML) whose keys mirror the long flag
names; explicit flags win over the file. Exit status is 0 on success, 1 on invalid input or
configuration, 2 on runtime failure. Diagnostics go to stderr; results go to files, and each
run leaves a ``run_manifest`` JSON next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .caption import CaptionProvider, CaptionProviderConfig
from .core import (
    PreprocessConfig,
    RunManifest,
    SchemaVersionError,
    ValidationError,
    load_manifest,
    load_png,
    save_manifest,
    save_run_manifest,
)

log = logging.getLogger("eegrecon")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _run_manifest(path: Path, command: str, args: argparse.Namespace, seed=None, checkpoints=None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    run = RunManifest(run_id=f"{command}-{Path(path).stem}", command=command, config=cfg, seed=seed,
                      checkpoints=checkpoints or {})
    save_run_manifest(run, path)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _provider_kwargs(args) -> dict:
    if args.provider == "clip":
        return {"kind": "clip"}
    return {"kind": "standin", "d_img": args.d_img, "d_text": args.d_text, "n_tokens": args.n_tokens,
            "seed": args.provider_seed}


def _add_provider_flags(p):
    p.add_argument("--provider", choices=["standin", "clip"], default="standin")
    p.add_argument("--d-img", type=int, default=1024)
    p.add_argument("--d-text", type=int, default=768)
    p.add_argument("--n-tokens", type=int, default=77)
    p.add_argument("--provider-seed", type=int, default=0)


def _caption_provider(args, class_names):
    if args.caption_mode == "external_file":
        cfg = CaptionProviderConfig("external_file", path=args.captions_file)
    else:
        cfg = CaptionProviderConfig("label_template", template=args.template)
    return CaptionProvider(cfg, class_names)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    from .dataset import SyntheticSpec, generate_synthetic

    _require(args, "out", "seed")
    spec = SyntheticSpec(args.classes, args.subjects, args.channels, args.timesteps, args.per_class,
                         args.noise, args.seed, args.stimuli_per_class, args.image_size)
    m = generate_synthetic(spec, args.out, PreprocessConfig(args.normalize))
    log.info("synthetic dataset: %d recordings, %d classes -> %s", len(m.recordings), m.n_classes, args.out)
    _run_manifest(Path(args.out) / "run_manifest_synth.json", "synth", args, args.seed)


def cmd_ingest(args):
    from .dataset import ingest

    _require(args, "root", "out")
    crop = tuple(args.crop) if args.crop else None
    m = ingest(args.root, PreprocessConfig(args.normalize, crop), dataset_id=args.dataset_id)
    save_manifest(m, args.out)
    log.info("ingested %d recordings (%d rejected), %d classes, %d subjects", len(m.recordings), len(m.rejected),
             m.n_classes, len({r.subject_id for r in m.recordings.values()}))
    _run_manifest(Path(args.out).with_suffix(".run.json"), "ingest", args)


def cmd_split(args):
    from .dataset import make_splits

    _require(args, "manifest", "seed")
    m = make_splits(load_manifest(args.manifest), tuple(args.fractions), args.seed)
    out = args.out or args.manifest
    save_manifest(m, out)
    log.info("split sizes: %s", {k: len(v) for k, v in m.splits.items()})
    _run_manifest(Path(out).with_suffix(".split.run.json"), "split", args, args.seed)


def cmd_cache_targets(args):
    from .providers import make_provider
    from .training import build_target_cache

    _require(args, "manifest", "space", "out")
    m = load_manifest(args.manifest)
    provider = make_provider(**_provider_kwargs(args))
    captions = _caption_provider(args, m.class_names) if args.space == "text" else None
    cache = build_target_cache(m, provider, args.space, path=args.out, captions=captions, pooled=args.pooled)
    log.info("%s-space cache: %d targets of shape %s (%s)", args.space, len(cache.targets), cache.target_shape,
             cache.content_hash[:12])
    _run_manifest(Path(args.out).with_suffix(".run.json"), "cache-targets", args,
                  checkpoints={"cache": cache.content_hash})


def cmd_train(args):
    from .encoder import EncoderConfig, build_encoder
    from .training import TrainConfig, eval_alignment, load_target_cache, train_alignment, write_history

    _require(args, "manifest", "cache", "space", "out", "seed")
    m = load_manifest(args.manifest)
    cache, complete = load_target_cache(args.cache)
    if not complete:
        raise ValueError(f"target cache {args.cache} is incomplete; rerun cache-targets")
    enc_cfg = EncoderConfig(m.n_channels, m.effective_timesteps(), cache.target_shape, args.layers,
                            args.hidden_dim, args.head_hidden_dim, args.leaky_slope, args.orientation)
    train_cfg = TrainConfig(args.epochs, args.batch_size, args.lr, args.weight_decay, args.lr_lambda, args.seed,
                            args.space, args.lr_decay_per)
    encoder = build_encoder(enc_cfg, seed=args.seed)
    ckpt, history = train_alignment(encoder, m, cache, train_cfg, args.train_split, args.val_split, args.subject)
    ckpt.save(args.out)
    encoder = ckpt.build()
    hist_path = args.history or str(Path(args.out).with_suffix(".history.csv"))
    write_history(hist_path, history)
    evals = {s: eval_alignment(encoder, m, cache, s, args.subject) for s in ("val", "test") if m.splits.get(s)}
    for s, e in evals.items():
        log.info("%s: mse=%.5f retrieval_top1=%.3f (n=%d)", s, e["mse"], e["retrieval_top1"], e["n"])
    Path(args.out).with_suffix(".eval.json").write_text(json.dumps(evals, indent=2, sort_keys=True) + "\n")
    _run_manifest(Path(args.out).with_suffix(".run.json"), "train", args, args.seed,
                  {"encoder": ckpt.content_hash, "cache": cache.content_hash})


def cmd_train_backend(args):
    from .experiments import train_backend_from_caches
    from .generation import ToyBackendConfig, ToyTrainConfig
    from .providers import make_provider
    from .training import load_target_cache

    _require(args, "manifest", "image_cache", "text_cache", "out", "seed")
    m = load_manifest(args.manifest)
    img_cache, _ = load_target_cache(args.image_cache)
    txt_cache, _ = load_target_cache(args.text_cache)
    provider = make_provider(**_provider_kwargs(args))
    if provider.extractor_id != txt_cache.extractor_id:
        raise ValueError(f"provider {provider.extractor_id} differs from the text cache's {txt_cache.extractor_id}")
    null_text = provider.embed_text("")
    if len(txt_cache.target_shape) == 1:
        null_text = null_text.mean(axis=0, keepdims=True)
    stim = next(iter(m.stimuli.values()))
    size = load_png(m.root_path() / stim).shape[0]
    cfg = ToyBackendConfig(image_size=size, channels=args.channels, n_blocks=args.blocks,
                           d_text=null_text.shape[1], n_text_tokens=null_text.shape[0],
                           d_img=img_cache.target_shape[0], n_img_tokens=args.n_img_tokens)
    train = ToyTrainConfig(args.steps, args.batch_size, args.lr, args.seed, args.p_drop_text, args.p_drop_image,
                           args.cond_noise, args.image_scale)
    backend, losses = train_backend_from_caches(m, img_cache, txt_cache, null_text, cfg, train, args.split)
    backend.save(args.out)
    k = max(1, len(losses) // 10)
    log.info("toy backend loss %.4f -> %.4f", sum(losses[:k]) / k, sum(losses[-k:]) / k)
    Path(args.out).with_suffix(".losses.csv").write_text(
        "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses)))
    _run_manifest(Path(args.out).with_suffix(".run.json"), "train-backend", args, args.seed)


def cmd_generate(args):
    from .experiments import generate_split
    from .generation import BackendConfig

    _require(args, "manifest", "backend", "out", "seed")
    m = load_manifest(args.manifest)
    cfg = BackendConfig(kind=args.backend_kind, inference_steps=args.steps, checkpoint=args.backend, seed=args.seed)
    names = generate_split(m, cfg, args.out, args.seed,
                           image_encoder=None if args.drop_image else args.image_encoder,
                           text_encoder=None if args.drop_text else args.text_encoder,
                           split=args.split, n_images=args.n_images, image_scale=args.image_scale,
                           drop_text=args.drop_text, drop_image=args.drop_image)
    log.info("generated %d images -> %s", len(names), args.out)
    _run_manifest(Path(args.out) / "run_manifest.json", "generate", args, args.seed)


def cmd_evaluate(args):
    from .experiments import evaluate_dirs
    from .metrics import MetricConfig

    _require(args, "gen", "gt", "manifest")
    m = load_manifest(args.manifest)
    cfg = MetricConfig(acc_n=args.acc_n, acc_k=args.acc_k, acc_trials=args.acc_trials, is_splits=args.is_splits,
                       ssim_window=args.ssim_window, ssim_sigma=args.ssim_sigma, seed=args.seed or 0)
    report = evaluate_dirs(args.gen, args.gt, m, cfg, _provider_kwargs(args))
    out = Path(args.out or Path(args.gen).parent / "metrics.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    if args.csv:
        from .experiments import RESULTS_HEADER
        Path(args.csv).write_text(",".join(RESULTS_HEADER) + "\n" + report.csv_row(args.condition))
    log.info("ACC=%.4f IS=%.3f FID=%.4f SSIM=%.4f CS=%.4f", report.acc, report.is_mean, report.fid,
             report.ssim, report.clip_sim)
    _run_manifest(out.with_suffix(".run.json"), "evaluate", args, args.seed)


def cmd_ablate(args):
    from .experiments import load_plan, run_ablation

    _require(args, "plan")
    plan = load_plan(args.plan)
    csv_path = run_ablation(plan)
    log.info("ablation results -> %s", csv_path)


def cmd_report(args):
    from .experiments import report

    _require(args, "results", "out")
    table = report(args.results, args.out, args.title)
    sys.stderr.write(table)
    _run_manifest(Path(args.out) / "run_manifest.json", "report", args)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eegrecon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON/YAML file of flag defaults")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write a synthetic dataset")
    p.add_argument("--out")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--subjects", type=int, default=1)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--timesteps", type=int, default=64)
    p.add_argument("--per-class", type=int, default=32)
    p.add_argument("--stimuli-per-class", type=int, default=8)
    p.add_argument("--image-size", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--normalize", choices=["none", "per_channel_zscore"], default="per_channel_zscore")
    p.add_argument("--seed", type=int)

    p = add("ingest", cmd_ingest, "build a manifest from a dataset directory")
    p.add_argument("--root")
    p.add_argument("--out")
    p.add_argument("--dataset-id")
    p.add_argument("--normalize", choices=["none", "per_channel_zscore"], default="per_channel_zscore")
    p.add_argument("--crop", type=int, nargs=2, metavar=("T_START", "T_END"))

    p = add("split", cmd_split, "stratified stimulus-level train/val/test split")
    p.add_argument("--manifest")
    p.add_argument("--fractions", type=float, nargs=3, default=[0.8, 0.1, 0.1], metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("cache-targets", cmd_cache_targets, "embed stimuli or captions into alignment targets")
    p.add_argument("--manifest")
    p.add_argument("--space", choices=["image", "text"])
    p.add_argument("--out")
    p.add_argument("--caption-mode", choices=["label_template", "external_file"], default="label_template")
    p.add_argument("--template", default="an image of {label}")
    p.add_argument("--captions-file")
    p.add_argument("--pooled", action="store_true", help="mean-pool text tokens into one vector")
    _add_provider_flags(p)

    p = add("train", cmd_train, "align an EEG encoder to cached targets")
    p.add_argument("--manifest")
    p.add_argument("--cache")
    p.add_argument("--space", choices=["image", "text"])
    p.add_argument("--out")
    p.add_argument("--history")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--lr-lambda", type=float, default=0.999)
    p.add_argument("--lr-decay-per", choices=["epoch", "step"], default="epoch")
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--hidden-dim", type=int, default=512)
    p.add_argument("--head-hidden-dim", type=int, default=512)
    p.add_argument("--leaky-slope", type=float, default=0.01)
    p.add_argument("--orientation", choices=["time", "channel"], default="time")
    p.add_argument("--train-split", default="train")
    p.add_argument("--val-split", default="val")
    p.add_argument("--subject", type=int)
    p.add_argument("--seed", type=int)

    p = add("train-backend", cmd_train_backend, "train the toy diffusion backend")
    p.add_argument("--manifest")
    p.add_argument("--image-cache")
    p.add_argument("--text-cache")
    p.add_argument("--out")
    p.add_argument("--split", default="train")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--n-img-tokens", type=int, default=4)
    p.add_argument("--p-drop-text", type=float, default=0.1)
    p.add_argument("--p-drop-image", type=float, default=0.1)
    p.add_argument("--cond-noise", type=float, default=0.0)
    p.add_argument("--image-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    _add_provider_flags(p)

    p = add("generate", cmd_generate, "reconstruct images for a split")
    p.add_argument("--manifest")
    p.add_argument("--image-encoder")
    p.add_argument("--text-encoder")
    p.add_argument("--backend", help="toy backend checkpoint")
    p.add_argument("--backend-kind", choices=["toy", "real_adapter"], default="toy")
    p.add_argument("--split", default="test")
    p.add_argument("--n-images", type=int)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--image-scale", type=float, default=1.0)
    p.add_argument("--drop-text", action="store_true")
    p.add_argument("--drop-image", action="store_true")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = add("evaluate", cmd_evaluate, "score generated images against ground truth")
    p.add_argument("--gen")
    p.add_argument("--gt")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.add_argument("--condition", default="run")
    p.add_argument("--acc-n", type=int, default=50)
    p.add_argument("--acc-k", type=int, default=1)
    p.add_argument("--acc-trials", type=int, default=40)
    p.add_argument("--is-splits", type=int, default=10)
    p.add_argument("--ssim-window", type=int, default=11)
    p.add_argument("--ssim-sigma", type=float, default=1.5)
    p.add_argument("--seed", type=int)
    _add_provider_flags(p)

    p = add("ablate", cmd_ablate, "run an ablation plan (JSON)")
    p.add_argument("--plan")

    p = add("report", cmd_report, "render a results CSV as a table and bar charts")
    p.add_argument("--results")
    p.add_argument("--out")
    p.add_argument("--title", default="Results")
    return parser


def _load_config_file(path: str, command: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) if Path(path).suffix in (".yaml", ".yml") else json.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    if isinstance(data.get(command), dict):
        data = data[command]
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError("a subcommand is required")
    if getattr(args, "config", None):
        defaults = _load_config_file(args.config, args.command)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {', '.join(unknown)}")
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    pkg_log = logging.getLogger("eegrecon")
    pkg_log.addHandler(handler)
    pkg_log.setLevel(logging.INFO)
    pkg_log.propagate = False
    try:
        args = parse_args(argv)
        if args.verbose:
            pkg_log.setLevel(logging.DEBUG)
        args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except SystemExit as exc:  # argparse --help
        return 0 if exc.code in (0, None) else 1
    except ValidationError as exc:
        sys.stderr.write("validation failed:\n" + "".join(f"  - {v}\n" for v in exc.violations))
        return 1
    except (ValueError, SchemaVersionError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        sys.stderr.write(f"runtime error: {type(exc).__name__}: {exc}\n")
        return 2
    finally:
        pkg_log.removeHandler(handler)
        pkg_log.propagate = True
    return 0


if __name__ == "__main__":
    sys.exit(main())
