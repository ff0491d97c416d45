import csv
import json
import shutil

import pytest

from eegrecon.cli import main
from eegrecon.core import load_manifest, load_run_manifest
from eegrecon.experiments import render_table

PROVIDER = ["--d-img", "32", "--d-text", "16", "--n-tokens", "8"]
TABLE_I = "condition,acc,is_mean,is_std,fid,ssim,cs\nOriginal,0.952,28.11,,69.97,0.2277,0.7575\n"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def quick(tmp_path_factory):
    """Synthetic dataset with briefly trained encoders and backend: wiring, not quality."""
    d = tmp_path_factory.mktemp("quick")
    m = d / "data" / "manifest.json"
    assert run("synth", "--out", d / "data", "--per-class", 8, "--stimuli-per-class", 4, "--seed", 1) == 0
    assert run("split", "--manifest", m, "--fractions", 0.5, 0.25, 0.25, "--seed", 0) == 0
    assert run("cache-targets", "--manifest", m, "--space", "image", "--out", d / "img.cache", *PROVIDER) == 0
    assert run("cache-targets", "--manifest", m, "--space", "text", "--out", d / "txt.cache", *PROVIDER) == 0
    for space, cache in (("image", "img"), ("text", "txt")):
        assert run("train", "--manifest", m, "--cache", d / f"{cache}.cache", "--space", space,
                   "--out", d / f"{space}.ckpt", "--epochs", 2, "--batch-size", 4, "--layers", 1,
                   "--hidden-dim", 8, "--head-hidden-dim", 8, "--seed", 0) == 0
    assert run("train-backend", "--manifest", m, "--image-cache", d / "img.cache", "--text-cache", d / "txt.cache",
               "--out", d / "toy.ckpt", "--steps", 20, "--channels", 8, "--blocks", 1, "--seed", 0, *PROVIDER) == 0
    return d


def test_synth_example(tmp_path, capsys):
    code = run("synth", "--classes", 4, "--channels", 16, "--timesteps", 64, "--per-class", 32, "--seed", 7,
               "--out", tmp_path)
    assert code == 0
    m = load_manifest(tmp_path / "manifest.json")
    assert len(m.recordings) == 128
    run_manifest = load_run_manifest(tmp_path / "run_manifest_synth.json")
    assert run_manifest.seed == 7 and run_manifest.command == "synth"
    out = capsys.readouterr()
    assert out.out == "" and "128 recordings" in out.err


def test_unknown_flag_is_usage_error(capsys):
    assert run("synth", "--bogus", 1) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand(capsys):
    assert run() == 1


def test_help_exits_zero():
    assert run("--help") == 0


def test_seed_is_mandatory(quick, capsys):
    assert run("train", "--manifest", quick / "data/manifest.json", "--cache", quick / "img.cache",
               "--space", "image", "--out", quick / "x.ckpt") == 1
    assert "--seed" in capsys.readouterr().err


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "synth.yaml"
    cfg.write_text("classes: 3\nper-class: 5\nseed: 2\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "a", "--per-class", 4) == 0
    m = load_manifest(tmp_path / "a/manifest.json")
    assert m.n_classes == 3 and len(m.recordings) == 12
    cfg_json = tmp_path / "synth.json"
    cfg_json.write_text(json.dumps({"synth": {"classes": 2, "per_class": 3, "seed": 2}}))
    assert run("synth", "--config", cfg_json, "--out", tmp_path / "b") == 0
    assert len(load_manifest(tmp_path / "b/manifest.json").recordings) == 6


def test_config_file_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"colour": "blue"}')
    assert run("synth", "--config", cfg, "--out", tmp_path) == 1
    assert "colour" in capsys.readouterr().err


def test_ingest_empty_dir_exit_code(tmp_path, capsys):
    assert run("ingest", "--root", tmp_path, "--out", tmp_path / "m.json") == 1
    assert "no recordings found" in capsys.readouterr().err


def test_ingest_cli(tmp_path):
    assert run("synth", "--out", tmp_path / "d", "--classes", 2, "--per-class", 4, "--seed", 0) == 0
    assert run("ingest", "--root", tmp_path / "d", "--out", tmp_path / "m.json", "--crop", 8, 40) == 0
    m = load_manifest(tmp_path / "m.json")
    assert m.effective_timesteps() == 32 and len(m.recordings) == 8


def test_pipeline_outputs(quick):
    for name in ("img.cache", "txt.cache", "image.ckpt", "text.ckpt", "toy.ckpt", "image.history.csv",
                 "image.run.json", "toy.run.json", "toy.losses.csv"):
        assert (quick / name).exists(), name
    rows = list(csv.reader(open(quick / "image.history.csv")))
    assert rows[0] == ["epoch", "train_mse", "val_mse", "lr"] and len(rows) == 3
    run_manifest = load_run_manifest(quick / "image.run.json")
    assert set(run_manifest.checkpoints) == {"encoder", "cache"}


def test_train_backend_rejects_mismatched_provider(quick, tmp_path, capsys):
    code = run("train-backend", "--manifest", quick / "data/manifest.json", "--image-cache", quick / "img.cache",
               "--text-cache", quick / "txt.cache", "--out", tmp_path / "t.ckpt", "--seed", 0,
               "--d-img", 32, "--d-text", 16, "--n-tokens", 9)
    assert code == 1
    assert "differs" in capsys.readouterr().err


def test_generate_and_evaluate_identical_dirs(quick, tmp_path):
    m = quick / "data/manifest.json"
    assert run("generate", "--manifest", m, "--image-encoder", quick / "image.ckpt", "--text-encoder",
               quick / "text.ckpt", "--backend", quick / "toy.ckpt", "--out", tmp_path / "g", "--seed", 1) == 0
    pngs = sorted((tmp_path / "g/gen").glob("*.png"))
    assert len(pngs) == 8
    side = json.loads(pngs[0].with_suffix(".json").read_text())
    assert {"recording_id", "class_id", "seed", "checkpoints", "image_scale"} <= set(side)
    # score the ground truth against itself
    same = tmp_path / "same"
    shutil.copytree(tmp_path / "g/gt", same)
    for js in (tmp_path / "g/gen").glob("*.json"):
        shutil.copy(js, same / js.name)
    assert run("evaluate", "--gen", same, "--gt", tmp_path / "g/gt", "--manifest", m, "--acc-n", 4,
               "--ssim-window", 7, "--is-splits", 1, "--out", tmp_path / "same.json", *PROVIDER) == 0
    rep = json.loads((tmp_path / "same.json").read_text())
    assert rep["fid"] < 1e-6
    assert rep["ssim"] == pytest.approx(1.0, abs=1e-9)
    assert rep["clip_sim"] == pytest.approx(1.0)


def write_plan(path, quick, conditions, **extra):
    plan = {"manifest": str(quick / "data/manifest.json"), "out_dir": str(path.parent / "ablation"), "seed": 5,
            "backend": {"kind": "toy", "checkpoint": str(quick / "toy.ckpt")},
            "metrics": {"acc_n": 4, "ssim_window": 7, "is_splits": 2},
            "provider": {"kind": "standin", "d_img": 32, "d_text": 16, "n_tokens": 8},
            "conditions": conditions, **extra}
    path.write_text(json.dumps(plan))
    return path


def conds(quick):
    img, txt = str(quick / "image.ckpt"), str(quick / "text.ckpt")
    return [
        {"name": "Original", "image_encoder": img, "text_encoder": txt},
        {"name": "Only Image", "image_encoder": img, "drop_text": True},
        {"name": "Only Text (label)", "text_encoder": txt, "drop_image": True},
        {"name": "half scale", "image_encoder": img, "text_encoder": txt, "image_scale": 0.5},
        {"name": "ten steps", "image_encoder": img, "text_encoder": txt, "backend": {"inference_steps": 10}},
    ]


def test_ablate_five_conditions(quick, tmp_path):
    plan = write_plan(tmp_path / "plan.json", quick, conds(quick))
    assert run("ablate", "--plan", plan) == 0
    rows = list(csv.reader(open(tmp_path / "ablation/results.csv")))
    assert rows[0] == ["condition", "acc", "is_mean", "is_std", "fid", "ssim", "cs"]
    assert [r[0] for r in rows[1:]] == [c["name"] for c in conds(quick)]
    assert all(float(v) == float(v) for r in rows[1:] for v in r[1:])
    assert load_run_manifest(tmp_path / "ablation/run_manifest.json").seed == 5


def test_one_condition_ablation_matches_manual_run(quick, tmp_path):
    plan = write_plan(tmp_path / "plan.json", quick, conds(quick)[:1])
    assert run("ablate", "--plan", plan) == 0
    m = quick / "data/manifest.json"
    assert run("generate", "--manifest", m, "--image-encoder", quick / "image.ckpt", "--text-encoder",
               quick / "text.ckpt", "--backend", quick / "toy.ckpt", "--out", tmp_path / "manual", "--seed", 5) == 0
    assert run("evaluate", "--gen", tmp_path / "manual/gen", "--gt", tmp_path / "manual/gt", "--manifest", m,
               "--acc-n", 4, "--ssim-window", 7, "--is-splits", 2, "--seed", 5, "--csv", tmp_path / "manual.csv",
               "--condition", "Original", *PROVIDER) == 0
    assert (tmp_path / "manual.csv").read_bytes() == (tmp_path / "ablation/results.csv").read_bytes()
    for a in sorted((tmp_path / "manual/gen").glob("*.png")):
        assert a.read_bytes() == (tmp_path / "ablation/Original/gen" / a.name).read_bytes()


def test_empty_plan_writes_header_only(quick, tmp_path):
    plan = write_plan(tmp_path / "plan.json", quick, [])
    assert run("ablate", "--plan", plan) == 0
    assert (tmp_path / "ablation/results.csv").read_text() == "condition,acc,is_mean,is_std,fid,ssim,cs\n"


def test_plan_missing_checkpoint(quick, tmp_path, capsys):
    plan = write_plan(tmp_path / "plan.json", quick, [{"name": "x", "image_encoder": "nope.ckpt",
                                                       "text_encoder": str(quick / "text.ckpt")}])
    assert run("ablate", "--plan", plan) == 1
    assert "nope.ckpt" in capsys.readouterr().err
    assert not (tmp_path / "ablation").exists()


def test_plan_duplicate_names(quick, tmp_path, capsys):
    c = conds(quick)[0]
    plan = write_plan(tmp_path / "plan.json", quick, [c, c])
    assert run("ablate", "--plan", plan) == 1
    assert "duplicate" in capsys.readouterr().err


def test_plan_needs_seed(quick, tmp_path):
    plan = write_plan(tmp_path / "plan.json", quick, [])
    d = json.loads(plan.read_text())
    del d["seed"]
    plan.write_text(json.dumps(d))
    assert run("ablate", "--plan", plan) == 1


def test_failed_condition_leaves_marker_row(quick, tmp_path):
    bad = dict(conds(quick)[0], name="too many steps", backend={"inference_steps": 500})
    plan = write_plan(tmp_path / "plan.json", quick, [conds(quick)[0], bad, conds(quick)[1]])
    assert run("ablate", "--plan", plan) != 0
    rows = list(csv.reader(open(tmp_path / "ablation/results.csv")))
    assert [r[0] for r in rows[1:]] == ["Original", "too many steps"]
    assert rows[2][1] == "FAILED"


def test_report_renders_table_row_verbatim(tmp_path):
    (tmp_path / "r.csv").write_text(TABLE_I)
    assert run("report", "--results", tmp_path / "r.csv", "--out", tmp_path / "rep") == 0
    table = (tmp_path / "rep/table.txt").read_text()
    row = next(line for line in table.splitlines() if "Original" in line)
    assert [c.strip() for c in row.strip("|").split("|")] == ["Original", "95.2", "28.11", "69.97", "0.2277",
                                                              "0.7575"]
    for col in ("acc", "is_mean", "fid", "ssim", "cs"):
        assert (tmp_path / "rep" / f"{col}.png").stat().st_size > 0


def test_report_non_numeric_cell(tmp_path, capsys):
    (tmp_path / "r.csv").write_text("condition,acc,is_mean,is_std,fid,ssim,cs\na,0.5,1,0,2,0.1,0.2\nb,0.4,x,0,2,0.1,0.2\n")
    assert run("report", "--results", tmp_path / "r.csv", "--out", tmp_path / "rep") == 1
    err = capsys.readouterr().err
    assert "is_mean" in err and ":3:" in err


def test_report_short_row(tmp_path, capsys):
    (tmp_path / "r.csv").write_text("condition,acc,is_mean,is_std,fid,ssim,cs\na,0.5,1\n")
    assert run("report", "--results", tmp_path / "r.csv", "--out", tmp_path / "rep") == 1
    assert ":2:" in capsys.readouterr().err


def test_render_table_marks_failed_and_missing():
    rows = [{"condition": "a", "acc": "0.25", "is_mean": "", "fid": "1", "ssim": "0.5", "cs": "0.1"},
            {"condition": "b", "failed": True}]
    table = render_table(rows, "T")
    assert "25" in table and "-" in table and "FAILED" in table
