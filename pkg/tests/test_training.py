import csv
import math

import numpy as np
import pytest
import torch

from eegrecon.caption import CaptionProvider, CaptionProviderConfig
from eegrecon.core import ShapeError
from eegrecon.encoder import EncoderConfig, build_encoder
from eegrecon.providers import StandInProvider
from eegrecon.training import (
    TargetCache,
    TargetCacheError,
    TrainConfig,
    TrainingDivergedError,
    build_target_cache,
    eval_alignment,
    load_target_cache,
    lr_at,
    make_optimizer,
    mse_loss,
    retrieval_top1,
    train_alignment,
    write_history,
)


class CountingProvider(StandInProvider):
    def __init__(self, fail_on=None, **kw):
        super().__init__(**kw)
        self.calls = 0
        self.fail_on = fail_on

    def embed_image(self, pixels):
        self.calls += 1
        if self.fail_on is not None and self.calls == self.fail_on:
            raise RuntimeError("provider offline")
        return super().embed_image(pixels)

    def embed_text(self, text):
        self.calls += 1
        return super().embed_text(text)


def tiny_encoder(manifest, shape, seed=0):
    cfg = EncoderConfig(manifest.n_channels, manifest.n_timesteps, shape, rnn_layers=1, hidden_dim=16,
                        head_hidden_dim=16)
    return build_encoder(cfg, seed=seed)


@pytest.fixture(scope="module")
def image_cache(split_manifest, provider):
    return build_target_cache(split_manifest, provider, "image")


def test_mse_examples():
    t = torch.tensor([0.3, -2.0])
    assert mse_loss(t, t).item() == 0
    assert mse_loss(t + 1, t).item() == pytest.approx(1.0)
    assert mse_loss(np.array([1.0, 2.0]), np.zeros(2)) == 2.5
    with pytest.raises(ShapeError):
        mse_loss(np.zeros(2), np.zeros(3))


def test_lr_closed_form():
    cfg = TrainConfig()
    assert lr_at(cfg, 100) == pytest.approx(2.71e-4, abs=5e-7)
    assert lr_at(cfg, 0) == 3e-4


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(lr_lambda=1.5)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_weight_decay_contracts_with_zero_gradient():
    enc = build_encoder(EncoderConfig(4, 5, (3,), 1, 4, 4), seed=0)
    cfg = TrainConfig(lr=1e-2, weight_decay=0.1)
    opt = make_optimizer(enc.parameters(), cfg)
    before = [p.detach().clone() for p in enc.parameters()]
    for p in enc.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    for b, p in zip(before, enc.parameters()):
        torch.testing.assert_close(p.detach(), b * (1 - 1e-2 * 0.1), rtol=0, atol=1e-7)
        assert torch.all(p.detach().abs() <= b.abs())


def test_cache_shape_and_purity(split_manifest, image_cache):
    assert len(image_cache.targets) == 128
    assert image_cache.target_shape == (32,)
    by_stim = {}
    for rid, meta in split_manifest.recordings.items():
        by_stim.setdefault(meta.stimulus_id, []).append(image_cache.targets[rid])
    for vecs in by_stim.values():
        assert all(np.array_equal(v, vecs[0]) for v in vecs)


def test_text_cache_token_grid_and_pooled(split_manifest, provider):
    caps = CaptionProvider(CaptionProviderConfig(), split_manifest.class_names)
    grid = build_target_cache(split_manifest, provider, "text", captions=caps)
    pooled = build_target_cache(split_manifest, provider, "text", captions=caps, pooled=True)
    assert grid.target_shape == (8, 16)
    assert pooled.target_shape == (16,)
    rid = sorted(split_manifest.recordings)[0]
    np.testing.assert_allclose(pooled.targets[rid], grid.targets[rid].mean(axis=0), rtol=1e-6)


def test_cache_rerun_makes_no_provider_calls(tmp_path, split_manifest):
    p = CountingProvider(d_img=32, d_text=16, n_tokens=8)
    first = build_target_cache(split_manifest, p, "image", path=tmp_path / "c.bin")
    n_distinct = len({m.stimulus_id for m in split_manifest.recordings.values()})
    assert p.calls == n_distinct
    p.calls = 0
    again = build_target_cache(split_manifest, p, "image", path=tmp_path / "c.bin")
    assert p.calls == 0
    assert again.content_hash == first.content_hash


def test_cache_failure_persists_partial_and_resumes(tmp_path, split_manifest):
    p = CountingProvider(fail_on=5, d_img=32, d_text=16, n_tokens=8)
    with pytest.raises(TargetCacheError, match="recording rec_"):
        build_target_cache(split_manifest, p, "image", path=tmp_path / "c.bin")
    partial, complete = load_target_cache(tmp_path / "c.bin")
    assert not complete and 0 < len(partial.targets) < 128
    p.fail_on, p.calls = None, 0
    full = build_target_cache(split_manifest, p, "image", path=tmp_path / "c.bin")
    assert len(full.targets) == 128
    assert p.calls == 32 - 4
    reference = build_target_cache(split_manifest, StandInProvider(32, 16, 8), "image")
    for rid in reference.targets:
        assert np.array_equal(full.targets[rid], reference.targets[rid])


def test_lr_history_and_constant_lambda(split_manifest, image_cache):
    enc = tiny_encoder(split_manifest, (32,))
    _, hist = train_alignment(enc, split_manifest, image_cache, TrainConfig(epochs=4, batch_size=16))
    assert [h["lr"] for h in hist] == [3e-4 * 0.999 ** k for k in range(4)]
    enc = tiny_encoder(split_manifest, (32,))
    _, hist = train_alignment(enc, split_manifest, image_cache,
                              TrainConfig(epochs=3, batch_size=16, lr_lambda=1.0))
    assert {h["lr"] for h in hist} == {3e-4}


def test_per_step_decay(split_manifest, image_cache):
    enc = tiny_encoder(split_manifest, (32,))
    _, hist = train_alignment(enc, split_manifest, image_cache,
                              TrainConfig(epochs=3, batch_size=16, lr_decay_per="step"))
    steps_per_epoch = 64 // 16
    assert hist[2]["lr"] == pytest.approx(3e-4 * 0.999 ** (2 * steps_per_epoch), rel=1e-12)


def test_one_small_step_decreases_loss(split_manifest, image_cache):
    ids = split_manifest.recording_ids("train")[:8]
    from eegrecon.dataset import load_signals

    x = torch.from_numpy(load_signals(split_manifest, ids))
    y = torch.from_numpy(image_cache.stack(ids))
    enc = tiny_encoder(split_manifest, (32,)).train()
    opt = make_optimizer(enc.parameters(), TrainConfig(lr=1e-4))
    before = mse_loss(enc(x), y)
    opt.zero_grad()
    before.backward()
    opt.step()
    with torch.no_grad():
        after = mse_loss(enc(x), y)
    assert after.item() < before.item()


def test_training_is_bitwise_reproducible(tmp_path, split_manifest, image_cache):
    runs = []
    for k in range(2):
        enc = tiny_encoder(split_manifest, (32,), seed=4)
        ckpt, hist = train_alignment(enc, split_manifest, image_cache, TrainConfig(epochs=5, batch_size=16, seed=4))
        write_history(tmp_path / f"h{k}.csv", hist)
        runs.append((ckpt.to_bytes(), (tmp_path / f"h{k}.csv").read_bytes()))
    assert runs[0] == runs[1]


def test_history_csv_header(tmp_path):
    write_history(tmp_path / "h.csv", [{"epoch": 0, "train_mse": 0.5, "val_mse": 0.25, "lr": 3e-4}])
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows == [["epoch", "train_mse", "val_mse", "lr"], ["0", "0.5", "0.25", "0.0003"]]


def test_returns_best_validation_checkpoint(split_manifest, image_cache):
    enc = tiny_encoder(split_manifest, (32,))
    ckpt, hist = train_alignment(enc, split_manifest, image_cache, TrainConfig(epochs=6, batch_size=16, lr=3e-3))
    best = min(hist, key=lambda h: h["val_mse"])
    got = eval_alignment(ckpt.build(), split_manifest, image_cache, "val")["mse"]
    assert got == pytest.approx(best["val_mse"], rel=1e-5)


def test_shape_mismatch_preflight(split_manifest, image_cache):
    with pytest.raises(ShapeError):
        train_alignment(tiny_encoder(split_manifest, (31,)), split_manifest, image_cache, TrainConfig(epochs=1))
    with pytest.raises(ShapeError):
        train_alignment(tiny_encoder(split_manifest, (32,)), split_manifest, image_cache,
                        TrainConfig(epochs=1, space="text"))


def test_non_finite_loss_aborts(split_manifest, image_cache):
    bad = TargetCache(image_cache.extractor_id, "image",
                      {k: np.full_like(v, np.inf) for k, v in image_cache.targets.items()})
    with pytest.raises(TrainingDivergedError, match="epoch 0, step 0"):
        train_alignment(tiny_encoder(split_manifest, (32,)), split_manifest, bad, TrainConfig(epochs=1))


class Oracle(torch.nn.Module):
    def __init__(self, lookup):
        super().__init__()
        self.lookup = lookup
        self.config = EncoderConfig(16, 64, (32,), 1, 1, 1)

    def forward(self, x):
        return torch.stack([self.lookup[s.numpy().tobytes()] for s in x])


def test_exact_target_stub(split_manifest, image_cache):
    from eegrecon.dataset import load_signals

    ids = split_manifest.recording_ids("test")
    sigs = load_signals(split_manifest, ids)
    lookup = {s.tobytes(): torch.from_numpy(image_cache.targets[r])
              for s, r in zip(sigs, ids)}
    res = eval_alignment(Oracle(lookup), split_manifest, image_cache, "test")
    assert res["retrieval_top1"] == 1.0 and res["mse"] == 0.0


def test_random_outputs_retrieve_at_chance():
    rng = np.random.default_rng(0)
    trials, n = 2000, 50
    hits = 0.0
    for _ in range(trials):
        targets = rng.standard_normal((n, 16))
        hits += retrieval_top1(rng.standard_normal((n, 16)), targets) * n
    p = 1 / n
    sigma = math.sqrt(p * (1 - p) / (trials * n))
    assert abs(hits / (trials * n) - p) < 3 * sigma


def test_random_encoder_retrieves_near_chance(split_manifest, image_cache):
    # 4 distinct targets; an untrained encoder should not be far above 1/4 on average
    scores = [eval_alignment(tiny_encoder(split_manifest, (32,), seed=s).eval(), split_manifest, image_cache,
                             "test")["retrieval_top1"] for s in range(20)]
    assert abs(np.mean(scores) - 0.25) < 0.2
