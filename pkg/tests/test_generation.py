import numpy as np
import pytest
import torch

from eegrecon.dataset import class_stimulus
from eegrecon.generation import (
    BackendConfig,
    BackendUnavailableError,
    ConditioningBundle,
    RealAdapterBackend,
    ToyBackendConfig,
    ToyDenoiser,
    ToyTrainConfig,
    generate,
    generate_batch,
    load_backend,
    load_toy_backend,
    train_toy_backend,
)
from eegrecon.metrics import ColorPrototypeClassifier

CFG = ToyBackendConfig()


def conditioning(n_classes, seed=0):
    rng = np.random.default_rng(seed)
    text = rng.standard_normal((n_classes, CFG.n_text_tokens, CFG.d_text)).astype(np.float32)
    img = rng.standard_normal((n_classes, CFG.d_img)).astype(np.float32)
    null = np.zeros((CFG.n_text_tokens, CFG.d_text), dtype=np.float32)
    return text, img, null


@pytest.fixture(scope="module")
def two_class(tmp_path_factory):
    """Toy backend trained 2k steps on two class-coloured 8x8 shapes."""
    text, img, null = conditioning(2)
    labels = np.arange(64) % 2
    images = np.stack([class_stimulus(int(c), 4, 8) for c in labels * 2])  # classes 0 and 2: distinct hues
    backend, losses = train_toy_backend(images, text[labels], img[labels], null, CFG, ToyTrainConfig(steps=2000))
    path = backend.save(tmp_path_factory.mktemp("toy") / "toy.bin")
    protos = np.stack([class_stimulus(c, 4, 8).reshape(-1, 3).mean(0) for c in (0, 2)])
    return backend, losses, path, text, img, protos


def test_loss_halves_over_training(two_class):
    _, losses, *_ = two_class
    assert np.mean(losses[-100:]) < 0.5 * np.mean(losses[:100])


def test_same_seed_same_image(two_class):
    backend, _, _, text, img, _ = two_class
    bundle = ConditioningBundle(text[0], img[0])
    a = generate(backend, bundle, BackendConfig(), seed=11)
    b = generate(backend, bundle, BackendConfig(), seed=11)
    c = generate(backend, bundle, BackendConfig(), seed=12)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.image.tobytes() != c.image.tobytes()
    assert a.image.shape == (8, 8, 3) and a.image.min() >= 0 and a.image.max() <= 1
    assert a.provenance["seed"] == 11 and a.provenance["image_scale"] == 1.0


def test_drop_image_equals_zero_scale(two_class):
    backend, _, _, text, img, _ = two_class
    dropped = generate(backend, ConditioningBundle(text[1], img[1], drop_image=True), BackendConfig(), seed=3)
    zero = generate(backend, ConditioningBundle(text[1], img[1], image_scale=0.0), BackendConfig(), seed=3)
    assert dropped.image.tobytes() == zero.image.tobytes()


def test_drop_text_uses_null_embedding(two_class):
    backend, _, _, text, img, _ = two_class
    dropped = generate(backend, ConditioningBundle(text[1], img[1], drop_text=True), BackendConfig(), seed=3)
    null = generate(backend, ConditioningBundle(backend.null_text, img[1]), BackendConfig(), seed=3)
    assert dropped.image.tobytes() == null.image.tobytes()


def test_class_conditioning_is_followed(two_class):
    backend, _, _, text, img, protos = two_class
    clf = ColorPrototypeClassifier(protos)
    for c in (0, 1):
        bundles = [ConditioningBundle(text[c], img[c])] * 100
        results = generate_batch(backend, bundles, BackendConfig(), list(range(100)))
        pred = clf.predict([r.image for r in results])
        assert np.mean(pred == c) >= 0.9


def test_checkpoint_round_trip(two_class):
    backend, _, path, text, img, _ = two_class
    loaded, digest = load_toy_backend(path)
    assert len(digest) == 64
    bundle = ConditioningBundle(text[0], img[0])
    assert generate(loaded, bundle, BackendConfig(), 5).image.tobytes() == \
        generate(backend, bundle, BackendConfig(), 5).image.tobytes()
    via_config, _ = load_backend(BackendConfig(checkpoint=str(path)))
    assert np.array_equal(via_config.null_text, backend.null_text)


def test_zero_image_dataset_generates_dark_images():
    text, img, null = conditioning(1)
    images = np.zeros((16, 8, 8, 3), dtype=np.float32)
    backend, _ = train_toy_backend(images, np.repeat(text, 16, 0), np.repeat(img, 16, 0), null, CFG,
                                   ToyTrainConfig(steps=300))
    out = generate_batch(backend, [ConditioningBundle(text[0], img[0])] * 8, BackendConfig(), list(range(8)))
    assert np.mean([r.image.mean() for r in out]) < 0.1


def test_zero_scale_training_leaves_image_branch_without_gradient():
    torch.manual_seed(0)
    model = ToyDenoiser(CFG)
    x = torch.randn(4, 3, 8, 8)
    out = model(x, torch.tensor([0, 5, 50, 199]), torch.randn(4, 8, 16), torch.randn(4, 32), 0.0)
    out.pow(2).mean().backward()
    image_params = [p for n, p in model.named_parameters()
                    if n.startswith("image_") or "to_k_ip" in n or "to_v_ip" in n]
    assert image_params
    for p in image_params:
        assert p.grad is None or torch.all(p.grad == 0)


def test_bundle_and_config_validation(two_class):
    backend, _, _, text, img, _ = two_class
    with pytest.raises(ValueError):
        ConditioningBundle(text[0], img[0], image_scale=-1.0)
    with pytest.raises(ValueError):
        BackendConfig(inference_steps=0)
    with pytest.raises(ValueError):
        generate(backend, ConditioningBundle(text[0][:, :4], img[0]), BackendConfig())


def test_missing_backend_is_explicit(tmp_path, monkeypatch):
    with pytest.raises(BackendUnavailableError):
        load_backend(BackendConfig(checkpoint=str(tmp_path / "none.bin")))
    monkeypatch.setenv("EEGRECON_WEIGHTS_DIR", str(tmp_path))
    with pytest.raises(BackendUnavailableError):
        RealAdapterBackend()
