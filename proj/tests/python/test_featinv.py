import math

import numpy as np
import pytest

import featinv


def test_version_and_catalogue():
    assert featinv.__version__ == "0.1.0"
    assert "toy" in featinv.standard_encoders()
    assert "clip-rn50" in featinv.standard_encoders()


def test_toy_capture_shapes():
    enc = featinv.Encoder("toy")
    assert enc.layers == ["layer1", "layer2", "layer3", "layer4", "base"]
    img = np.random.default_rng(0).standard_normal((3, 32, 32)).astype(np.float32)
    feats = enc.capture(img, ["layer1", "layer4", "base"])
    assert feats["layer1"].shape == (8, 16, 16)
    assert feats["layer4"].shape == (64, 2, 2)
    assert feats["base"].shape == (1, 64)
    again = enc.capture(img, ["base"])
    np.testing.assert_array_equal(feats["base"], again["base"])


def test_unknown_encoder_raises():
    with pytest.raises(ValueError):
        featinv.Encoder("no-such-encoder")


def test_noise_round_trip():
    f = np.random.default_rng(1).standard_normal((16, 8, 8)).astype(np.float32) * 3
    noisy, eps = featinv.inject_noise(f, 2.0, key=42)
    assert noisy.shape == f.shape
    assert eps.shape == (16, 64)
    assert np.abs(noisy - f).max() > 0.1
    restored = featinv.strip_noise(noisy, eps.reshape(16, 8, 8))
    assert np.abs(restored - f).max() <= 1e-5


def test_counter_normal_moments_and_determinism():
    z = featinv.counter_normal(7, 200_000)
    np.testing.assert_array_equal(z, featinv.counter_normal(7, 200_000))
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1) < 0.01
    assert not np.array_equal(z[:100], featinv.counter_normal(8, 100))


def test_metrics_match_hand_values():
    # One of two unigrams matches ("a"); BLEU-1 with no brevity penalty is 0.5.
    assert featinv.bleu("a dog", ["a cat"], 1) == pytest.approx(0.5)
    assert featinv.bleu("a dog runs", ["a dog runs"], 3) == pytest.approx(1.0)
    assert featinv.rouge_l("A dog, runs!", ["a dog runs"]) == pytest.approx(1.0)
    assert featinv.metric_tokens("A Dog, runs!") == ["a", "dog", "runs"]


def test_evaluate_captions_report():
    rep = featinv.evaluate_captions(["a red circle", "a blue square"],
                                    [["a red circle"], ["a blue square on grey"]])
    for key in ("bleu1", "bleu4", "rouge_l", "cider", "cosine_success_rate"):
        assert key in rep
    assert 0 <= rep["rouge_l"] <= 1
    assert math.isfinite(rep["cider"])


def test_toy_corpus_and_image_loading(tmp_path):
    items = featinv.make_toy_corpus(0, 8, tmp_path)
    assert len(items) == 8
    assert (tmp_path / "manifest.tsv").exists()
    assert all(it["captions"] for it in items)
    enc = featinv.Encoder("toy")
    img = enc.load_image(items[0]["path"])
    assert img.shape == (3, 32, 32)
    assert enc.capture(img, ["base"])["base"].shape == (1, 64)


def test_clip_resnet_matches_torch_reference(tmp_path):
    torch = pytest.importorskip("torch")
    clip_model = pytest.importorskip("clip.model")
    safetensors_torch = pytest.importorskip("safetensors.torch")

    gen = torch.Generator().manual_seed(3)
    ref = clip_model.ModifiedResNet(layers=(1, 1, 1, 1), output_dim=16, heads=2, input_resolution=32, width=8)
    for m in ref.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.copy_(torch.randn(m.running_mean.shape, generator=gen) * 0.1)
            m.running_var.copy_(torch.rand(m.running_var.shape, generator=gen) + 0.5)
    ref.eval()
    weights = tmp_path / "rn.safetensors"
    safetensors_torch.save_file({"visual." + k: v.contiguous() for k, v in ref.state_dict().items()}, str(weights))

    enc = featinv.Encoder.clip_resnet([1, 1, 1, 1], width=8, output_dim=16, heads=2, resolution=32)
    enc.load_weights(weights)
    x = torch.randn(1, 3, 32, 32, generator=gen)
    got = enc.capture(x[0].numpy(), ["layer2", "base"])

    with torch.no_grad():
        h = x.type(ref.conv1.weight.dtype)
        for conv, bn in [(ref.conv1, ref.bn1), (ref.conv2, ref.bn2), (ref.conv3, ref.bn3)]:
            h = torch.relu(bn(conv(h)))
        h = ref.avgpool(h)
        h = ref.layer1(h)
        layer2 = ref.layer2(h)
        want_base = ref(x)

    np.testing.assert_allclose(got["layer2"], layer2[0].numpy(), rtol=1e-4, atol=1e-5)
    np.testing.assert_allclose(got["base"], want_base.numpy(), rtol=1e-4, atol=1e-5)
