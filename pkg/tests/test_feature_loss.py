import numpy as np
import pytest
import torch

from speech_inpainting import corpus, dsp, training
from speech_inpainting.corpus import WordSegment
from speech_inpainting.dsp import ContractError, LogMagnitude
from speech_inpainting.feature_loss import (SpeechVGG, SpeechVGGConfig, classify_word,
                                            deep_feature_loss, feature_loss_to, load_extractor,
                                            pixel_loss, save_extractor, target_features)

SMALL = SpeechVGGConfig(n_classes=10, width=0.125, fc_units=32)


def small_vgg(seed=0, **kw):
    torch.manual_seed(seed)
    return SpeechVGG(SpeechVGGConfig(**{**SMALL.to_dict(), **kw})).eval()


def mean_abs_oracle(a, b):
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    return sum(abs(x - y) for x, y in zip(a, b)) / len(a)


# extractor -------------------------------------------------------------------

def test_tap_shapes():
    model = small_vgg()
    taps = model.taps(torch.randn(2, 1, 128, 128))
    assert [t.shape[-1] for t in taps] == [64, 32, 16, 8, 4]
    assert [tuple(t.shape[1:]) for t in taps] == SMALL.tap_shapes()


def test_full_width_channels():
    assert [c for c, _, _ in SpeechVGGConfig().tap_shapes()] == [64, 128, 256, 512, 512]


def test_taps_deterministic_and_finite():
    model = small_vgg()
    x = torch.randn(1, 1, 128, 128)
    for a, b in zip(model.taps(x), model.taps(x)):
        assert torch.equal(a, b)
    assert all(torch.isfinite(t).all() for t in model.taps(torch.zeros(1, 1, 128, 128)))


def test_tap_shape_mismatch():
    with pytest.raises(ContractError):
        small_vgg().taps(torch.zeros(1, 1, 64, 128))


def test_classify_word_argmax_and_ties():
    model = small_vgg()
    last = model.head[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.copy_(torch.tensor([1.0, 3.0, 3.0, 0, 0, 0, 0, 0, 0, 0]))
    assert classify_word(np.zeros((128, 128)), model) == 1
    with torch.no_grad():
        last.bias[7] = 5.0
    assert classify_word(LogMagnitude(np.zeros((128, 128)), normalized=True), model) == 7


def test_extractor_checkpoint_round_trip(tmp_path):
    model = small_vgg(batch_norm=True)
    words = [f"w{i}" for i in range(10)]
    save_extractor(model, tmp_path / "vgg.npz", words)
    back, vocab = load_extractor(tmp_path / "vgg.npz")
    assert vocab == words and back.cfg == model.cfg
    x = torch.randn(1, 1, 128, 128)
    assert torch.equal(back(x), model(x))
    with pytest.raises(ContractError):
        save_extractor(model, tmp_path / "bad.npz", words[:3])


# losses ----------------------------------------------------------------------

def test_deep_feature_loss_identity_is_exactly_zero(rng):
    y = rng.standard_normal((1, 1, 128, 128))
    assert deep_feature_loss(y, y.copy(), small_vgg().taps) == 0.0


def test_deep_feature_loss_symmetric_and_nonnegative(rng):
    model = small_vgg()
    a, b = rng.standard_normal((2, 1, 1, 128, 128))
    ab = deep_feature_loss(a, b, model.taps)
    assert ab > 0
    assert ab == pytest.approx(deep_feature_loss(b, a, model.taps), rel=1e-12)


def test_identity_extractor_hand_value():
    def identity(x):
        return [x]
    assert deep_feature_loss(np.zeros((2, 2)), np.ones((2, 2)), identity) == 1.0


def test_deep_feature_loss_matches_per_tap_oracle(rng):
    model = small_vgg()
    a, b = rng.standard_normal((2, 1, 1, 128, 128))
    taps_a = [t.detach().numpy() for t in model.taps(torch.from_numpy(a).float())]
    taps_b = [t.detach().numpy() for t in model.taps(torch.from_numpy(b).float())]
    expected = sum(float(np.mean(np.abs(ta - tb))) for ta, tb in zip(taps_a, taps_b))
    got = deep_feature_loss(torch.from_numpy(a).float(), torch.from_numpy(b).float(), model.taps)
    assert float(got.detach()) == pytest.approx(expected, rel=1e-5)
    ref = feature_loss_to(target_features(model.taps, torch.from_numpy(a).float()),
                          torch.from_numpy(b).float(), model.taps)
    assert float(ref.detach()) == pytest.approx(expected, rel=1e-5)


def test_deep_feature_loss_half_perturbation_sanity(rng):
    model = small_vgg()
    for _ in range(5):
        y = rng.standard_normal((1, 1, 128, 128))
        d = rng.standard_normal((1, 1, 128, 128))
        full = deep_feature_loss(y, y + d, model.taps)
        half = deep_feature_loss(y, y + 0.5 * d, model.taps)
        assert half <= 0.5 * full * 1.1


def test_pixel_loss_values(rng):
    assert pixel_loss([[0.0]], [[2.0]]) == 2.0
    y = rng.standard_normal((4, 4))
    assert pixel_loss(y, y) == 0.0
    for _ in range(20):
        a, b = rng.standard_normal((2, 6, 7))
        assert abs(pixel_loss(a, b) - mean_abs_oracle(a, b)) <= 1e-6


def test_pixel_loss_triangle_inequality(rng):
    for _ in range(100):
        a, b, c = rng.standard_normal((3, 5, 5))
        assert pixel_loss(a, c) <= pixel_loss(a, b) + pixel_loss(b, c) + 1e-12


def test_losses_reject_shape_mismatch_and_denormalized():
    with pytest.raises(ContractError):
        pixel_loss(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ContractError):
        pixel_loss(LogMagnitude(np.zeros((2, 2))), np.zeros((2, 2)))


def test_tensor_inputs_return_differentiable_tensor():
    a = torch.zeros(1, 1, 128, 128)
    b = torch.ones(1, 1, 128, 128, requires_grad=True)
    loss = deep_feature_loss(a, b, small_vgg().taps)
    loss.backward()
    assert b.grad is not None and torch.isfinite(b.grad).all()


def test_gradient_check_against_finite_differences():
    torch.manual_seed(0)
    model = SpeechVGG(SpeechVGGConfig(n_classes=4, width=0.0625, fc_units=8,
                                      input_size=32)).double().eval()
    y = torch.randn(2, 1, 32, 32, dtype=torch.float64)
    y_hat = torch.randn(2, 1, 32, 32, dtype=torch.float64, requires_grad=True)
    loss = deep_feature_loss(y, y_hat, model.taps)
    loss.backward()
    rng = np.random.default_rng(1)
    eps = 1e-6
    flat = y_hat.data.view(-1)
    for i in rng.choice(flat.numel(), 40, replace=False):
        orig = float(flat[i])
        with torch.no_grad():
            flat[i] = orig + eps
            up = float(deep_feature_loss(y, y_hat, model.taps))
            flat[i] = orig - eps
            down = float(deep_feature_loss(y, y_hat, model.taps))
            flat[i] = orig
        numeric = (up - down) / (2 * eps)
        analytic = float(y_hat.grad.view(-1)[i])
        assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-9


# pretraining smoke task ------------------------------------------------------

WORDS = ["house", "water", "little", "people", "morning",
         "garden", "silver", "window", "yellow", "thunder"]


def test_toy_ten_word_task_reaches_80_percent():
    synth = pytest.importorskip("speech_inpainting.synth")
    try:
        engine = synth.Espeak.get()
    except Exception as exc:  # pragma: no cover - missing shared library
        pytest.skip(f"espeak unavailable: {exc}")
    clips = []
    for speaker in range(20):
        voice, rate, pitch = synth.speaker_voice(speaker)
        for label, word in enumerate(WORDS):
            audio, _ = engine.synthesize(word, voice, rate, pitch)
            clips.append((audio, label))
    padded = [np.pad(a, (0, dsp.SEGMENT_LENGTH - len(a))) for a, _ in clips]
    stats = dsp.compute_stats(dsp.log_magnitude(dsp.stft(p)) for p in padded)
    X = np.stack([corpus.extract_word_sample(a, WordSegment("u", WORDS[y], 0, len(a) / 16000),
                                             stats, k) for k, (a, y) in enumerate(clips)])
    y = np.array([label for _, label in clips])
    cfg = training.TrainConfig(phase="PretrainVGG", epochs=5, lr=5e-4, batch_size=8,
                               vgg_width=0.125, vgg_fc_units=256, vgg_batch_norm=True,
                               augment=False, seed=0)
    result = training.pretrain_extractor(cfg, X, y, WORDS)
    assert result.history[-1]["train_accuracy"] >= 0.8
    losses = [h["loss"] for h in result.history]
    assert losses[-1] < losses[0]
