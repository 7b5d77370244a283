import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from cfsteer.errors import ConfigError, InputError, NumericalError, TrainingError
from cfsteer.models import (
    ClassifierConfig,
    ConvClassifier,
    DDPMConfig,
    DiffusionSchedule,
    JointClassifier,
    ModelRegistry,
    TinyUNet,
    accuracy,
    classify,
    ddpm_forward,
    ddpm_reverse_step,
    epsilon_mse,
    joint_classify,
    load_checkpoint,
    noise_for,
    parameter_checksum,
    sample_ddpm,
    save_checkpoint,
    train_classifier,
    train_ddpm,
)
from cfsteer.synthspur import FactorSpec, generate_dataset


class ConstantEps(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x, t):
        return torch.full_like(x, self.value)


def central_difference(fn, x, v, h=1e-6):
    return (fn(x + h * v) - fn(x - h * v)) / (2 * h)


# -- schedule -------------------------------------------------------------------


def test_default_schedule_invariants():
    s = DiffusionSchedule.linear()
    assert s.T == 200
    assert s.check_invariants()
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < 0.05
    assert np.allclose(s.sigma, np.sqrt(s.beta))


def test_short_linear_schedule_violates_terminal_bound():
    # 1e-4 -> 0.02 over 200 steps leaves too much signal at T
    assert not DiffusionSchedule.linear(200, 1e-4, 0.02).check_invariants()


def test_schedule_rejects_bad_betas():
    with pytest.raises(ConfigError):
        DiffusionSchedule((0.1, 1.0))
    with pytest.raises(ConfigError):
        DiffusionSchedule(())


# -- forward / reverse ----------------------------------------------------------


def test_forward_constant_image_arithmetic():
    s = DiffusionSchedule((0.75,))
    x0 = torch.ones(1, 3, 4, 4)
    out = ddpm_forward(x0, 1, torch.zeros_like(x0), s)
    assert torch.allclose(out, torch.full_like(x0, 0.5))


def test_forward_near_identity_when_beta_small():
    s = DiffusionSchedule((1e-12,))
    x0 = torch.rand(2, 3, 4, 4)
    out = ddpm_forward(x0, 1, torch.randn_like(x0), s)
    assert torch.allclose(out, x0, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**31 - 1))
def test_forward_algebraic_inversion(t, seed):
    s = DiffusionSchedule.linear()
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand((2, 3, 8, 8), generator=g, dtype=torch.float64)
    eps = torch.randn((2, 3, 8, 8), generator=g, dtype=torch.float64)
    ab = s.alpha_bar[t - 1]
    xt = ddpm_forward(x0, t, eps, s)
    back = (xt - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
    assert torch.max(torch.abs(back - x0)) < 1e-6


def test_forward_errors():
    s = DiffusionSchedule.linear(10)
    x0 = torch.zeros(1, 3, 4, 4)
    with pytest.raises(InputError):
        ddpm_forward(x0, 0, x0, s)
    with pytest.raises(InputError):
        ddpm_forward(x0, 11, x0, s)
    with pytest.raises(InputError):
        ddpm_forward(x0, 1, torch.zeros(1, 3, 4, 5), s)


def test_reverse_step_scalar_oracle():
    b1 = 1.0 - 0.5 / 0.99
    s = DiffusionSchedule((b1, 0.01))
    assert s.alpha_bar[1] == pytest.approx(0.5)
    x_t = torch.full((1, 3, 2, 2), 0.6, dtype=torch.float64)
    out = ddpm_reverse_step(x_t, 2, s, ConstantEps(0.2), stochastic=False)
    expected = (0.6 - (0.01 / math.sqrt(0.5)) * 0.2) / math.sqrt(0.99)
    assert torch.allclose(out, torch.full_like(x_t, expected), atol=1e-12)


def test_reverse_step_with_zero_beta_is_identity():
    s = DiffusionSchedule((0.0, 0.1))
    x_t = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    out = ddpm_reverse_step(x_t, 1, s, ConstantEps(0.7))
    assert torch.equal(out, x_t)


def test_reverse_step_stochastic_reproducible(tiny_denoiser, short_schedule):
    x = torch.randn(2, 3, 32, 32)
    a = ddpm_reverse_step(x, 5, short_schedule, tiny_denoiser, True, torch.Generator().manual_seed(3))
    b = ddpm_reverse_step(x, 5, short_schedule, tiny_denoiser, True, torch.Generator().manual_seed(3))
    c = ddpm_reverse_step(x, 5, short_schedule, tiny_denoiser, False)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert a.shape == x.shape


def test_reverse_step_rejects_non_finite():
    s = DiffusionSchedule.linear(5)
    with pytest.raises(NumericalError):
        ddpm_reverse_step(torch.zeros(1, 3, 4, 4), 3, s, ConstantEps(float("nan")))


# -- classifier -------------------------------------------------------------------


def test_classify_shapes_and_determinism(tiny_classifier):
    x = torch.rand(3, 3, 32, 32, dtype=torch.float64)
    a, b = tiny_classifier(x), tiny_classifier(x)
    assert a.shape == (3, 2)
    assert torch.equal(a, b)
    f32 = ConvClassifier(width=4, feature_dim=8)
    assert classify(f32, np.random.rand(3, 32, 32)).shape == (2,)
    with pytest.raises(InputError):
        classify(f32, np.random.rand(1, 3, 16, 16))
    with pytest.raises(InputError):
        classify(f32, np.random.rand(1, 1, 32, 32))


def test_classifier_gradient_matches_finite_differences(tiny_classifier):
    g = torch.Generator().manual_seed(0)
    x = torch.rand((1, 3, 32, 32), generator=g, dtype=torch.float64)
    v = torch.randn(x.shape, generator=g, dtype=torch.float64)
    y = torch.tensor([1])

    def loss(z):
        return F.cross_entropy(tiny_classifier(z), y).item()

    xg = x.clone().requires_grad_(True)
    with torch.enable_grad():
        (grad,) = torch.autograd.grad(F.cross_entropy(tiny_classifier(xg), y), xg)
    analytic = float((grad * v).sum())
    numeric = central_difference(loss, x, v)
    assert abs(analytic - numeric) <= 1e-4 * abs(numeric)


# -- joint classifier ------------------------------------------------------------------


def test_joint_classifier_with_zero_noise_level_is_f(tiny_classifier, tiny_denoiser, short_schedule):
    F0 = JointClassifier(tiny_classifier, tiny_denoiser, short_schedule, 0)
    x = torch.rand(4, 3, 32, 32, dtype=torch.float64)
    assert torch.equal(F0(x), tiny_classifier(x))
    f32 = ConvClassifier(width=4, feature_dim=8).eval()
    F32 = JointClassifier(f32, tiny_denoiser, short_schedule, 0)
    x32 = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32)
    assert torch.equal(joint_classify(F32, x32, seed=5), classify(f32, x32))


def test_joint_classifier_requires_noise(tiny_classifier, tiny_denoiser, short_schedule):
    F3 = JointClassifier(tiny_classifier, tiny_denoiser, short_schedule, 3)
    with pytest.raises(InputError):
        F3(torch.rand(1, 3, 32, 32, dtype=torch.float64))
    with pytest.raises(ConfigError):
        JointClassifier(tiny_classifier, tiny_denoiser, short_schedule, 11)


def test_joint_classify_fixed_noise_is_deterministic(tiny_denoiser, short_schedule):
    f = ConvClassifier(width=4, feature_dim=8).eval()
    F3 = JointClassifier(f, tiny_denoiser, short_schedule, 3)
    x = np.random.default_rng(1).random((2, 3, 32, 32)).astype(np.float32)
    a = joint_classify(F3, x, seed=7, sample_ids=[10, 11])
    b = joint_classify(F3, x, seed=7, sample_ids=[10, 11])
    assert torch.equal(a, b) and torch.isfinite(a).all() and a.shape == (2, 2)


def test_noise_streams_are_per_sample():
    a = noise_for((3, 3, 4, 4), 0, [5, 6, 7])
    b = noise_for((1, 3, 4, 4), 0, [6])
    assert torch.equal(a[1], b[0])
    assert not torch.equal(a[0], a[1])


def test_joint_gradient_matches_finite_differences(tiny_classifier, tiny_denoiser, short_schedule):
    den = TinyUNet(base=4, emb_dim=8)
    den.load_state_dict(tiny_denoiser.state_dict())
    den = den.double().eval()
    F3 = JointClassifier(tiny_classifier, den, short_schedule, 3)
    g = torch.Generator().manual_seed(2)
    x = torch.rand((1, 3, 32, 32), generator=g, dtype=torch.float64)
    eps = torch.randn(x.shape, generator=g, dtype=torch.float64)
    v = torch.randn(x.shape, generator=g, dtype=torch.float64)
    y = torch.tensor([0])

    def loss(z):
        with torch.no_grad():
            return F.cross_entropy(F3(z, eps), y).item()

    xg = x.clone().requires_grad_(True)
    with torch.enable_grad():
        (grad,) = torch.autograd.grad(F.cross_entropy(F3(xg, eps), y), xg)
    analytic = float((grad * v).sum())
    numeric = central_difference(loss, x, v)
    assert abs(analytic - numeric) <= 1e-3 * abs(numeric)


# -- training ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def mini_splits():
    spec = FactorSpec()
    return generate_dataset(spec, 256, 1), generate_dataset(spec, 200, 2)


def test_zero_epochs_is_chance(mini_splits):
    train, val = mini_splits
    f, rec = train_classifier(train, val, ClassifierConfig(epochs=0, width=4, feature_dim=8))
    assert rec.curve == []
    assert abs(accuracy(f, val.images, val.labels) - 0.5) <= 0.1
    assert all(not p.requires_grad for p in f.parameters())


def test_divergence_raises_training_error(mini_splits):
    train, val = mini_splits
    with pytest.raises(TrainingError, match="epoch"):
        train_classifier(train, val, ClassifierConfig(epochs=3, lr=1e30, width=4, feature_dim=8))


def test_ddpm_training_is_deterministic(mini_splits):
    train, _ = mini_splits
    cfg = DDPMConfig(iterations=5, batch_size=8, base=4, diffusion_steps=20)
    a, sched, rec = train_ddpm(train, cfg)
    b, _, _ = train_ddpm(train, cfg)
    assert parameter_checksum(a) == parameter_checksum(b)
    assert sched.T == 20 and rec.curve


def test_sampling_returns_raw_and_clamped(tiny_denoiser, short_schedule):
    raw, clamped = sample_ddpm(tiny_denoiser, short_schedule, 2, seed=0)
    assert raw.shape == clamped.shape == (2, 3, 32, 32)
    assert clamped.min() >= 0 and clamped.max() <= 1
    assert torch.equal(clamped, raw.clamp(0, 1))


def test_checkpoint_roundtrip(tmp_path, tiny_denoiser):
    f = ConvClassifier(width=4, feature_dim=8)
    save_checkpoint(tmp_path / "f.pt", "classifier", f, {"note": 1})
    g, extra = load_checkpoint(tmp_path / "f.pt")
    assert parameter_checksum(f) == parameter_checksum(g)
    assert extra == {"note": 1}
    save_checkpoint(tmp_path / "d.pt", "denoiser", tiny_denoiser)
    d, _ = load_checkpoint(tmp_path / "d.pt")
    assert parameter_checksum(d) == parameter_checksum(tiny_denoiser)
    reg = ModelRegistry(tmp_path / "reg.json")
    reg.register("classifier", tmp_path / "f.pt", val_acc=0.5)
    assert ModelRegistry(tmp_path / "reg.json").get("classifier")["val_acc"] == 0.5


# -- trained models (shared with the acceptance suite) ------------------------------


@pytest.mark.slow
def test_trained_classifier_accuracy_and_spurious_reliance(desk_artifacts):
    a = desk_artifacts
    val_acc = accuracy(a.classifier, a.val.images, a.val.labels)
    test_acc = accuracy(a.classifier, a.test.images, a.test.labels)
    assert val_acc >= 0.97
    assert val_acc - test_acc >= 0.02


@pytest.mark.slow
def test_trained_denoiser_beats_zero_predictor(desk_artifacts):
    a = desk_artifacts
    mse = epsilon_mse(a.denoiser, a.val.images[:500], a.schedule)
    zero = epsilon_mse(ConstantEps(0.0), a.val.images[:500], a.schedule)
    assert mse < 0.9 * zero


@pytest.mark.slow
def test_trained_denoiser_sample_range(desk_artifacts):
    raw, clamped = sample_ddpm(desk_artifacts.denoiser, desk_artifacts.schedule, 16, seed=0)
    assert raw.min() >= -0.2 and raw.max() <= 1.2
    assert clamped.min() >= 0 and clamped.max() <= 1
