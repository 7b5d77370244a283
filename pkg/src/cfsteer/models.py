"""Explained classifier, DDPM denoiser and the joint (denoise-then-classify) model.

Images cross module boundaries in [0, 1]; the networks work on [-1, 1].
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericalError, TrainingError

log = logging.getLogger(__name__)


def to_model_range(x):
    return x * 2.0 - 1.0


def from_model_range(x):
    return (x + 1.0) * 0.5


def as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x.float()
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


def parameter_checksum(module):
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- classifier ---------------------------------------------------------------


class ConvClassifier(nn.Module):
    """Four conv blocks with global average pooling, then a linear head.

    ``features`` is the representation map; ``head`` the linear classifier.
    """

    def __init__(self, num_classes=2, width=16, feature_dim=64, image_size=32):
        super().__init__()
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.image_size = image_size
        self.width = width
        chans = [3, width, 2 * width, 4 * width, feature_dim]
        layers = []
        for i in range(4):
            layers += [nn.Conv2d(chans[i], chans[i + 1], 3, padding=1), nn.ReLU()]
            if i < 3:
                layers.append(nn.MaxPool2d(2))
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(feature_dim, num_classes)

    def features(self, x):
        """Representation of images given in [0, 1]."""
        return self.body(to_model_range(x)).mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.features(x))

    def config(self):
        return {
            "num_classes": self.num_classes,
            "width": self.width,
            "feature_dim": self.feature_dim,
            "image_size": self.image_size,
        }


def check_image_batch(x, image_size=None, channels=3):
    if x.ndim != 4 or x.shape[1] != channels:
        raise InputError(f"expected (N, {channels}, H, W) images, got {tuple(x.shape)}")
    if image_size is not None and tuple(x.shape[-2:]) != (image_size, image_size):
        raise InputError(
            f"expected {image_size}x{image_size} images, got {tuple(x.shape[-2:])}"
        )


def classify(f, x):
    """Logits of ``f`` for one image (C, H, W) or a batch (N, C, H, W)."""
    x = as_tensor(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    check_image_batch(x, f.image_size)
    f.eval()
    logits = f(x)
    return logits[0] if single else logits


# -- diffusion schedule -------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: tuple

    @classmethod
    def linear(cls, steps=200, beta_start=1e-4, beta_end=0.04):
        if steps < 1:
            raise ConfigError("must be >= 1", "diffusion_steps")
        return cls(tuple(np.linspace(beta_start, beta_end, steps).tolist()))

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) == 0:
            raise ConfigError("need a non-empty sequence", "betas")
        if np.any(b < 0) or np.any(b >= 1):
            raise ConfigError("each beta must lie in [0, 1)", "betas")

    @property
    def T(self):
        return len(self.betas)

    @property
    def beta(self):
        return np.asarray(self.betas, dtype=np.float64)

    @property
    def alpha(self):
        return 1.0 - self.beta

    @property
    def alpha_bar(self):
        return np.cumprod(self.alpha)

    @property
    def sigma(self):
        return np.sqrt(self.beta)

    def check_invariants(self):
        """Strict (0,1) betas, strictly decreasing alpha_bar ending below 0.05."""
        b, ab = self.beta, self.alpha_bar
        return bool(np.all(b > 0) and np.all(b < 1) and np.all(np.diff(ab) < 0) and ab[-1] < 0.05)

    def check_step(self, t, low=1):
        if not low <= int(t) <= self.T:
            raise InputError(f"step {t} outside [{low}, {self.T}]")

    def to_dict(self):
        return {"betas": list(self.betas)}


def ddpm_forward(x0, t, eps, schedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with t in 1..T."""
    schedule.check_step(t)
    if eps.shape != x0.shape:
        raise InputError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x0.shape)}")
    ab = schedule.alpha_bar[int(t) - 1]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ddpm_reverse_step(x_t, t, schedule, denoiser, stochastic=False, generator=None):
    """One reverse step x_t -> x_{t-1}; no noise is added at t == 1."""
    schedule.check_step(t)
    i = int(t) - 1
    beta, alpha, ab = schedule.beta[i], schedule.alpha[i], schedule.alpha_bar[i]
    steps = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
    eps_hat = denoiser(x_t, steps)
    if not torch.isfinite(eps_hat).all():
        raise NumericalError(f"non-finite denoiser output at step {t}")
    coef = beta / math.sqrt(1.0 - ab) if beta > 0 else 0.0
    mean = (x_t - coef * eps_hat) / math.sqrt(alpha)
    if stochastic and t > 1:
        z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
        return mean + math.sqrt(beta) * z
    return mean


# -- denoiser -------------------------------------------------------------------


def step_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _Block(nn.Module):
    def __init__(self, channels, emb_dim):
        super().__init__()
        self.norm = nn.GroupNorm(4, channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.emb = nn.Linear(emb_dim, channels)

    def forward(self, h, emb):
        return h + self.conv(F.silu(self.norm(h) + self.emb(emb)[:, :, None, None]))


class TinyUNet(nn.Module):
    """Two-level U-shaped epsilon predictor with additive step embedding.

    Works on images in [-1, 1]. Most compute sits at 16x16 and 8x8.
    """

    def __init__(self, channels=3, base=16, emb_dim=64):
        super().__init__()
        c1, c2 = base, 2 * base
        self.base = base
        self.emb_dim = emb_dim
        self.emb = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.inc = nn.Conv2d(channels, c1, 3, padding=1)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc1 = _Block(c2, emb_dim)
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid1 = _Block(c2, emb_dim)
        self.mid2 = _Block(c2, emb_dim)
        self.dec1 = _Block(c2, emb_dim)
        self.reduce = nn.Conv2d(c2, c1, 1)
        self.dec0 = _Block(c1, emb_dim)
        self.out = nn.Conv2d(c1, channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, t):
        emb = self.emb(step_embedding(t, self.emb_dim).to(x.dtype))
        h0 = self.inc(x)
        h1 = self.enc1(self.down1(F.silu(h0)), emb)
        h = self.mid2(self.mid1(self.down2(F.silu(h1)), emb), emb)
        h = self.dec1(F.interpolate(h, scale_factor=2, mode="nearest") + h1, emb)
        h = F.interpolate(self.reduce(h), scale_factor=2, mode="nearest") + h0
        h = self.dec0(h, emb)
        return self.out(F.silu(h))

    def config(self):
        return {"base": self.base, "emb_dim": self.emb_dim}


# -- joint classifier -----------------------------------------------------------


class JointClassifier(nn.Module):
    """Forward-noise to ``t_star``, run the reverse chain to 0, then classify.

    With ``t_star == 0`` this is exactly the wrapped classifier. The reverse
    chain is deterministic (sigma = 0) unless ``stochastic`` is set.
    """

    def __init__(self, classifier, denoiser, schedule, t_star, stochastic=False):
        super().__init__()
        if not 0 <= t_star <= schedule.T:
            raise ConfigError(f"must be in [0, {schedule.T}]", "noise_level")
        self.classifier = classifier
        self.denoiser = denoiser
        self.schedule = schedule
        self.t_star = int(t_star)
        self.stochastic = stochastic

    @property
    def image_size(self):
        return self.classifier.image_size

    def purify(self, x, eps, generator=None):
        """Noise ``x`` (in [0, 1]) with fixed ``eps`` and denoise back to t = 0."""
        if self.t_star == 0:
            return x
        h = ddpm_forward(to_model_range(x), self.t_star, eps, self.schedule)
        for t in range(self.t_star, 0, -1):
            h = ddpm_reverse_step(h, t, self.schedule, self.denoiser, self.stochastic, generator)
        return from_model_range(h)

    def forward(self, x, eps=None, generator=None):
        if self.t_star == 0:
            return self.classifier(x)
        if eps is None:
            raise InputError("joint classifier with t_star > 0 needs forward noise")
        return self.classifier(self.purify(x, eps, generator))


def noise_for(shape, seed, sample_ids=None):
    """Forward noise drawn per sample from (seed, sample id) streams."""
    n = shape[0]
    ids = range(n) if sample_ids is None else sample_ids
    out = torch.empty(shape)
    for row, sid in enumerate(ids):
        g = torch.Generator().manual_seed(_stream_seed(seed, int(sid)))
        out[row] = torch.randn(shape[1:], generator=g)
    return out


def _stream_seed(seed, sid):
    return int(np.random.SeedSequence([int(seed), sid]).generate_state(1, np.uint64)[0] >> 1)


def joint_classify(F_joint, x, seed=0, sample_ids=None):
    """Logits of the joint classifier for (C,H,W) or (N,C,H,W) input."""
    x = as_tensor(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    check_image_batch(x, F_joint.image_size)
    eps = noise_for(x.shape, seed, sample_ids) if F_joint.t_star > 0 else None
    logits = F_joint(x, eps)
    return logits[0] if single else logits


# -- training -------------------------------------------------------------------


@dataclass
class ClassifierConfig:
    epochs: int = 6
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 1e-4
    width: int = 16
    feature_dim: int = 64
    seed: int = 0


@dataclass
class DDPMConfig:
    iterations: int = 4000
    batch_size: int = 64
    lr: float = 2e-3
    base: int = 16
    seed: int = 0
    diffusion_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.04
    audit_samples: int = 16

    def schedule(self):
        return DiffusionSchedule.linear(self.diffusion_steps, self.beta_start, self.beta_end)


@dataclass
class TrainingRecord:
    curve: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


def accuracy(f, images, labels, batch_size=500):
    f.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(labels), batch_size):
            x = as_tensor(images[i : i + batch_size])
            correct += (f(x).argmax(1).numpy() == np.asarray(labels[i : i + batch_size])).sum()
    return float(correct) / len(labels)


def train_classifier(train, val, config=None):
    """Train a ConvClassifier; returns (model, TrainingRecord)."""
    config = config or ClassifierConfig()
    if len(train) == 0 or len(val) == 0:
        raise InputError("training and validation splits must be non-empty")
    torch.manual_seed(config.seed)
    f = ConvClassifier(
        train.spec.causal_classes, config.width, config.feature_dim, train.spec.image_size
    )
    opt = torch.optim.AdamW(f.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    x_all = torch.as_tensor(train.images)
    y_all = torch.as_tensor(np.array(train.labels))
    rng = np.random.default_rng(config.seed)
    record = TrainingRecord()
    total = config.epochs * math.ceil(len(train) / config.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, config.lr, total_steps=max(total, 1))
    for epoch in range(config.epochs):
        f.train()
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = torch.as_tensor(order[i : i + config.batch_size])
            loss = F.cross_entropy(f(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError("classifier loss is not finite", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        val_acc = accuracy(f, val.images, val.labels)
        record.curve.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_acc": val_acc})
        log.info("classifier epoch %d loss %.4f val_acc %.4f", epoch, np.mean(losses), val_acc)
    record.metrics["val_acc"] = accuracy(f, val.images, val.labels)
    f.eval()
    for p in f.parameters():
        p.requires_grad_(False)
    return f, record


def epsilon_mse(denoiser, images, schedule, seed=0, batch_size=250):
    """Held-out epsilon-prediction MSE at uniformly drawn steps."""
    g = torch.Generator().manual_seed(seed)
    x0 = to_model_range(as_tensor(images))
    total, count = 0.0, 0
    denoiser.eval()
    with torch.no_grad():
        for i in range(0, len(x0), batch_size):
            xb = x0[i : i + batch_size]
            t = torch.randint(1, schedule.T + 1, (len(xb),), generator=g)
            eps = torch.randn(xb.shape, generator=g)
            ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float32)[t - 1][:, None, None, None]
            xt = ab.sqrt() * xb + (1 - ab).sqrt() * eps
            total += F.mse_loss(denoiser(xt, t), eps, reduction="sum").item()
            count += eps.numel()
    return total / count


def train_ddpm(train, config=None):
    """Fit an epsilon-prediction TinyUNet; returns (denoiser, schedule, TrainingRecord)."""
    config = config or DDPMConfig()
    if len(train) == 0:
        raise InputError("training set must be non-empty")
    schedule = config.schedule()
    torch.manual_seed(config.seed)
    g = torch.Generator().manual_seed(config.seed)
    net = TinyUNet(base=config.base)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, config.lr, total_steps=max(config.iterations, 1))
    x_all = to_model_range(torch.as_tensor(train.images))
    ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float32)
    record = TrainingRecord()
    running = []
    net.train()
    for it in range(config.iterations):
        idx = torch.randint(0, len(x_all), (config.batch_size,), generator=g)
        x0 = x_all[idx]
        if torch.rand((), generator=g) < 0.5:
            x0 = x0.flip(-1)
        t = torch.randint(1, schedule.T + 1, (len(x0),), generator=g)
        eps = torch.randn(x0.shape, generator=g)
        a = ab[t - 1][:, None, None, None]
        loss = F.mse_loss(net(a.sqrt() * x0 + (1 - a).sqrt() * eps, t), eps)
        if not torch.isfinite(loss):
            raise TrainingError("denoiser loss is not finite", it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        running.append(loss.item())
        if (it + 1) % 200 == 0 or it + 1 == config.iterations:
            record.curve.append({"iteration": it + 1, "loss": float(np.mean(running))})
            log.info("ddpm iteration %d loss %.4f", it + 1, np.mean(running))
            running = []
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net, schedule, record


def sample_ddpm(denoiser, schedule, n, seed=0, image_size=32):
    """Full stochastic reverse chain from pure noise.

    Returns (raw, clamped) in [0, 1] units; ``raw`` is before clamping.
    """
    g = torch.Generator().manual_seed(seed)
    h = torch.randn((n, 3, image_size, image_size), generator=g)
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            h = ddpm_reverse_step(h, t, schedule, denoiser, stochastic=True, generator=g)
    raw = from_model_range(h)
    return raw, raw.clamp(0.0, 1.0)


# -- persistence ----------------------------------------------------------------


def save_checkpoint(path, kind, module, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": kind,
        "config": module.config() if hasattr(module, "config") else {},
        "state": module.state_dict(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path):
    payload = torch.load(Path(path), weights_only=False)
    kind = payload["kind"]
    if kind == "classifier":
        module = ConvClassifier(**payload["config"])
    elif kind == "denoiser":
        module = TinyUNet(**payload["config"])
    else:
        raise InputError(f"unknown checkpoint kind {kind!r}")
    module.load_state_dict(payload["state"])
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module, payload["extra"]


class ModelRegistry:
    """JSON file mapping artifact names to checkpoint paths."""

    def __init__(self, path):
        self.path = Path(path)
        self.entries = json.loads(self.path.read_text()) if self.path.exists() else {}

    def register(self, name, checkpoint, **info):
        self.entries[name] = {"path": str(checkpoint), **info}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.entries, indent=1, sort_keys=True))

    def get(self, name):
        return self.entries.get(name)


def config_dict(cfg):
    return asdict(cfg)
