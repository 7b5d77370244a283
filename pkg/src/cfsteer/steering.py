"""Targeted sign-gradient steering inside an l-infinity ball.

All variants share one update on the perturbation ``delta = x_tau - x``::

    delta <- clip(delta - step_size * sign(grad), -radius, radius)
    delta <- clip(delta, -x, 1 - x)

The objective is the joint-classifier cross-entropy towards the target label,
optionally plus ``spurious_weight * L_S(z_anchor, g(P_S phi(x_tau)))`` and
``l1_weight * |x_tau - x|_1``. Losses are summed over the batch so every
image's gradient is independent of the others.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericalError
from .models import as_tensor, noise_for


@dataclass
class SteeringConfig:
    step_size: float = 2.0 / 255.0
    ball_radius: float = 0.12
    iterations: int = 50
    spurious_weight: float = 0.5
    l1_weight: float = 0.001
    noise_level: int | None = None  # None -> ceil(0.3 * T)
    seed: int = 0
    chunk_size: int = 20

    def validate(self):
        if not self.step_size > 0:
            raise ConfigError("must be > 0", "step_size")
        if not self.ball_radius > 0:
            raise ConfigError("must be > 0", "ball_radius")
        if self.iterations < 0:
            raise ConfigError("must be >= 0", "iterations")
        if self.spurious_weight < 0:
            raise ConfigError("must be >= 0", "spurious_weight")
        if self.l1_weight < 0:
            raise ConfigError("must be >= 0", "l1_weight")
        if self.chunk_size < 1:
            raise ConfigError("must be >= 1", "chunk_size")
        return self

    def resolved_noise_level(self, T):
        if self.noise_level is None:
            return math.ceil(0.3 * T)
        return int(self.noise_level)

    def to_dict(self):
        return asdict(self)


@dataclass
class CETrace:
    """Per-iteration records, each an array of shape (iterations, batch)."""

    classification: list = field(default_factory=list)
    spurious: list = field(default_factory=list)
    l1: list = field(default_factory=list)
    linf: list = field(default_factory=list)
    target_prob: list = field(default_factory=list)

    def __len__(self):
        return len(self.linf)

    def as_arrays(self):
        return {k: np.asarray(v) for k, v in asdict(self).items()}

    def for_sample(self, i):
        return {k: [float(row[i]) for row in v] for k, v in asdict(self).items()}

    @staticmethod
    def concat(traces):
        """Join traces of consecutive batch chunks along the batch axis."""
        out = CETrace()
        if not traces or len(traces[0]) == 0:
            return out
        for key in asdict(out):
            rows = zip(*(getattr(t, key) for t in traces))
            setattr(out, key, [np.concatenate(r) for r in rows])
        return out


def soft_cross_entropy(z, z_prime):
    """-sum_k softmax(z)_k log softmax(z')_k over the last axis."""
    z = as_tensor(z) if not isinstance(z, torch.Tensor) else z
    z_prime = as_tensor(z_prime) if not isinstance(z_prime, torch.Tensor) else z_prime
    if z.shape != z_prime.shape:
        raise InputError(f"logit shapes differ: {tuple(z.shape)} vs {tuple(z_prime.shape)}")
    return -(F.softmax(z, dim=-1) * F.log_softmax(z_prime, dim=-1)).sum(dim=-1)


def _targets(y, n):
    y = torch.as_tensor(np.asarray(y), dtype=torch.long).reshape(-1)
    if y.numel() == 1 and n > 1:
        y = y.expand(n)
    if y.numel() != n:
        raise InputError(f"{y.numel()} targets for {n} images")
    return y


def _objective(x, delta, y, F_joint, eps, channel, z_anchor, spurious_weight, l1_weight):
    """Total loss (summed over batch) and per-sample terms at x + delta."""
    x_tau = x + delta
    logits = F_joint(x_tau, eps)
    cls = F.cross_entropy(logits, y, reduction="none")
    total = cls.sum()
    sp = torch.zeros_like(cls)
    if spurious_weight > 0:
        sp = soft_cross_entropy(z_anchor, channel(x_tau))
        total = total + spurious_weight * sp.sum()
    l1 = delta.detach().abs().sum(dim=(1, 2, 3))
    if l1_weight > 0:
        total = total + l1_weight * delta.abs().sum()
    prob = F.softmax(logits.detach(), dim=1).gather(1, y[:, None])[:, 0]
    return total, (cls.detach(), sp.detach(), l1, prob)


def _update(x, delta, grad, config, iteration=None):
    if not torch.isfinite(grad).all():
        raise NumericalError("non-finite gradient", iteration)
    new = (delta - config.step_size * torch.sign(grad)).clamp(-config.ball_radius, config.ball_radius)
    return torch.maximum(torch.minimum(new, 1.0 - x), -x)


def _gradient(x, delta, y, F_joint, eps, channel, z_anchor, spurious_weight, l1_weight):
    delta = delta.detach().requires_grad_(True)
    with torch.enable_grad():
        total, terms = _objective(x, delta, y, F_joint, eps, channel, z_anchor, spurious_weight, l1_weight)
        (grad,) = torch.autograd.grad(total, delta)
    return grad, terms


def _prepare(x, x_tau, y, F_joint, eps, seed, sample_ids):
    x = as_tensor(x)
    single = x.ndim == 3
    if single:
        x = x[None]
        x_tau = as_tensor(x_tau)[None] if x_tau is not None else None
    elif x_tau is not None:
        x_tau = as_tensor(x_tau)
    if x_tau is not None and x_tau.shape != x.shape:
        raise InputError("x_tau and x differ in shape")
    y = _targets(y, x.shape[0])
    if eps is None and F_joint.t_star > 0:
        eps = noise_for(x.shape, seed, sample_ids)
    return x, x_tau, y, eps, single


def targeted_pgd_step(x, x_tau, y_target, F_joint, config, eps=None, sample_ids=None, iteration=None):
    """One untempered targeted step towards ``y_target`` (no penalties)."""
    return causal_pgd_step(
        x, x_tau, y_target, F_joint, None, None, _with(config, spurious_weight=0.0),
        eps=eps, sample_ids=sample_ids, iteration=iteration,
    )


def causal_pgd_step(x, x_tau, y_target, F_joint, z_anchor, channel, config, eps=None, sample_ids=None, iteration=None):
    """One step on CE(F(x_tau), y') + spurious_weight * L_S(z_anchor, g(s(x_tau)))."""
    config.validate()
    x, x_tau, y, eps, single = _prepare(x, x_tau, y_target, F_joint, eps, config.seed, sample_ids)
    delta = x_tau - x
    if torch.any(delta.abs() > config.ball_radius + 1e-6):
        raise InputError("x_tau lies outside the l-infinity ball around x")
    w = config.spurious_weight
    grad, _ = _gradient(x, delta, y, F_joint, eps, channel, z_anchor, w, 0.0)
    out = x + _update(x, delta, grad, config, iteration)
    return out[0] if single else out


def _with(config, **changes):
    return SteeringConfig(**{**asdict(config), **changes})


def _run(x, y, F_joint, config, eps, channel=None, z_anchor=None, spurious_weight=0.0, l1_weight=0.0):
    delta = torch.zeros_like(x)
    trace = CETrace()
    for it in range(config.iterations):
        grad, (cls, sp, l1, prob) = _gradient(
            x, delta, y, F_joint, eps, channel, z_anchor, spurious_weight, l1_weight
        )
        delta = _update(x, delta, grad, config, it)
        trace.classification.append(cls.numpy())
        trace.spurious.append(sp.numpy())
        trace.l1.append(l1.numpy())
        trace.linf.append(delta.abs().amax(dim=(1, 2, 3)).numpy())
        trace.target_prob.append(prob.numpy())
    return x + delta, trace


def _chunked(x, y, F_joint, config, sample_ids, **kw):
    config.validate()
    x = as_tensor(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    y = _targets(y, x.shape[0])
    n = x.shape[0]
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    outs, traces = [], []
    channel, z_all = kw.pop("channel", None), None
    if channel is not None and kw.get("spurious_weight", 0.0) > 0:
        with torch.no_grad():
            z_all = channel(x)
    for lo in range(0, n, config.chunk_size):
        sl = slice(lo, lo + config.chunk_size)
        xb = x[sl]
        eps = noise_for(xb.shape, config.seed, ids[sl]) if F_joint.t_star > 0 else None
        z = z_all[sl] if z_all is not None else None
        out, tr = _run(xb, y[sl], F_joint, config, eps, channel=channel, z_anchor=z, **kw)
        outs.append(out.detach())
        traces.append(tr)
    result = torch.cat(outs)
    trace = CETrace.concat(traces)
    return (result[0] if single else result), trace


def targeted_pgd(x, y_target, F_joint, config, sample_ids=None):
    """Plain targeted steering trajectory; returns (x', trace)."""
    return _chunked(x, y_target, F_joint, config, sample_ids)


def generate_counterfactual(x, y_target, F_joint, channel, config, sample_ids=None):
    """Causally guided counterfactual; returns (x', trace).

    ``channel`` maps images to spurious logits. The anchor z is computed once
    from the clean images; z' is re-evaluated at every iterate.
    """
    return _chunked(
        x, y_target, F_joint, config, sample_ids,
        channel=channel, spurious_weight=float(config.spurious_weight),
    )


def generate_l1_counterfactual(x, y_target, F_joint, config, l1_weight=None, sample_ids=None):
    """Counterfactual for CE(F(x''), y') + lambda * |x'' - x|_1; returns (x'', trace)."""
    lam = config.l1_weight if l1_weight is None else float(l1_weight)
    if lam < 0:
        raise ConfigError("must be >= 0", "l1_weight")
    return _chunked(x, y_target, F_joint, config, sample_ids, l1_weight=lam)
