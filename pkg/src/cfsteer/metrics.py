"""Counterfactual evaluation metrics and the frozen feature encoder they share."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, NumericalError
from .models import parameter_checksum, to_model_range

log = logging.getLogger(__name__)

METRIC_VERSION = {"cout": "pixel-insertion-auc-diff/v1", "sfid": "cross-half-split/v1"}


# -- feature encoder ------------------------------------------------------------


class FeatureEncoder(nn.Module):
    """Small conv encoder; exposes per-stage feature maps and a pooled embedding."""

    def __init__(self, width=16, embed_dim=64):
        super().__init__()
        self.width = width
        self.embed_dim = embed_dim
        self.stages = nn.ModuleList(
            [
                nn.Sequential(nn.Conv2d(3, width, 3, padding=1), nn.ReLU()),
                nn.Sequential(nn.MaxPool2d(2), nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU()),
                nn.Sequential(nn.MaxPool2d(2), nn.Conv2d(2 * width, 4 * width, 3, padding=1), nn.ReLU()),
            ]
        )
        self.proj = nn.Linear(4 * width, embed_dim)

    def feature_maps(self, x):
        h = to_model_range(x)
        maps = []
        for stage in self.stages:
            h = stage(h)
            maps.append(h)
        return maps

    def forward(self, x):
        return self.proj(self.feature_maps(x)[-1].mean(dim=(2, 3)))

    def checksum(self):
        return parameter_checksum(self)

    def config(self):
        return {"width": self.width, "embed_dim": self.embed_dim}


def _augment(x, g):
    n = x.shape[0]
    shifts = torch.randint(-3, 4, (n, 2), generator=g)
    flips = torch.rand(n, generator=g) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        xi = x[i].flip(-1) if flips[i] else x[i]
        out[i] = torch.roll(xi, shifts=(int(shifts[i, 0]), int(shifts[i, 1])), dims=(1, 2))
    return out


def train_encoder(images, steps=300, batch_size=128, temperature=0.2, seed=0, width=16, embed_dim=64):
    """Contrastive (NT-Xent) training under shift/flip augmentations, then freeze."""
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    enc = FeatureEncoder(width, embed_dim)
    opt = torch.optim.Adam(enc.parameters(), lr=1e-3)
    x_all = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    for step in range(steps):
        idx = torch.randint(0, len(x_all), (batch_size,), generator=g)
        xb = x_all[idx]
        z = F.normalize(enc(torch.cat([_augment(xb, g), _augment(xb, g)])), dim=1)
        sim = z @ z.T / temperature
        sim.fill_diagonal_(-1e9)
        n = xb.shape[0]
        target = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
        loss = F.cross_entropy(sim, target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % 100 == 0:
            log.info("encoder step %d loss %.4f", step + 1, loss.item())
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc


def embed(encoder, images, batch_size=500):
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(encoder(torch.as_tensor(np.asarray(images[i : i + batch_size]), dtype=torch.float32)))
    return torch.cat(out).double().numpy()


# -- validity -------------------------------------------------------------------


def _logits(f, x):
    with torch.no_grad():
        return f(x)


def flip_rate(pairs, f):
    """Fraction of (x', y') pairs with argmax f(x') == y'."""
    if len(pairs) == 0:
        raise InputError("flip_rate needs at least one pair")
    x = torch.stack([torch.as_tensor(np.asarray(p[0])) for p in pairs]).float()
    y = np.asarray([int(p[1]) for p in pairs])
    return flip_rate_from_predictions(_logits(f, x).argmax(1).numpy(), y)


def flip_rate_from_predictions(predictions, targets):
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    if predictions.size == 0:
        raise InputError("flip_rate needs at least one pair")
    return float(np.mean(predictions == targets))


def insertion_order(x, x_cf):
    """Pixel indices sorted by channel-mean |x' - x|, largest first, ties by index."""
    diff = np.abs(np.asarray(x_cf, dtype=np.float64) - np.asarray(x, dtype=np.float64)).mean(axis=0)
    return np.argsort(-diff.reshape(-1), kind="stable")


def insertion_curves(x, x_cf, y, y_target, f, steps=32):
    """Probabilities of y' and y along the pixel-insertion path (steps + 1 points)."""
    if steps < 1:
        raise InputError("steps must be >= 1")
    x = torch.as_tensor(np.asarray(x))
    x_cf = torch.as_tensor(np.asarray(x_cf))
    if x.shape != x_cf.shape or x.ndim != 3:
        raise InputError("need two (C, H, W) images of equal shape")
    c, h, w = x.shape
    n = h * w
    order = torch.as_tensor(insertion_order(x.numpy(), x_cf.numpy()))
    counts = [(i * n) // steps for i in range(steps + 1)]
    flat_x, flat_cf = x.reshape(c, n), x_cf.reshape(c, n)
    path = []
    for k in counts:
        img = flat_x.clone()
        img[:, order[:k]] = flat_cf[:, order[:k]]
        path.append(img.reshape(c, h, w))
    probs = torch.softmax(_logits(f, torch.stack(path)), dim=1).double().numpy()
    return probs[:, int(y_target)], probs[:, int(y)]


def cout(x, x_cf, y, y_target, f, steps=32):
    """AUC of p_{y'} minus AUC of p_y along the insertion path, in [-1, 1]."""
    p_target, p_source = insertion_curves(x, x_cf, y, y_target, f, steps)
    return _trapezoid(p_target, steps) - _trapezoid(p_source, steps)


def _trapezoid(p, steps):
    p = np.asarray(p, dtype=np.float64)
    return float(((p[:-1] + p[1:]) / 2.0).sum() / steps)


# -- sparsity / proximity -------------------------------------------------------


def correlation_difference(pairs, oracle, target_attribute="shape"):
    """Mean number of non-target attributes whose value differs between x and x'.

    ``oracle`` maps an item to a dict of attribute values.
    """
    if len(pairs) == 0:
        raise InputError("correlation_difference needs at least one pair")
    counts = []
    for a, b in pairs:
        attrs_a, attrs_b = oracle(a), oracle(b)
        if target_attribute not in attrs_a:
            raise InputError(f"unknown attribute {target_attribute!r}")
        if set(attrs_a) != set(attrs_b):
            raise InputError("oracle returned different attribute sets")
        counts.append(sum(attrs_a[k] != attrs_b[k] for k in attrs_a if k != target_attribute))
    return float(np.mean(counts))


def attribute_changes(attrs_x, attrs_cf, target_attribute="shape"):
    """Per-sample count of changed non-target attributes from attribute arrays."""
    if target_attribute not in attrs_x:
        raise InputError(f"unknown attribute {target_attribute!r}")
    if set(attrs_x) != set(attrs_cf):
        raise InputError("attribute sets differ")
    keys = [k for k in sorted(attrs_x) if k != target_attribute]
    n = len(np.asarray(attrs_x[target_attribute]))
    changed = np.zeros(n, dtype=np.int64)
    for k in keys:
        changed += np.asarray(attrs_x[k]) != np.asarray(attrs_cf[k])
    return changed


def cosine_similarities(emb_a, emb_b):
    emb_a, emb_b = np.asarray(emb_a, dtype=np.float64), np.asarray(emb_b, dtype=np.float64)
    na, nb = np.linalg.norm(emb_a, axis=1), np.linalg.norm(emb_b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericalError("zero-norm embedding in cosine similarity")
    return np.clip((emb_a * emb_b).sum(axis=1) / (na * nb), -1.0, 1.0)


def s3_similarity(pairs, encoder):
    """Mean cosine similarity of encoder embeddings over (x, x') pairs."""
    if len(pairs) == 0:
        raise InputError("s3_similarity needs at least one pair")
    xs = np.stack([np.asarray(p[0]) for p in pairs])
    cfs = np.stack([np.asarray(p[1]) for p in pairs])
    return float(cosine_similarities(embed(encoder, xs), embed(encoder, cfs)).mean())


def lpips_proxy(x, x_cf, encoder):
    """Per-pair sum over stages of mean squared difference of channel-normalized maps."""
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    x_cf = torch.as_tensor(np.asarray(x_cf), dtype=torch.float32)
    single = x.ndim == 3
    if single:
        x, x_cf = x[None], x_cf[None]
    with torch.no_grad():
        maps_a, maps_b = encoder.feature_maps(x), encoder.feature_maps(x_cf)
    if len(maps_a) < 2:
        raise InputError("encoder must expose at least two feature maps")
    total = torch.zeros(x.shape[0], dtype=torch.float64)
    for a, b in zip(maps_a, maps_b):
        a = a / (a.norm(dim=1, keepdim=True) + 1e-10)
        b = b / (b.norm(dim=1, keepdim=True) + 1e-10)
        total += ((a - b) ** 2).mean(dim=(1, 2, 3)).double()
    out = total.numpy()
    return float(out[0]) if single else out


# -- realism --------------------------------------------------------------------


def _gaussian(feats):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if not np.all(np.isfinite(feats)):
        raise InputError("non-finite features")
    n, d = feats.shape
    if n < 2:
        raise InputError("need at least two feature vectors")
    mu = feats.mean(axis=0)
    if n >= d + 1:
        cov = np.atleast_2d(np.cov(feats, rowvar=False))
    else:
        from sklearn.covariance import ledoit_wolf

        cov, _ = ledoit_wolf(feats)
    return mu, cov


def _sqrt_psd(a):
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b):
    """|mu_a - mu_b|^2 + Tr(A + B - 2 (A B)^(1/2)), exactly symmetric in its arguments."""

    def one_way(c1, c2):
        s = _sqrt_psd(c1)
        w = np.linalg.eigvalsh((s @ c2 @ s + (s @ c2 @ s).T) / 2.0)
        return np.sqrt(np.clip(w, 0.0, None)).sum()

    tr_sqrt = (one_way(cov_a, cov_b) + one_way(cov_b, cov_a)) / 2.0
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fid(features_a, features_b):
    mu_a, cov_a = _gaussian(features_a)
    mu_b, cov_b = _gaussian(features_b)
    return frechet_distance(mu_a, cov_a, mu_b, cov_b)


def sfid_repeat(orig_feats, cf_feats, seed, repeat):
    """One cross-wise split score; the permutation depends only on (seed, repeat)."""
    n = len(orig_feats)
    perm = np.random.default_rng([int(seed), int(repeat)]).permutation(n)
    a, b = perm[: n // 2], perm[n // 2 :]
    return 0.5 * (fid(orig_feats[a], cf_feats[b]) + fid(orig_feats[b], cf_feats[a]))


def sfid(orig_feats, cf_feats, repeats=10, seed=0):
    """Mean over ``repeats`` random half-splits of the cross-half FID."""
    orig_feats = np.asarray(orig_feats, dtype=np.float64)
    cf_feats = np.asarray(cf_feats, dtype=np.float64)
    if len(orig_feats) != len(cf_feats):
        raise InputError("original and counterfactual sets differ in length")
    if len(orig_feats) < 4:
        raise InputError("sfid needs at least 4 samples per set")
    if repeats < 1:
        raise InputError("repeats must be >= 1")
    return float(np.mean([sfid_repeat(orig_feats, cf_feats, seed, r) for r in range(repeats)]))


# -- report ---------------------------------------------------------------------


@dataclass
class MetricsReport:
    fr: float
    cout: float
    cd: float
    s3: float
    fid: float
    sfid: float
    lpips_proxy: float
    per_sample: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    SUMMARY = ("fr", "cout", "cd", "s3", "fid", "sfid", "lpips_proxy")

    def summary(self):
        return {k: getattr(self, k) for k in self.SUMMARY}

    def check_ranges(self, attribute_count=2):
        """Return the list of violated range invariants (empty when all hold)."""
        bad = []
        if not 0.0 <= self.fr <= 1.0:
            bad.append("fr")
        if not -1.0 <= self.cout <= 1.0:
            bad.append("cout")
        if not 0.0 <= self.cd <= attribute_count - 1:
            bad.append("cd")
        if not -1.0 <= self.s3 <= 1.0:
            bad.append("s3")
        for k in ("fid", "sfid", "lpips_proxy"):
            if not getattr(self, k) >= 0.0:
                bad.append(k)
        return bad

    def to_dict(self):
        return {"summary": self.summary(), "per_sample": self.per_sample, "meta": self.meta}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        return cls(**data["summary"], per_sample=data.get("per_sample", []), meta=data.get("meta", {}))

    def to_csv(self):
        buf = io.StringIO()
        if not self.per_sample:
            return ""
        writer = csv.DictWriter(buf, fieldnames=sorted(self.per_sample[0]), lineterminator="\n")
        writer.writeheader()
        for row in self.per_sample:
            writer.writerow(row)
        return buf.getvalue()
