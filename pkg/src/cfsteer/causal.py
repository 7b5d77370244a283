"""Causal/spurious split of the classifier representation and the spurious head g.

The causal subspace is the row space of the classifier's linear head: it is
exactly what the head reads. Everything orthogonal to it is treated as the
spurious component ``s``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError
from .models import as_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FactorProjection:
    causal_basis: np.ndarray  # (D, r), orthonormal columns

    @property
    def dim(self):
        return self.causal_basis.shape[0]

    @property
    def rank(self):
        return self.causal_basis.shape[1]

    @property
    def causal_projector(self):
        return self.causal_basis @ self.causal_basis.T

    @property
    def spurious_projector(self):
        return np.eye(self.dim) - self.causal_projector

    def basis_tensor(self, dtype=torch.float32):
        return torch.as_tensor(self.causal_basis, dtype=dtype)

    def checksum(self):
        return hashlib.sha256(np.ascontiguousarray(self.causal_basis).tobytes()).hexdigest()


def fit_projection(f, rel_tol=1e-8):
    """Orthonormal basis of the head's row space via SVD."""
    W = f.head.weight.detach().double().numpy()
    _, sv, vt = np.linalg.svd(W, full_matrices=False)
    rank = int(np.sum(sv > rel_tol * sv[0])) if sv[0] > 0 else 0
    if rank < min(W.shape):
        warnings.warn(
            f"linear head is rank deficient (rank {rank} < {min(W.shape)}); "
            "causal basis reduced accordingly",
            RuntimeWarning,
            stacklevel=2,
        )
    return FactorProjection(np.ascontiguousarray(vt[:rank].T))


def extract_factors(projection, r):
    """Split representation(s) ``r`` into (c, s) with c + s = r."""
    if isinstance(r, torch.Tensor):
        if r.shape[-1] != projection.dim:
            raise InputError(f"representation dim {r.shape[-1]} != {projection.dim}")
        B = projection.basis_tensor(r.dtype)
        c = (r @ B) @ B.T
        return c, r - c
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != projection.dim:
        raise InputError(f"representation dim {r.shape[-1]} != {projection.dim}")
    B = projection.causal_basis
    c = (r @ B) @ B.T
    return c, r - c


class SpuriousHead(nn.Module):
    """g: spurious component -> K logits. Linear by default."""

    def __init__(self, dim, num_classes, hidden=0):
        super().__init__()
        self.dim = dim
        self.num_classes = num_classes
        self.hidden = hidden
        if hidden:
            self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, num_classes))
        else:
            self.net = nn.Linear(dim, num_classes)

    def forward(self, s):
        if s.shape[-1] != self.dim:
            raise InputError(f"spurious head expects dim {self.dim}, got {s.shape[-1]}")
        return self.net(s)


def representations(f, images, batch_size=500):
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(f.features(as_tensor(images[i : i + batch_size])))
    return torch.cat(out)


def train_spurious_head(dataset, f, projection, hidden=0, weight_decay=1e-4, seed=0, steps=300):
    """Fit g on s = P_S phi(x) to predict the label.

    Returns (g, accuracy on ``dataset``). Warns when g is near chance, in which
    case the spurious penalty carries no signal.
    """
    if projection.dim != f.feature_dim:
        raise InputError("projection was not fit on this classifier's representation")
    torch.manual_seed(seed)
    _, s = extract_factors(projection, representations(f, dataset.images))
    y = torch.as_tensor(np.array(dataset.labels))
    g = SpuriousHead(projection.dim, dataset.spec.causal_classes, hidden)
    opt = torch.optim.LBFGS(g.parameters(), lr=0.5, max_iter=steps, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        loss = F.cross_entropy(g(s), y) + weight_decay * sum((p**2).sum() for p in g.parameters())
        loss.backward()
        return loss

    opt.step(closure)
    g.eval()
    for p in g.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        acc = float((g(s).argmax(1) == y).float().mean())
    chance = float(np.bincount(dataset.labels).max()) / len(dataset)
    if acc < chance + 0.02:
        warnings.warn("spurious channel empty: g is at chance level", RuntimeWarning, stacklevel=2)
    log.info("spurious head accuracy %.4f (majority %.4f)", acc, chance)
    return g, acc


def spurious_logits(f, projection, g, x):
    """z = g(P_S phi(x)); differentiable in ``x``."""
    x = as_tensor(x) if not isinstance(x, torch.Tensor) else x
    single = x.ndim == 3
    if single:
        x = x[None]
    _, s = extract_factors(projection, f.features(x))
    z = g(s)
    return z[0] if single else z


class SpuriousChannel:
    """Bundles (f, projection, g) for use inside the steering loop."""

    def __init__(self, f, projection, g):
        self.f = f
        self.projection = projection
        self.g = g

    def __call__(self, x):
        return spurious_logits(self.f, self.projection, self.g, x)


def save_projection(projection, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path.with_suffix(".npy"), projection.causal_basis)
    meta = {"checksum": projection.checksum(), "shape": list(projection.causal_basis.shape)}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return path.with_suffix(".npy")


def load_projection(path):
    path = Path(path)
    basis = np.load(path.with_suffix(".npy"))
    proj = FactorProjection(basis)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta["checksum"] != proj.checksum():
        raise InputError(f"projection checksum mismatch at {path}")
    return proj


def save_head(g, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"dim": g.dim, "num_classes": g.num_classes, "hidden": g.hidden, "state": g.state_dict()}, path)
    return path


def load_head(path):
    payload = torch.load(Path(path), weights_only=False)
    g = SpuriousHead(payload["dim"], payload["num_classes"], payload["hidden"])
    g.load_state_dict(payload["state"])
    g.eval()
    for p in g.parameters():
        p.requires_grad_(False)
    return g
