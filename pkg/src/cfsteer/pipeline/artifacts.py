"""Trained artifacts (datasets, f, denoiser, projection, g, encoder, probe) with an on-disk cache."""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..causal import (
    SpuriousChannel,
    fit_projection,
    load_head,
    load_projection,
    save_head,
    save_projection,
    train_spurious_head,
)
from ..errors import MissingArtifactError
from ..metrics import FeatureEncoder, train_encoder
from ..models import (
    ModelRegistry,
    accuracy,
    load_checkpoint,
    parameter_checksum,
    save_checkpoint,
    train_classifier,
    train_ddpm,
)
from ..synthspur import BACKGROUND_PALETTE, RenderStyle, fit_probe, generate_dataset
from .config import stage_key


@dataclass
class Artifacts:
    train: object
    val: object
    test: object
    classifier: object
    denoiser: object
    schedule: object
    projection: object
    head: object
    encoder: object
    probe: object
    keys: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def channel(self):
        return SpuriousChannel(self.classifier, self.projection, self.head)

    def checksums(self):
        return {
            "classifier": parameter_checksum(self.classifier),
            "denoiser": parameter_checksum(self.denoiser),
            "projection": self.projection.checksum(),
            "head": parameter_checksum(self.head),
            "encoder": self.encoder.checksum(),
            "train": self.train.checksum(),
            "test": self.test.checksum(),
        }


def make_datasets(dcfg):
    """Train / val / test splits; the test split is decorrelated by default."""
    base = 3 * int(dcfg.seed)
    train = generate_dataset(dcfg.spec(), dcfg.train_size, base + 1)
    val = generate_dataset(dcfg.spec(), dcfg.val_size, base + 2)
    test = generate_dataset(dcfg.test_spec(), dcfg.test_size, base + 3)
    return train, val, test


def save_encoder(encoder, path):
    buf = io.BytesIO()
    torch.save({"config": encoder.config(), "state": encoder.state_dict()}, buf)
    Path(path).write_bytes(buf.getvalue())
    return path


def load_encoder(path):
    payload = torch.load(Path(path), weights_only=False)
    enc = FeatureEncoder(**payload["config"])
    enc.load_state_dict(payload["state"])
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc


def artifact_paths(config):
    """Cache paths keyed by the stage hashes of ``config``."""
    cache = Path(config.cache_dir)
    keys = artifact_keys(config)
    return {
        "classifier": cache / f"classifier-{keys['classifier']}.pt",
        "denoiser": cache / f"denoiser-{keys['denoiser']}.pt",
        "projection": cache / f"projection-{keys['causal']}.npy",
        "head": cache / f"head-{keys['causal']}.pt",
        "encoder": cache / f"encoder-{keys['encoder']}.pt",
    }


def artifact_keys(config):
    # the rendering constants are part of the data, so they key every trained artifact
    dcfg = (config.dataset, RenderStyle(), np.asarray(BACKGROUND_PALETTE).tolist())
    keys = {
        "classifier": stage_key(dcfg, config.classifier),
        "denoiser": stage_key(dcfg, config.ddpm),
        "encoder": stage_key(dcfg, config.encoder),
    }
    keys["causal"] = stage_key(keys["classifier"], config.causal)
    return keys


def _registry(config):
    return ModelRegistry(Path(config.cache_dir) / "registry.json")


def _missing(name, path, command):
    return MissingArtifactError(f"{name} not found at {path}; run `cfsteer {command}` or enable train_on_demand")


def ensure_classifier(config, datasets=None, train=False):
    path = artifact_paths(config)["classifier"]
    if path.exists():
        return load_checkpoint(path)[0]
    if not (train or config.train_on_demand):
        raise _missing("classifier", path, "train-classifier")
    tr, val, _ = datasets or make_datasets(config.dataset)
    t0 = time.perf_counter()
    f, rec = train_classifier(tr, val, config.classifier)
    save_checkpoint(path, "classifier", f, {"curve": rec.curve, "metrics": rec.metrics})
    _registry(config).register("classifier", path, seconds=time.perf_counter() - t0, **rec.metrics)
    return f


def ensure_denoiser(config, datasets=None, train=False):
    path = artifact_paths(config)["denoiser"]
    if path.exists():
        return load_checkpoint(path)[0]
    if not (train or config.train_on_demand):
        raise _missing("denoiser", path, "train-ddpm")
    tr, _, _ = datasets or make_datasets(config.dataset)
    t0 = time.perf_counter()
    den, _, rec = train_ddpm(tr, config.ddpm)
    save_checkpoint(path, "denoiser", den, {"curve": rec.curve})
    _registry(config).register("denoiser", path, seconds=time.perf_counter() - t0,
                                final_loss=rec.curve[-1]["loss"] if rec.curve else None)
    return den


def ensure_causal(config, f=None, datasets=None, train=False):
    paths = artifact_paths(config)
    if paths["projection"].exists() and paths["head"].exists():
        return load_projection(paths["projection"]), load_head(paths["head"])
    if not (train or config.train_on_demand):
        raise _missing("causal split", paths["projection"], "fit-causal")
    f = f or ensure_classifier(config, datasets)
    tr, _, _ = datasets or make_datasets(config.dataset)
    t0 = time.perf_counter()
    projection = fit_projection(f)
    c = config.causal
    head, acc = train_spurious_head(tr, f, projection, c.hidden, c.weight_decay, c.seed)
    save_projection(projection, paths["projection"])
    save_head(head, paths["head"])
    _registry(config).register("head", paths["head"], seconds=time.perf_counter() - t0,
                                accuracy=acc, rank=projection.rank)
    return projection, head


def ensure_encoder(config, datasets=None, train=False):
    path = artifact_paths(config)["encoder"]
    if path.exists():
        return load_encoder(path)
    if not (train or config.train_on_demand):
        raise _missing("encoder", path, "evaluate")
    tr, _, _ = datasets or make_datasets(config.dataset)
    e = config.encoder
    t0 = time.perf_counter()
    enc = train_encoder(tr.images[: e.train_size], e.steps, e.batch_size, e.temperature, e.seed, e.width, e.embed_dim)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_encoder(enc, path)
    _registry(config).register("encoder", path, seconds=time.perf_counter() - t0, checksum=enc.checksum())
    return enc


def load_artifacts(config):
    """Load every trained artifact a run needs, training missing ones when allowed."""
    Path(config.cache_dir).mkdir(parents=True, exist_ok=True)
    datasets = make_datasets(config.dataset)
    f = ensure_classifier(config, datasets)
    den = ensure_denoiser(config, datasets)
    projection, head = ensure_causal(config, f, datasets)
    enc = ensure_encoder(config, datasets)
    probe = fit_probe(config.dataset.spec(), config.metrics.probe_size, config.metrics.probe_seed)
    train, val, test = datasets
    info = {
        "val_acc": accuracy(f, val.images, val.labels),
        "test_acc": accuracy(f, test.images, test.labels),
    }
    return Artifacts(
        train, val, test, f, den, config.ddpm.schedule(), projection, head, enc, probe,
        artifact_keys(config), info,
    )
