"""Synthetic shape/hue dataset with a controllable spurious correlation.

The label is the rendered shape class (the causal factor). The background
hue (the spurious factor) agrees with a label-aligned palette entry with
probability ``correlation`` and is otherwise drawn uniformly from the
remaining palette entries, so ``correlation == 1 / spurious_values`` makes
hue and label independent.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

SHAPES = ("disc", "square", "cross", "triangle", "diamond", "ring")

BACKGROUND_PALETTE = np.array(
    [
        [0.40, 0.42, 0.54],
        [0.40, 0.52, 0.44],
        [0.50, 0.42, 0.44],
        [0.48, 0.50, 0.38],
    ]
)

ATTRIBUTES = ("shape", "hue")

_SUPERSAMPLE = 4


@dataclass(frozen=True)
class FactorSpec:
    causal_classes: int = 2
    spurious_values: int = 2
    correlation: float = 0.95
    image_size: int = 32
    channels: int = 3

    def validate(self):
        if not 2 <= self.causal_classes <= len(SHAPES):
            raise ConfigError(f"must be in [2, {len(SHAPES)}]", "causal_classes")
        if not 2 <= self.spurious_values <= len(BACKGROUND_PALETTE):
            raise ConfigError(
                f"must be in [2, {len(BACKGROUND_PALETTE)}]", "spurious_values"
            )
        lo = 1.0 / self.spurious_values
        if not (lo - 1e-12 <= self.correlation <= 1.0):
            raise ConfigError(f"must be in [{lo:g}, 1]", "correlation")
        if self.image_size < 16:
            raise ConfigError("must be >= 16", "image_size")
        if self.channels != 3:
            raise ConfigError("only 3-channel rendering is supported", "channels")
        return self

    def aligned_value(self, label):
        return label % self.spurious_values

    def with_correlation(self, correlation):
        return FactorSpec(**{**asdict(self), "correlation": float(correlation)})


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray
    label: int
    causal_attr: int
    spurious_attr: int
    sample_id: int = -1


@dataclass
class DatasetManifest:
    seed: int
    n: int
    spec: FactorSpec
    checksum: str
    split_sizes: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "seed": self.seed,
            "n": self.n,
            "spec": asdict(self.spec),
            "checksum": self.checksum,
            "split_sizes": dict(self.split_sizes),
        }


class SyntheticDataset:
    """Immutable collection of rendered samples.

    Pixels are stored as uint8 (N, C, H, W) so that lossless round trips
    through PNG are bit-exact; ``images`` exposes them as floats in [0, 1].
    """

    def __init__(self, pixels, labels, causal, spurious, spec, seed, ids=None):
        self.pixels = _frozen(np.ascontiguousarray(pixels, dtype=np.uint8))
        self.labels = _frozen(np.asarray(labels, dtype=np.int64))
        self.causal = _frozen(np.asarray(causal, dtype=np.int64))
        self.spurious = _frozen(np.asarray(spurious, dtype=np.int64))
        if ids is None:
            ids = np.arange(len(self.labels))
        self.ids = _frozen(np.asarray(ids, dtype=np.int64))
        self.spec = spec
        self.seed = seed

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return LabeledSample(
            image=self.pixels[i].astype(np.float32) / 255.0,
            label=int(self.labels[i]),
            causal_attr=int(self.causal[i]),
            spurious_attr=int(self.spurious[i]),
            sample_id=int(self.ids[i]),
        )

    @property
    def images(self):
        return self.pixels.astype(np.float32) / 255.0

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return SyntheticDataset(
            self.pixels[indices],
            self.labels[indices],
            self.causal[indices],
            self.spurious[indices],
            self.spec,
            self.seed,
            self.ids[indices],
        )

    def checksum(self):
        h = hashlib.sha256()
        for arr in (self.pixels, self.labels, self.causal, self.spurious, self.ids):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def manifest(self):
        return DatasetManifest(self.seed, len(self), self.spec, self.checksum())

    def agreement_rate(self):
        """Fraction of samples whose hue equals the label-aligned value."""
        aligned = self.labels % self.spec.spurious_values
        return float(np.mean(self.spurious == aligned))


def _frozen(arr):
    arr.setflags(write=False)
    return arr


def _coverage(shape, cx, cy, r, size):
    """Anti-aliased coverage mask of one shape, values in [0, 1]."""
    s = _SUPERSAMPLE
    coords = (np.arange(size * s) + 0.5) / s
    xx, yy = np.meshgrid(coords, coords)
    dx, dy = xx - cx, yy - cy
    if shape == "disc":
        inside = dx**2 + dy**2 <= r**2
    elif shape == "square":
        inside = np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    elif shape == "cross":
        arm = r / 3.0
        inside = ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    elif shape == "triangle":
        # apex up, base at cy + 0.8 r
        top, base = cy - r, cy + 0.8 * r
        frac = np.clip((yy - top) / (base - top), 0.0, 1.0)
        inside = (yy >= top) & (yy <= base) & (np.abs(dx) <= frac * r)
    elif shape == "diamond":
        inside = np.abs(dx) + np.abs(dy) <= 1.2 * r
    elif shape == "ring":
        d2 = dx**2 + dy**2
        inside = (d2 <= r**2) & (d2 >= (0.5 * r) ** 2)
    else:
        raise InputError(f"unknown shape {shape!r}")
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


@dataclass(frozen=True)
class RenderStyle:
    """Geometry and contrast of the rendered shape, relative to image size."""

    radius: tuple = (0.14, 0.20)
    jitter: float = 0.15
    contrast: tuple = (0.05, 0.20)
    noise: float = 0.03


def render(causal_attr, spurious_attr, rng, size=32, style=RenderStyle()):
    """Render one image as uint8 (3, size, size).

    The hue tints the whole image; the shape is a brighter patch of the same hue.
    """
    r = rng.uniform(*style.radius) * size
    cx = size / 2 + rng.uniform(-style.jitter, style.jitter) * size
    cy = size / 2 + rng.uniform(-style.jitter, style.jitter) * size
    cov = _coverage(SHAPES[causal_attr], cx, cy, r, size)[None]
    bg = BACKGROUND_PALETTE[spurious_attr] + rng.uniform(-0.03, 0.03)
    fg = bg + rng.uniform(*style.contrast)
    img = cov * fg[:, None, None] + (1.0 - cov) * bg[:, None, None]
    img = img + rng.normal(0.0, style.noise, size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _draw_factors(spec, rng):
    c = int(rng.integers(spec.causal_classes))
    aligned = spec.aligned_value(c)
    if rng.random() < spec.correlation:
        s = aligned
    else:
        others = [v for v in range(spec.spurious_values) if v != aligned]
        s = int(others[rng.integers(len(others))])
    return c, s


def generate_dataset(spec, n, seed, style=None):
    """Generate ``n`` samples; each sample has its own spawned RNG stream."""
    spec.validate()
    if n < 1:
        raise ConfigError("must be >= 1", "n")
    children = np.random.SeedSequence(seed).spawn(n)
    size = spec.image_size
    pixels = np.empty((n, 3, size, size), dtype=np.uint8)
    causal = np.empty(n, dtype=np.int64)
    spurious = np.empty(n, dtype=np.int64)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        c, s = _draw_factors(spec, rng)
        pixels[i] = render(c, s, rng, size, style or RenderStyle())
        causal[i], spurious[i] = c, s
    return SyntheticDataset(pixels, causal.copy(), causal, spurious, spec, seed)


def intervene(dataset, indices, causal=None, spurious=None, style=None):
    """Re-render samples with one attribute overridden and all nuisance draws kept.

    ``causal`` / ``spurious`` are either None (keep), an int, or a callable
    mapping the current value to the new one. Returns float images in [0, 1].
    """
    indices = np.asarray(indices, dtype=np.int64)
    ids = dataset.ids[indices]
    children = np.random.SeedSequence(dataset.seed).spawn(int(ids.max()) + 1)
    out = np.empty((len(indices), 3, dataset.spec.image_size, dataset.spec.image_size), dtype=np.float32)

    def pick(override, value):
        if override is None:
            return value
        return int(override(value)) if callable(override) else int(override)

    for k, (i, sid) in enumerate(zip(indices, ids)):
        rng = np.random.default_rng(children[sid])
        _draw_factors(dataset.spec, rng)
        c = pick(causal, int(dataset.causal[i]))
        s = pick(spurious, int(dataset.spurious[i]))
        out[k] = render(c, s, rng, dataset.spec.image_size, style or RenderStyle()) / 255.0
    return out


def split(dataset, fractions, seed):
    """Stratified deterministic partition into three index sets."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError("need three positive fractions", "fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("must sum to 1", "fractions")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    # interleave classes by fractional rank so every prefix is class balanced
    key = np.empty(n)
    for k in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == k)
        order = rng.permutation(len(members))
        key[members[order]] = (np.arange(len(members)) + rng.random()) / len(members)
    ranked = np.lexsort((rng.random(n), key))
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = (
        ranked[:n_train],
        ranked[n_train : n_train + n_val],
        ranked[n_train + n_val :],
    )
    return tuple(np.sort(p) for p in parts)


# -- attribute oracle -------------------------------------------------------


def border_color(images):
    """Mean colour of the 2-pixel image border; (N, C, H, W) -> (N, C)."""
    images = np.asarray(images, dtype=np.float64)
    mask = np.ones(images.shape[-2:], dtype=bool)
    mask[2:-2, 2:-2] = False
    return images[..., mask].mean(axis=-1)


class AttributeProbe:
    """Trained probe recovering (shape, hue) from pixels alone.

    Hue: logistic regression on the border colour. Shape: a small CNN trained
    on a decorrelated set, so it cannot lean on hue.
    """

    def __init__(self, spec):
        self.spec = spec
        self.hue_model = None
        self.shape_model = None

    def fit(self, dataset, seed=0, epochs=8):
        from sklearn.linear_model import LogisticRegression
        from sklearn.pipeline import make_pipeline
        from sklearn.preprocessing import StandardScaler

        from .models import ClassifierConfig, train_classifier

        self.hue_model = make_pipeline(
            StandardScaler(), LogisticRegression(C=10.0, max_iter=2000)
        ).fit(border_color(dataset.images), dataset.spurious)
        n_val = max(1, len(dataset) // 10)
        order = np.arange(len(dataset))
        self.shape_model, _ = train_classifier(
            dataset.subset(order[n_val:]), dataset.subset(order[:n_val]),
            ClassifierConfig(epochs=epochs, width=8, feature_dim=32, seed=seed),
        )
        return self

    def predict(self, images, batch_size=500):
        import torch

        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        with torch.no_grad():
            causal = np.concatenate([
                self.shape_model(torch.as_tensor(images[i : i + batch_size])).argmax(1).numpy()
                for i in range(0, len(images), batch_size)
            ])
        spurious = self.hue_model.predict(border_color(images))
        return causal.astype(np.int64), np.asarray(spurious, dtype=np.int64)


def fit_probe(spec, n=4000, seed=0):
    """Fit an AttributeProbe on an uncorrelated set so shape and hue are learned separately."""
    probe_spec = spec.with_correlation(1.0 / spec.spurious_values)
    return AttributeProbe(spec).fit(generate_dataset(probe_spec, n, seed), seed=seed)


def attribute_oracle(sample, probe=None):
    """Return (causal_attr, spurious_attr) for a sample.

    Generated samples carry their construction-time factors. A bare image
    (an array without metadata) is classified by ``probe``.
    """
    if isinstance(sample, LabeledSample):
        return sample.causal_attr, sample.spurious_attr
    if probe is None:
        raise InputError("image without metadata requires a fitted AttributeProbe")
    c, s = probe.predict(sample)
    return int(c[0]), int(s[0])


# -- persistence ------------------------------------------------------------


def save_dataset(dataset, directory):
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(dataset)):
        sid = int(dataset.ids[i])
        name = f"images/{sid:06d}.png"
        Image.fromarray(np.transpose(dataset.pixels[i], (1, 2, 0))).save(directory / name)
        rows.append(
            {
                "id": sid,
                "file": name,
                "label": int(dataset.labels[i]),
                "causal_attr": int(dataset.causal[i]),
                "spurious_attr": int(dataset.spurious[i]),
            }
        )
    manifest = dataset.manifest().to_dict()
    manifest["samples"] = rows
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_dataset(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = FactorSpec(**manifest["spec"])
    rows = manifest["samples"]
    pixels = np.stack(
        [np.transpose(np.asarray(Image.open(directory / r["file"])), (2, 0, 1)) for r in rows]
    )
    ds = SyntheticDataset(
        pixels,
        [r["label"] for r in rows],
        [r["causal_attr"] for r in rows],
        [r["spurious_attr"] for r in rows],
        spec,
        manifest["seed"],
        [r["id"] for r in rows],
    )
    if ds.checksum() != manifest["checksum"]:
        raise InputError(f"checksum mismatch for dataset at {directory}")
    return ds
