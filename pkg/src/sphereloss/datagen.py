"""Deterministic synthetic datasets: sphere clusters, glyph images, pair lists.

All randomness comes from :class:`~sphereloss.rng.CounterRNG` streams indexed
by what is being drawn (``("center", c, attempt)``, ``("sample", c, j)``, ...)
rather than by draw order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ._io import read_csv, write_csv
from .exceptions import ConfigInvalid, InsufficientSamples
from .rng import CounterRNG
from .sphere import normalize

MIN_CENTER_ANGLE = 0.1
MAX_CENTER_ATTEMPTS = 1000


@dataclass(frozen=True)
class SphereDatasetSpec:
    classes: int = 50
    dim: int = 8
    samples_per_class: int = 40
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2 or self.dim < 2:
            raise ConfigInvalid("need at least 2 classes and dimension >= 2")
        if self.samples_per_class < 1:
            raise ConfigInvalid("samples_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigInvalid("noise_sigma must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SphereDatasetSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def class_centers(spec: SphereDatasetSpec) -> np.ndarray:
    """Unit class centers, resampling any that fall within 0.1 rad of an earlier one."""
    root = CounterRNG(spec.seed).spawn("center")
    centers = []
    for c in range(spec.classes):
        for attempt in range(MAX_CENTER_ATTEMPTS):
            cand = normalize(root.spawn(c, attempt).normal(spec.dim))
            if all(np.arccos(np.clip(cand @ prev, -1.0, 1.0)) >= MIN_CENTER_ANGLE for prev in centers):
                centers.append(cand)
                break
        else:
            raise ConfigInvalid(f"could not place class {c} at least {MIN_CENTER_ANGLE} rad from the others")
    return np.array(centers)


def gen_sphere_dataset(spec: SphereDatasetSpec, stream: str = "sample"):
    """Unit-norm samples ``normalize(center + noise_sigma * gaussian)``.

    ``stream`` selects an independent sample stream over the same centers,
    e.g. ``"heldout"`` for evaluation data.  Samples are grouped by class.
    """
    centers = class_centers(spec)
    root = CounterRNG(spec.seed).spawn(stream)
    feats = np.empty((spec.classes * spec.samples_per_class, spec.dim))
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    row = 0
    for c in range(spec.classes):
        for j in range(spec.samples_per_class):
            if spec.noise_sigma == 0:
                feats[row] = centers[c]
            else:
                feats[row] = normalize(centers[c] + spec.noise_sigma * root.spawn(c, j).normal(spec.dim))
            row += 1
    return feats, labels


def write_dataset_csv(path, features, labels, comment: str | None = None):
    header = ["label"] + [f"f{i}" for i in range(features.shape[1])]
    rows = ([int(lab)] + [float(v) for v in feat] for feat, lab in zip(features, labels))
    return write_csv(path, header, rows, comment=comment)


def read_dataset_csv(path):
    _, rows = read_csv(path)
    labels = np.array([int(r[0]) for r in rows])
    feats = np.array([[float(v) for v in r[1:]] for r in rows])
    return feats, labels


@dataclass
class PairProtocol:
    """Index pairs with a same-identity flag and a fold id per pair."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    same: np.ndarray
    fold: np.ndarray
    folds: int

    def __len__(self):
        return len(self.same)

    def rows(self):
        return [(int(f), int(a), int(b), int(s)) for f, a, b, s in zip(self.fold, self.idx_a, self.idx_b, self.same)]

    def write_csv(self, path, comment: str | None = None):
        return write_csv(path, ["fold", "idx_a", "idx_b", "same"], self.rows(), comment=comment)

    @classmethod
    def read_csv(cls, path) -> "PairProtocol":
        _, rows = read_csv(path)
        arr = np.array([[int(v) for v in r] for r in rows], dtype=np.int64).reshape(-1, 4)
        return cls(arr[:, 1], arr[:, 2], arr[:, 3].astype(bool), arr[:, 0], int(arr[:, 0].max()) + 1 if len(arr) else 0)


def gen_pair_protocol(labels, n_pos: int, n_neg: int, folds: int, seed: int) -> PairProtocol:
    """Sample distinct positive and negative pairs and deal them into folds.

    Positives and negatives are shuffled separately and dealt round-robin, so
    every fold receives both kinds when ``n_pos, n_neg >= folds``.
    """
    labels = np.asarray(labels)
    if folds < 1:
        raise ConfigInvalid("folds must be >= 1")
    if n_pos < folds or n_neg < folds:
        raise ConfigInvalid("need at least one positive and one negative pair per fold")
    root = CounterRNG(seed).spawn("pairs")

    by_class: dict = {}
    for i, lab in enumerate(labels.tolist()):
        by_class.setdefault(lab, []).append(i)
    positives = [(a, b) for members in by_class.values() for k, a in enumerate(members) for b in members[k + 1 :]]
    if len(positives) < n_pos:
        raise InsufficientSamples(f"only {len(positives)} same-identity pairs available, need {n_pos}")
    n = len(labels)
    class_sizes = np.array([len(m) for m in by_class.values()])
    n_negative_total = (n * n - int(np.sum(class_sizes**2))) // 2
    if n_negative_total < n_neg:
        raise InsufficientSamples(f"only {n_negative_total} different-identity pairs available, need {n_neg}")

    perm = root.spawn("pos").permutation(len(positives))
    pos = [positives[i] for i in perm[:n_pos]]

    neg, seen = [], set()
    draw = root.spawn("neg")
    while len(neg) < n_neg:
        a, b = draw.integers_below([n, n])
        if labels[a] == labels[b]:
            continue
        key = (min(a, b), max(a, b))
        if key in seen:
            continue
        seen.add(key)
        neg.append(key)

    entries = [(a, b, True, k % folds) for k, (a, b) in enumerate(pos)]
    entries += [(a, b, False, k % folds) for k, (a, b) in enumerate(neg)]
    order = root.spawn("order").permutation(len(entries))
    entries = sorted((entries[i] for i in order), key=lambda e: e[3])
    arr = np.array(entries, dtype=np.int64)
    return PairProtocol(arr[:, 0], arr[:, 1], arr[:, 2].astype(bool), arr[:, 3], folds)


def glyph_templates(classes: int, size: int, seed: int, cells: int = 7) -> np.ndarray:
    """Distinct random binary ``cells x cells`` patterns upsampled to ``size``."""
    if size not in (28, 56):
        raise ConfigInvalid("glyph size must be 28 or 56")
    if classes < 1:
        raise ConfigInvalid("classes must be >= 1")
    root = CounterRNG(seed).spawn("glyph")
    scale = size // cells
    templates, seen = [], set()
    attempt = 0
    while len(templates) < classes:
        bits = root.spawn(len(templates), attempt).uniform(cells * cells) < 0.5
        attempt += 1
        key = bits.tobytes()
        if key in seen or not bits.any():
            continue
        seen.add(key)
        grid = bits.reshape(cells, cells).astype(np.float64)
        templates.append(np.kron(grid, np.ones((scale, scale))))
    return np.array(templates)


def gen_glyph_images(classes: int, size: int, samples_per_class: int, noise_sigma: float, seed: int):
    """Noisy copies of per-class binary glyphs, clipped to ``[0, 1]``.

    Returns images of shape ``(N, 1, size, size)`` and labels, grouped by class.
    """
    if noise_sigma < 0 or samples_per_class < 1:
        raise ConfigInvalid("need noise_sigma >= 0 and samples_per_class >= 1")
    templates = glyph_templates(classes, size, seed)
    root = CounterRNG(seed).spawn("glyph-noise")
    images = np.empty((classes * samples_per_class, 1, size, size))
    labels = np.repeat(np.arange(classes), samples_per_class)
    row = 0
    for c in range(classes):
        for j in range(samples_per_class):
            img = templates[c]
            if noise_sigma > 0:
                img = img + noise_sigma * root.spawn(c, j).normal((size, size))
            images[row, 0] = np.clip(img, 0.0, 1.0)
            row += 1
    return images, labels
