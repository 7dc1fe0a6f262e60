"""Synthetic confounded benchmarks.

Two generators:

* ``generate`` renders small grayscale images where each class carries a
  faint square blob at a class-specific position and a bright 3x3 corner
  patch acts as the confounder. Patch presence is coupled to the label with
  a configurable match probability per split (0.5 = independent, 1.0 =
  perfectly aligned, 0.0 = perfectly anti-aligned).
* ``toy_linear`` produces a 2-feature analytic testbed: feature 0 carries
  the class signal, feature 1 the confounder. Closed-form Bayes accuracies
  make it the reference case for the update-telemetry tests.

Both are pure functions of their config: same seed, same bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import read_tensor, write_tensor
from .util import canonical_json

__all__ = [
    "LabeledSet",
    "ConfoundedImageConfig",
    "ToyConfig",
    "DatasetBundle",
    "generate",
    "toy_linear",
    "save_bundle",
    "load_bundle",
    "PATCH_SIZE",
]

BUNDLE_FORMAT = "cf-bundle/1"
PATCH_SIZE = 3

# split codes feed the per-split RNG streams
_SPLIT_TRAIN, _SPLIT_CONF, _SPLIT_DECONF, _SPLIT_ALIGNED = 0, 1, 2, 3

_ARRAY_FILES = (
    ("X_train.bin", "task", "X"),
    ("y_train.bin", "task", "y"),
    ("X_conf.bin", "confounder", "X"),
    ("s_conf.bin", "confounder", "y"),
    ("X_test_deconf.bin", "test_deconf", "X"),
    ("y_test_deconf.bin", "test_deconf", "y"),
    ("X_test_aligned.bin", "test_aligned", "X"),
    ("y_test_aligned.bin", "test_aligned", "y"),
)


@dataclass
class LabeledSet:
    """Inputs plus integer labels; the unit handed to training/evaluation."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.ascontiguousarray(np.asarray(self.X, dtype=np.float64))
        self.y = np.ascontiguousarray(np.asarray(self.y, dtype=np.int64))
        if self.X.shape[0] != self.y.shape[0]:
            raise ConfigError(f"X has {self.X.shape[0]} samples but y has {self.y.shape[0]}")

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class ConfoundedImageConfig:
    """Config for the confounded image benchmark.

    ``train_correlation`` / ``test_correlation`` are the probabilities that
    patch presence matches the class label in the task and de-confounded
    test splits (the aligned test split reuses ``train_correlation``).
    ``conf_correlation`` plays the same role for the confounder-labeled
    split and defaults to 0.5: the patch is present in half of those images
    regardless of class, mirroring a separately collected, balanced
    confounder-labeled set.
    """

    image_size: int = 16
    num_classes: int = 2
    class_amp: float = 0.22
    blob_size: int = 3
    confounder_amp: float = 1.0
    train_correlation: float = 0.95
    test_correlation: float = 0.0
    conf_correlation: float = 0.5
    noise_std: float = 0.1
    n_train: int = 2000
    n_test: int = 2000
    n_conf: Optional[int] = None
    seed: int = 0
    conf_seed: Optional[int] = None

    def __post_init__(self):
        for name in ("train_correlation", "test_correlation", "conf_correlation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be at least 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        # class blobs sit in the lower half, the patch in the top-left corner;
        # regions must not collide
        for k in range(self.num_classes):
            r0, c0 = self._blob_origin(k)
            if r0 < PATCH_SIZE and c0 < PATCH_SIZE:
                raise ConfigError(f"class {k} blob overlaps the confounder patch region")
            if c0 + self.blob_size > self.image_size or r0 + self.blob_size > self.image_size:
                raise ConfigError(
                    f"class {k} blob does not fit a {self.image_size}x{self.image_size} image"
                )

    def _blob_origin(self, k: int) -> tuple[int, int]:
        row = self.image_size - self.blob_size - 3
        col = 2 + k * (self.blob_size + 2)
        return row, col

    def blob_region(self, k: int) -> tuple[slice, slice]:
        r, c = self._blob_origin(k)
        return slice(r, r + self.blob_size), slice(c, c + self.blob_size)

    def patch_region(self) -> tuple[slice, slice]:
        return slice(0, PATCH_SIZE), slice(0, PATCH_SIZE)


@dataclass(frozen=True)
class ToyConfig:
    """2-feature analytic testbed; unit-variance Gaussian noise per feature."""

    seed: int = 0
    n: int = 500
    signal_weight: float = 1.0
    confounder_weight: float = 1.5
    train_corr: float = 0.9
    test_corr: float = 0.0

    def __post_init__(self):
        if self.n < 10:
            raise ConfigError(f"toy set needs n >= 10, got {self.n}")
        for name in ("train_corr", "test_corr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class DatasetBundle:
    """Task split, confounder split, and the two evaluation splits."""

    task: LabeledSet
    confounder: LabeledSet
    test_deconf: LabeledSet
    test_aligned: LabeledSet
    manifest: dict = field(default_factory=dict)

    def split(self, name: str) -> LabeledSet:
        try:
            return getattr(self, name)
        except AttributeError as exc:
            raise ConfigError(f"unknown split {name!r}") from exc


def _rng_for(seed: int, split_code: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, split_code])))


def _draw_confounder_bits(y: np.ndarray, match_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Patch presence per sample: matches the class parity bit w.p. match_prob."""
    base = y % 2
    match = rng.random(y.shape[0]) < match_prob
    return np.where(match, base, 1 - base).astype(np.int64)


def _render_images(cfg: ConfoundedImageConfig, y: np.ndarray, s: np.ndarray, rng) -> np.ndarray:
    n = y.shape[0]
    H = cfg.image_size
    X = np.zeros((n, 1, H, H))
    for k in range(cfg.num_classes):
        rows, cols = cfg.blob_region(k)
        sel = y == k
        X[sel, 0, rows, cols] += cfg.class_amp
    pr, pc = cfg.patch_region()
    X[s == 1, 0, pr, pc] += cfg.confounder_amp
    if cfg.noise_std > 0:
        X += rng.normal(0.0, cfg.noise_std, size=X.shape)
    np.clip(X, 0.0, 1.0 + cfg.confounder_amp, out=X)
    return X


def _image_split(cfg: ConfoundedImageConfig, n: int, match_prob: float, seed: int, code: int):
    rng = _rng_for(seed, code)
    y = rng.integers(0, cfg.num_classes, size=n)
    s = _draw_confounder_bits(y, match_prob, rng)
    X = _render_images(cfg, y, s, rng)
    return X, y.astype(np.int64), s


def generate(cfg: ConfoundedImageConfig) -> DatasetBundle:
    """Render all four splits of the confounded image benchmark."""
    X1, y1, s1 = _image_split(cfg, cfg.n_train, cfg.train_correlation, cfg.seed, _SPLIT_TRAIN)

    conf_seed = cfg.seed if cfg.conf_seed is None else cfg.conf_seed
    n_conf = cfg.n_train if cfg.n_conf is None else cfg.n_conf
    X2, y2, s2 = _image_split(cfg, n_conf, cfg.conf_correlation, conf_seed, _SPLIT_CONF)

    Xd, yd, sd = _image_split(cfg, cfg.n_test, cfg.test_correlation, cfg.seed, _SPLIT_DECONF)
    Xa, ya, sa = _image_split(cfg, cfg.n_test, cfg.train_correlation, cfg.seed, _SPLIT_ALIGNED)

    manifest = {
        "format": BUNDLE_FORMAT,
        "kind": "image",
        "config": asdict(cfg),
        "notes": "patch = additive top-left corner square; class blobs are faint squares in the lower half",
        "stats": {
            "train_match_rate": float((s1 == y1 % 2).mean()),
            "conf_match_rate": float((s2 == y2 % 2).mean()),
            "deconf_match_rate": float((sd == yd % 2).mean()),
            "aligned_match_rate": float((sa == ya % 2).mean()),
        },
    }
    return DatasetBundle(
        task=LabeledSet(X1, y1),
        confounder=LabeledSet(X2, s2),
        test_deconf=LabeledSet(Xd, yd),
        test_aligned=LabeledSet(Xa, ya),
        manifest=manifest,
    )


def _toy_split(cfg: ToyConfig, n: int, corr: float, code: int, label_kind: str):
    """label_kind 'y': labels are classes; 's': labels are confounder bits."""
    rng = _rng_for(cfg.seed, code)
    y = rng.integers(0, 2, size=n)
    s = _draw_confounder_bits(y, corr, rng)
    X = np.empty((n, 2))
    X[:, 0] = (2 * y - 1) * cfg.signal_weight + rng.normal(0.0, 1.0, n)
    X[:, 1] = (2 * s - 1) * cfg.confounder_weight + rng.normal(0.0, 1.0, n)
    labels = y if label_kind == "y" else s
    return X, labels.astype(np.int64), y, s


def toy_linear(
    seed: int = 0,
    n: int = 500,
    signal_weight: float = 1.0,
    confounder_weight: float = 1.5,
    train_corr: float = 0.9,
    test_corr: float = 0.0,
) -> DatasetBundle:
    """2-feature bundle: x0 carries the class, x1 the confounder."""
    cfg = ToyConfig(seed, n, signal_weight, confounder_weight, train_corr, test_corr)
    X1, y1, _, s1 = _toy_split(cfg, cfg.n, cfg.train_corr, _SPLIT_TRAIN, "y")
    X2, s2, y2, _ = _toy_split(cfg, cfg.n, 0.5, _SPLIT_CONF, "s")
    Xd, yd, _, sd = _toy_split(cfg, cfg.n, cfg.test_corr, _SPLIT_DECONF, "y")
    Xa, ya, _, sa = _toy_split(cfg, cfg.n, cfg.train_corr, _SPLIT_ALIGNED, "y")
    manifest = {
        "format": BUNDLE_FORMAT,
        "kind": "toy",
        "config": asdict(cfg),
        "stats": {
            "train_match_rate": float((s1 == y1).mean()),
            "conf_match_rate": float((s2 == y2).mean()),
            "deconf_match_rate": float((sd == yd).mean()),
            "aligned_match_rate": float((sa == ya).mean()),
        },
    }
    return DatasetBundle(
        task=LabeledSet(X1, y1),
        confounder=LabeledSet(X2, s2),
        test_deconf=LabeledSet(Xd, yd),
        test_aligned=LabeledSet(Xa, ya),
        manifest=manifest,
    )


# -- persistence -------------------------------------------------------------------


def save_bundle(bundle: DatasetBundle, path) -> None:
    """Directory layout: manifest.json plus one tensor record per array."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(canonical_json(bundle.manifest) + "\n", encoding="ascii")
    for fname, split, part in _ARRAY_FILES:
        labeled = bundle.split(split)
        arr = labeled.X if part == "X" else labeled.y.astype(np.float64)
        with open(root / fname, "wb") as f:
            write_tensor(f, arr)


def load_bundle(path) -> DatasetBundle:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no bundle manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="ascii"))
    except ValueError as exc:
        raise FormatError(f"bad bundle manifest: {exc}") from exc
    if manifest.get("format") != BUNDLE_FORMAT:
        raise FormatError(f"unsupported bundle format {manifest.get('format')!r}")

    arrays: dict[tuple[str, str], np.ndarray] = {}
    for fname, split, part in _ARRAY_FILES:
        fpath = root / fname
        if not fpath.exists():
            raise FormatError(f"bundle is missing {fname}")
        with open(fpath, "rb") as f:
            arrays[(split, part)] = read_tensor(f)

    def labeled(split: str) -> LabeledSet:
        return LabeledSet(arrays[(split, "X")], arrays[(split, "y")].astype(np.int64))

    return DatasetBundle(
        task=labeled("task"),
        confounder=labeled("confounder"),
        test_deconf=labeled("test_deconf"),
        test_aligned=labeled("test_aligned"),
        manifest=manifest,
    )
