"""Synthetic multitask dataset: generator, binary feature files, loader, batching.

Every sample is driven by one latent vector z ~ uniform[-1,1]^d. Emotions,
country, and age are deterministic functions of z, and the feature matrix is
a z-weighted sum of fixed low-frequency sinusoid patterns plus gaussian
noise, so all three tasks are learnable from the features by construction.
"""

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, LoadError, StructuralError

FEATURE_MAGIC = b"MTLF"
FEATURE_VERSION = 1
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = (
    ["sample_id", "split"]
    + [f"emo_{i}" for i in range(10)]
    + ["country", "age", "feature_file"]
)


@dataclass
class GenConfig:
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    height: int = 64
    width: int = 128
    latent_dim: int = 8
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for key in ("n_train", "n_val", "n_test", "height", "width", "latent_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")

    def as_dict(self):
        return {k: getattr(self, k) for k in (
            "n_train", "n_val", "n_test", "height", "width",
            "latent_dim", "noise_std", "seed",
        )}


def latent_maps(config: GenConfig):
    """The fixed target maps: A (10 x d, sigmoid scale), B (4 x d, orthonormal
    rows, argmax -> country), c (d, tanh scale), P (d patterns H x W)."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    d = config.latent_dim
    A = rng.normal(size=(10, d))
    A *= 2.0 / np.linalg.norm(A, axis=1, keepdims=True)
    # QR of a d x 4 gaussian gives 4 orthonormal rows after transposition,
    # which keeps the argmax classes roughly balanced
    raw = rng.normal(size=(d, 4))
    q, _ = np.linalg.qr(raw)
    B = q.T
    c = rng.normal(size=d)
    c *= 1.5 / np.linalg.norm(c)
    H, W = config.height, config.width
    rows = np.arange(H) + 0.5
    cols = np.arange(W) + 0.5
    P = np.empty((d, H, W))
    for j in range(d):
        fr = 1 + (j % 4)
        fc = 1 + (j // 4)
        u = np.sin(np.pi * fr * rows / H)
        v = np.sin(np.pi * fc * cols / W)
        pat = np.outer(u, v)
        P[j] = pat / np.linalg.norm(pat)
    return A, B, c, P


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def sample_targets(z, A, B, c):
    emotions = _sigmoid(A @ z)
    country = int(np.argmax(B @ z))
    age = 29.5 + 9.5 * math.tanh(float(c @ z))
    return emotions, country, age


def write_feature_file(path, features):
    arr = np.asarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise StructuralError(f"feature matrix must be 2-d, got rank {arr.ndim}")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def read_feature_file(path):
    try:
        f = open(path, "rb")
    except OSError as e:
        raise LoadError(f"{path}: cannot read feature file ({e.strerror})") from None
    with f:
        head = f.read(16)
        if len(head) != 16 or head[:4] != FEATURE_MAGIC:
            raise LoadError(f"{path}: not a feature file (bad magic)")
        version, h, w = struct.unpack("<III", head[4:])
        if version != FEATURE_VERSION:
            raise LoadError(f"{path}: unsupported feature version {version}")
        raw = f.read(4 * h * w)
        if len(raw) != 4 * h * w:
            raise LoadError(f"{path}: truncated feature payload")
        if f.read(1):
            raise LoadError(f"{path}: trailing bytes")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w)


def generate_synthetic(config: GenConfig, out_dir):
    """Write feature files plus manifest.csv under out_dir; returns manifest path.

    Byte-identical outputs for identical configs: all randomness flows from
    config.seed through named child streams.
    """
    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    A, B, c, P = latent_maps(config)
    d = config.latent_dim
    counts = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    rows = []
    for split_idx, split in enumerate(SPLITS):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1 + split_idx]))
        for i in range(counts[split]):
            z = rng.uniform(-1.0, 1.0, size=d)
            emotions, country, age = sample_targets(z, A, B, c)
            features = np.tensordot(z, P, axes=1)
            if config.noise_std > 0:
                features = features + rng.normal(0.0, config.noise_std, size=features.shape)
            sample_id = f"{split}_{i:05d}"
            rel = f"features/{sample_id}.mtlf"
            write_feature_file(out / rel, features)
            rows.append(
                [sample_id, split]
                + [f"{v:.9f}" for v in emotions]
                + [str(country), f"{age:.9f}", rel]
            )
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return manifest


class SplitData(NamedTuple):
    ids: list
    features: np.ndarray   # (N, H, W) float32
    emotions: np.ndarray   # (N, 10) float64
    country: np.ndarray    # (N,) int64
    age: np.ndarray        # (N,) float64


class Dataset:
    def __init__(self, splits: dict, height: int, width: int):
        self.splits = splits
        self.height = height
        self.width = width

    def split(self, name) -> SplitData:
        if name not in self.splits:
            raise StructuralError(f"unknown split {name!r}")
        return self.splits[name]


def load_dataset(manifest_path) -> Dataset:
    """Parse the manifest, load every referenced feature file, validate ranges."""
    manifest = Path(manifest_path)
    if not manifest.is_file():
        raise LoadError(f"manifest not found: {manifest}")
    base = manifest.parent
    per_split = {s: {"ids": [], "features": [], "emotions": [], "country": [], "age": []}
                 for s in SPLITS}
    seen = set()
    with open(manifest, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{manifest}: empty manifest") from None
        if header != MANIFEST_HEADER:
            raise LoadError(f"{manifest}: bad header {header!r}")
        for ln, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise LoadError(f"{manifest}:{ln}: expected {len(MANIFEST_HEADER)} fields")
            sid, split = row[0], row[1]
            if sid in seen:
                raise LoadError(f"{manifest}:{ln}: duplicate sample_id {sid}")
            seen.add(sid)
            if split not in SPLITS:
                raise LoadError(f"sample {sid}: unknown split {split!r}")
            try:
                emotions = np.array([float(v) for v in row[2:12]])
                country = int(row[12])
                age = float(row[13])
            except ValueError as e:
                raise LoadError(f"sample {sid}: malformed value: {e}") from None
            if not ((emotions >= 0) & (emotions <= 1)).all():
                raise LoadError(f"sample {sid}: emotion outside [0,1]")
            if not 0 <= country <= 3:
                raise LoadError(f"sample {sid}: country label {country} outside [0,3]")
            feat_path = base / row[14]
            if not feat_path.is_file():
                raise LoadError(f"sample {sid}: feature file missing: {feat_path}")
            features = read_feature_file(feat_path)
            bucket = per_split[split]
            bucket["ids"].append(sid)
            bucket["features"].append(features)
            bucket["emotions"].append(emotions)
            bucket["country"].append(country)
            bucket["age"].append(age)

    shapes = set()
    splits = {}
    for name, bucket in per_split.items():
        if not bucket["ids"]:
            raise LoadError(f"{manifest}: empty split {name!r}")
        feats = np.stack(bucket["features"])
        shapes.add(feats.shape[1:])
        splits[name] = SplitData(
            ids=bucket["ids"],
            features=feats,
            emotions=np.stack(bucket["emotions"]),
            country=np.array(bucket["country"], dtype=np.int64),
            age=np.array(bucket["age"], dtype=np.float64),
        )
    if len(shapes) != 1:
        raise LoadError(f"{manifest}: inconsistent feature dims across samples: {sorted(shapes)}")
    (h, w) = shapes.pop()
    return Dataset(splits, h, w)


class Batch(NamedTuple):
    x: np.ndarray         # (B, 1, H, crop_width) float64
    emotions: np.ndarray  # (B, 10)
    country: np.ndarray   # (B,) int64
    age: np.ndarray       # (B,)


def batches(dataset: Dataset, split: str, batch_size: int, seed: int,
            crop_width: int, epoch: int = 0):
    """Yield Batch tuples for one pass over the split.

    Train split: seeded shuffle and per-sample random crop offsets, both
    keyed on (seed, epoch). Val/test: manifest order, center crops, no
    randomness. The final short batch is kept.
    """
    data = dataset.split(split)
    n = len(data.ids)
    if n == 0:
        raise StructuralError(f"empty split {split!r}")
    if batch_size < 1:
        raise StructuralError(f"batch_size must be >= 1, got {batch_size}")
    W = dataset.width
    if crop_width > W or crop_width < 1:
        raise StructuralError(f"crop_width {crop_width} outside [1, {W}]")

    if split == "train":
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
        order = rng.permutation(n)
        offsets = rng.integers(0, W - crop_width + 1, size=n)
    else:
        order = np.arange(n)
        offsets = np.full(n, (W - crop_width) // 2)

    for start in range(0, n, batch_size):
        pick = order[start:start + batch_size]
        xs = np.empty((len(pick), 1, dataset.height, crop_width))
        for row, i in enumerate(pick):
            off = int(offsets[i])
            xs[row, 0] = data.features[i][:, off:off + crop_width]
        yield Batch(
            x=xs,
            emotions=data.emotions[pick],
            country=data.country[pick],
            age=data.age[pick],
        )
