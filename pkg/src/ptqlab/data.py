"""Synthetic image-classification data: generation, the QDDS file format,
and calibration sampling.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


def _stable_tag(text: str) -> int:
    return zlib.crc32(text.encode("utf-8")) & 0x7FFFFFFF

QDDS_MAGIC = b"QDDS"
QDDS_VERSION = 1


@dataclass
class DatasetSpec:
    """Generator parameters for a class-conditional blob + texture dataset.

    `variant` selects a generative domain; "shifted" redraws class prototypes
    from displaced ranges and serves as the cross-domain calibration source.
    """

    classes: int = 10
    image_size: int = 16
    channels: int = 3
    train_size: int = 5000
    test_size: int = 1000
    seed: int = 0
    noise: float = 0.10
    variant: str = "base"
    normalization: tuple[float, float] = (0.0, 1.0)  # (mean, std) applied at load

    def tag(self) -> str:
        return f"synthetic-{self.variant}-c{self.classes}-s{self.image_size}-seed{self.seed}"


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int
    classes: int
    spec: DatasetSpec | None = None


@dataclass
class CalibrationSet:
    """Reconstruction data: a train split plus a held-out slice for MSE reporting."""

    images: np.ndarray
    labels: np.ndarray
    heldout_images: np.ndarray
    heldout_labels: np.ndarray
    source_tag: str = ""


def _class_prototypes(spec: DatasetSpec) -> list[dict]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _stable_tag(spec.variant), 0xC1A55]))
    shifted = spec.variant != "base"
    protos = []
    for _ in range(spec.classes):
        protos.append({
            "center": rng.uniform(4.0, spec.image_size - 4.0, size=2),
            "sigma": rng.uniform(1.6, 3.0),
            "color": rng.uniform(0.35, 1.0, size=spec.channels),
            "freq": rng.uniform(1.0, 3.5) + (2.0 if shifted else 0.0),
            "theta": rng.uniform(0.0, np.pi),
            "gcolor": rng.uniform(0.2, 0.9, size=spec.channels) * (-1.0 if shifted else 1.0),
        })
    return protos


def _render_split(spec: DatasetSpec, protos: list[dict], count: int, stream: int) -> Dataset:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _stable_tag(spec.variant), stream]))
    h = w = spec.image_size
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    labels = rng.integers(0, spec.classes, size=count)
    images = np.zeros((count, spec.channels, h, w), dtype=np.float32)
    for i in range(count):
        p = protos[labels[i]]
        cy, cx = p["center"] + rng.uniform(-1.5, 1.5, size=2)
        amp = rng.uniform(0.85, 1.15)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * p["sigma"] ** 2))
        grating = np.sin(2.0 * np.pi * p["freq"] * (xx * np.cos(p["theta"]) + yy * np.sin(p["theta"])) / w + phase)
        base = 0.9 * amp * blob[None] * p["color"][:, None, None] \
            + 0.45 * amp * grating[None] * p["gcolor"][:, None, None]
        noise = rng.normal(0.0, spec.noise, size=base.shape)
        images[i] = (base + noise - 0.15).astype(np.float32)
    return Dataset(images=images, labels=labels.astype(np.int64), classes=spec.classes, spec=spec)


def generate_splits(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Deterministic train/test datasets from independent RNG streams."""
    protos = _class_prototypes(spec)
    train = _render_split(spec, protos, spec.train_size, stream=1)
    test = _render_split(spec, protos, spec.test_size, stream=2)
    return train, test


def write_qdds(dataset: Dataset, path) -> None:
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as f:
        f.write(QDDS_MAGIC)
        f.write(struct.pack("<H", QDDS_VERSION))
        f.write(struct.pack("<I", n))
        f.write(struct.pack("<HHHH", dataset.classes, h, w, c))
        for i in range(n):
            # per-sample payload is HWC row-major
            pixels = np.ascontiguousarray(dataset.images[i].transpose(1, 2, 0), dtype="<f4")
            f.write(pixels.tobytes())
            f.write(struct.pack("<H", int(dataset.labels[i])))


def read_qdds(path) -> Dataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != QDDS_MAGIC:
            raise ConfigError(f"bad dataset magic {magic!r}")
        (version,) = struct.unpack("<H", f.read(2))
        if version != QDDS_VERSION:
            raise ConfigError(f"unsupported dataset version {version}")
        (n,) = struct.unpack("<I", f.read(4))
        classes, h, w, c = struct.unpack("<HHHH", f.read(8))
        images = np.empty((n, c, h, w), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        sample_bytes = 4 * h * w * c
        for i in range(n):
            pixels = np.frombuffer(f.read(sample_bytes), dtype="<f4").reshape(h, w, c)
            images[i] = pixels.transpose(2, 0, 1)
            (labels[i],) = struct.unpack("<H", f.read(2))
    return Dataset(images=images, labels=labels, classes=classes)


def generate_dataset(spec: DatasetSpec, out_dir) -> tuple[str, str]:
    """Generate and write the train/test files; returns their paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = generate_splits(spec)
    train_path = out / f"{spec.tag()}_train.qdds"
    test_path = out / f"{spec.tag()}_test.qdds"
    write_qdds(train, train_path)
    write_qdds(test, test_path)
    return str(train_path), str(test_path)


def normalize(dataset: Dataset, spec: DatasetSpec) -> Dataset:
    mean, std = spec.normalization
    if mean == 0.0 and std == 1.0:
        return dataset
    images = (dataset.images - mean) / std
    return Dataset(images=images.astype(np.float32), labels=dataset.labels,
                   classes=dataset.classes, spec=spec)


def sample_calibration(dataset: Dataset, n: int, seed: int, heldout_fraction: float = 0.1,
                       source_tag: str = "") -> CalibrationSet:
    """Uniform sample without replacement; the trailing slice is held out for
    reconstruction-MSE reporting and never trained on."""
    if n > dataset.images.shape[0]:
        raise ConfigError(f"calibration size {n} exceeds dataset size {dataset.images.shape[0]}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA11B]))
    idx = rng.choice(dataset.images.shape[0], size=n, replace=False)
    n_held = max(1, int(round(n * heldout_fraction))) if n > 1 else 0
    main, held = idx[: n - n_held], idx[n - n_held:]
    return CalibrationSet(
        images=dataset.images[main].copy(),
        labels=dataset.labels[main].copy(),
        heldout_images=dataset.images[held].copy(),
        heldout_labels=dataset.labels[held].copy(),
        source_tag=source_tag or (dataset.spec.tag() if dataset.spec else ""),
    )
