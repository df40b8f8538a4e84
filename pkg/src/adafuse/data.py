"""Synthetic complementary-modality segmentation scenes and their
on-disk format.

Each foreground class is visible (contrasts with the background) in
exactly one modality and renders at background level everywhere else,
so no single modality can segment every class: the gap between a fused
model and any single-modality baseline is built into the data.

Disk layout: a directory with ``manifest.json`` plus one raw blob per
image (little-endian float32, row-major C x H x W) and per label map
(little-endian uint16, H x W). Blob paths in the manifest are relative
to the directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

FORMAT_VERSION = 1
IGNORE_INDEX = 255


class DatasetError(ValueError):
    """Malformed dataset directory or manifest."""


@dataclass
class MultimodalSample:
    images: dict[str, np.ndarray]    # name -> float32 [C, H, W] in [0, 1]
    label: np.ndarray                # uint16 [H, W]


@dataclass
class SceneDataset:
    samples: list[MultimodalSample]
    num_classes: int
    height: int
    width: int
    modalities: list[tuple[str, int]]          # (name, channels)
    seed: int
    split: str = "train"
    ignore_index: int = IGNORE_INDEX
    class_visibility: dict[int, tuple[str, ...]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> MultimodalSample:
        return self.samples[i]

    @property
    def modality_names(self) -> list[str]:
        return [name for name, _ in self.modalities]


def _default_names(m: int) -> tuple[str, ...]:
    return ("vis", "ir") if m == 2 else tuple(f"mod{i}" for i in range(m))


def assign_visibility(num_classes: int, names: Sequence[str],
                      rng: np.random.Generator) -> dict[int, tuple[str, ...]]:
    """Round-robin the shuffled foreground classes over modalities, so
    every modality is blind to at least one class."""
    order = rng.permutation(np.arange(1, num_classes))
    return {int(cls): (names[i % len(names)],) for i, cls in enumerate(order)}


def generate_synthetic(num_samples: int, height: int, width: int,
                       num_classes: int, num_modalities: int, seed: int,
                       split: str = "train", noise_sigma: float = 0.05,
                       modality_names: Optional[Sequence[str]] = None,
                       channels: Optional[Sequence[int]] = None) -> SceneDataset:
    """Scenes of random rectangles and discs with per-class visibility.

    Background sits at 0.2; a class visible in a modality fills at a
    class-specific level in [0.55, 0.95]; invisible classes render at
    background level. Gaussian pixel noise is added everywhere and the
    result clipped to [0, 1]. Fully deterministic in ``seed``.
    """
    if num_classes < 3:
        raise ValueError("need background plus at least two foreground classes")
    if num_modalities < 2:
        raise ValueError("complementary visibility needs >= 2 modalities")
    if height < 8 or width < 8:
        raise ValueError(f"degenerate scene size {height}x{width}")
    names = tuple(modality_names) if modality_names else _default_names(num_modalities)
    if len(names) != num_modalities:
        raise ValueError("modality_names length must match num_modalities")
    chans = tuple(channels) if channels else (1,) * num_modalities

    rng = np.random.default_rng(seed)
    visibility = assign_visibility(num_classes, names, rng)
    n_fg = num_classes - 1
    fills = {c: 0.55 + 0.4 * (c - 1) / max(1, n_fg - 1) for c in range(1, num_classes)}

    yy, xx = np.mgrid[0:height, 0:width]
    samples = []
    for _ in range(num_samples):
        label = np.zeros((height, width), dtype=np.uint16)
        planes = {name: np.full((height, width), 0.2) for name in names}
        for _obj in range(int(rng.integers(3, 9))):
            cls = int(rng.integers(1, num_classes))
            size = int(rng.integers(height // 8, height // 3 + 1))
            cy = int(rng.integers(0, height))
            cx = int(rng.integers(0, width))
            if rng.integers(2) == 0:
                half = max(1, size // 2)
                mask = ((np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half))
            else:
                mask = ((yy - cy) ** 2 + (xx - cx) ** 2) <= (size / 2) ** 2
            label[mask] = cls
            # invisible modalities render the object at background level,
            # occluding anything painted underneath
            for name in names:
                planes[name][mask] = fills[cls] if name in visibility[cls] else 0.2
        images = {}
        for name, ch in zip(names, chans):
            noisy = planes[name][None] + rng.normal(0.0, noise_sigma, (ch, height, width))
            images[name] = np.clip(noisy, 0.0, 1.0).astype(np.float32)
        samples.append(MultimodalSample(images, label))

    return SceneDataset(samples, num_classes, height, width,
                        list(zip(names, chans)), seed, split,
                        class_visibility=visibility)


# ---------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------

def save_dataset(dataset: SceneDataset, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, sample in enumerate(dataset.samples):
        rec = {"images": {}, "label": None}
        for name, img in sample.images.items():
            path = f"s{i:05d}_{name}.bin"
            (out / path).write_bytes(img.astype("<f4").tobytes())
            rec["images"][name] = {"path": path, "shape": list(img.shape)}
        lpath = f"s{i:05d}_label.bin"
        (out / lpath).write_bytes(sample.label.astype("<u2").tobytes())
        rec["label"] = {"path": lpath, "shape": list(sample.label.shape)}
        records.append(rec)
    manifest = {
        "version": FORMAT_VERSION,
        "kind": "dataset",
        "seed": dataset.seed,
        "split": dataset.split,
        "num_classes": dataset.num_classes,
        "ignore_index": dataset.ignore_index,
        "height": dataset.height,
        "width": dataset.width,
        "modalities": [{"name": n, "channels": c} for n, c in dataset.modalities],
        "class_visibility": {str(k): list(v) for k, v in dataset.class_visibility.items()},
        "samples": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return out


def _read_blob(root: Path, entry: dict, dtype: str, itemsize: int) -> np.ndarray:
    path = entry["path"]
    if Path(path).is_absolute() or ".." in Path(path).parts:
        raise DatasetError(f"blob paths must be relative to the dataset dir: {path!r}")
    blob = root / path
    if not blob.exists():
        raise DatasetError(f"missing blob {path!r}")
    shape = tuple(int(s) for s in entry["shape"])
    expected = int(np.prod(shape)) * itemsize
    actual = blob.stat().st_size
    if actual != expected:
        raise DatasetError(f"blob {path!r} holds {actual} bytes, "
                           f"expected {expected} for shape {shape}")
    return np.frombuffer(blob.read_bytes(), dtype=dtype).reshape(shape).copy()


def load_dataset(directory) -> SceneDataset:
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset version {manifest.get('version')!r}, "
                           f"this reader handles {FORMAT_VERSION}")
    if manifest.get("kind") != "dataset":
        raise DatasetError(f"manifest kind {manifest.get('kind')!r} is not a dataset")
    num_classes = int(manifest["num_classes"])
    ignore = int(manifest.get("ignore_index", IGNORE_INDEX))
    samples = []
    for rec in manifest["samples"]:
        images = {name: _read_blob(root, entry, "<f4", 4)
                  for name, entry in rec["images"].items()}
        label = _read_blob(root, rec["label"], "<u2", 2)
        bad = (label >= num_classes) & (label != ignore)
        if bad.any():
            raise DatasetError(f"label {rec['label']['path']!r} holds class ids "
                               f">= {num_classes}")
        samples.append(MultimodalSample(images, label))
    visibility = {int(k): tuple(v)
                  for k, v in manifest.get("class_visibility", {}).items()}
    return SceneDataset(
        samples, num_classes, int(manifest["height"]), int(manifest["width"]),
        [(m["name"], int(m["channels"])) for m in manifest["modalities"]],
        int(manifest["seed"]), manifest.get("split", "train"), ignore,
        visibility)


# ---------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------

def batch_iter(dataset: SceneDataset, batch_size: int,
               shuffle_seed: Optional[int] = None,
               epoch: int = 0) -> Iterator[list[MultimodalSample]]:
    """Deterministic batches; permutation depends on (seed, epoch) only.

    The last partial batch is kept. ``shuffle_seed=None`` iterates in
    dataset order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield [dataset.samples[i] for i in order[start:start + batch_size]]


def stack_batch(batch: list[MultimodalSample],
                modality_names: Sequence[str]) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Stack samples into per-modality [B, C, H, W] arrays + [B, H, W] labels."""
    images = {name: np.stack([s.images[name] for s in batch]) for name in modality_names}
    labels = np.stack([s.label for s in batch]).astype(np.int64)
    return images, labels
