"""Frozen-backbone training loop, schedule, loss, metrics, checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import SceneDataset, batch_iter, stack_batch
from .model import FusionModel, ModelConfig
from .tensor import Tensor, active_tape, backward, log_softmax, mul, no_grad, tsum

_BLOB_DTYPES = {"float32": "<f4", "float64": "<f8"}


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 6e-5            # FMB-style preset uses 1.2e-4
    warmup_epochs: float = 10.0
    decay_factor: float = 0.01
    epochs: int = 50
    batch_size: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs cannot exceed epochs")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return TrainConfig(**data)


def lr_at(t: float, cfg: TrainConfig) -> float:
    """Learning rate at epoch-fraction ``t``: linear ramp 0 -> base over
    the warmup epochs, then linear decay to base * decay_factor at the
    final epoch."""
    if t < 0:
        raise ValueError("epoch fraction must be >= 0")
    if cfg.warmup_epochs > 0 and t < cfg.warmup_epochs:
        return cfg.base_lr * t / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    if span <= 0:
        return cfg.base_lr
    frac = min((t - cfg.warmup_epochs) / span, 1.0)
    return cfg.base_lr * (1.0 - frac * (1.0 - cfg.decay_factor))


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[label].

    ``logits`` is [B, K, H, W] (or [K, H, W]); ``labels`` matches its
    spatial/batch dims. All-ignored input yields a constant 0.
    """
    if logits.ndim == 3:
        logits = logits.reshape((1,) + logits.shape)
        labels = np.asarray(labels)[None]
    b, k, h, w = logits.shape
    labels = np.asarray(labels).reshape(b, h, w)
    flat_labels = labels.reshape(-1)
    valid = flat_labels != ignore_index
    bad = valid & ((flat_labels < 0) | (flat_labels >= k))
    if bad.any():
        raise ValueError(f"labels contain class ids outside 0..{k - 1} "
                         f"(ignore={ignore_index})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    flat = logits.transpose((0, 2, 3, 1)).reshape((-1, k))
    logp = log_softmax(flat)
    pick = np.zeros((flat_labels.size, k), dtype=logits.dtype)
    pick[valid, flat_labels[valid]] = 1.0 / n_valid
    return mul(tsum(mul(logp, Tensor(pick))), -1.0)


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            p.data -= self.lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def train_step(model: FusionModel, images: dict, labels: np.ndarray,
               optimizer: AdamW, lr: float,
               ignore_index: int = 255) -> float:
    """One forward/backward/update on the trainable parameters only."""
    tape = active_tape()
    tape.clear()
    h, w = labels.shape[-2], labels.shape[-1]
    logits = model.logits_at(images, h, w, train=True)
    loss = cross_entropy(logits, labels, ignore_index)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value!r} at optimizer step "
                            f"{optimizer.t + 1}")
    backward(loss)
    optimizer.lr = lr
    optimizer.step()
    optimizer.zero_grad()
    tape.clear()
    return value


def fit(model: FusionModel, dataset: SceneDataset, cfg: TrainConfig,
        log: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Train for ``cfg.epochs`` epochs; returns per-epoch history."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    optimizer = AdamW([p for _, p in model.trainable_parameters()], lr=cfg.base_lr,
                      beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                      weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for step, batch in enumerate(batch_iter(dataset, cfg.batch_size,
                                                shuffle_seed=cfg.seed, epoch=epoch)):
            images, labels = stack_batch(batch, model.config.modalities)
            lr = lr_at(epoch + step / steps_per_epoch, cfg)
            losses.append(train_step(model, images, labels, optimizer, lr,
                                     dataset.ignore_index))
        entry = {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                 "lr": lr_at(min(epoch + 1.0, float(cfg.epochs)), cfg)}
        history.append(entry)
        if log is not None:
            log(entry)
    return history


# ---------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------

class ConfusionMatrix:
    """num_classes x num_classes pixel counts; ignored pixels excluded."""

    def __init__(self, num_classes: int, ignore_index: int = 255):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, prediction: np.ndarray, label: np.ndarray) -> None:
        prediction = np.asarray(prediction).reshape(-1)
        label = np.asarray(label).reshape(-1).astype(np.int64)
        if prediction.shape != label.shape:
            raise ValueError("prediction and label sizes differ")
        keep = label != self.ignore_index
        idx = label[keep] * self.num_classes + prediction[keep]
        self.counts += np.bincount(idx, minlength=self.num_classes ** 2) \
            .reshape(self.num_classes, self.num_classes)

    def merge(self, other: "ConfusionMatrix") -> None:
        self.counts += other.counts

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN where a class is absent from both ground
        truth and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        iou = np.full(self.num_classes, np.nan)
        present = union > 0
        iou[present] = tp[present] / union[present]
        return iou

    def miou(self) -> float:
        iou = self.per_class_iou()
        if np.isnan(iou).all():
            return float("nan")
        return float(np.nanmean(iou))

    def pixel_accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.diag(self.counts).sum() / total) if total else float("nan")


def evaluate(model: FusionModel, dataset: SceneDataset, batch_size: int = 8) -> dict:
    """Confusion-matrix metrics over the dataset at label resolution."""
    cm = ConfusionMatrix(dataset.num_classes, dataset.ignore_index)
    with no_grad():
        for batch in batch_iter(dataset, batch_size):
            images, labels = stack_batch(batch, model.config.modalities)
            h, w = labels.shape[-2], labels.shape[-1]
            logits = model.logits_at(images, h, w, train=False)
            pred = np.argmax(logits.data, axis=1)
            cm.update(pred, labels)
    iou = cm.per_class_iou()
    return {
        "miou": cm.miou(),
        "pixel_accuracy": cm.pixel_accuracy(),
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "num_classes": dataset.num_classes,
        "confusion": cm.counts.tolist(),
    }


def format_metrics(metrics: dict, method: str = "adafuse") -> tuple[str, str]:
    """(JSON record, per-class CSV row in the appendix-table layout)."""
    record = dict(metrics)
    record["miou_percent"] = None if math.isnan(metrics["miou"]) \
        else round(metrics["miou"] * 100.0, 2)
    text = json.dumps(record, indent=1)
    k = metrics["num_classes"]
    header = ["method"] + [f"class_{c}" for c in range(k)] + ["mIoU(%)"]
    cells = [method]
    for v in metrics["per_class_iou"]:
        cells.append("" if v is None else f"{v * 100.0:.2f}")
    cells.append("" if record["miou_percent"] is None else f"{record['miou_percent']:.2f}")
    csv = ",".join(header) + "\n" + ",".join(cells) + "\n"
    return text, csv


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------

def _param_blob_name(index: int) -> str:
    return f"p{index:05d}.bin"


def save_checkpoint(model: FusionModel, directory, include: str = "all") -> Path:
    """Serialize configs + parameter buffers (bit-exact blobs).

    ``include='adapters'`` writes only the adapter bank, producing a
    partial checkpoint loadable onto a model with a matching backbone.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    named = list(model.named_parameters())
    if include == "adapters":
        named = [(n, p) for n, p in named if n.startswith("adapters.")]
    elif include != "all":
        raise ValueError(f"unknown include filter {include!r}")
    blob_dtype = _BLOB_DTYPES[model.config.dtype]
    records = []
    for i, (name, p) in enumerate(named):
        path = _param_blob_name(i)
        (out / path).write_bytes(p.data.astype(blob_dtype).tobytes())
        records.append({"name": name, "path": path, "shape": list(p.shape)})
    manifest = {
        "version": 1,
        "kind": "checkpoint" if include == "all" else "checkpoint-adapters",
        "model_config": model.config.to_dict(),
        "blob_dtype": blob_dtype,
        "params": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return out


def _load_manifest(directory) -> dict:
    mpath = Path(directory) / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no manifest.json under {directory}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("version") != 1:
        raise CheckpointError(f"unsupported checkpoint version "
                              f"{manifest.get('version')!r}")
    return manifest


def _load_blobs_into(model: FusionModel, manifest: dict, directory,
                     allow_partial: bool) -> None:
    lookup = dict(model.named_parameters())
    dtype = manifest["blob_dtype"]
    seen = set()
    for rec in manifest["params"]:
        name = rec["name"]
        if name not in lookup:
            raise CheckpointError(f"checkpoint parameter {name!r} has no "
                                  f"counterpart in the model")
        p = lookup[name]
        shape = tuple(int(s) for s in rec["shape"])
        if shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint "
                                  f"{shape}, model {p.shape}")
        blob = Path(directory) / rec["path"]
        if not blob.exists():
            raise CheckpointError(f"missing blob {rec['path']!r}")
        arr = np.frombuffer(blob.read_bytes(), dtype=dtype).reshape(shape)
        p.data[...] = arr.astype(p.dtype)
        seen.add(name)
    if not allow_partial:
        missing = [n for n in lookup if n not in seen]
        if missing:
            raise CheckpointError(f"checkpoint omits {len(missing)} parameters "
                                  f"(first: {missing[0]!r})")


def load_checkpoint(directory, expect_config: Optional[ModelConfig] = None) -> FusionModel:
    """Rebuild the model from a full checkpoint directory."""
    manifest = _load_manifest(directory)
    if manifest.get("kind") != "checkpoint":
        raise CheckpointError(f"{manifest.get('kind')!r} is not a full checkpoint")
    config = ModelConfig.from_dict(manifest["model_config"])
    if expect_config is not None and config.to_dict() != expect_config.to_dict():
        raise CheckpointError(
            "checkpoint config does not match the expected config "
            f"(checkpoint modalities {config.modalities}, "
            f"expected {expect_config.modalities})")
    model = FusionModel(config)
    _load_blobs_into(model, manifest, directory, allow_partial=False)
    return model


def load_adapter_checkpoint(model: FusionModel, directory) -> None:
    """Load an adapters-only checkpoint onto a matching backbone."""
    manifest = _load_manifest(directory)
    if manifest.get("kind") != "checkpoint-adapters":
        raise CheckpointError(f"{manifest.get('kind')!r} is not an adapters-only "
                              "checkpoint")
    _load_blobs_into(model, manifest, directory, allow_partial=True)
