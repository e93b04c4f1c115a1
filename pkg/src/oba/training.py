"""Desk-scale training: SGD with momentum, synthetic datasets, IDX image
loading, and accuracy evaluation.  Everything is deterministic given the
seeds in the configs."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward, forward
from .graph import NetworkGraph

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 64
    lr_drop_epochs: tuple[int, ...] = (18, 24)  # 60% / 80% of the default run
    lr_drop_factor: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.momentum + 1e-12, self.weight_decay + 1e-12) < 0:
            raise ValueError("train config values must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "lr_drop_epochs" in d:
            d["lr_drop_epochs"] = tuple(d["lr_drop_epochs"])
        return TrainConfig(**d)


@dataclass
class Dataset:
    kind: str
    samples: np.ndarray
    labels: np.ndarray
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise ValueError(
                f"sample/label counts differ: {len(self.samples)} vs {len(self.labels)}"
            )

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.n else 0

    def __iter__(self):
        """Batches in stored order (scoring and evaluation use this)."""
        for lo in range(0, self.n, self.batch_size):
            hi = min(lo + self.batch_size, self.n)
            yield self.samples[lo:hi], self.labels[lo:hi]

    def epoch_batches(self, epoch: int, seed: int):
        """Deterministically reshuffled batches for one training epoch."""
        order = np.random.default_rng([seed, epoch]).permutation(self.n)
        xs, ys = self.samples[order], self.labels[order]
        for lo in range(0, self.n, self.batch_size):
            hi = min(lo + self.batch_size, self.n)
            yield xs[lo:hi], ys[lo:hi]

    def full(self):
        return self.samples, self.labels


def make_blobs(n=512, classes=3, dim=2, noise=0.35, seed=0, batch_size=64) -> Dataset:
    """Gaussian clusters on a circle; linearly separable at low noise."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if dim > 2:
        centers = np.concatenate([centers, np.zeros((classes, dim - 2))], axis=1)
    labels = rng.integers(0, classes, size=n)
    samples = centers[labels] + noise * rng.standard_normal((n, dim))
    return Dataset("blobs", samples, labels, seed, batch_size)


def make_two_spirals(n=512, noise=0.1, seed=0, batch_size=64) -> Dataset:
    rng = np.random.default_rng(seed)
    half = n // 2
    t = np.sqrt(rng.random(half)) * 3 * np.pi
    spiral = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / (3 * np.pi)
    samples = np.concatenate([spiral, -spiral]) + noise * rng.standard_normal((2 * half, 2))
    labels = np.concatenate([np.zeros(half, dtype=int), np.ones(half, dtype=int)])
    order = rng.permutation(2 * half)
    return Dataset("spirals", samples[order], labels[order], seed, batch_size)


def _digit_pattern(cls: int, size: int) -> np.ndarray:
    img = np.zeros((size, size))
    mid = size // 2
    if cls == 0:  # horizontal bar
        img[mid - 1 : mid + 1, 1:-1] = 1.0
    elif cls == 1:  # vertical bar
        img[1:-1, mid - 1 : mid + 1] = 1.0
    elif cls == 2:  # diagonal
        for i in range(size):
            img[i, i] = 1.0
            if i + 1 < size:
                img[i + 1, i] = 1.0
    elif cls == 3:  # ring
        img[1, 1:-1] = img[-2, 1:-1] = 1.0
        img[1:-1, 1] = img[1:-1, -2] = 1.0
    elif cls == 4:  # cross
        img[mid - 1 : mid + 1, :] = 1.0
        img[:, mid - 1 : mid + 1] = 1.0
    else:
        raise ValueError("synthetic digits support up to 5 classes")
    return img


def make_synthetic_digits(
    n=512, classes=4, size=8, noise=0.25, seed=0, batch_size=64
) -> Dataset:
    """Tiny bar/ring/cross images: a CNN-learnable stand-in for digit data."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    base = np.stack([_digit_pattern(c, size) for c in range(classes)])
    samples = base[labels][:, None, :, :] + noise * rng.standard_normal((n, 1, size, size))
    shift = rng.integers(-1, 2, size=n)
    samples = np.stack([np.roll(img, s, axis=2) for img, s in zip(samples, shift)])
    return Dataset("digits", np.clip(samples, 0.0, 1.5), labels, seed, batch_size)


def write_idx(images_path, labels_path, dataset: Dataset) -> None:
    """Write [N,1,H,W] float images in [0,1] and labels in IDX format."""
    imgs = dataset.samples
    n, _, h, w = imgs.shape
    pix = np.clip(imgs[:, 0] * 255.0, 0, 255).round().astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pix.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_idx(images_path, labels_path, batch_size: int = 64, seed: int = 0) -> Dataset:
    """Parse IDX image/label files (big-endian, unsigned bytes) into a
    Dataset with pixels scaled to [0, 1] and shape [N,1,H,W]."""
    with open(images_path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise ValueError(f"{images_path}: truncated IDX header")
        magic, n, h, w = struct.unpack(">IIII", head)
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{images_path}: bad magic 0x{magic:08x} for an image file")
        raw = f.read()
    if len(raw) != n * h * w:
        raise ValueError(f"{images_path}: expected {n * h * w} pixels, got {len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w) / 255.0

    with open(labels_path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise ValueError(f"{labels_path}: truncated IDX header")
        magic, n_lab = struct.unpack(">II", head)
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{labels_path}: bad magic 0x{magic:08x} for a label file")
        lab_raw = f.read()
    if len(lab_raw) != n_lab:
        raise ValueError(f"{labels_path}: expected {n_lab} labels, got {len(lab_raw)}")
    if n_lab != n:
        raise ValueError(f"image/label counts differ: {n} vs {n_lab}")
    labels = np.frombuffer(lab_raw, dtype=np.uint8).astype(np.int64)
    return Dataset("idx", images, labels, seed, batch_size)


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.lr
    for drop in cfg.lr_drop_epochs:
        if epoch >= drop:
            lr /= cfg.lr_drop_factor
    return lr


def sgd_train(g: NetworkGraph, dataset: Dataset, cfg: TrainConfig, mask=None):
    """SGD with momentum and L2 decay added to the gradient.

    Unstructured-mask entries are re-zeroed after every step so fine-tuning
    never resurrects pruned weights.  Divergence (non-finite loss) aborts,
    returning the last finite state.
    """
    g = g.clone()
    keep = None
    if mask is not None:
        if getattr(mask, "mode", None) != "unstructured":
            raise ValueError("sgd_train freezes unstructured masks only")
        keep = {
            pid: {pn: m.astype(np.float64) for pn, m in entry.items()}
            for pid, entry in mask.masks.items()
        }
        for pid, entry in keep.items():
            for pn, m in entry.items():
                g.node(pid).params[pn] *= m

    velocity = {
        pid: {pn: np.zeros_like(p) for pn, p in g.node(pid).params.items()}
        for pid in g.param_layers()
    }
    history = []
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        losses = []
        for x, y in dataset.epoch_batches(epoch, cfg.seed):
            cache = forward(g, x, y)
            if not np.isfinite(cache.loss):
                history.append({"epoch": epoch, "lr": lr, "loss": float("nan"), "diverged": True})
                return g, history
            grads = backward(g, cache)
            for pid in g.param_layers():
                params = g.node(pid).params
                for pn, p in params.items():
                    gr = grads.param_grads[pid][pn] + cfg.weight_decay * p
                    v = velocity[pid][pn]
                    v *= cfg.momentum
                    v += gr
                    p -= lr * v
                    if keep is not None and pid in keep:
                        p *= keep[pid][pn]
            losses.append(cache.loss)
        history.append(
            {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)), "diverged": False}
        )
    return g, history


def evaluate(g: NetworkGraph, dataset: Dataset):
    """Argmax accuracy and mean loss over the dataset."""
    logits_node = g.producers[g.loss_id][0]
    correct = 0
    loss_sum = 0.0
    for x, y in dataset:
        cache = forward(g, x, y)
        logits = cache.outputs[logits_node]
        correct += int((logits.argmax(axis=-1) == y).sum())
        loss_sum += cache.loss * len(x)
    return correct / dataset.n, loss_sum / dataset.n
