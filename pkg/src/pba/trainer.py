"""Child models trained by mini-batch SGD under an augmentation policy.

:class:`Trainable` is the contract the population search drives.
:class:`ToyTrainable` implements it with :class:`ToyClassifier`, a softmax
regression or one-hidden-layer ReLU network on flattened pixels, in float64.
"""

from __future__ import annotations

import abc
import math
import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .augment import cutout_patch
from .data import DIGIT, DatasetSplits, Split
from .policy import PolicyParams, apply_policy

LR_SCHEDULES = ("constant", "cosine", "step")

# (epoch, batch index, rng) -> policy for that batch, or None for no policy
PolicySource = Callable[[int, int, np.random.Generator], Optional[PolicyParams]]
# extra per-image transform applied after the policy, e.g. an oracle augmentation
ImageTransform = Callable[[np.ndarray, np.random.Generator], np.ndarray]


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.05
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 60
    lr_schedule: str = "constant"
    gradient_clip: float = 5.0
    hidden_units: int = 32
    baseline_cutout: bool = True
    pad: Optional[int] = None
    flip: Optional[bool] = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not self.gradient_clip > 0:
            raise ValueError("gradient_clip must be positive")
        if self.hidden_units < 0:
            raise ValueError("hidden_units must be non-negative")
        if self.pad is not None and self.pad < 0:
            raise ValueError("pad must be non-negative")


def learning_rate_at(cfg: TrainerConfig, epoch: int, total_epochs: int) -> float:
    frac = min(epoch / max(total_epochs, 1), 1.0)
    if cfg.lr_schedule == "cosine":
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))
    if cfg.lr_schedule == "step":
        return cfg.learning_rate * 0.1 ** sum(frac >= m for m in (0.5, 0.75))
    return cfg.learning_rate


# --- baseline pipeline -----------------------------------------------------


def default_pad(size: int) -> int:
    """4 pixels at 32x32, scaled with the image."""
    return max(1, int(round(4 * size / 32)))


def default_cutout(size: int) -> int:
    """16 pixels at 32x32, scaled with the image."""
    return int(round(16 * size / 32))


def pad_and_crop(img: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    h, w, _ = img.shape
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    padded = np.zeros((h + 2 * pad, w + 2 * pad, img.shape[2]), dtype=img.dtype)
    padded[pad:pad + h, pad:pad + w] = img
    return padded[top:top + h, left:left + w].copy()


def random_flip(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.5:
        return img[:, ::-1].copy()
    return img


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    """Scale to [0, 1] and standardize per channel; returns float64."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    return (img.astype(np.float64) / 255.0 - mean) / std


def baseline_augment(
    img: np.ndarray,
    dataset_kind: str,
    rng: np.random.Generator,
    pad: Optional[int] = None,
    cutout: Optional[int] = None,
    flip: Optional[bool] = None,
) -> np.ndarray:
    """Random crop from a zero-padded copy, horizontal flip (skipped for digit
    data unless ``flip`` forces it), then a fixed-size Cutout.  Stays uint8."""
    size = min(img.shape[:2])
    pad = default_pad(size) if pad is None else pad
    cutout = default_cutout(size) if cutout is None else cutout
    flip = dataset_kind != DIGIT if flip is None else flip
    out = pad_and_crop(img, pad, rng) if pad else img.copy()
    if flip:
        out = random_flip(out, rng)
    if cutout:
        out = cutout_patch(out, cutout, rng)
    return out


def baseline_pipeline(img, dataset_kind, rng, mean=(0.0,), std=(1.0,), pad=None, cutout=None, flip=None):
    """The full baseline: crop, flip, Cutout, then normalization."""
    return normalize(baseline_augment(img, dataset_kind, rng, pad, cutout, flip), mean, std)


# --- the model -------------------------------------------------------------


class ToyClassifier:
    """Softmax regression (``hidden_units == 0``) or a one-hidden-layer ReLU
    network.  ``params`` is the list of weight and bias arrays."""

    def __init__(self, n_inputs: int, n_classes: int, hidden_units: int = 32, rng=None):
        rng = np.random.default_rng(rng)
        self.n_inputs = n_inputs
        self.n_classes = n_classes
        self.hidden_units = hidden_units
        if hidden_units:
            self.params = [
                rng.normal(0.0, math.sqrt(2.0 / n_inputs), (n_inputs, hidden_units)),
                np.zeros(hidden_units),
                rng.normal(0.0, math.sqrt(1.0 / hidden_units), (hidden_units, n_classes)),
                np.zeros(n_classes),
            ]
        else:
            self.params = [
                rng.normal(0.0, math.sqrt(1.0 / n_inputs), (n_inputs, n_classes)),
                np.zeros(n_classes),
            ]

    @property
    def weight_indices(self) -> tuple[int, ...]:
        """Indices into ``params`` that receive weight decay (not biases)."""
        return tuple(range(0, len(self.params), 2))

    def logits(self, x: np.ndarray) -> np.ndarray:
        if self.hidden_units:
            w1, b1, w2, b2 = self.params
            return np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
        w, b = self.params
        return x @ w + b

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray, weight_decay: float = 0.0):
        """Mean cross-entropy plus ``weight_decay / 2 * ||W||^2`` and its gradient."""
        n = len(y)
        if self.hidden_units:
            w1, b1, w2, b2 = self.params
            pre = x @ w1 + b1
            hid = np.maximum(pre, 0.0)
            z = hid @ w2 + b2
        else:
            w, b = self.params
            z = x @ w + b
        z = z - z.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(z).sum(axis=1))
        loss = float(np.mean(logsumexp - z[np.arange(n), y]))
        probs = np.exp(z - logsumexp[:, None])
        dz = probs
        dz[np.arange(n), y] -= 1.0
        dz /= n
        if self.hidden_units:
            dw2 = hid.T @ dz
            db2 = dz.sum(axis=0)
            dpre = (dz @ w2.T) * (pre > 0)
            grads = [x.T @ dpre, dpre.sum(axis=0), dw2, db2]
        else:
            grads = [x.T @ dz, dz.sum(axis=0)]
        if weight_decay:
            for i in self.weight_indices:
                loss += 0.5 * weight_decay * float(np.sum(self.params[i] ** 2))
                grads[i] = grads[i] + weight_decay * self.params[i]
        return loss, grads


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


def sgd_step(model: ToyClassifier, x, y, lr: float, cfg: TrainerConfig) -> float:
    loss, grads = model.loss_and_grads(x, y, cfg.weight_decay)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at learning rate {lr}")
    grads, _ = clip_by_global_norm(grads, cfg.gradient_clip)
    if lr:
        for p, g in zip(model.params, grads):
            p -= lr * g
    return loss


def train_epoch(
    model: ToyClassifier,
    data: Split,
    policy_source: Optional[PolicySource],
    cfg: TrainerConfig,
    rng: np.random.Generator,
    epoch: int = 0,
    total_epochs: Optional[int] = None,
    dataset_kind: str = "natural",
    mean=(0.0,),
    std=(1.0,),
    extra_transform: Optional[ImageTransform] = None,
) -> dict:
    """One shuffled pass of mini-batch SGD.

    Each image goes through the baseline crop/flip/Cutout, then the batch's
    policy, then ``extra_transform`` if given, then normalization.  The policy
    is fetched once per batch from ``policy_source``.
    """
    n = len(data)
    if n == 0:
        raise ValueError("cannot train on an empty split")
    if data.images[0].size != model.n_inputs:
        raise ValueError(
            f"model expects {model.n_inputs} inputs, images have {data.images[0].size}"
        )
    lr = learning_rate_at(cfg, epoch, total_epochs or cfg.epochs)
    cutout = default_cutout(min(data.images.shape[1:3])) if cfg.baseline_cutout else 0
    order = rng.permutation(n)
    losses, correct = [], 0
    for b, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        policy = policy_source(epoch, b, rng) if policy_source is not None else None
        batch = np.empty((len(idx), model.n_inputs))
        for row, i in enumerate(idx):
            img = baseline_augment(data.images[i], dataset_kind, rng, cfg.pad, cutout, cfg.flip)
            if policy is not None:
                img = apply_policy(img, policy, rng)
            if extra_transform is not None:
                img = extra_transform(img, rng)
            batch[row] = normalize(img, mean, std).ravel()
        y = data.labels[idx]
        correct += int(np.sum(model.predict(batch) == y))
        try:
            losses.append(sgd_step(model, batch, y, lr, cfg))
        except TrainingError as exc:
            raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from None
    for p in model.params:
        if not np.all(np.isfinite(p)):
            raise TrainingError(f"epoch {epoch}: weights became non-finite")
    return {"loss": float(np.mean(losses)), "train_acc": correct / n, "lr": lr}


def flatten_split(split: Split, mean, std) -> np.ndarray:
    return normalize(split.images, mean, std).reshape(len(split), -1)


def evaluate(model: ToyClassifier, x: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax-correct predictions on already-normalized inputs."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return float(np.mean(model.predict(x) == labels))


# --- checkpoints -----------------------------------------------------------

_CKPT_MAGIC = b"PBAK"
_CKPT_VERSION = 1


def encode_checkpoint(tensors: list[np.ndarray], epoch: int = 0) -> bytes:
    """Versioned blob: magic, version, epoch, tensor count, then for each tensor
    its rank, shape, byte length and little-endian float64 payload."""
    parts = [_CKPT_MAGIC, struct.pack("<III", _CKPT_VERSION, epoch, len(tensors))]
    for t in tensors:
        payload = np.ascontiguousarray(t, dtype="<f8").tobytes()
        parts.append(struct.pack(f"<I{t.ndim}IQ", t.ndim, *t.shape, len(payload)))
        parts.append(payload)
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[list[np.ndarray], int]:
    if blob[:4] != _CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, epoch, count = struct.unpack_from("<III", blob, 4)
        if version != _CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos, tensors = 16, []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{ndim}I", blob, pos + 4)
            (nbytes,) = struct.unpack_from("<Q", blob, pos + 4 + 4 * ndim)
            pos += 12 + 4 * ndim
            if nbytes != 8 * math.prod(shape) or pos + nbytes > len(blob):
                raise CheckpointError(f"tensor payload at byte {pos} is inconsistent")
            tensors.append(np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos)
                           .reshape(shape).astype(np.float64))
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes in checkpoint")
    return tensors, epoch


# --- the contract ----------------------------------------------------------


class Trainable(abc.ABC):
    """A child model the population search can step, score and clone."""

    epoch: int

    @abc.abstractmethod
    def train_epoch(self, policy_source: Optional[PolicySource], rng: np.random.Generator) -> dict:
        """Train one epoch and advance ``epoch``."""

    @abc.abstractmethod
    def evaluate(self, split: str = "val") -> float:
        """Accuracy in [0, 1] on ``"train"``, ``"val"`` or ``"test"``."""

    @abc.abstractmethod
    def save_checkpoint(self) -> bytes: ...

    @abc.abstractmethod
    def load_checkpoint(self, blob: bytes) -> None: ...


class ToyTrainable(Trainable):
    def __init__(
        self,
        data: DatasetSplits,
        cfg: TrainerConfig,
        seed=None,
        total_epochs: Optional[int] = None,
        extra_transform: Optional[ImageTransform] = None,
    ):
        self.data = data
        self.cfg = cfg
        self.total_epochs = total_epochs or cfg.epochs
        self.extra_transform = extra_transform
        h, w, c = data.image_shape
        self.model = ToyClassifier(h * w * c, data.class_count, cfg.hidden_units, seed)
        self.epoch = 0
        self._eval_cache: dict[str, np.ndarray] = {}

    def train_epoch(self, policy_source, rng) -> dict:
        stats = train_epoch(
            self.model, self.data.train, policy_source, self.cfg, rng,
            epoch=self.epoch, total_epochs=self.total_epochs,
            dataset_kind=self.data.dataset_kind, mean=self.data.mean, std=self.data.std,
            extra_transform=self.extra_transform,
        )
        self.epoch += 1
        return stats

    def evaluate(self, split: str = "val") -> float:
        if split not in self._eval_cache:
            self._eval_cache[split] = flatten_split(
                getattr(self.data, split), self.data.mean, self.data.std
            )
        return evaluate(self.model, self._eval_cache[split], getattr(self.data, split).labels)

    def save_checkpoint(self) -> bytes:
        return encode_checkpoint(self.model.params, self.epoch)

    def load_checkpoint(self, blob: bytes) -> None:
        tensors, epoch = decode_checkpoint(blob)
        if [t.shape for t in tensors] != [p.shape for p in self.model.params]:
            raise CheckpointError("checkpoint tensor shapes do not match the model")
        self.model.params = tensors
        self.epoch = epoch


@dataclass(frozen=True)
class ToyFactory:
    """Picklable factory building :class:`ToyTrainable` children."""

    cfg: TrainerConfig
    total_epochs: Optional[int] = None

    def __call__(self, data: DatasetSplits, seed) -> ToyTrainable:
        return ToyTrainable(data, self.cfg, seed, self.total_epochs)
