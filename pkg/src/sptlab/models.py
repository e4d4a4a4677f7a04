"""The five target classifiers, their training loop and checkpoint files."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Dataset, batch_indices, one_hot
from .errors import DimensionError, FormatError, UsageError
from .optim import Adam

log = logging.getLogger(__name__)

INPUT_SHAPE = (1, 28, 28)
NUM_CLASSES = 10
INIT_STD = 0.1
INIT_BIAS = 0.1


@dataclass(frozen=True)
class Conv:
    filters: int
    k: int
    stride: int = 1

    def __str__(self):
        return f"Conv({self.filters},{self.k},{self.k},{self.stride})"


@dataclass(frozen=True)
class ReLU:
    inserted: bool = False  # absent from the published table, added for nonlinearity

    def __str__(self):
        return "ReLU"


@dataclass(frozen=True)
class MaxPool:
    n: int

    def __str__(self):
        return f"MaxPool({self.n},{self.n})"


@dataclass(frozen=True)
class FC:
    units: int

    def __str__(self):
        return f"FC({self.units})"


@dataclass(frozen=True)
class Softmax:
    def __str__(self):
        return "Softmax"


@dataclass(frozen=True)
class ArchitectureSpec:
    id: str
    layers: tuple

    def describe(self, include_inserted: bool = True) -> list[str]:
        return [
            str(layer) for layer in self.layers
            if include_inserted or not getattr(layer, "inserted", False)
        ]


def _lenet(k: int, widths: tuple[int, ...]) -> tuple:
    c1, c2 = widths[0], widths[1]
    layers = [Conv(c1, k), ReLU(), MaxPool(2), Conv(c2, k), ReLU(), MaxPool(2)]
    if len(widths) == 3:
        layers += [Conv(widths[2], k), ReLU(inserted=True)]
    return tuple(layers + [FC(1024), ReLU(inserted=True), FC(NUM_CLASSES), Softmax()])


_CP = _lenet(5, (32, 64))
ARCHITECTURES: dict[str, ArchitectureSpec] = {
    "C_p": ArchitectureSpec("C_p", _CP),
    "C_a0": ArchitectureSpec("C_a0", _CP),
    "C_a1": ArchitectureSpec("C_a1", _lenet(4, (32, 32, 64))),
    "C_a2": ArchitectureSpec("C_a2", _lenet(3, (32, 32, 64))),
    "C_a3": ArchitectureSpec(
        "C_a3",
        (Conv(32, 3), ReLU(), MaxPool(2), FC(1024), ReLU(), FC(512), ReLU(), FC(NUM_CLASSES), Softmax()),
    ),
}
MODEL_IDS = tuple(ARCHITECTURES)
# C_p and C_a0 share a layer list, so distinct default seeds are what tells them apart.
DEFAULT_SEEDS = {"C_p": 101, "C_a0": 202, "C_a1": 303, "C_a2": 404, "C_a3": 505}


def parameter_shapes(spec: ArchitectureSpec) -> dict[str, tuple[int, ...]]:
    c, h, w = INPUT_SHAPE
    flat = None
    shapes: dict[str, tuple[int, ...]] = {}
    n_conv = n_fc = 0
    for layer in spec.layers:
        if isinstance(layer, Conv):
            n_conv += 1
            shapes[f"conv{n_conv}.kernel"] = (layer.filters, c, layer.k, layer.k)
            shapes[f"conv{n_conv}.bias"] = (layer.filters,)
            c = layer.filters
            h, w = -(-h // layer.stride), -(-w // layer.stride)
        elif isinstance(layer, MaxPool):
            h, w = -(-h // layer.n), -(-w // layer.n)
        elif isinstance(layer, FC):
            n_fc += 1
            fan_in = flat if flat is not None else c * h * w
            shapes[f"fc{n_fc}.weight"] = (fan_in, layer.units)
            shapes[f"fc{n_fc}.bias"] = (layer.units,)
            flat = layer.units
    return shapes


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class ClassifierModel:
    spec: ArchitectureSpec
    params: dict[str, np.ndarray]
    seed: int
    metadata: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        return self.spec.id

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(
            self.spec, {k: v.copy() for k, v in self.params.items()}, self.seed, dict(self.metadata)
        )

    def logits(self, x: ad.Tensor, params: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
        """Forward pass to pre-softmax scores.

        ``params`` overrides the stored arrays with caller-owned tensors
        (used by training to collect parameter gradients). Without it the
        parameters enter as constants, so only input gradients are tracked.
        """
        if x.data.ndim != 4 or x.shape[1:] != INPUT_SHAPE:
            raise DimensionError(f"{self.id} expects images of shape (N, 1, 28, 28), got {x.shape}")
        p = params if params is not None else {k: ad.Tensor(v) for k, v in self.params.items()}
        n_conv = n_fc = 0
        for layer in self.spec.layers:
            if isinstance(layer, Conv):
                n_conv += 1
                x = ad.conv2d(x, p[f"conv{n_conv}.kernel"], p[f"conv{n_conv}.bias"], layer.stride, "same")
            elif isinstance(layer, ReLU):
                x = ad.relu(x)
            elif isinstance(layer, MaxPool):
                x = ad.maxpool2d(x, layer.n)
            elif isinstance(layer, FC):
                n_fc += 1
                if x.data.ndim != 2:
                    x = ad.reshape(x, (x.shape[0], -1))
                x = ad.affine(x, p[f"fc{n_fc}.weight"], p[f"fc{n_fc}.bias"])
        return x

    def predict(self, images: np.ndarray, chunk: int = 500) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != INPUT_SHAPE:
            raise DimensionError(f"{self.id} expects images of shape (N, 1, 28, 28), got {images.shape}")
        out = [
            ad.softmax(self.logits(ad.Tensor(images[i:i + chunk]))).data
            for i in range(0, len(images), chunk)
        ]
        return np.concatenate(out) if out else np.zeros((0, NUM_CLASSES))

    def classify(self, images: np.ndarray) -> np.ndarray:
        return self.predict(images).argmax(axis=1)


def build(spec_id: str, seed: int | None = None) -> ClassifierModel:
    if spec_id not in ARCHITECTURES:
        raise UsageError(f"unknown model {spec_id!r}; choose from {', '.join(MODEL_IDS)}")
    spec = ARCHITECTURES[spec_id]
    seed = DEFAULT_SEEDS[spec_id] if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(spec).items():
        if name.endswith("bias"):
            params[name] = np.full(shape, INIT_BIAS)
        else:
            params[name] = _truncated_normal(rng, shape, INIT_STD)
    return ClassifierModel(spec, params, seed, {"init": f"truncnorm({INIT_STD})/const({INIT_BIAS})"})


BatchHook = Callable[[ClassifierModel, np.ndarray, np.ndarray, int], np.ndarray]


def train_step(model: ClassifierModel, opt: Adam, images: np.ndarray, onehot: np.ndarray) -> float:
    tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in model.params.items()}
    with ad.Tape() as tape:
        loss = ad.softmax_cross_entropy(model.logits(ad.Tensor(images), tensors), onehot)
    tape.backward(loss)
    opt.step({k: t.grad for k, t in tensors.items()})
    return loss.item()


def train_classifier(
    model: ClassifierModel,
    dataset: Dataset,
    epochs: int = 10,
    batch_size: int = 64,
    seed: int = 0,
    lr: float = 1e-3,
    batch_hook: BatchHook | None = None,
    eval_set: Dataset | None = None,
) -> ClassifierModel:
    """Minimise cross-entropy with Adam; returns a new model.

    Each epoch reshuffles with a seed derived from ``(seed, epoch)``.
    ``batch_hook`` may replace every batch before the update (adversarial
    training plugs in here).
    """
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    if epochs < 0:
        raise UsageError("epochs must be >= 0")
    model = model.copy()
    opt = Adam(model.params, lr=lr)
    losses = []
    step = 0
    for epoch in range(epochs):
        order = batch_indices(len(dataset), batch_size, shuffle_seed=(seed * 1_000_003 + epoch) & 0x7FFFFFFF)
        total = 0.0
        for idx in order:
            images = dataset.images(idx)
            onehot = one_hot(dataset.labels[idx])
            if batch_hook is not None:
                images = batch_hook(model, images, onehot, step)
            total += train_step(model, opt, images, onehot) * len(idx)
            step += 1
        losses.append(total / len(dataset))
        log.info("%s epoch %d/%d loss %.4f", model.id, epoch + 1, epochs, losses[-1])
    model.metadata.update(
        {
            "train_seed": seed,
            "epochs": epochs,
            "batch_size": batch_size,
            "learning_rate": lr,
            "train_size": len(dataset),
            "dataset": dataset.name,
            "epoch_losses": losses,
        }
    )
    if eval_set is not None:
        model.metadata["test_accuracy"] = accuracy(model, eval_set.images(), eval_set.labels)
    return model


def accuracy(model: ClassifierModel, images: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise UsageError(f"{len(images)} images but {len(labels)} labels")
    if len(labels) == 0:
        raise UsageError("accuracy of an empty set is undefined")
    return float((model.classify(images) == labels).mean())


# --- checkpoints ----------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SPTLABCK"
CHECKPOINT_VERSION = 1


def _pack_str(s: str, width: str = ">H") -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(width, len(raw)) + raw


def checkpoint_bytes(model: ClassifierModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack(">H", CHECKPOINT_VERSION))
    buf.write(_pack_str(model.id))
    buf.write(struct.pack(">q", model.seed))
    buf.write(_pack_str(json.dumps(model.metadata, sort_keys=True), ">I"))
    buf.write(struct.pack(">I", len(model.params)))
    for name in sorted(model.params):
        arr = model.params[name]
        buf.write(_pack_str(name))
        buf.write(struct.pack(">B", arr.ndim))
        buf.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: ClassifierModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width: str = ">H") -> str:
        (n,) = self.unpack(width)
        return self.take(n).decode("utf-8")


def load_checkpoint(path) -> ClassifierModel:
    path = Path(path)
    data = path.read_bytes()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an sptlab checkpoint (bad magic)")
    if len(data) < len(CHECKPOINT_MAGIC) + 32:
        raise FormatError(f"{path}: truncated checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupted file)")
    r = _Reader(body, path)
    r.take(len(CHECKPOINT_MAGIC))
    (version,) = r.unpack(">H")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    spec_id = r.string()
    if spec_id not in ARCHITECTURES:
        raise FormatError(f"{path}: unknown architecture {spec_id!r}")
    (seed,) = r.unpack(">q")
    metadata = json.loads(r.string(">I"))
    (count,) = r.unpack(">I")
    params = {}
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack(">B")
        shape = r.unpack(f">{ndim}I")
        n = int(np.prod(shape))
        params[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(body):
        raise FormatError(f"{path}: {len(body) - r.pos} trailing bytes before checksum")
    spec = ARCHITECTURES[spec_id]
    expected = parameter_shapes(spec)
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        raise FormatError(f"{path}: parameter blocks {got} do not match {spec_id} layout {expected}")
    return ClassifierModel(spec, params, int(seed), metadata)


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
