"""Structure-preserving gray-level transform attack.

Every pixel value ``x`` is mapped to ``sigmoid(sum_i w_i * x ** gamma_i)``
with fixed exponents ``gamma_i`` and trainable weights ``w_i``. The map
depends on the pixel value only, so pixels that share a gray level in the
source image share one in the output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import NUM_CLASSES, Dataset, batch_indices, one_hot
from .errors import DomainError, FormatError, UsageError
from .models import ClassifierModel
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

DEFAULT_GAMMAS = (0.04, 0.10, 0.20, 0.40, 0.67, 1.0, 1.5, 2.5, 5.0, 10.0, 25.0)
DEFAULT_ALPHA = {"mnist": 0.0, "fmnist": 0.6}
DEFAULT_SCHEME = "normal0.5"

INIT_SCHEMES = {
    "normal0.5": lambda rng, n: 0.5 * rng.standard_normal(n),
    "normal1": lambda rng, n: rng.standard_normal(n),
    "uniform1": lambda rng, n: rng.uniform(-1.0, 1.0, n),
    "zeros": lambda rng, n: np.zeros(n),
}


@dataclass(frozen=True)
class SptParams:
    gammas: tuple[float, ...]
    weights: np.ndarray
    alpha: float = 0.0
    init_seed: int = 0
    init_scheme: str = DEFAULT_SCHEME
    steps: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        if w.shape != (len(self.gammas),):
            raise UsageError(f"{len(self.gammas)} exponents but weights of shape {w.shape}")
        if any(g < 0 for g in self.gammas):
            raise DomainError("exponents must be non-negative")
        if self.alpha < 0:
            raise UsageError("alpha must be non-negative")


def init_params(init_seed: int = 0, scheme: str = DEFAULT_SCHEME, alpha: float = 0.0,
                gammas=DEFAULT_GAMMAS) -> SptParams:
    if scheme not in INIT_SCHEMES:
        raise UsageError(f"unknown init scheme {scheme!r}; choose from {', '.join(INIT_SCHEMES)}")
    rng = np.random.default_rng(init_seed)
    weights = INIT_SCHEMES[scheme](rng, len(gammas))
    return SptParams(tuple(gammas), weights, float(alpha), int(init_seed), scheme)


@dataclass
class SptTrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 1
    batch_size: int = 64
    mode: str = "untargeted"
    target_label: int | None = None
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise UsageError("learning_rate must be > 0")
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.mode not in ("untargeted", "targeted"):
            raise UsageError(f"mode must be 'untargeted' or 'targeted', got {self.mode!r}")
        if self.mode == "targeted":
            if self.target_label is None or not 0 <= int(self.target_label) < NUM_CLASSES:
                raise UsageError(f"targeted mode needs a label in 0..9, got {self.target_label!r}")


@dataclass
class SptTrace:
    step_objectives: list[float] = field(default_factory=list)
    epoch_objectives: list[float] = field(default_factory=list)
    updated_scalars: int = 0


def spt_layer(x: ad.Tensor, weights: ad.Tensor, gammas) -> ad.Tensor:
    """Differentiable transform of an image tensor of any shape."""
    shape = x.shape
    basis = ad.stack([ad.power(x, g) for g in gammas], axis=-1)
    flat = ad.reshape(basis, (-1, len(gammas)))
    z = ad.affine(flat, ad.reshape(weights, (len(gammas), 1)), ad.Tensor(np.zeros(1)))
    return ad.sigmoid(ad.reshape(z, shape))


def _check_range(images: np.ndarray) -> None:
    if images.size and (np.isnan(images).any() or images.min() < 0.0 or images.max() > 1.0):
        raise DomainError("pixel values must lie in [0, 1]")


def transform(params: SptParams, images, chunk: int = 2000) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    _check_range(images)
    w = ad.Tensor(params.weights)
    if images.ndim == 0 or len(images) <= chunk:
        return spt_layer(ad.Tensor(images), w, params.gammas).data
    return np.concatenate(
        [spt_layer(ad.Tensor(images[i:i + chunk]), w, params.gammas).data
         for i in range(0, len(images), chunk)]
    )


def generate(params: SptParams, images) -> np.ndarray:
    """Adversarial images from trained parameters; no model access needed."""
    return transform(params, images)


def _objective(target: ClassifierModel, images: np.ndarray, labels_onehot: np.ndarray,
               w: ad.Tensor, params: SptParams, cfg: SptTrainConfig) -> ad.Tensor:
    logits = target.logits(spt_layer(ad.Tensor(images), w, params.gammas))
    if cfg.mode == "targeted":
        wanted = one_hot(np.full(len(images), int(cfg.target_label)))
        loss = ad.softmax_cross_entropy(logits, wanted)
    else:
        # true-label log-likelihood, i.e. negated cross-entropy
        loss = ad.neg(ad.softmax_cross_entropy(logits, labels_onehot))
    if params.alpha:
        loss = ad.add(loss, ad.mul(params.alpha, ad.sum_(ad.mul(w, w))))
    return loss


def objective_and_grad(target: ClassifierModel, images: np.ndarray, labels_onehot: np.ndarray,
                       params: SptParams, cfg: SptTrainConfig | None = None) -> tuple[float, np.ndarray]:
    """Batch objective and its gradient with respect to the weights."""
    cfg = cfg or SptTrainConfig()
    w = ad.Tensor(params.weights.copy(), requires_grad=True)
    with ad.Tape() as tape:
        loss = _objective(target, images, labels_onehot, w, params, cfg)
    tape.backward(loss)
    return loss.item(), w.grad


def objective_value(target: ClassifierModel, images: np.ndarray, labels_onehot: np.ndarray,
                    params: SptParams, cfg: SptTrainConfig | None = None) -> float:
    cfg = cfg or SptTrainConfig()
    return _objective(target, images, labels_onehot, ad.Tensor(params.weights), params, cfg).item()


def dataset_objective(target: ClassifierModel, dataset: Dataset, params: SptParams,
                      cfg: SptTrainConfig | None = None, batch_size: int = 500) -> float:
    """Example-weighted mean of the batch objective over a whole dataset."""
    cfg = cfg or SptTrainConfig()
    total = 0.0
    for idx in batch_indices(len(dataset), batch_size):
        value = objective_value(target, dataset.images(idx), one_hot(dataset.labels[idx]), params, cfg)
        total += value * len(idx)
    return total / len(dataset)


def train_spt(target: ClassifierModel, dataset: Dataset, params: SptParams,
              cfg: SptTrainConfig | None = None) -> tuple[SptParams, SptTrace]:
    """Fit the transform weights with Adam; the target network is never updated.

    Each step minimises the batch-mean objective plus ``alpha * sum(w**2)``.
    """
    cfg = cfg or SptTrainConfig()
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    weights = params.weights.copy()
    state = AdamState(weights.size, learning_rate=cfg.learning_rate)
    trace = SptTrace()
    for epoch in range(cfg.epochs):
        seed = (cfg.shuffle_seed * 1_000_003 + epoch) & 0x7FFFFFFF
        total = 0.0
        for idx in batch_indices(len(dataset), cfg.batch_size, shuffle_seed=seed):
            current = replace(params, weights=weights)
            value, grad = objective_and_grad(
                target, dataset.images(idx), one_hot(dataset.labels[idx]), current, cfg
            )
            trace.updated_scalars = int(grad.size)
            weights = adam_step(state, weights, grad)
            trace.step_objectives.append(value)
            total += value * len(idx)
        trace.epoch_objectives.append(total / len(dataset))
        log.info("spt vs %s epoch %d objective %.4f", target.id, epoch + 1, trace.epoch_objectives[-1])
    return replace(params, weights=weights, steps=params.steps + state.t), trace


def monotonicity(params: SptParams, points: int = 1024) -> dict:
    """Describe whether the learned scalar map is monotone on a grid of [0, 1]."""
    grid = np.linspace(0.0, 1.0, points)
    values = transform(params, grid)
    diffs = np.diff(values)
    signs = np.sign(diffs[diffs != 0])
    changes = int((signs[1:] != signs[:-1]).sum()) if signs.size else 0
    direction = "constant" if not signs.size else ("increasing" if signs[0] > 0 else "decreasing")
    return {
        "monotone": changes == 0,
        "direction": direction,
        "sign_changes": changes,
        "injective_on_grid": bool(np.unique(values).size == points),
    }


# --- parameter file -------------------------------------------------------------------

PARAM_HEADER = "sptlab-spt-params"
PARAM_VERSION = 1


def params_to_text(params: SptParams) -> str:
    lines = [
        f"{PARAM_HEADER} {PARAM_VERSION}",
        f"scheme {params.init_scheme}",
        f"seed {params.init_seed}",
        f"alpha {params.alpha!r}",
        f"steps {params.steps}",
        "gammas " + " ".join(repr(float(g)) for g in params.gammas),
        "weights " + " ".join(repr(float(w)) for w in params.weights),
    ]
    return "\n".join(lines) + "\n"


def save_params(params: SptParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(params_to_text(params))
    return path


def load_params(path) -> SptParams:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(PARAM_HEADER + " "):
        raise FormatError(f"{path}: not an SPT parameter file")
    version = lines[0].split()[1]
    if version != str(PARAM_VERSION):
        raise FormatError(f"{path}: parameter file version {version}, expected {PARAM_VERSION}")
    fields = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, _, value = line.partition(" ")
        fields[key] = value.strip()
    missing = {"scheme", "seed", "alpha", "gammas", "weights"} - fields.keys()
    if missing:
        raise FormatError(f"{path}: missing fields {sorted(missing)}")
    try:
        gammas = tuple(float(v) for v in fields["gammas"].split())
        weights = np.array([float(v) for v in fields["weights"].split()])
        return SptParams(gammas, weights, float(fields["alpha"]), int(fields["seed"]),
                         fields["scheme"], int(fields.get("steps", 0)))
    except (ValueError, UsageError, DomainError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
