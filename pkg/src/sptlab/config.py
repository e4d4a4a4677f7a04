"""Experiment configuration: defaults, config-file loading and CLI overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import spt
from .attacks import EVAL_PGD_ITERS, TRAIN_PGD_ITERS, PerturbationConfig
from .data import DATASETS, default_data_dir
from .errors import UsageError
from .evaluation import ATTACKS, DEFENSES, AttackSettings
from .models import DEFAULT_SEEDS, MODEL_IDS


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_dir: str | None = None
    train_subset: int | None = None
    test_subset: int | None = None
    models: list = field(default_factory=lambda: list(MODEL_IDS))
    model_seeds: dict = field(default_factory=lambda: dict(DEFAULT_SEEDS))
    seed: int = 0
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    defense: str = "none"
    epsilon: float = 0.3
    step: float = 0.01
    iters: int = EVAL_PGD_ITERS
    adv_iters: int = TRAIN_PGD_ITERS
    adv_epochs: int | None = None
    fgsm_epsilon: float | None = None
    gammas: list = field(default_factory=lambda: list(spt.DEFAULT_GAMMAS))
    alpha: float | None = None
    spt_lr: float = 1e-4
    spt_epochs: int = 1
    spt_train_subset: int | None = None
    init_seed: int = 0
    init_scheme: str = spt.DEFAULT_SCHEME
    mode: str = "untargeted"
    target_label: int | None = None
    attacks: list = field(default_factory=lambda: list(ATTACKS))
    out: str = "runs/default"
    jobs: int = 1

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise UsageError(f"unknown dataset {self.dataset!r}; choose from {', '.join(DATASETS)}")
        if self.defense not in DEFENSES:
            raise UsageError(f"unknown defense {self.defense!r}; choose from {', '.join(DEFENSES)}")
        for m in self.models:
            if m not in MODEL_IDS:
                raise UsageError(f"unknown model {m!r}; choose from {', '.join(MODEL_IDS)}")
        for a in self.attacks:
            if a not in ATTACKS:
                raise UsageError(f"unknown attack {a!r}; choose from {', '.join(ATTACKS)}")
        if self.jobs < 1:
            raise UsageError("jobs must be >= 1")
        if self.epochs < 0 or self.spt_epochs < 1:
            raise UsageError("epoch counts must be positive")
        for name in ("train_subset", "test_subset", "spt_train_subset"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise UsageError(f"{name} must be >= 1")
        if self.alpha is None:
            self.alpha = spt.DEFAULT_ALPHA[self.dataset]
        if self.data_dir is None:
            self.data_dir = str(default_data_dir())
        self.model_seeds = {**DEFAULT_SEEDS, **self.model_seeds}
        # validated here so a bad config fails before any training starts
        self.perturbation("pgd")
        spt.SptTrainConfig(self.spt_lr, self.spt_epochs, self.batch_size, self.mode,
                           self.target_label, self.seed)

    def perturbation(self, kind: str) -> PerturbationConfig:
        if kind == "fgsm":
            eps = self.epsilon if self.fgsm_epsilon is None else self.fgsm_epsilon
            return PerturbationConfig(eps, eps, 1, random_start=False, seed=self.seed)
        if kind == "adv_train":
            return PerturbationConfig(self.epsilon, self.step, self.adv_iters, True, self.seed)
        return PerturbationConfig(self.epsilon, self.step, self.iters, True, self.seed)

    def spt_train(self) -> spt.SptTrainConfig:
        return spt.SptTrainConfig(self.spt_lr, self.spt_epochs, self.batch_size, self.mode,
                                  self.target_label, self.seed)

    def attack_settings(self) -> AttackSettings:
        return AttackSettings(
            fgsm=self.perturbation("fgsm"),
            pgd=self.perturbation("pgd"),
            spt_init_seed=self.init_seed,
            spt_scheme=self.init_scheme,
            spt_alpha=float(self.alpha),
            spt_gammas=tuple(self.gammas),
            spt_train=self.spt_train(),
            spt_train_subset=self.spt_train_subset,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


FIELD_NAMES = {f.name for f in fields(ExperimentConfig)}


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(data) - FIELD_NAMES)
    if unknown:
        raise UsageError(f"config file {path}: unknown keys {', '.join(unknown)}")
    return data


def resolve(overrides: dict | None = None, config_file=None) -> ExperimentConfig:
    """Built-in defaults, then the config file, then explicit overrides."""
    merged = read_config_file(config_file) if config_file else {}
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ExperimentConfig(**merged)
    except TypeError as e:
        raise UsageError(str(e)) from None
