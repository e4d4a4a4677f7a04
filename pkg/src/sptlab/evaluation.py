"""Experiment protocols: accuracy matrices, prediction statistics, structure checks."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import spt
from .attacks import PerturbationConfig, fgsm, pgd
from .data import NUM_CLASSES, Dataset, one_hot
from .errors import UsageError
from .models import MODEL_IDS, ClassifierModel, accuracy, checkpoint_bytes, load_checkpoint

log = logging.getLogger(__name__)

ATTACKS = ("none", "fgsm", "pgd", "spt")
RESERVED_ATTACKS = ("cw",)  # column kept in the schema, not implemented
DEFENSES = ("none", "pgd_adv_train")
SUBSTITUTE = "C_p"


def prediction_statistics(model: ClassifierModel, images) -> np.ndarray:
    """Fraction of examples assigned to each label."""
    if len(images) == 0:
        raise UsageError("prediction statistics need a non-empty batch")
    return histogram(model.classify(images))


def histogram(predictions) -> np.ndarray:
    predictions = np.asarray(predictions)
    return np.bincount(predictions, minlength=NUM_CLASSES) / len(predictions)


@dataclass
class StructureCheck:
    passed: bool
    violations: int
    patterns: int
    examples: list = field(default_factory=list)


def check_structure_preserved(original, transformed, tol: float = 0.0, max_examples: int = 10
                              ) -> StructureCheck:
    """Verify that every gray-level set of each original image maps to one value.

    Pixels are grouped per image by their exact original value; a group
    whose transformed values spread by more than ``tol`` is a violation.
    Merging two groups into one output value is allowed.
    """
    original = np.asarray(original, dtype=np.float64)
    transformed = np.asarray(transformed, dtype=np.float64)
    if original.shape != transformed.shape:
        raise UsageError(f"shape mismatch {original.shape} vs {transformed.shape}")
    n = len(original) if original.ndim > 1 else 1
    orig = original.reshape(n, -1)
    trans = transformed.reshape(n, -1)
    image_idx = np.repeat(np.arange(n), orig.shape[1])
    flat_o, flat_t = orig.ravel(), trans.ravel()
    order = np.lexsort((flat_o, image_idx))
    so, st, si = flat_o[order], flat_t[order], image_idx[order]
    starts = np.flatnonzero(np.r_[True, (so[1:] != so[:-1]) | (si[1:] != si[:-1])])
    spread = np.maximum.reduceat(st, starts) - np.minimum.reduceat(st, starts)
    bad = np.flatnonzero(spread > tol)
    examples = [
        {"image": int(si[starts[b]]), "gray_level": float(so[starts[b]]), "spread": float(spread[b])}
        for b in bad[:max_examples]
    ]
    return StructureCheck(bad.size == 0, int(bad.size), int(starts.size), examples)


def quantize(images) -> np.ndarray:
    return np.round(np.asarray(images, dtype=np.float64) * 255.0).astype(np.uint8)


# --- attack settings and cells --------------------------------------------------------


@dataclass
class AttackSettings:
    fgsm: PerturbationConfig = field(
        default_factory=lambda: PerturbationConfig(0.3, 0.3, 1, random_start=False))
    pgd: PerturbationConfig = field(default_factory=PerturbationConfig)
    spt_init_seed: int = 0
    spt_scheme: str = spt.DEFAULT_SCHEME
    spt_alpha: float = 0.0
    spt_gammas: tuple = spt.DEFAULT_GAMMAS
    spt_train: spt.SptTrainConfig = field(default_factory=spt.SptTrainConfig)
    spt_train_subset: int | None = None

    def for_attack(self, attack: str) -> dict:
        if attack == "fgsm":
            return {"fgsm": asdict(self.fgsm)}
        if attack == "pgd":
            return {"pgd": asdict(self.pgd)}
        if attack == "spt":
            return {
                "init_seed": self.spt_init_seed,
                "scheme": self.spt_scheme,
                "alpha": self.spt_alpha,
                "gammas": list(self.spt_gammas),
                "train": asdict(self.spt_train),
                "train_subset": self.spt_train_subset,
            }
        return {}


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class CellRecord:
    mode: str
    dataset: str
    defense: str
    attack: str
    source: str
    target: str
    accuracy: float
    histogram: list
    n_eval: int
    config_digest: str
    seeds: dict
    whitebox_reference: bool = False
    structure: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def key(self) -> str:
        return f"{self.mode}-{self.dataset}-{self.defense}-{self.attack}-{self.source}-{self.target}"


@dataclass
class EvalReport:
    experiment: str
    mode: str
    dataset: str
    defense: str
    attacks: list
    models: list
    cells: list = field(default_factory=list)
    n_eval: int = 0

    def cell(self, attack: str, target: str) -> CellRecord:
        for c in self.cells:
            if c.attack == attack and c.target == target:
                return c
        raise KeyError((attack, target))

    def accuracy(self, attack: str, target: str) -> float:
        return self.cell(attack, target).accuracy

    def histograms(self, attack: str) -> dict:
        return {c.target: c.histogram for c in self.cells if c.attack == attack}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(c), sort_keys=True) + "\n" for c in self.cells)

    def to_table(self) -> str:
        header = ["target"] + [a.upper() if a != "none" else "NO-ATTACK" for a in self.attacks]
        rows = []
        for mid in self.models:
            row = [mid]
            for a in self.attacks:
                c = self.cell(a, mid)
                mark = "*" if c.whitebox_reference and self.mode == "blackbox" else ""
                row.append(f"{100 * c.accuracy:6.2f}%{mark}")
            rows.append(row)
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        fmt = lambda r: "  ".join(s.rjust(w) for s, w in zip(r, widths))  # noqa: E731
        title = f"{self.mode} / {self.dataset} / defense={self.defense} / n={self.n_eval}"
        lines = [title, fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
        if self.mode == "blackbox":
            lines.append(f"* white-box reference (attacks crafted on {SUBSTITUTE})")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, tag: str = "") -> dict:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = f"report-{self.mode}-{self.dataset}-{self.defense}" + (f"-{tag}" if tag else "")
        (out_dir / f"{stem}.jsonl").write_text(self.to_jsonl())
        (out_dir / f"{stem}.txt").write_text(self.to_table())
        return {"jsonl": str(out_dir / f"{stem}.jsonl"), "table": str(out_dir / f"{stem}.txt")}


@dataclass
class Crafted:
    images: np.ndarray
    extra: dict = field(default_factory=dict)
    structure: dict | None = None


def craft(attack: str, source: ClassifierModel, train_set: Dataset, test_set: Dataset,
          settings: AttackSettings, artifact_dir: Path | None = None, tag: str = "") -> Crafted:
    """Produce adversarial versions of the test images against ``source``."""
    images = test_set.images()
    onehot = one_hot(test_set.labels)
    if attack == "none":
        return Crafted(images)
    if attack == "fgsm":
        return Crafted(fgsm(source, images, onehot, settings.fgsm), {"fgsm": asdict(settings.fgsm)})
    if attack == "pgd":
        return Crafted(pgd(source, images, onehot, settings.pgd), {"pgd": asdict(settings.pgd)})
    if attack == "spt":
        params0 = spt.init_params(settings.spt_init_seed, settings.spt_scheme,
                                  settings.spt_alpha, settings.spt_gammas)
        trained, trace = spt.train_spt(source, train_set.subset(settings.spt_train_subset),
                                       params0, settings.spt_train)
        adv = spt.generate(trained, images)
        check = check_structure_preserved(images, adv)
        extra = {
            "spt_weights": [float(w) for w in trained.weights],
            "spt_epoch_objectives": trace.epoch_objectives,
            "spt_monotonicity": spt.monotonicity(trained),
            "mean_brightness": float(adv.mean()),
        }
        if artifact_dir is not None:
            path = spt.save_params(trained, Path(artifact_dir) / f"spt-{tag}{source.id}.txt")
            extra["spt_param_file"] = str(path)
        return Crafted(adv, extra, asdict(check))
    if attack in RESERVED_ATTACKS:
        raise UsageError(f"attack {attack!r} is reserved in the report schema but not implemented")
    raise UsageError(f"unknown attack {attack!r}; choose from {', '.join(ATTACKS)}")


def _seeds(attack: str, settings: AttackSettings, source: ClassifierModel) -> dict:
    seeds = {"source_model_seed": source.seed}
    if attack == "pgd":
        seeds["pgd_seed"] = settings.pgd.seed
    if attack == "spt":
        seeds["spt_init_seed"] = settings.spt_init_seed
        seeds["spt_shuffle_seed"] = settings.spt_train.shuffle_seed
    return seeds


def _load_cell(cell_dir: Path | None, key: str, digest: str) -> CellRecord | None:
    if cell_dir is None:
        return None
    path = cell_dir / f"{key}.json"
    if not path.exists():
        return None
    data = json.loads(path.read_text())
    if data.get("config_digest") != digest:
        return None
    return CellRecord(**data)


def _store_cell(cell_dir: Path | None, cell: CellRecord) -> None:
    if cell_dir is None:
        return
    cell_dir.mkdir(parents=True, exist_ok=True)
    tmp = cell_dir / f"{cell.key}.json.tmp"
    tmp.write_text(json.dumps(asdict(cell), sort_keys=True))
    tmp.replace(cell_dir / f"{cell.key}.json")


def _fingerprint(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def _cell_digest(mode, dataset, defense, attack, source, target, settings, test_set, train_set,
                 prints: dict) -> str:
    """Everything a cell's numbers depend on, so stale cells are never reused."""
    return config_digest({
        "mode": mode, "dataset": dataset, "defense": defense, "attack": attack,
        "source": source.id, "source_weights": prints[source.id],
        "target": target.id, "target_weights": prints[target.id],
        "settings": settings.for_attack(attack),
        "n_test": len(test_set), "n_train": len(train_set), "test_data": prints["test"],
        "train_data": prints["train"] if attack == "spt" else None,
    })


def _run_cells(mode: str, models: dict[str, ClassifierModel], train_set: Dataset, test_set: Dataset,
               defense: str, attacks, settings: AttackSettings, out_dir, jobs: int) -> EvalReport:
    for a in attacks:
        if a not in ATTACKS:
            if a in RESERVED_ATTACKS:
                raise UsageError(f"attack {a!r} is reserved in the report schema but not implemented")
            raise UsageError(f"unknown attack {a!r}; choose from {', '.join(ATTACKS)}")
    if mode == "blackbox" and SUBSTITUTE not in models:
        raise UsageError(f"black-box protocol needs the substitute model {SUBSTITUTE}")
    out_dir = Path(out_dir) if out_dir is not None else None
    cell_dir = out_dir / "cells" if out_dir else None
    artifact_dir = out_dir / "artifacts" if out_dir else None
    ids = [m for m in MODEL_IDS if m in models]
    prints = {m: _fingerprint(checkpoint_bytes(models[m])) for m in ids}
    prints["test"] = _fingerprint(test_set.pixels, test_set.labels)
    prints["train"] = _fingerprint(train_set.pixels, train_set.labels)

    # one job = one attack crafted against one source, evaluated on its targets
    jobs_list = []
    for attack in attacks:
        if mode == "whitebox":
            jobs_list += [(attack, mid, [mid]) for mid in ids]
        else:
            jobs_list.append((attack, SUBSTITUTE, ids))

    def run(job):
        attack, src_id, target_ids = job
        source = models[src_id]
        digests = {
            t: _cell_digest(mode, test_set.name, defense, attack, source, models[t], settings,
                            test_set, train_set, prints)
            for t in target_ids
        }
        keys = {t: f"{mode}-{test_set.name}-{defense}-{attack}-{src_id}-{t}" for t in target_ids}
        cached = {t: _load_cell(cell_dir, keys[t], digests[t]) for t in target_ids}
        if all(c is not None for c in cached.values()):
            return list(cached.values())
        log.info("%s %s: crafting %s against %s", mode, defense, attack, src_id)
        crafted = craft(attack, source, train_set, test_set, settings, artifact_dir,
                        tag=f"{mode}-{test_set.name}-{defense}-")
        cells = []
        for t in target_ids:
            if cached[t] is not None:
                cells.append(cached[t])
                continue
            preds = models[t].classify(crafted.images)
            cell = CellRecord(
                mode=mode, dataset=test_set.name, defense=defense, attack=attack, source=src_id,
                target=t, accuracy=float((preds == test_set.labels).mean()),
                histogram=[float(v) for v in histogram(preds)], n_eval=len(test_set),
                config_digest=digests[t], seeds=_seeds(attack, settings, source),
                whitebox_reference=(t == src_id), structure=crafted.structure,
                extra=crafted.extra,
            )
            _store_cell(cell_dir, cell)
            cells.append(cell)
        return cells

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, jobs_list))
    else:
        results = [run(j) for j in jobs_list]
    cells = {(c.attack, c.target): c for group in results for c in group}
    ordered = [cells[(a, m)] for a in attacks for m in ids]
    return EvalReport(
        experiment=f"{mode}-{test_set.name}-{defense}", mode=mode, dataset=test_set.name,
        defense=defense, attacks=list(attacks), models=ids, cells=ordered, n_eval=len(test_set),
    )


def run_whitebox_matrix(models, train_set, test_set, defense="none", attacks=ATTACKS,
                        settings: AttackSettings | None = None, out_dir=None, jobs: int = 1) -> EvalReport:
    """Attack every model with attacks crafted against that same model."""
    return _run_cells("whitebox", models, train_set, test_set, defense, list(attacks),
                      settings or AttackSettings(), out_dir, jobs)


def run_blackbox_matrix(models, train_set, test_set, defense="none", attacks=ATTACKS,
                        settings: AttackSettings | None = None, out_dir=None, jobs: int = 1) -> EvalReport:
    """Craft every attack on the substitute and transfer it to the other models."""
    return _run_cells("blackbox", models, train_set, test_set, defense, list(attacks),
                      settings or AttackSettings(), out_dir, jobs)


def checkpoint_path(root, dataset: str, defense: str, model_id: str) -> Path:
    return Path(root) / "checkpoints" / dataset / defense / f"{model_id}.ckpt"


def load_target_models(root, dataset: str, defense: str, ids=MODEL_IDS) -> dict[str, ClassifierModel]:
    models = {}
    for mid in ids:
        path = checkpoint_path(root, dataset, defense, mid)
        if not path.exists():
            raise FileNotFoundError(
                f"missing checkpoint for model {mid} ({dataset}, defense={defense}): {path}"
            )
        models[mid] = load_checkpoint(path)
    return models


# --- image export ---------------------------------------------------------------------


def export_examples(images, path, fmt: str = "png", row_names=None, source_indices=None,
                    predictions=None, pad: int = 2) -> dict:
    """Write a grid of 8-bit gray tiles plus one file per tile and a manifest.

    ``images`` is (rows, cols, [1,] H, W) or (N, [1,] H, W) for a single row.
    """
    from PIL import Image

    if fmt not in ("png", "pgm"):
        raise UsageError(f"format must be png or pgm, got {fmt!r}")
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim in (3, 4) and (arr.ndim == 3 or arr.shape[1] == 1):
        arr = arr[None]
    if arr.ndim == 5:
        arr = arr[:, :, 0]
    if arr.ndim != 4:
        raise UsageError(f"cannot lay out images of shape {np.shape(images)}")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise UsageError("pixel values must lie in [0, 1]")
    rows, cols, h, w = arr.shape
    row_names = list(row_names) if row_names is not None else [f"row{r}" for r in range(rows)]
    source_indices = list(source_indices) if source_indices is not None else list(range(cols))
    out = Path(path)
    tiles_dir = out / "tiles"
    tiles_dir.mkdir(parents=True, exist_ok=True)
    q = quantize(arr)
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), 255, dtype=np.uint8)
    ext = "png" if fmt == "png" else "pgm"
    pil_fmt = "PNG" if fmt == "png" else "PPM"
    tiles = []
    for r in range(rows):
        for c in range(cols):
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            grid[y:y + h, x:x + w] = q[r, c]
            tile_path = tiles_dir / f"r{r:02d}_c{c:02d}.{ext}"
            Image.fromarray(q[r, c], mode="L").save(tile_path, format=pil_fmt)
            tiles.append({
                "file": str(tile_path.relative_to(out)),
                "row": r, "col": c, "model": row_names[r],
                "source_index": int(source_indices[c]),
                "predicted_label": None if predictions is None else int(np.asarray(predictions)[r, c]),
            })
    grid_path = out / f"grid.{ext}"
    Image.fromarray(grid, mode="L").save(grid_path, format=pil_fmt)
    manifest = {"grid": grid_path.name, "rows": rows, "cols": cols, "format": fmt, "tiles": tiles}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_tile(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path), dtype=np.float64) / 255.0
