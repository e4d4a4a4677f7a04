"""Command-line entry point: ``sptlab <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import spt
from .attacks import adversarial_train
from .config import ExperimentConfig, resolve
from .data import load_dataset
from .errors import SptlabError, UsageError
from .evaluation import (ATTACKS, DEFENSES, RESERVED_ATTACKS, check_structure_preserved, checkpoint_path,
                         craft, export_examples, histogram, run_blackbox_matrix, run_whitebox_matrix)
from .kernels import BACKEND
from .models import MODEL_IDS, ClassifierModel, build, load_checkpoint, save_checkpoint, train_classifier

log = logging.getLogger("sptlab")

CONFIG_FLAGS = (
    "dataset", "data_dir", "train_subset", "test_subset", "models", "seed", "epochs", "batch_size",
    "learning_rate", "defense", "epsilon", "step", "iters", "adv_iters", "adv_epochs", "fgsm_epsilon",
    "gammas", "alpha", "spt_lr", "spt_epochs", "spt_train_subset", "init_seed", "init_scheme", "mode",
    "target_label", "attacks", "out", "jobs",
)


def _csv(kind):
    def parse(text):
        return [kind(v) for v in text.split(",") if v.strip()]
    return parse


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment")
    g.add_argument("--config", help="JSON file with ExperimentConfig fields")
    g.add_argument("--dataset", choices=("mnist", "fmnist"))
    g.add_argument("--data-dir", help="directory with IDX files (default: $SPTLAB_DATA_DIR or ./data)")
    g.add_argument("--subset", type=int, help="use the first K images of both splits")
    g.add_argument("--train-subset", type=int)
    g.add_argument("--test-subset", type=int)
    g.add_argument("--models", type=_csv(str), help=f"comma list from {','.join(MODEL_IDS)}")
    g.add_argument("--seed", type=int, help="training shuffle and attack seed")
    g.add_argument("--epochs", type=int, help="classifier training epochs")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--defense", choices=DEFENSES)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--step", type=float, help="PGD step size")
    g.add_argument("--iters", type=int, help="PGD iterations at evaluation")
    g.add_argument("--adv-iters", type=int, help="PGD iterations inside adversarial training")
    g.add_argument("--adv-epochs", type=int, help="epochs for adversarial training (default --epochs)")
    g.add_argument("--fgsm-epsilon", type=float)
    g.add_argument("--gammas", type=_csv(float), help="override the exponent list")
    g.add_argument("--alpha", type=float, help="SPT weight-decay coefficient")
    g.add_argument("--spt-lr", type=float)
    g.add_argument("--spt-epochs", type=int)
    g.add_argument("--spt-train-subset", type=int)
    g.add_argument("--init-seed", type=int, help="SPT initialisation seed")
    g.add_argument("--init-scheme", choices=tuple(spt.INIT_SCHEMES))
    g.add_argument("--mode", choices=("untargeted", "targeted"), dest="spt_mode")
    g.add_argument("--target-label", type=int)
    g.add_argument("--attacks", type=_csv(str), help=f"comma list from {','.join(ATTACKS)}")
    g.add_argument("--jobs", type=int, help="parallel matrix cells")
    g.add_argument("--out", help="output directory")
    g.add_argument("--train-missing", action="store_true", help="train checkpoints that do not exist")
    g.add_argument("--force", action="store_true", help="retrain even if a checkpoint exists")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sptlab", description="Structure-preserving adversarial attacks on MNIST-style classifiers.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-classifiers", help="train and checkpoint the classifiers")
    _common(p)
    p = sub.add_parser("adv-train", help="PGD adversarial training (default model C_p)")
    _common(p)
    p = sub.add_parser("attack", help="run one attack against one checkpoint")
    _common(p)
    p.add_argument("attack_name", metavar="ATTACK", help=f"one of {', '.join(a for a in ATTACKS if a != 'none')}")
    p.add_argument("--target", default="C_p", help="model id (default C_p)")
    p.add_argument("--checkpoint", help="explicit checkpoint file instead of the run directory")
    p = sub.add_parser("matrix", help="white-box or black-box accuracy matrix")
    _common(p)
    p.add_argument("matrix_mode", metavar="MODE", choices=("whitebox", "blackbox"))
    p.add_argument("--examples", type=int, default=10, help="image columns in the exported grid (0 disables)")
    p.add_argument("--tag", default="", help="suffix for the report file names")
    p = sub.add_parser("export-examples", help="write image grids from a finished matrix run")
    _common(p)
    p.add_argument("matrix_mode", metavar="MODE", choices=("whitebox", "blackbox"))
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    p = sub.add_parser("verify", help="run the invariant suite")
    _common(p)
    return ap


def config_from_args(args: argparse.Namespace, **forced) -> ExperimentConfig:
    overrides = {}
    for name in CONFIG_FLAGS:
        dest = "spt_mode" if name == "mode" else name
        overrides[name] = getattr(args, dest, None)
    if args.subset is not None:
        overrides["train_subset"] = overrides["train_subset"] or args.subset
        overrides["test_subset"] = overrides["test_subset"] or args.subset
    for k, v in forced.items():
        if overrides.get(k) is None:
            overrides[k] = v
    return resolve(overrides, args.config)


def _setup_logging(out: Path, verbose: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    # timestamps go to the sidecar log only
    fh = logging.FileHandler(out / "run.log")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(fh)
    sh = logging.StreamHandler(sys.stderr)
    sh.setLevel(logging.INFO if verbose else logging.WARNING)
    sh.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root.addHandler(sh)


def _write_config(cfg: ExperimentConfig, command: str) -> None:
    out = Path(cfg.out)
    (out / "config.json").write_text(cfg.to_json())
    (out / f"config-{command}.json").write_text(cfg.to_json())


def _datasets(cfg: ExperimentConfig):
    train = load_dataset(cfg.dataset, "train", cfg.data_dir, cfg.train_subset)
    test = load_dataset(cfg.dataset, "test", cfg.data_dir, cfg.test_subset)
    return train, test


def _train_one(cfg: ExperimentConfig, mid: str, defense: str, train, test) -> ClassifierModel:
    seed = cfg.model_seeds[mid]
    if defense == "pgd_adv_train":
        epochs = cfg.adv_epochs if cfg.adv_epochs is not None else cfg.epochs
        return adversarial_train(mid, train, cfg.perturbation("adv_train"), epochs, cfg.batch_size,
                                 cfg.seed, cfg.learning_rate, model_seed=seed, eval_set=test)
    return train_classifier(build(mid, seed), train, cfg.epochs, cfg.batch_size, cfg.seed,
                            cfg.learning_rate, eval_set=test)


def ensure_models(cfg: ExperimentConfig, ids, defense: str, train, test, train_missing: bool,
                  force: bool = False) -> dict[str, ClassifierModel]:
    models = {}
    for mid in ids:
        path = checkpoint_path(cfg.out, cfg.dataset, defense, mid)
        if path.exists() and not force:
            models[mid] = load_checkpoint(path)
            continue
        if not train_missing and not force:
            raise FileNotFoundError(
                f"missing checkpoint for model {mid} ({cfg.dataset}, defense={defense}): {path}; "
                "run train-classifiers first or pass --train-missing"
            )
        log.info("training %s (%s, defense=%s)", mid, cfg.dataset, defense)
        model = _train_one(cfg, mid, defense, train, test)
        save_checkpoint(model, path)
        models[mid] = model
    return models


def _fmt_hist(h) -> str:
    return " ".join(f"{i}:{100 * v:.1f}%" for i, v in enumerate(h))


def cmd_train(args, cfg: ExperimentConfig, defense: str) -> int:
    train, test = _datasets(cfg)
    path = Path(cfg.out) / f"train-{cfg.dataset}-{defense}.json"
    summary = json.loads(path.read_text()) if path.exists() else {}
    for mid in cfg.models:
        model = ensure_models(cfg, [mid], defense, train, test, train_missing=True, force=args.force)[mid]
        acc = float((model.classify(test.images()) == test.labels).mean())
        summary[mid] = {"test_accuracy": acc, "n_test": len(test), "epochs": model.metadata.get("epochs"),
                        "checkpoint": str(checkpoint_path(cfg.out, cfg.dataset, defense, mid))}
        print(f"{mid}: test accuracy {100 * acc:.2f}% on {len(test)} images ({defense})")
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_attack(args, cfg: ExperimentConfig) -> int:
    name = args.attack_name
    if name not in ATTACKS or name == "none":
        valid = ", ".join(a for a in ATTACKS if a != "none")
        extra = " (reserved, not implemented)" if name in RESERVED_ATTACKS else ""
        raise UsageError(f"unknown attack {name!r}{extra}; valid attacks: {valid}")
    train, test = _datasets(cfg)
    if args.checkpoint:
        target = load_checkpoint(args.checkpoint)
    else:
        if args.target not in MODEL_IDS:
            raise UsageError(f"unknown model {args.target!r}; choose from {', '.join(MODEL_IDS)}")
        target = ensure_models(cfg, [args.target], cfg.defense, train, test, args.train_missing)[args.target]
    settings = cfg.attack_settings()
    art = Path(cfg.out) / "attacks"
    tag = f"{cfg.dataset}-{cfg.defense}-seed{cfg.init_seed}-"
    crafted = craft(name, target, train, test, settings, art, tag=tag)
    preds = target.classify(crafted.images)
    acc = float((preds == test.labels).mean())
    hist = histogram(preds)
    record = {"attack": name, "target": target.id, "dataset": cfg.dataset, "defense": cfg.defense,
              "accuracy": acc, "histogram": [float(v) for v in hist], "n_eval": len(test),
              "settings": settings.for_attack(name), **crafted.extra}
    print(f"{name} vs {target.id}: accuracy {100 * acc:.2f}% on {len(test)} images")
    print(f"predicted labels: {_fmt_hist(hist)}")
    if name == "spt":
        s = crafted.structure
        print(f"structure check: {'passed' if s['passed'] else 'FAILED'} ({s['violations']} violations)")
        print(f"parameters: {crafted.extra.get('spt_param_file')}")
        record["structure"] = s
    else:
        s = check_structure_preserved(test.images(), crafted.images)
        record["structure"] = {"passed": s.passed, "violations": s.violations}
    art.mkdir(parents=True, exist_ok=True)
    (art / f"{name}-{tag}{target.id}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_matrix(args, cfg: ExperimentConfig) -> int:
    train, test = _datasets(cfg)
    ids = list(cfg.models)
    if args.matrix_mode == "blackbox" and "C_p" not in ids:
        ids = ["C_p"] + ids
    models = ensure_models(cfg, ids, cfg.defense, train, test, args.train_missing)
    runner = run_whitebox_matrix if args.matrix_mode == "whitebox" else run_blackbox_matrix
    report = runner(models, train, test, cfg.defense, cfg.attacks, cfg.attack_settings(),
                    out_dir=cfg.out, jobs=cfg.jobs)
    paths = report.write(Path(cfg.out) / "reports", args.tag)
    print(report.to_table(), end="")
    print(f"report: {paths['jsonl']}")
    if args.examples and "spt" in cfg.attacks:
        grid = _export(cfg, args.matrix_mode, models, test, args.examples, "png")
        print(f"examples: {grid}")
    return 0


def _export(cfg: ExperimentConfig, mode: str, models: dict, test, count: int, fmt: str) -> Path:
    """Originals in the first row, SPT outputs from the saved parameter files below."""
    images = test.images(np.arange(min(count, len(test))))
    art = Path(cfg.out) / "artifacts"
    rows, names, preds = [images], ["original"], []
    sources = ["C_p"] if mode == "blackbox" else [m for m in MODEL_IDS if m in models]
    for src in sources:
        path = art / f"spt-{mode}-{cfg.dataset}-{cfg.defense}-{src}.txt"
        if not path.exists():
            raise FileNotFoundError(f"no SPT parameter file for {src}: {path}; run the matrix first")
        rows.append(spt.transform(spt.load_params(path), images))
        names.append(f"spt:{src}")
    # each row is labelled by the model it was crafted against; originals by the first source
    for name, row in zip(names, rows):
        model = models[name.split(":")[1]] if ":" in name else models[sources[0]]
        preds.append(model.classify(row))
    out = Path(cfg.out) / "examples" / f"{mode}-{cfg.dataset}-{cfg.defense}"
    export_examples(np.stack(rows), out, fmt, names, list(range(len(images))), np.stack(preds))
    return out


def cmd_export(args, cfg: ExperimentConfig) -> int:
    test = load_dataset(cfg.dataset, "test", cfg.data_dir, cfg.test_subset)
    ids = ["C_p"] if args.matrix_mode == "blackbox" else list(cfg.models)
    models = ensure_models(cfg, ids, cfg.defense, None, None, train_missing=False)
    out = _export(cfg, args.matrix_mode, models, test, args.count, args.format)
    print(f"examples: {out}")
    return 0


def cmd_verify(args, cfg: ExperimentConfig) -> int:
    from . import verify

    images = labels = None
    try:
        test = load_dataset(cfg.dataset, "test", cfg.data_dir, cfg.test_subset)
        images, labels = test.images(), test.labels
        source = f"{cfg.dataset} test split ({len(test)} images)"
    except FileNotFoundError:
        source = "synthetic images (dataset not found)"
    print(f"kernel backend: {BACKEND}; structure checks on {source}")
    results = verify.run_all(images, labels, cfg.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        forced = {}
        if args.command == "adv-train":
            forced = {"defense": "pgd_adv_train", "models": ["C_p"]}
        cfg = config_from_args(args, **forced)
        _setup_logging(Path(cfg.out), args.verbose)
        _write_config(cfg, args.command)
        log.info("command %s, kernel backend %s", args.command, BACKEND)
        if args.command == "train-classifiers":
            return cmd_train(args, cfg, cfg.defense)
        if args.command == "adv-train":
            return cmd_train(args, cfg, "pgd_adv_train")
        if args.command == "attack":
            return cmd_attack(args, cfg)
        if args.command == "matrix":
            return cmd_matrix(args, cfg)
        if args.command == "export-examples":
            return cmd_export(args, cfg)
        return cmd_verify(args, cfg)
    except UsageError as e:
        print(f"sptlab: error: {e}", file=sys.stderr)
        return 2
    except (SptlabError, FileNotFoundError, ValueError) as e:
        print(f"sptlab: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
