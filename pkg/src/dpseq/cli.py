"""``dpseq`` command line: tile | tissue-train | train | predict | evaluate | bench | gradcheck."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("dpseq")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_VERIFICATION = 4


class ValidationError(Exception):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


# ----------------------------------------------------------------------
# config resolution: defaults < --config file < explicit flags

DEFAULTS = {
    "common": {"seed": 0, "threads": None, "out": None},
    "tile": {"images": [], "mpp_file": None, "mpp": None, "normalize": True, "reference": None,
             "tile_px": 512, "target_mpp": 0.5, "model_px": 224, "tissue_checkpoint": None,
             "tumor_threshold": 0.5, "cap": 500},
    "train_common": {"manifest": None, "checkpoint": None, "pretrained": None, "model_config": None, "lr": 1e-4,
                     "batch_size": 32, "dropout": True},
    "tissue-train": {"max_epochs": 2, "schedule": "fixed", "patience": None, "class_weights": None},
    "train": {"max_epochs": 50, "schedule": "cosine", "patience": 8, "cosine_horizon": None,
              "class_weights": "inverse_frequency", "val_fraction": 0.15, "folds": None},
    "predict": {"checkpoint": None, "manifest": None, "batch_size": 64},
    "evaluate": {"scores": None, "labels": None, "bootstrap": 1000, "folds": None},
    "bench": {"checkpoint": None, "model_config": None, "manifest": None, "batch_size": 32},
    "gradcheck": {"layers": None, "n_seeds": 5, "corrupt": None},
}


def _defaults_for(cmd: str) -> dict:
    d = dict(DEFAULTS["common"])
    if cmd in ("tissue-train", "train"):
        d.update(DEFAULTS["train_common"])
    d.update(DEFAULTS[cmd])
    return d


def resolve(cmd: str, args: argparse.Namespace) -> dict:
    cfg = _defaults_for(cmd)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError([f"config: cannot read {args.config}: {exc}"]) from None
        unknown = sorted(set(file_cfg) - set(cfg) - {"command"})
        if unknown:
            raise ValidationError([f"{k}: unknown key for {cmd}" for k in unknown])
        cfg.update({k: v for k, v in file_cfg.items() if k != "command"})
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    cfg["command"] = cmd
    return cfg


def _require(cfg: dict, *keys) -> list[str]:
    return [f"{k}: required" for k in keys if cfg.get(k) in (None, "", [])]


def _exists(cfg: dict, *keys) -> list[str]:
    return [f"{k}: no such file {cfg[k]}" for k in keys if cfg.get(k) and not Path(cfg[k]).exists()]


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {k: v for k, v in cfg.items()}
    snapshot["dpseq_version"] = __version__
    (out / "resolved_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True, default=str) + "\n")
    return out


def _threads(cfg: dict):
    n = cfg.get("threads")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


# ----------------------------------------------------------------------
# subcommands


def cmd_tile(cfg: dict) -> int:
    from .manifest import TileManifest, TileRecord
    from .model import load_checkpoint
    from .preprocess import (InsufficientTissueError, StainProfile, TileSpec, load_rgb, normalize_tile,
                             reference_profile, resample, sample_per_patient, save_rgb, tessellate, tumor_filter)

    problems = _require(cfg, "out") + _exists(cfg, "mpp_file", "reference", "tissue_checkpoint")
    sidecar = {}
    if cfg.get("mpp_file") and not problems:
        try:
            sidecar = json.loads(Path(cfg["mpp_file"]).read_text())
        except json.JSONDecodeError as exc:
            problems.append(f"mpp_file: invalid JSON: {exc}")
    images = [Path(p) for p in cfg["images"]]
    meta = {}
    for img in images:
        entry = sidecar.get(img.name, sidecar.get(str(img)))
        if not isinstance(entry, dict):
            entry = {"mpp": entry}
        if entry.get("mpp") is None:
            entry["mpp"] = cfg.get("mpp")
        if entry["mpp"] is None:
            problems.append(f"mpp: missing for image {img}")
        if not img.exists():
            problems.append(f"images: unreadable input {img}")
        meta[img] = entry
    if problems:
        raise ValidationError(problems)

    out = _out_dir(cfg)
    tile_dir = out / "tiles"
    tile_dir.mkdir(exist_ok=True)
    spec = TileSpec(cfg["tile_px"], cfg["target_mpp"], cfg["model_px"])
    reference = StainProfile.load(cfg["reference"]) if cfg.get("reference") else reference_profile()
    if not images:
        log.warning("no input images; writing an empty manifest")
    rows, tiles, background = [], [], 0
    for img in sorted(images):
        entry = meta[img]
        pid = str(entry.get("patient_id") or img.stem)
        slide_tiles, coords = tessellate(load_rgb(img), float(entry["mpp"]), spec)
        for tile, (r, c) in zip(slide_tiles, coords):
            if cfg["normalize"]:
                try:
                    tile = normalize_tile(tile, reference)
                except InsufficientTissueError:
                    background += 1
                    continue
            tile = resample(tile, (spec.model_px, spec.model_px))
            name = f"{img.stem}_r{r:06d}_c{c:06d}.png"
            rows.append(TileRecord(pid, f"tiles/{name}", label=entry.get("label")))
            tiles.append(tile)
    if cfg.get("tissue_checkpoint") and tiles:
        model = load_checkpoint(cfg["tissue_checkpoint"])
        size = model.config.image_size
        batch = np.stack([resample(t, (size, size)) for t in tiles])
        keep = set(tumor_filter(batch, model, cfg["tumor_threshold"], records=rows))
        tiles = [t for i, t in enumerate(tiles) if i in keep]
        rows = [r for i, r in enumerate(rows) if i in keep]
    by_path = dict(zip((r.tile_path for r in rows), tiles))
    rows = sample_per_patient(rows, cfg["cap"], cfg["seed"])
    for r in rows:
        save_rgb(out / r.tile_path, by_path[r.tile_path])
    TileManifest(rows, out).write_csv(out / "manifest.csv")
    log.info("%d images -> %d tiles (%d background tiles dropped)", len(images), len(rows), background)
    return EXIT_OK


def _train_config(cfg: dict):
    from .training import TrainConfig
    cw = cfg["class_weights"]
    return TrainConfig(lr=cfg["lr"], schedule=cfg["schedule"], max_epochs=cfg["max_epochs"],
                       cosine_horizon=cfg.get("cosine_horizon"), patience=cfg["patience"],
                       class_weights=tuple(cw) if isinstance(cw, list) else cw,
                       batch_size=cfg["batch_size"], seed=cfg["seed"], dropout=cfg["dropout"])


def _validate_training(cfg: dict) -> None:
    from .training import TrainingError
    problems = _require(cfg, "manifest", "out") + _exists(cfg, "manifest", "checkpoint", "pretrained", "model_config")
    try:
        _train_config(cfg)
    except TrainingError as exc:
        problems.extend(f"train config: {p}" for p in str(exc).split("; "))
    if problems:
        raise ValidationError(problems)


def _build_model(cfg: dict, n_classes: int):
    from .model import DpseqModel, ModelConfig, load_checkpoint, load_pretrained_backbone
    from .seeding import derive_seed
    if cfg.get("checkpoint"):
        model = load_checkpoint(cfg["checkpoint"])
        if model.config.n_classes != n_classes:
            model = model.replace_head(n_classes, derive_seed(cfg["seed"], "head"))
        return model
    mc = ModelConfig()
    if cfg.get("model_config"):
        mc = ModelConfig.from_dict(json.loads(Path(cfg["model_config"]).read_text()))
    mc = ModelConfig.from_dict({**mc.to_dict(), "n_classes": n_classes})
    model = DpseqModel(mc, seed=derive_seed(cfg["seed"], "init"))
    if cfg.get("pretrained"):
        load_pretrained_backbone(model, cfg["pretrained"])
    return model


def cmd_tissue_train(cfg: dict) -> int:
    from .manifest import TileManifest
    from .model import write_config
    from .training import finetune_tissue
    _validate_training(cfg)
    out = _out_dir(cfg)
    model = _build_model(cfg, 9)
    write_config(model.config, out / "model_config.json")
    with _threads(cfg):
        finetune_tissue(model, TileManifest.read_csv(cfg["manifest"]), _train_config(cfg), out)
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    from .evaluation import aggregate_by_patient, kfold_split
    from .manifest import TileManifest
    from .model import write_config
    from .training import TileDataset, train_biomarker

    _validate_training(cfg)
    out = _out_dir(cfg)
    manifest = TileManifest.read_csv(cfg["manifest"])
    tc = _train_config(cfg)
    if not cfg.get("folds"):
        model = _build_model(cfg, 2)
        write_config(model.config, out / "model_config.json")
        with _threads(cfg):
            train_biomarker(model, manifest, tc, out, cfg["val_fraction"])
        return EXIT_OK

    labels = manifest.patient_labels()
    pids = sorted(labels)
    folds = kfold_split(pids, [labels[p] for p in pids], cfg["folds"], cfg["val_fraction"], cfg["seed"])
    score_rows = []
    for f, fold in enumerate(folds):
        fold_dir = out / f"fold_{f}"
        model = _build_model(cfg, 2)
        write_config(model.config, out / "model_config.json")
        with _threads(cfg):
            train_biomarker(model, manifest.with_splits(fold.assignment()), tc, fold_dir)
        test = TileDataset.from_manifest(manifest.subset(patients=fold.test), model.config.image_size)
        probs = model.predict_proba(test.images)[:, 1]
        for ps in aggregate_by_patient(test.patient_ids, probs, labels):
            score_rows.append((ps.patient_id, repr(ps.score), ps.label, ps.n_tiles, f))
    with open(out / "patient_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient_id", "score", "label", "n_tiles", "fold"))
        w.writerows(score_rows)
    return EXIT_OK


def cmd_predict(cfg: dict) -> int:
    from .evaluation import aggregate_by_patient
    from .manifest import TileManifest
    from .model import load_checkpoint
    from .preprocess import load_rgb, resample

    problems = _require(cfg, "checkpoint", "manifest", "out") + _exists(cfg, "checkpoint", "manifest")
    if problems:
        raise ValidationError(problems)
    out = _out_dir(cfg)
    model = load_checkpoint(cfg["checkpoint"])
    manifest = TileManifest.read_csv(cfg["manifest"])
    if not len(manifest):
        log.warning("empty manifest; writing empty outputs")
    size = model.config.image_size
    ok_rows, images, errors = [], [], []
    for rec in manifest:
        path = manifest.resolve(rec)
        try:
            img = load_rgb(path)
        except (OSError, ValueError) as exc:
            errors.append((rec.tile_path, str(exc)))
            continue
        images.append(img if img.shape[:2] == (size, size) else resample(img, (size, size)))
        ok_rows.append(rec)
    with _threads(cfg):
        probs = model.predict_proba(np.stack(images) if images else np.zeros((0, size, size, 3), np.uint8),
                                    cfg["batch_size"])
    pos = probs[:, -1] if len(probs) else np.zeros(0)
    with open(out / "tile_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient_id", "tile_path", "score"))
        for rec, s in zip(ok_rows, pos):
            w.writerow((rec.patient_id, rec.tile_path, repr(float(s))))
    labels = {r.patient_id: r.label for r in ok_rows if r.label is not None}
    with open(out / "patient_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient_id", "score", "label", "n_tiles"))
        for ps in aggregate_by_patient([r.patient_id for r in ok_rows], pos, labels):
            w.writerow((ps.patient_id, repr(ps.score), "" if ps.label is None else ps.label, ps.n_tiles))
    if errors:
        with open(out / "errors.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("tile_path", "error"))
            w.writerows(errors)
        log.error("%d tiles could not be read; see errors.csv", len(errors))
        return EXIT_RUNTIME
    return EXIT_OK


def _read_scores(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_evaluate(cfg: dict) -> int:
    from .evaluation import (MetricEstimate, auprc, auroc, config_hash, cv_summary, evaluate_scores,
                             kfold_split, write_curves)

    problems = _require(cfg, "scores", "out") + _exists(cfg, "scores", "labels")
    if problems:
        raise ValidationError(problems)
    rows = _read_scores(cfg["scores"])
    if cfg.get("labels"):
        label_map = {r["patient_id"]: int(r["label"]) for r in _read_scores(cfg["labels"])}
        unmatched = sorted({r["patient_id"] for r in rows} ^ set(label_map))
        if unmatched:
            raise ValidationError([f"labels: unmatched patient id {p}" for p in unmatched])
        for r in rows:
            r["label"] = label_map[r["patient_id"]]
    missing = [r["patient_id"] for r in rows if r.get("label") in (None, "")]
    if missing:
        raise ValidationError([f"labels: no label for patient {p}" for p in missing])
    out = _out_dir(cfg)
    scores = np.array([float(r["score"]) for r in rows])
    labels = np.array([int(r["label"]) for r in rows])
    report = evaluate_scores(scores, labels, cfg["bootstrap"], cfg["seed"])
    if cfg.get("folds"):
        k = int(cfg["folds"])
        if rows and "fold" in rows[0] and rows[0]["fold"] != "":
            fold_of = np.array([int(r["fold"]) for r in rows])
        else:
            pids = [r["patient_id"] for r in rows]
            folds = kfold_split(pids, labels.tolist(), k, seed=cfg["seed"])
            lookup = {p: f for f, fold in enumerate(folds) for p in fold.test}
            fold_of = np.array([lookup[p] for p in pids])
        for f in range(k):
            m = fold_of == f
            report.folds.append({"fold": f, "n_patients": int(m.sum()), "n_positive": int(labels[m].sum()),
                                 "auroc": auroc(scores[m], labels[m]), "auprc": auprc(scores[m], labels[m])})
        for name in ("auroc", "auprc"):
            mean, sd = cv_summary([row[name] for row in report.folds])
            report.cv[name] = {"mean": mean, "sd": sd}
        with open(out / "cv_table.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("fold", "n_patients", "auroc", "auprc"))
            for row in report.folds:
                w.writerow((row["fold"], row["n_patients"], repr(row["auroc"]), repr(row["auprc"])))
            w.writerow(("mean±sd", len(rows),
                        f"{report.cv['auroc']['mean']!r}±{report.cv['auroc']['sd']!r}",
                        f"{report.cv['auprc']['mean']!r}±{report.cv['auprc']['sd']!r}"))
    report.config_hash = config_hash({k: v for k, v in cfg.items() if k != "out"})
    (out / "report.json").write_text(report.to_json())
    write_curves(out, scores, labels)
    print(f"AUROC {report.auroc.value:.4f}  AUPRC {report.auprc.value:.4f}  (n={report.n_patients})")
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    from .evaluation import bench
    from .manifest import TileManifest
    from .training import TileDataset

    problems = _require(cfg, "manifest", "out") + _exists(cfg, "manifest", "checkpoint", "model_config")
    if problems:
        raise ValidationError(problems)
    out = _out_dir(cfg)
    model = _build_model({**cfg, "checkpoint": cfg.get("checkpoint")}, 2)
    manifest = TileManifest.read_csv(cfg["manifest"])
    ds = TileDataset.from_manifest(manifest, model.config.image_size)
    from .training import TrainConfig
    with _threads(cfg):
        rec = bench(model, ds, TrainConfig(batch_size=cfg["batch_size"], seed=cfg["seed"],
                                           schedule="fixed", patience=None, max_epochs=1),
                    threads=cfg.get("threads"))
    (out / "bench.json").write_text(json.dumps(rec.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"train {rec.train_seconds_per_epoch:.2f} s/epoch  predict {rec.predict_seconds:.2f} s  "
          f"params {rec.param_count}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    from .gradcheck import CHECKS, run_all
    layers = cfg.get("layers") or list(CHECKS)
    bad = [l for l in layers if l not in CHECKS]
    if bad or (cfg.get("corrupt") and cfg["corrupt"] not in CHECKS):
        raise ValidationError([f"layers: unknown layer {l}" for l in bad + [cfg.get("corrupt")] if l and l not in CHECKS])
    with _threads(cfg):
        rows = run_all(range(cfg["seed"], cfg["seed"] + cfg["n_seeds"]), layers, cfg.get("corrupt"))
    print(f"{'layer':<10} {'max_rel_err':>12} {'checked':>8}  status")
    for r in rows:
        print(f"{r.name:<10} {r.max_rel_err:>12.3e} {r.n_checked:>8}  {'PASS' if r.passed else 'FAIL'}")
    if cfg.get("out"):
        out = _out_dir(cfg)
        (out / "gradcheck.json").write_text(json.dumps(
            [{"layer": r.name, "max_rel_err": r.max_rel_err, "n_checked": r.n_checked, "passed": r.passed}
             for r in rows], indent=2) + "\n")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_VERIFICATION


COMMANDS = {
    "tile": cmd_tile,
    "tissue-train": cmd_tissue_train,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes"):
        return True
    if v.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {v!r}")


def _optional_int(v: str):
    return None if v.lower() in ("none", "null") else int(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpseq", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file whose keys mirror the flags")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)

    p = sub.add_parser("tile", help="tessellate, stain-normalize and sample slide images")
    common(p)
    p.add_argument("images", nargs="*", default=None)
    p.add_argument("--mpp-file", dest="mpp_file", help="JSON sidecar: image name -> mpp or {mpp, patient_id, label}")
    p.add_argument("--mpp", type=float, help="MPP for images absent from the sidecar")
    p.add_argument("--normalize", type=_bool)
    p.add_argument("--reference", help="stain profile JSON (default: shipped reference)")
    p.add_argument("--tile-px", dest="tile_px", type=int)
    p.add_argument("--target-mpp", dest="target_mpp", type=float)
    p.add_argument("--model-px", dest="model_px", type=int)
    p.add_argument("--tissue-checkpoint", dest="tissue_checkpoint")
    p.add_argument("--tumor-threshold", dest="tumor_threshold", type=float)
    p.add_argument("--cap", type=int)

    for name, help_ in (("tissue-train", "phase 1: nine-class tissue fine-tuning"),
                        ("train", "phase 2: binary biomarker training")):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--manifest")
        p.add_argument("--checkpoint", help="initial weights (head replaced if its width differs)")
        p.add_argument("--pretrained", help="backbone-only weights; head stays freshly initialized")
        p.add_argument("--model-config", dest="model_config")
        p.add_argument("--lr", type=float)
        p.add_argument("--max-epochs", dest="max_epochs", type=int)
        p.add_argument("--schedule", choices=("fixed", "cosine"))
        p.add_argument("--patience", type=_optional_int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--dropout", type=_bool)
        if name == "train":
            p.add_argument("--cosine-horizon", dest="cosine_horizon", type=int)
            p.add_argument("--val-fraction", dest="val_fraction", type=float)
            p.add_argument("--folds", type=int)

    p = sub.add_parser("predict", help="tile and patient scores")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--batch-size", dest="batch_size", type=int)

    p = sub.add_parser("evaluate", help="AUROC/AUPRC with bootstrap intervals")
    common(p)
    p.add_argument("--scores", help="patient_scores.csv")
    p.add_argument("--labels", help="CSV with patient_id,label (default: label column of --scores)")
    p.add_argument("--bootstrap", type=int)
    p.add_argument("--folds", type=int)

    p = sub.add_parser("bench", help="training s/epoch, prediction time, parameter count")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--model-config", dest="model_config")
    p.add_argument("--manifest")
    p.add_argument("--batch-size", dest="batch_size", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--layers", nargs="+")
    p.add_argument("--n-seeds", dest="n_seeds", type=int)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "tile" and not args.images:
        args.images = None
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except ValidationError as exc:
        for p in exc.problems:
            print(f"error: {p}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failures map to one exit code
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
