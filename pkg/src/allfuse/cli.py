"""``allfuse`` command line: synth, prepare, augment, tune, train, evaluate, plot-data.

All artifacts live under the configured workdir, one subdirectory per command,
each with a ``run.json`` provenance record.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, augment, bayes_opt, config as cfgmod, ensemble, evaluation, ingest, models, synth
from .errors import AllfuseError, ConfigError, DataError, MissingArtifactError, ShapeError
from .hyperparams import TUNED, HyperParams
from .seeding import derive_seed

ARCH_LABEL = {"a": "A", "b": "B", "c": "C"}


def say(msg: str):
    print(msg, flush=True)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_run(cfg, command: str, out_dir: Path, consumed=(), arch=None, extra=None):
    """Provenance for one command: what ran, under which config and seed, on which inputs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rec = {
        "command": command,
        "arch": arch,
        "config_sha256": cfg.digest,
        "seed": cfg.seed,
        "package_version": __version__,
        "consumed": {Path(p).relative_to(cfg.workdir).as_posix(): _sha256(p) for p in consumed},
    }
    if extra:
        rec.update(extra)
    evaluation.write_text(out_dir / "run.json", _dump(rec))


def _require(path: Path, what: str, prior: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {what} ({path}); run `allfuse {prior}` first")
    return path


# ------------------------------------------------------------------ data access


def preprocess(path, size: int) -> np.ndarray:
    return augment.resize(augment.scale_features(ingest.load_image(path)), size, size)


def _stack(rows, size):
    if not rows:
        return np.zeros((0, size, size, 3), np.float32), np.zeros(0, np.int64)
    x = np.stack([preprocess(r.path, size) for r in rows]).astype(np.float32)
    return x, np.array([r.label for r in rows], dtype=np.int64)


def manifest_path(cfg) -> Path:
    return cfg.workdir / "prepare" / "manifest.csv"


def augmented_manifest_path(cfg) -> Path:
    return cfg.workdir / "augment" / "train_manifest.csv"


def load_split(cfg, split: str):
    rows = ingest.read_manifest(_require(manifest_path(cfg), "split manifest", "prepare"))
    return _stack([r for r in rows if r.split == split], cfg["data.image_size"])


def load_training_sets(cfg):
    _require(manifest_path(cfg), "split manifest", "prepare")
    aug_rows = ingest.read_manifest(_require(augmented_manifest_path(cfg), "augmented training set", "augment"))
    return _stack(aug_rows, cfg["data.image_size"]), load_split(cfg, "val")


def ensemble_dir(cfg, arch) -> Path:
    return cfg.workdir / "train" / arch / "ensemble"


def best_theta_path(cfg, arch) -> Path:
    return cfg.workdir / "tune" / arch / "best.json"


def resolve_hyperparams(cfg, arch):
    """Tuned theta if ``tune`` ran for this arch, else the default tuned values; then config overrides."""
    p = best_theta_path(cfg, arch)
    if p.exists():
        base, source = HyperParams.from_dict(json.loads(p.read_text())["theta"]), "tune"
    else:
        base, source = TUNED[arch], "default"
    return cfg.hyperparams(arch, base), source


# ------------------------------------------------------------------ commands


def cmd_synth(cfg, args):
    root = cfg.path("data.root")
    n = cfg["synth.n_per_class"]
    paths = synth.write_dataset(root, n, cfg.seed, cfg["data.image_size"], tuple(cfg["data.class_dirs"]))
    say(f"synth: wrote {len(paths)} images ({n} per class) under {root}")
    write_run(cfg, "synth", cfg.workdir / "synth", extra={"n_images": len(paths)})


def cmd_prepare(cfg, args):
    index = ingest.scan_dataset(cfg.path("data.root"), tuple(cfg["data.class_dirs"]))
    split = ingest.split_dataset(index, cfg.seed)
    out = manifest_path(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    ingest.write_manifest(out, ingest.manifest_rows(index, split))
    say(f"prepare: {len(index)} images -> train {len(split.train)}, val {len(split.validation)}, "
        f"test {len(split.test)}")
    write_run(cfg, "prepare", out.parent, consumed=[])


def _policy(cfg) -> augment.AugmentPolicy:
    targets = cfg["augment.class_targets"]
    return augment.AugmentPolicy(
        rotation_deg=cfg["augment.rotation_deg"],
        height_shift_frac=cfg["augment.height_shift"],
        width_shift_frac=cfg["augment.width_shift"],
        zoom_frac=cfg["augment.zoom"],
        horizontal_flip=cfg["augment.horizontal_flip"],
        vertical_flip=cfg["augment.vertical_flip"],
        shear_deg=cfg["augment.shear_deg"],
        multiplier=cfg["augment.multiplier"],
        seed=derive_seed(cfg.seed, "augment") % (2**31),
        class_targets=None if targets is None else {0: targets[0], 1: targets[1]},
    )


def cmd_augment(cfg, args):
    man = _require(manifest_path(cfg), "split manifest", "prepare")
    rows = ingest.read_manifest(man)
    size = cfg["data.image_size"]
    train = [(i, preprocess(r.path, size), r.label) for i, r in enumerate(rows) if r.split == "train"]
    if cfg["augment.enabled"]:
        out = augment.augment_split(train, _policy(cfg))
    else:
        out = [augment.AugmentedEntry(eid, -1, lab, img) for eid, img, lab in train]
    img_dir = cfg.workdir / "augment" / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    new_rows = []
    for e in out:
        tag = "orig" if e.copy_index < 0 else f"aug{e.copy_index:03d}"
        p = img_dir / f"{e.source_id:05d}_{tag}.afim"
        ingest.write_afim(p, augment.to_uint8(e.image))
        new_rows.append(ingest.ManifestRow(p, e.label, "train"))
    ingest.write_manifest(augmented_manifest_path(cfg), new_rows)
    counts = np.bincount([r.label for r in new_rows], minlength=2)
    say(f"augment: {len(train)} training images -> {len(new_rows)} (class 0: {counts[0]}, class 1: {counts[1]})")
    write_run(cfg, "augment", cfg.workdir / "augment", consumed=[man])


def _archs(args):
    return [args.arch] if args.arch else list(models.ARCHS)


def cmd_tune(cfg, args):
    (xtr, ytr), (xva, yva) = load_training_sets(cfg)
    size = cfg["data.image_size"]
    for arch in _archs(args):
        out = cfg.workdir / "tune" / arch
        out.mkdir(parents=True, exist_ok=True)
        counter = iter(range(10**9))

        def objective(theta, arch=arch):
            seed = derive_seed(cfg.seed, "tune", arch, next(counter)) % (2**31)
            m = models.build_model(arch, theta, seed, input_shape=(size, size, 3), gru_units=cfg.gru_units(theta))
            t = models.train(m, (xtr, ytr), (xva, yva), cfg["bo.epochs"],
                             min(cfg["train.batch_size"], len(xtr)), theta, seed)
            return max(r["val_acc"] for r in t.history)

        def show(rec, trace, arch=arch):
            flag = " (failed)" if rec["failed"] else ""
            say(f"tune[{arch}] iter {rec['iter']}: y={rec['y']:.4f}{flag} incumbent={trace.best_y:.4f}")

        trace = bayes_opt.bo_loop(objective, cfg["bo.k_init"], cfg["bo.n_max"],
                                  seed=derive_seed(cfg.seed, "bo", arch) % (2**31), callback=show)
        trace.to_jsonl(out / "trace.jsonl")
        evaluation.write_text(out / "best.json", _dump({"theta": trace.best_theta.to_dict(), "y": trace.best_y}))
        write_run(cfg, "tune", out, consumed=[manifest_path(cfg), augmented_manifest_path(cfg)], arch=arch)


def cmd_train(cfg, args):
    (xtr, ytr), (xva, yva) = load_training_sets(cfg)
    size = cfg["data.image_size"]
    for arch in _archs(args):
        h, source = resolve_hyperparams(cfg, arch)
        say(f"train[{arch}]: {len(xtr)} train / {len(xva)} val, hyperparameters from {source}: {h.to_dict()}")
        e = ensemble.train_ensemble(
            arch, h, (xtr, ytr), (xva, yva), M=cfg["ensemble.M"],
            base_seed=derive_seed(cfg.seed, "ensemble", arch) % (2**31),
            epochs=cfg["train.epochs"], batch_size=min(cfg["train.batch_size"], len(xtr)),
            log=lambda m, arch=arch: say(f"train[{arch}]: {m}"),
            input_shape=(size, size, 3), gru_units=cfg.gru_units(h),
        )
        d = ensemble_dir(cfg, arch)
        ensemble.save_ensemble(e, d)
        consumed = [manifest_path(cfg), augmented_manifest_path(cfg)]
        if source == "tune":
            consumed.append(best_theta_path(cfg, arch))
        write_run(cfg, "train", d.parent, consumed=consumed, arch=arch, extra={"hyperparams_source": source})


def load_ensembles(cfg) -> dict:
    out = {}
    for arch in models.ARCHS:
        d = ensemble_dir(cfg, arch)
        if not (d / ensemble.MANIFEST).is_file():
            raise MissingArtifactError(
                f"missing ensemble for arch {ARCH_LABEL[arch]}; run `allfuse train --arch {arch}` first")
        out[arch] = ensemble.load_ensemble(d)
    return out


def cmd_evaluate(cfg, args):
    ens = load_ensembles(cfg)
    x, y = load_split(cfg, "test")
    if len(x) == 0:
        raise MissingArtifactError("the test split is empty; rerun `allfuse prepare`")
    scores = {arch: ensemble.predict_arrays(e, x)[0] for arch, e in ens.items()}
    report = evaluation.evaluate_scores([scores[a] for a in models.ARCHS], y)
    out = cfg.workdir / "evaluate"
    evaluation.write_text(out / "metrics.json", report.to_json())
    evaluation.write_text(out / "roc.csv", evaluation.roc_csv(report.roc_points))
    per_arch = {}
    for arch in models.ARCHS:
        r = evaluation.report_from_predictions(y, evaluation.decide(scores[arch]), scores[arch][:, 1])
        per_arch[arch] = {"accuracy": r.accuracy, "auc": r.auc}
        say(f"evaluate[{arch}]: accuracy={r.accuracy:.4f}")
    evaluation.write_text(out / "per_arch.json", _dump(per_arch))
    say(f"evaluate[fused]: accuracy={report.accuracy:.4f} auc={report.auc}")
    consumed = [manifest_path(cfg)] + [ensemble_dir(cfg, a) / ensemble.MANIFEST for a in models.ARCHS]
    write_run(cfg, "evaluate", out, consumed=consumed)


def cmd_plot_data(cfg, args):
    metrics = _require(cfg.workdir / "evaluate" / "metrics.json", "metrics report", "evaluate")
    ens = load_ensembles(cfg)
    out = cfg.workdir / "plots"
    rep = json.loads(metrics.read_text())
    evaluation.write_text(out / "roc_fused.csv", evaluation.roc_csv(rep["roc"]))
    n = 1
    for arch, e in ens.items():
        for i, m in enumerate(e.members):
            evaluation.write_text(out / f"history_{arch}_member{i}.csv", evaluation.history_csv(m.history))
            n += 1
    say(f"plot-data: wrote {n} CSV files under {out}")
    write_run(cfg, "plot-data", out, consumed=[metrics])


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "augment": cmd_augment,
    "tune": cmd_tune,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "plot-data": cmd_plot_data,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="allfuse", description="Hybrid CNN+GRU ensemble pipeline")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", type=Path, default=None, help="pipeline config file")
    p.add_argument("--arch", choices=list(models.ARCHS), default=None,
                   help="architecture for tune/train (default: all three)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.default()
        if args.seed is not None:
            cfg.values["seed"] = int(args.seed)
        COMMANDS[args.command](cfg, args)
    except AllfuseError as e:
        print(f"allfuse {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    except ShapeError as e:
        print(f"allfuse {args.command}: error: {e}", file=sys.stderr)
        return DataError.exit_code
    except (ValueError, TypeError) as e:
        # invalid numeric settings that slipped past config validation
        print(f"allfuse {args.command}: error: {e}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
