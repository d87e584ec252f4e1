"""Experiment orchestration CLI.

Stages: prepare -> train-gan -> (translate) -> augment -> train-classifier
-> evaluate -> report. Every subcommand takes ``--config`` plus repeatable
``-o key=value`` overrides. Exit codes: 0 success, 2 validation error,
1 runtime error.
"""

from __future__ import annotations

import csv
import math
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import data as data_mod
from . import metrics as metrics_mod
from . import recognition, training
from .augment import AugConfig, classic_augment
from .config import ConfigError, ExperimentConfig, load_config
from .data import (
    DatasetManifest,
    ImageRecord,
    build_instance,
    balance_plan,
    class_distribution,
    load_batch,
    load_manifest,
    save_manifest,
)
from .recognition import ClassifierConfig, EvalReport, evaluate as evaluate_model

# Published full-scale results, shown in reports as labeled context only.
REFERENCE_ROWS = [
    ("reference", "accuracy_X_to_X_plus_XC", "80.9 -> 81.7 (+0.8)"),
    ("reference", "accuracy_X_to_X_plus_XS", "80.9 -> 86.1 (+5.2)"),
    ("reference", "fcn_scores_cityscapes", "ppa 0.68, pca 0.20, class_iou 0.15"),
    ("reference", "fid_nima_res9_arl_f", "FID 55.18, NIMA 4.894 +/- 1.806"),
]

INSTANCE_TAGS = ("X", "X_plus_XC", "X_plus_XS")


class PipelineError(RuntimeError):
    pass


def _manifest_path(cfg: ExperimentConfig, tag: str) -> Path:
    return cfg.work_dir() / "manifests" / f"{tag}.csv"


def _load_instance(cfg: ExperimentConfig, tag: str) -> DatasetManifest:
    path = _manifest_path(cfg, tag)
    if not path.is_file():
        raise PipelineError(f"manifest for instance {tag} not found at {path}; run earlier stages")
    return load_manifest(path, instance_tag=tag if tag in data_mod.INSTANCE_TAGS else "custom")


def _write_distribution(manifest: DatasetManifest, path: Path) -> None:
    dist = class_distribution(
        DatasetManifest(manifest.subset(split="train"), manifest.label_set, "custom")
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "train_count"])
        for label in manifest.label_set:
            writer.writerow([label, dist[label]])


def _train_plan(cfg: ExperimentConfig, manifest: DatasetManifest) -> dict[str, int]:
    train = DatasetManifest(manifest.subset(split="train"), manifest.label_set, "custom")
    return balance_plan(
        class_distribution(train), cfg.data.target_per_class, cfg.frozen_classes()
    )


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="key=value config file")
@click.option("-o", "--set", "overrides", multiple=True, help="override, e.g. -o gan.lam=0")
@click.pass_context
def cli(ctx, config_path, overrides):
    ctx.obj = load_config(config_path, list(overrides))


@cli.command()
@click.pass_obj
def prepare(cfg: ExperimentConfig):
    """Build the base dataset instance X and the two translation domains."""
    work = cfg.work_dir()
    if cfg.data.toy:
        train = data_mod.make_toy_classification(
            cfg.data.toy_seed, cfg.toy_train_counts(), cfg.data.toy_side,
            work / "toy_images", split="train",
        )
        test = data_mod.make_toy_classification(
            cfg.data.toy_seed + 10_000,
            {label: cfg.data.toy_test_per_class for label in data_mod.TOY_CLASSES},
            cfg.data.toy_side, work / "toy_images", split="test",
        )
        base = DatasetManifest(train.records + test.records, train.label_set, "X")
    else:
        root = Path(cfg.paths.data_root)
        if not root.exists():
            raise PipelineError(f"data root does not exist: {root}")
        if not cfg.data.manifest:
            raise ConfigError("data.manifest must be set when data.toy=false")
        base = load_manifest(cfg.data.manifest, instance_tag="X")
    save_manifest(base, _manifest_path(cfg, "X"))
    _write_distribution(base, work / "dist_X.csv")
    for domain in ("A", "B"):
        records = base.subset(split="train", domain=domain)
        labels = sorted({r.class_label for r in records}) or base.label_set
        save_manifest(
            DatasetManifest(records, list(labels), "custom"),
            work / "manifests" / f"domain_{domain}.csv",
        )
    click.echo(f"prepared instance X: {len(base)} records -> {_manifest_path(cfg, 'X')}")


def _domain_manifest(cfg: ExperimentConfig, domain: str) -> DatasetManifest:
    path = cfg.work_dir() / "manifests" / f"domain_{domain}.csv"
    if not path.is_file():
        raise PipelineError(f"domain manifest missing: {path}; run prepare first")
    return load_manifest(path)


@cli.command("train-gan")
@click.option("--resume", is_flag=True, help="continue from the latest checkpoint")
@click.pass_obj
def train_gan(cfg: ExperimentConfig, resume):
    """Train the translator on the two domain manifests."""
    dom_a = _domain_manifest(cfg, "A")
    dom_b = _domain_manifest(cfg, "B")
    gan_dir = cfg.work_dir() / "gan"
    resume_from = training.latest_checkpoint(gan_dir) if resume else None
    state = training.train(dom_a, dom_b, cfg.gan, gan_dir, resume_from=resume_from)
    click.echo(f"trained to epoch {state.epoch}; checkpoints in {gan_dir}")


def _load_gan(cfg: ExperimentConfig):
    path = training.latest_checkpoint(cfg.work_dir() / "gan")
    return training.load_state(path)


def _translate_class(
    cfg: ExperimentConfig, state, sources: list[ImageRecord], target_label: str,
    count: int, out_dir: Path,
) -> list[ImageRecord]:
    out: list[ImageRecord] = []
    round_no = 0
    while len(out) < count:
        chunk = sources[: count - len(out)] if len(sources) >= count - len(out) else sources
        out += training.translate(
            state.g_ab, chunk, out_dir, target_label,
            image_size=cfg.gan.image_size,
            name_prefix=f"syn_{target_label}_r{round_no}",
        )
        round_no += 1
        if round_no > 1000:
            raise PipelineError("translation source pool too small")
    return out[:count]


@cli.command()
@click.pass_obj
def translate(cfg: ExperimentConfig):
    """Run the trained forward generator over domain A and write PNGs."""
    state = _load_gan(cfg)
    dom_a = _domain_manifest(cfg, "A")
    mapping = cfg.synthetic_map()
    out_dir = cfg.work_dir() / "translated"
    records: list[ImageRecord] = []
    for rec in dom_a.records:
        target = mapping.get(rec.class_label, rec.class_label)
        records += training.translate(
            state.g_ab, [rec], out_dir, target, image_size=cfg.gan.image_size,
            name_prefix=f"tr{len(records):05d}",
        )
    labels = sorted({r.class_label for r in records})
    save_manifest(
        DatasetManifest(records, labels, "custom"),
        cfg.work_dir() / "manifests" / "translated.csv",
    )
    click.echo(f"translated {len(records)} images -> {out_dir}")


@cli.command()
@click.argument("mode", type=click.Choice(["classic", "synthetic"]))
@click.pass_obj
def augment(cfg: ExperimentConfig, mode):
    """Build the augmented instance X+X_C (classic) or X+X_S (synthetic)."""
    base = _load_instance(cfg, "X")
    plan = _train_plan(cfg, base)
    train_records = base.subset(split="train")
    by_class: dict[str, list[ImageRecord]] = {label: [] for label in base.label_set}
    for r in train_records:
        by_class[r.class_label].append(r)

    additions: list[ImageRecord] = []
    if mode == "classic":
        out_dir = cfg.work_dir() / "classic"
        for label, needed in plan.items():
            if needed <= 0:
                continue
            produced: list[ImageRecord] = []
            round_no = 0
            while len(produced) < needed:
                aug_cfg = AugConfig(**{**cfg.aug.__dict__, "seed": cfg.aug.seed + round_no})
                produced += classic_augment(by_class[label], aug_cfg, out_dir / f"r{round_no}")
                round_no += 1
            additions += produced[:needed]
        tag = "X_plus_XC"
    else:
        state = _load_gan(cfg)
        mapping = cfg.synthetic_map()
        out_dir = cfg.work_dir() / "synthetic"
        targets = {dst: src for src, dst in mapping.items()}
        for label, needed in plan.items():
            if needed <= 0:
                continue
            source_label = targets.get(label)
            if source_label is None or not by_class.get(source_label):
                raise PipelineError(
                    f"no translation source for class {label!r}; extend synthetic.map"
                )
            additions += _translate_class(
                cfg, state, by_class[source_label], label, needed, out_dir
            )
        tag = "X_plus_XS"

    instance = build_instance(base, additions, tag)
    save_manifest(instance, _manifest_path(cfg, tag))
    _write_distribution(instance, cfg.work_dir() / f"dist_{tag}.csv")
    click.echo(f"built {tag}: +{len(additions)} records")


def _classifier_config(cfg: ExperimentConfig, manifest: DatasetManifest) -> ClassifierConfig:
    kwargs = dict(cfg.clf.__dict__)
    kwargs["n_classes"] = len(manifest.label_set)
    if cfg.data.toy:
        kwargs["input_side"] = cfg.data.toy_side
    return ClassifierConfig(**kwargs)


@cli.command("train-classifier")
@click.argument("instance_tag", type=click.Choice(INSTANCE_TAGS))
@click.pass_obj
def train_classifier_cmd(cfg: ExperimentConfig, instance_tag):
    """Fine-tune the recognition network on a dataset instance."""
    manifest = _load_instance(cfg, instance_tag)
    clf_cfg = _classifier_config(cfg, manifest)
    model, history = recognition.train_classifier(manifest, clf_cfg)
    out = cfg.work_dir() / f"clf_{instance_tag}"
    out.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"state_dict": model.state_dict(), "label_set": manifest.label_set,
         "input_side": clf_cfg.input_side, "n_classes": clf_cfg.n_classes},
        out / "model.pt",
    )
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "train_accuracy"])
        for row in history:
            writer.writerow([row["epoch"], f"{row['train_loss']:.6f}", f"{row['train_accuracy']:.6f}"])
    click.echo(f"trained classifier on {instance_tag} -> {out}")


@cli.command("evaluate")
@click.argument("instance_tag", type=click.Choice(INSTANCE_TAGS))
@click.pass_obj
def evaluate_cmd(cfg: ExperimentConfig, instance_tag):
    """Evaluate a trained classifier on the held-out test split of X."""
    model_path = cfg.work_dir() / f"clf_{instance_tag}" / "model.pt"
    if not model_path.is_file():
        raise PipelineError(f"no trained classifier for {instance_tag} at {model_path}")
    payload = torch.load(model_path, map_location="cpu", weights_only=False)
    clf_cfg = ClassifierConfig(n_classes=payload["n_classes"], input_side=payload["input_side"])
    model = recognition.build_classifier(clf_cfg)
    model.load_state_dict(payload["state_dict"])
    base = _load_instance(cfg, "X")
    test_records = base.subset(split="test")
    if not test_records:
        raise PipelineError("instance X has no test split")
    report = evaluate_model(model, test_records, payload["label_set"], payload["input_side"])
    eval_dir = cfg.work_dir() / "eval"
    report.to_csv(eval_dir / f"{instance_tag}.csv")
    report.confusion_to_csv(eval_dir / f"{instance_tag}_confusion.csv")
    click.echo(f"{instance_tag}: accuracy {report.total_accuracy:.4f}")


def _read_eval(cfg: ExperimentConfig, tag: str) -> EvalReport | None:
    path = cfg.work_dir() / "eval" / f"{tag}.csv"
    if not path.is_file():
        return None
    labels, tp, fp, precision = [], {}, {}, {}
    accuracy = 0.0
    with open(path, encoding="utf-8") as f:
        next(f)
        for line in f:
            label, tp_s, fp_s, prec_s = line.strip().split(",")
            if label == "total_accuracy":
                accuracy = float(prec_s)
                continue
            labels.append(label)
            tp[label] = int(tp_s)
            fp[label] = int(fp_s)
            precision[label] = float(prec_s)
    n = len(labels)
    return EvalReport(
        labels=labels, confusion=np.zeros((n, n), dtype=np.int64), tp=tp, fp=fp,
        per_class_precision=precision, total_accuracy=accuracy,
    )


def _fmt(value: float) -> str:
    return "undefined" if isinstance(value, float) and math.isnan(value) else f"{value:.6f}"


@cli.command()
@click.pass_obj
def report(cfg: ExperimentConfig):
    """Emit the report bundle: precision/accuracy, TP/FP change tables,
    generative metrics and labeled full-scale reference values."""
    reports = {tag: _read_eval(cfg, tag) for tag in INSTANCE_TAGS}
    if reports["X"] is None:
        raise PipelineError("no evaluation for instance X; run evaluate first")
    out_dir = cfg.work_dir() / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    present = [tag for tag in INSTANCE_TAGS if reports[tag] is not None]
    base = reports["X"]
    with open(out_dir / "precision_accuracy.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["label"] + [f"precision_{tag}" for tag in present])
        for label in base.labels:
            writer.writerow(
                [label] + [_fmt(reports[tag].per_class_precision[label]) for tag in present]
            )
        writer.writerow(["total_accuracy"] + [_fmt(reports[tag].total_accuracy) for tag in present])

    with open(out_dir / "tp_change.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["label"] + [f"tp_change_{tag}_vs_X" for tag in present if tag != "X"])
        changes = {
            tag: recognition.tp_change(base, reports[tag]) for tag in present if tag != "X"
        }
        for label in base.labels:
            writer.writerow([label] + [_fmt(changes[tag][label]) for tag in changes])

    if reports["X_plus_XC"] is not None and reports["X_plus_XS"] is not None:
        triple = recognition.fp_change(base, reports["X_plus_XC"], reports["X_plus_XS"])
        with open(out_dir / "fp_change.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["label", "fp_change_XC_vs_X", "fp_change_XS_vs_X", "fp_change_XS_vs_XC"]
            )
            for label in base.labels:
                writer.writerow([label] + [_fmt(v) for v in triple[label]])

    _write_generative_metrics(cfg, out_dir)

    if cfg.report.reference:
        with open(out_dir / "reference_values.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["kind", "metric", "value"])
            for row in REFERENCE_ROWS:
                writer.writerow(row)
        click.echo("full-scale reference values (not reproduced locally):")
        for _, metric, value in REFERENCE_ROWS:
            click.echo(f"  [reference] {metric}: {value}")

    if cfg.report.charts:
        _write_charts(cfg, reports, present, out_dir)
    click.echo(f"report bundle written to {out_dir}")


def _write_generative_metrics(cfg: ExperimentConfig, out_dir: Path) -> None:
    rows = []
    gan_dir = cfg.work_dir() / "gan"
    syn_manifest = _manifest_path(cfg, "X_plus_XS")
    if (gan_dir / "latest.pt").is_file() and syn_manifest.is_file():
        state = training.load_state(gan_dir / "latest.pt")
        instance = load_manifest(syn_manifest)
        synthetic = [r for r in instance.records if r.origin == "synthetic"]
        real_b = instance.subset(split="train", domain="B")
        real_b = [r for r in real_b if r.origin == "real"]
        if len(synthetic) >= 2 and len(real_b) >= 2:
            feats_syn = metrics_mod.extract_features(
                state.feat, -1, load_batch(synthetic, cfg.gan.image_size), source="synthetic"
            )
            feats_real = metrics_mod.extract_features(
                state.feat, -1, load_batch(real_b, cfg.gan.image_size), source="real_B"
            )
            rows.append(
                ("fid_synthetic_vs_real_B", metrics_mod.fid(feats_syn, feats_real),
                 len(synthetic), "local feature-extractor embedding")
            )
            if cfg.report.nima_cmd:
                mean, std = metrics_mod.nima_score(
                    cfg.report.nima_cmd, [r.path for r in synthetic]
                )
                rows.append(("nima_synthetic", f"{mean:.3f} +/- {std:.3f}", len(synthetic),
                             "external scorer, population std"))
    with open(out_dir / "generative_metrics.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value", "n", "notes"])
        for metric, value, n, notes in rows:
            writer.writerow([metric, value, n, notes])


def _write_charts(cfg, reports, present, out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    base = reports["X"]
    x = np.arange(len(base.labels))
    width = 0.8 / max(1, len(present))
    fig, ax = plt.subplots(figsize=(8, 4))
    for i, tag in enumerate(present):
        vals = [reports[tag].per_class_precision[l] for l in base.labels]
        ax.bar(x + i * width, vals, width, label=tag)
    ax.set_xticks(x + width)
    ax.set_xticklabels(base.labels, rotation=30, ha="right")
    ax.set_ylabel("precision")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "precision_by_class.png", dpi=120)
    plt.close(fig)


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False, obj=None)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return 2
    except click.Abort:
        return 1
    except (ConfigError, ValueError) as e:
        click.echo(f"validation error: {e}", err=True)
        return 2
    except FileNotFoundError as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except PipelineError as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except Exception as e:  # pragma: no cover
        click.echo(f"error: {e}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
