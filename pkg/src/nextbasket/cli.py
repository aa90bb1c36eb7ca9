"""Command line entry points: synth, train, eval, ablate.

Every command reads a JSON run config (``--config``), writes its outputs
under ``--out`` together with a ``manifest.json``, and is deterministic for
a fixed config and seed.  ``--seed`` overrides the config's seed.

Run config schema (defaults in parentheses):

\b
  seed        integer (0)
  dataset     exactly one source:
                "synth": {"n_users" (500), "catalog_size" (60),
                          "n_steps" (30), "patterns" (["periodic"]),
                          "period" (7), "obs_rate" (0.6),
                          "granularity" ("day")}
                "path": directory written by `synth` (or save_dataset)
                "interactions"/"attributes"/"schema"/"granularity"/
                  "catalog_size"/"split": raw CSV ingestion
  model       {"dim" (8), "seq_len" (16), "period" (7),
               "time_heads" ([1]), "intra_heads" ([1]), "dropout" (0.0),
               "v_max" (from train data), "use_periodic"/"use_attributes"/
               "use_intra_basket"/"use_intra_attribute"/"use_time_level"
               (all true), "padding_mode" ("time_aware")}
  training    {"lr" (0.001), "batch_size" (32), "max_epochs" (50),
               "patience" (5), "seed" (0), "clip_norm" (5.0),
               "resume_from": checkpoint path (none)}
  evaluation  {"ks" ([5]), "part" ("test"), "mode" ("final"),
               "variants" (["Full","P","B","B-","T","I"]),
               "baseline": "poprec" or null (null)}

Exit codes: 0 success, 1 usage or config error, 2 runtime failure
(divergence, corrupt checkpoint, I/O).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .data import AttributeSchema, ChronoSplit, Dataset, chronological_split, load_csv, save_dataset, load_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DivergenceError,
    ParseError,
    VocabularyError,
)
from .evaluation import evaluate_model, evaluate_poprec
from .model import (
    VARIANT_TAGS,
    ModelConfig,
    NextBasketModel,
    load_checkpoint,
    make_variant,
)
from .synth import SynthConfig, synth_generate
from .training import TrainConfig, train

USAGE_ERRORS = (ConfigError, ContractError, ParseError, VocabularyError)
RUNTIME_ERRORS = (CheckpointError, DivergenceError, OSError)

_SECTION_KEYS = {"seed", "dataset", "model", "training", "evaluation"}
_DATASET_KEYS = {
    "synth",
    "path",
    "interactions",
    "attributes",
    "schema",
    "granularity",
    "catalog_size",
    "split",
}
_MODEL_KEYS = {
    "dim",
    "seq_len",
    "period",
    "time_heads",
    "intra_heads",
    "dropout",
    "v_max",
    "use_periodic",
    "use_attributes",
    "use_intra_basket",
    "use_intra_attribute",
    "use_time_level",
    "padding_mode",
}
_TRAINING_KEYS = {"lr", "batch_size", "max_epochs", "patience", "seed", "clip_norm", "resume_from"}
_EVAL_KEYS = {"ks", "part", "mode", "variants", "baseline"}


def _check_keys(blob: dict, allowed: set, where: str):
    unknown = set(blob) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where} section: {sorted(unknown)}")


def load_run_config(path, seed_override=None) -> dict:
    """Read, validate, and default-fill a run config file."""
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}")
    if not isinstance(blob, dict):
        raise ConfigError("run config must be a JSON object")
    _check_keys(blob, _SECTION_KEYS, "top-level")
    cfg = {
        "seed": blob.get("seed", 0),
        "dataset": dict(blob.get("dataset", {})),
        "model": dict(blob.get("model", {})),
        "training": dict(blob.get("training", {})),
        "evaluation": dict(blob.get("evaluation", {})),
    }
    _check_keys(cfg["dataset"], _DATASET_KEYS, "dataset")
    _check_keys(cfg["model"], _MODEL_KEYS, "model")
    _check_keys(cfg["training"], _TRAINING_KEYS, "training")
    _check_keys(cfg["evaluation"], _EVAL_KEYS, "evaluation")
    if seed_override is not None:
        cfg["seed"] = seed_override
    if not isinstance(cfg["seed"], int):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")
    return cfg


def resolve_dataset(cfg: dict):
    """Produce (dataset, split, synth_metadata) from the dataset section."""
    section = cfg["dataset"]
    sources = [k for k in ("synth", "path", "interactions") if k in section]
    if len(sources) != 1:
        raise ConfigError(
            f"dataset section needs exactly one of synth/path/interactions, got {sources}"
        )
    if "synth" in section:
        result = synth_generate(SynthConfig.from_json(section["synth"]), seed=cfg["seed"])
        return result.dataset, result.split, result.metadata
    if "path" in section:
        root = Path(section["path"])
        if not (root / "dataset.json").is_file():
            raise ConfigError(f"dataset path {root} has no dataset.json")
        dataset, split = load_dataset(root)
        if "split" in section:
            split = chronological_split(dataset, ChronoSplit.from_json(section["split"]))
        return dataset, split, None
    for key in ("schema", "granularity", "catalog_size", "split"):
        if key not in section:
            raise ConfigError(f"dataset section missing {key!r} for CSV ingestion")
    for key in ("interactions", "attributes"):
        if section.get(key) is not None and not Path(section[key]).is_file():
            raise ConfigError(f"{key} file {section[key]} does not exist")
    schema = AttributeSchema.from_json(section["schema"])
    users = load_csv(
        section["interactions"],
        schema,
        section["granularity"],
        section["catalog_size"],
        attributes_path=section.get("attributes"),
    )
    dataset = Dataset(users, schema, section["catalog_size"], section["granularity"])
    split = chronological_split(dataset, ChronoSplit.from_json(section["split"]))
    return dataset, split, None


def build_model_config(cfg: dict, dataset, split, variant: str = "Full") -> ModelConfig:
    overrides = dict(cfg["model"])
    for key in ("time_heads", "intra_heads"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    base = ModelConfig.from_dataset(dataset, split, **overrides)
    return make_variant(base, variant)


def build_train_config(cfg: dict) -> tuple[TrainConfig, object]:
    section = dict(cfg["training"])
    resume_from = section.pop("resume_from", None)
    section.setdefault("seed", cfg["seed"])
    return TrainConfig.from_json(section), resume_from


def _prepare_out(out_dir, force: bool) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, blob: dict):
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(out: Path, command: str, cfg: dict, outputs: dict, **extra):
    blob = {"command": command, "seed": cfg["seed"], "config": cfg, "outputs": outputs}
    blob.update(extra)
    _write_json(out / "manifest.json", blob)


# -- commands -------------------------------------------------------------------


@click.group(help=__doc__)
def cli():
    pass


@cli.command(name="synth", help="Generate a synthetic dataset directory from the config.")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
def cmd_synth(config_path, seed, out_dir, force):
    cfg = load_run_config(config_path, seed)
    if "synth" not in cfg["dataset"]:
        raise ConfigError("synth command needs a dataset section with a 'synth' block")
    out = _prepare_out(out_dir, force)
    result = synth_generate(SynthConfig.from_json(cfg["dataset"]["synth"]), seed=cfg["seed"])
    paths = save_dataset(result.dataset, result.split, out)
    _write_json(out / "synth_meta.json", result.metadata)
    outputs = {name: str(p.name) for name, p in paths.items()}
    outputs["metadata"] = "synth_meta.json"
    _manifest(out, "synth", cfg, outputs)
    click.echo(
        f"wrote {len(result.dataset.users)} users over {result.dataset.max_time_index + 1} steps to {out}"
    )


@cli.command(name="train", help="Train a model (optionally an ablation variant) and keep the best checkpoint.")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
@click.option("--variant", default="Full", type=click.Choice(VARIANT_TAGS), show_default=True)
def cmd_train(config_path, seed, out_dir, force, variant):
    cfg = load_run_config(config_path, seed)
    out = _prepare_out(out_dir, force)
    dataset, split, _ = resolve_dataset(cfg)
    train_cfg, resume_from = build_train_config(cfg)

    start_epoch = 0
    if resume_from is not None:
        model, extra = load_checkpoint(resume_from)
        start_epoch = int(extra.get("epochs_run", 0))
        click.echo(f"resuming from {resume_from} at epoch {start_epoch}")
    else:
        model_cfg = build_model_config(cfg, dataset, split, variant)
        model = NextBasketModel(model_cfg, seed=cfg["seed"])

    ckpt = out / "best.ckpt"
    log = out / "run_log.jsonl"
    result = train(
        model, dataset, split, train_cfg,
        checkpoint_path=str(ckpt), log_path=str(log), start_epoch=start_epoch,
        checkpoint_extra={"variant": variant},
    )
    _manifest(
        out,
        "train",
        cfg,
        {"checkpoint": ckpt.name, "run_log": log.name},
        variant=variant,
        best_epoch=result.best_epoch,
        best_metric=result.best_metric,
        epochs_run=result.epochs_run,
        stopped_reason=result.stopped_reason,
    )
    click.echo(
        f"variant {variant}: best val HR@5 {result.best_metric} at epoch "
        f"{result.best_epoch} ({result.stopped_reason})"
    )
    if result.stopped_reason.startswith("diverged"):
        raise DivergenceError(result.stopped_reason)


@cli.command(name="eval", help="Evaluate a checkpoint on the held-out range; writes metrics JSON and per-user CSV.")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
@click.option("--baseline", type=click.Choice(["poprec"]), default=None, help="Also report a baseline row.")
@click.option("--variant", default=None, help="Label for the report; defaults to the checkpoint's tag.")
def cmd_eval(checkpoint, config_path, seed, out_dir, force, baseline, variant):
    cfg = load_run_config(config_path, seed)
    out = _prepare_out(out_dir, force)
    dataset, split, _ = resolve_dataset(cfg)
    model, extra = load_checkpoint(checkpoint)
    if model.config.catalog_size != dataset.catalog_size:
        raise ContractError(
            f"checkpoint catalog size {model.config.catalog_size} does not match "
            f"dataset catalog size {dataset.catalog_size}"
        )
    section = cfg["evaluation"]
    ks = tuple(section.get("ks", [5]))
    part = section.get("part", "test")
    mode = section.get("mode", "final")
    tag = variant or extra.get("variant", "Full")

    report = evaluate_model(model, dataset, split, part=part, ks=ks, mode=mode, variant=tag)
    _write_json(out / "metrics.json", report.to_json())
    with open(out / "per_user.csv", "w") as fh:
        fh.write(report.to_csv())
    outputs = {"metrics": "metrics.json", "per_user": "per_user.csv"}
    rows = [report]

    wants_baseline = baseline or section.get("baseline")
    if wants_baseline:
        pop = evaluate_poprec(dataset, split, part=part, ks=ks, mode=mode)
        _write_json(out / "poprec.json", pop.to_json())
        outputs["poprec"] = "poprec.json"
        rows.append(pop)

    _manifest(out, "eval", cfg, outputs, checkpoint=str(checkpoint))
    names = sorted(report.means)
    click.echo("  ".join(["variant".ljust(8)] + [n.ljust(9) for n in names]))
    for row in rows:
        click.echo("  ".join([row.variant.ljust(8)] + [f"{row.means[n]:.4f}".ljust(9) for n in names]))


@cli.command(name="ablate", help="Train and evaluate every ablation variant with one seed and budget.")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
def cmd_ablate(config_path, seed, out_dir, force):
    cfg = load_run_config(config_path, seed)
    out = _prepare_out(out_dir, force)
    dataset, split, _ = resolve_dataset(cfg)
    train_cfg, resume_from = build_train_config(cfg)
    if resume_from is not None:
        raise ConfigError("resume_from is not supported by the ablate command")
    section = cfg["evaluation"]
    variants = tuple(section.get("variants", VARIANT_TAGS))
    if "Full" not in variants:
        raise ConfigError("ablation needs the Full variant as the reference row")
    ks = tuple(section.get("ks", [5]))
    part = section.get("part", "test")
    mode = section.get("mode", "final")

    table: dict[str, dict] = {}
    failure = None
    for tag in variants:
        try:
            model_cfg = build_model_config(cfg, dataset, split, tag)
            model = NextBasketModel(model_cfg, seed=cfg["seed"])
            result = train(
                model, dataset, split, train_cfg,
                checkpoint_path=str(out / f"{tag}.ckpt"),
                log_path=str(out / f"{tag}.jsonl"),
                checkpoint_extra={"variant": tag},
            )
            report = evaluate_model(model, dataset, split, part=part, ks=ks, mode=mode, variant=tag)
            table[tag] = {
                "seed": cfg["seed"],
                "means": report.means,
                "best_epoch": result.best_epoch,
                "stopped_reason": result.stopped_reason,
            }
        except Exception as err:  # partial results still get saved below
            failure = (tag, err)
            break

    metric_names = sorted(next(iter(table.values()))["means"]) if table else []
    full_means = table.get("Full", {}).get("means")
    for tag, row in table.items():
        if full_means and all(full_means[n] > 0 for n in metric_names):
            rel = [(row["means"][n] - full_means[n]) / full_means[n] for n in metric_names]
            row["delta_vs_full"] = float(np.mean(rel))
        else:
            row["delta_vs_full"] = None

    blob = {"variants": {tag: table[tag] for tag in table}, "metrics": metric_names}
    if failure is not None:
        blob["failed_variant"] = failure[0]
        blob["error"] = str(failure[1])
    _write_json(out / "ablation.json", blob)
    _manifest(out, "ablate", cfg, {"table": "ablation.json"}, completed=sorted(table))

    header = ["variant".ljust(8), "seed".ljust(6)] + [n.ljust(9) for n in metric_names] + ["delta"]
    click.echo("  ".join(header))
    for tag in variants:
        if tag not in table:
            continue
        row = table[tag]
        delta = row["delta_vs_full"]
        cells = [tag.ljust(8), str(row["seed"]).ljust(6)]
        cells += [f"{row['means'][n]:.4f}".ljust(9) for n in metric_names]
        cells.append("n/a" if delta is None else f"{delta:+.2%}")
        click.echo("  ".join(cells))
    if failure is not None:
        tag, err = failure
        click.echo(f"variant {tag} failed: {err}", err=True)
        raise err


def main(argv=None) -> int:
    """Entry point mapping errors onto the documented exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as err:
        return err.exit_code
    except click.UsageError as err:
        click.echo(f"error: {err.format_message()}", err=True)
        return 1
    except USAGE_ERRORS as err:
        click.echo(f"error: {err}", err=True)
        return 1
    except RUNTIME_ERRORS as err:
        click.echo(f"error: {err}", err=True)
        return 2
    except click.Abort:
        return 1
    except Exception as err:  # anything unexpected is a runtime failure
        click.echo(f"error: {err}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
