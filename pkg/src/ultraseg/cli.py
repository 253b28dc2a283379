"""Command-line interface.

Every verb reads one declarative config file (``-c/--config``) plus any number
of ``--section.key=value`` flag overrides mirroring the config keys.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

import click

from . import config as config_mod
from . import data as data_mod
from .errors import UltrasegError
from .finetune import FinetuneConfig, dice, finetune as run_finetune, read_results
from .models import (
    Arch,
    Method,
    TrainMeta,
    TransferScope,
    checkpoint_from_network,
    load_checkpoint,
    restore_segmentation_network,
    save_checkpoint,
    stack_images,
)
from .pretrain import PretrainConfig, run_pretraining
from .report import (
    aggregate,
    dataset_mean_table,
    export_mask_panels,
    mean_table_csv,
    render_mean_table,
    render_results_table,
    results_table_csv,
)
from .smoke import SmokeSettings, run_smoke
from .synthetic import make_synthetic_corpus

_EXTRA = dict(ignore_unknown_options=True, allow_extra_args=True)


def _overrides(ctx: click.Context) -> list[str]:
    overrides = []
    for arg in ctx.args:
        if not (arg.startswith("--") and "=" in arg and "." in arg.split("=", 1)[0]):
            raise click.UsageError(f"unexpected argument {arg!r}; expected --section.key=value")
        overrides.append(arg[2:])
    return overrides


def _load(ctx: click.Context, config_path: str | None) -> dict:
    try:
        return config_mod.load_config(config_path, _overrides(ctx))
    except UltrasegError as err:
        raise click.UsageError(str(err)) from err


def _fail(err: Exception) -> None:
    click.echo(f"error: {err}", err=True)
    sys.exit(1)


def _build_samples_and_split(cfg: dict):
    """Resolve the labelled corpus and its split from the data section."""
    data = cfg["data"]
    counts = (data["train_count"], data["val_count"], data["test_count"])
    if data["corpus"] == "synthetic":
        samples = make_synthetic_corpus(
            n=data["synthetic_count"], size=data["image_size"], seed=data["split_seed"]
        )
    else:
        if data["root"] is None:
            raise UltrasegError("data.root is required for non-synthetic corpora")
        samples = data_mod.load_manifest(Path(data["root"]) / "bus", data_mod.Source.BUS)
    if data["split_file"] and Path(data["split_file"]).is_file():
        split = data_mod.read_split(data["split_file"])
    else:
        split = data_mod.make_bus_split(
            samples, seed=data["split_seed"], counts=counts, name=data["split_name"]
        )
    return samples, split


def _build_pretrain_corpus(cfg: dict, samples, split):
    data = cfg["data"]
    size = data["image_size"]
    kind = data["corpus"]
    if kind in ("synthetic", "bus"):
        return data_mod.bus_only_corpus(split, image_size=size, name=kind), {s.id: s for s in samples}
    root = Path(data["root"])
    if kind == "multi_organ":
        camus = data_mod.load_manifest(root / "camus", data_mod.Source.CAMUS)
        lus = data_mod.load_manifest(root / "lus", data_mod.Source.LUS)
        corpus = data_mod.make_multiorgan_corpus(
            split,
            camus,
            lus,
            seed=data["split_seed"],
            camus_counts=(data["camus_train"], data["camus_val"]),
            lus_counts=(data["lus_train"], data["lus_val"]),
            image_size=size,
        )
        pool = {s.id: s for s in [*samples, *camus, *lus]}
        return corpus, pool
    natural_source = data_mod.Source(data["natural_source"])
    natural = data_mod.load_manifest(root / natural_source.value, natural_source)
    natural_split = (data["natural_train"], data["natural_val"])
    if kind == "bus_plus_natural":
        corpus = data_mod.mix_with_natural(
            split, natural, natural_split, image_size=size, name=f"bus+{natural_source.value}"
        )
        pool = {s.id: s for s in [*samples, *natural]}
        return corpus, pool
    if kind == "natural":
        ids = [s.id for s in natural]
        corpus = data_mod.PretrainCorpus(
            name=natural_source.value,
            train_ids=tuple(ids[: natural_split[0]]),
            val_ids=tuple(ids[natural_split[0] : natural_split[0] + natural_split[1]]),
            image_size=size,
        )
        return corpus, {s.id: s for s in natural}
    raise UltrasegError(f"unknown data.corpus {kind!r}")


@click.group()
def main():
    """Contrastive pre-training and label-efficient fine-tuning for
    ultrasound lesion segmentation."""


@main.command(context_settings=_EXTRA)
@click.option("-c", "--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("-o", "--out", "out_path", type=click.Path(), default=None, help="Split file to write.")
@click.pass_context
def split(ctx, config_path, out_path):
    """Build the seeded train/val/test split and write it for audit."""
    cfg = _load(ctx, config_path)
    try:
        _, spec = _build_samples_and_split(cfg)
        destination = Path(out_path or cfg["data"]["split_file"] or "split.txt")
        data_mod.write_split(spec, destination)
        click.echo(
            f"split {spec.name!r} (seed {spec.seed}): train={len(spec.train_ids)} "
            f"val={len(spec.val_ids)} test={len(spec.test_ids)} -> {destination}"
        )
    except UltrasegError as err:
        _fail(err)


@main.command(context_settings=_EXTRA)
@click.option("-c", "--config", "config_path", type=click.Path(exists=True), default=None)
@click.pass_context
def pretrain(ctx, config_path):
    """Run the self-supervised stage and save the best checkpoint."""
    cfg = _load(ctx, config_path)
    try:
        samples, split_spec = _build_samples_and_split(cfg)
        corpus, pool = _build_pretrain_corpus(cfg, samples, split_spec)
        section, model = cfg["pretrain"], cfg["model"]
        run_config = PretrainConfig(
            method=Method(section["method"]),
            corpus_name=corpus.name,
            arch=Arch(model["arch"]),
            image_size=cfg["data"]["image_size"],
            batch_size=section["batch_size"],
            epochs=section["epochs"],
            lr=section["lr"],
            weight_decay=section["weight_decay"],
            tau=section["tau"],
            momentum=section["momentum"],
            queue_size=section["queue_size"],
            seed=section["seed"],
            base_width=model["base_width"],
            depth=model["depth"],
            embedding_dim=model["embedding_dim"],
            pretrain_decoder=model["pretrain_decoder"],
        )
        out_dir = Path(section["out_dir"]) / f"{run_config.method.value}_{corpus.name}_s{run_config.seed}"
        checkpoint, trace = run_pretraining(run_config, corpus, pool, out_dir=out_dir)
        data_mod.write_split(split_spec, out_dir / "split.txt")
        final = trace.records[-1].val_loss if trace.records else float("nan")
        click.echo(f"pre-trained {run_config.method.value} on {corpus.name}: "
                   f"{len(trace.records)} epochs, best val loss {min(trace.best_val_curve(), default=final)}")
        click.echo(f"checkpoint: {out_dir / 'best.ckpt'}")
    except UltrasegError as err:
        _fail(err)


@main.command(context_settings=_EXTRA)
@click.option("-c", "--config", "config_path", type=click.Path(exists=True), default=None)
@click.pass_context
def finetune(ctx, config_path):
    """Fine-tune on the labelled fraction, repeating over seeds."""
    cfg = _load(ctx, config_path)
    try:
        samples, split_spec = _build_samples_and_split(cfg)
        pool = {s.id: s for s in samples}
        section, model = cfg["finetune"], cfg["model"]
        init = load_checkpoint(section["checkpoint"]) if section["checkpoint"] else None
        run_config = FinetuneConfig(
            init=init,
            scope=TransferScope(section["scope"]),
            fraction=section["fraction"],
            lr=section["lr"],
            weight_decay=section["weight_decay"],
            epochs=section["epochs"],
            batch_size=section["batch_size"],
            image_size=cfg["data"]["image_size"] if init is None else None,
            seed=section["seed"],
            patience=section["patience"],
            arch=Arch(model["arch"]),
            base_width=model["base_width"],
            depth=model["depth"],
            corpus_name=cfg["data"]["corpus"] if init is None else None,
        )
        out_dir = Path(section["out_dir"])
        results = []
        for seed in range(section["seed"], section["seed"] + section["repeats"]):
            seeded = dataclasses.replace(run_config, seed=seed)
            model, result = run_finetune(seeded, split_spec, pool, results_log=section["results_log"])
            results.append(result)
            saved = checkpoint_from_network(
                model,
                init.method if init is not None else Method.NONE,
                result.corpus,
                TrainMeta(epochs=len(result.val_curve), final_loss=None, seed=seed),
            )
            save_checkpoint(saved, out_dir / f"{result.method}_{result.corpus}_f{result.fraction}_s{seed}.ckpt")
        dices = [r.test_dice for r in results]
        click.echo(
            f"{results[0].method} on {results[0].corpus} fraction {results[0].fraction}: "
            f"mean test dice {sum(dices) / len(dices):.3f} over {len(dices)} seeds"
        )
        click.echo(f"results appended to {section['results_log']}; models in {out_dir}")
    except UltrasegError as err:
        _fail(err)


@main.command(context_settings=_EXTRA)
@click.option("-c", "--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True), required=True)
@click.pass_context
def evaluate(ctx, config_path, checkpoint_path):
    """Score a fine-tuned segmentation checkpoint on the held-out test set."""
    cfg = _load(ctx, config_path)
    try:
        samples, split_spec = _build_samples_and_split(cfg)
        pool = {s.id: s for s in samples}
        checkpoint = load_checkpoint(checkpoint_path)
        network = restore_segmentation_network(checkpoint)
        size = checkpoint.spec.input_size
        test = [data_mod.resize(pool[i], size) for i in split_spec.test_ids]
        batch = stack_images([s.pixels for s in test])
        predictions = network.predict_mask(batch).numpy()
        scores = [dice(p, s.mask) for p, s in zip(predictions, test)]
        click.echo(f"test dice over {len(scores)} images: {sum(scores) / len(scores):.4f}")
    except UltrasegError as err:
        _fail(err)


@main.command(context_settings=_EXTRA)
@click.option("-c", "--config", "config_path", type=click.Path(exists=True), default=None)
@click.pass_context
def report(ctx, config_path):
    """Aggregate the results log into mean/std and per-corpus mean tables."""
    cfg = _load(ctx, config_path)
    try:
        section = cfg["report"]
        results = read_results(section["results_log"])
        table = aggregate(results)
        out = Path(section["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "results_table.txt").write_text(render_results_table(table), encoding="utf-8")
        (out / "results_table.csv").write_text(results_table_csv(table), encoding="utf-8")
        click.echo(render_results_table(table), nl=False)
        try:
            means = dataset_mean_table(table)
            (out / "mean_table.txt").write_text(render_mean_table(means), encoding="utf-8")
            (out / "mean_table.csv").write_text(mean_table_csv(means), encoding="utf-8")
            click.echo(render_mean_table(means), nl=False)
        except UltrasegError as err:
            click.echo(f"mean table skipped: {err}")
        click.echo(f"tables written to {out}")
    except (UltrasegError, FileNotFoundError) as err:
        _fail(err)


@main.command("export-masks", context_settings=_EXTRA)
@click.option("-c", "--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True), required=True)
@click.option("--ids", default=None, help="Comma-separated sample ids (default: masked test ids).")
@click.option("-o", "--out", "out_path", type=click.Path(), default="masks")
@click.option("--limit", default=8, show_default=True)
@click.pass_context
def export_masks(ctx, config_path, checkpoint_path, ids, out_path, limit):
    """Write (input | ground truth | prediction) panels for chosen samples."""
    cfg = _load(ctx, config_path)
    try:
        samples, split_spec = _build_samples_and_split(cfg)
        pool = {s.id: s for s in samples}
        checkpoint = load_checkpoint(checkpoint_path)
        network = restore_segmentation_network(checkpoint)
        if ids:
            chosen = [pool[i] for i in ids.split(",")]
        else:
            masked = [pool[i] for i in split_spec.test_ids if pool[i].mask is not None]
            chosen = masked[:limit]
        written = export_mask_panels(network, chosen, out_path)
        click.echo(f"wrote {len(written)} panel files to {out_path}")
    except (UltrasegError, KeyError) as err:
        _fail(err)


@main.command(context_settings=_EXTRA)
@click.option("-c", "--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("-o", "--out", "out_path", type=click.Path(), default="runs/smoke")
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def smoke(ctx, config_path, out_path, seed):
    """Run the full synthetic desk-scale pipeline and its health checks."""
    _load(ctx, config_path)  # reject unknown overrides even though smoke is self-configured
    try:
        report_obj = run_smoke(out_path, SmokeSettings(seed=seed))
        for line in report_obj.check_lines():
            click.echo(line)
        click.echo(f"smoke finished in {report_obj.seconds:.1f}s")
        if not report_obj.passed:
            sys.exit(1)
    except UltrasegError as err:
        _fail(err)


if __name__ == "__main__":
    main()
