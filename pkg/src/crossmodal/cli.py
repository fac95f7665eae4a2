"""Command-line interface.

Commands: build-vocab, synth, pretrain, finetune, eval, ablate, sweep.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every run directory receives the merged effective config and is protected by
a lock file; replaying the config reproduces the run in deterministic mode.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, replace

import click
import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import evaluation as E
from . import training as T
from .losses import AblationSetting

RUN_ROOT_ENV = "CROSSMODAL_RUN_ROOT"


def _run_dir(path: str | None, name: str, force: bool) -> str:
    root = os.environ.get(RUN_ROOT_ENV, "runs")
    out = path or os.path.join(root, name)
    os.makedirs(out, exist_ok=True)
    lock = os.path.join(out, ".lock")
    if os.path.exists(lock) and not force:
        raise click.UsageError(
            f"run directory {out} is locked (another run?); use --force to override")
    open(lock, "w").close()
    return out


def _common(f):
    f = click.option("--seed", default=0, show_default=True)(f)
    f = click.option("--precision", type=click.Choice(["32", "64"]), default="32",
                     show_default=True)(f)
    f = click.option("--preset", type=click.Choice(["paper", "desk"]),
                     default="desk", show_default=True)(f)
    return f


@click.group()
def cli():
    """Joint image-text representation learning toolkit."""


@cli.command("build-vocab")
@click.argument("corpus_path", type=click.Path(exists=True))
@click.argument("out_path", type=click.Path())
@click.option("--min-count", default=3, show_default=True)
def cmd_build_vocab(corpus_path, out_path, min_count):
    """Build a word-level vocabulary from a manifest or plain-text corpus."""
    if corpus_path.endswith(".jsonl"):
        texts = [s.report_text for s in D.read_manifest(corpus_path)]
    else:
        with open(corpus_path, encoding="utf-8") as f:
            texts = [line for line in f if line.strip()]
    vocab = D.Vocabulary.build(texts, min_count)
    vocab.save(out_path)
    click.echo(f"vocabulary size: {len(vocab)} ({len(vocab) - 3} words + 3 reserved)")


@cli.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--num", default=200, show_default=True)
@click.option("--latent-dim", default=8, show_default=True)
@click.option("--image-size", default=128, show_default=True)
@click.option("--noise", default=0.05, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--split", default="train", show_default=True)
def cmd_synth(out_dir, num, latent_dim, image_size, noise, seed, split):
    """Generate a synthetic paired image/report corpus."""
    spec = D.SyntheticSpec(num_samples=num, latent_dim=latent_dim,
                           image_size=image_size, noise_level=noise,
                           seed=seed, split=split)
    samples = D.generate_synthetic(spec, out_dir)
    click.echo(f"wrote {len(samples)} samples to {out_dir}")


def _apply_overrides(cfg, overrides):
    for item in overrides:
        if "=" not in item:
            raise click.UsageError(f"override must be key=value, got {item!r}")
        key, val = item.split("=", 1)
        if not hasattr(cfg, key):
            raise click.UsageError(f"unknown config field {key!r}")
        cur = getattr(cfg, key)
        if isinstance(cur, bool):
            val = val.lower() in ("1", "true", "yes")
        elif isinstance(cur, int):
            val = int(val)
        elif isinstance(cur, float):
            val = float(val)
        cfg = replace(cfg, **{key: val})
    return cfg


@cli.command("pretrain")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--ablation", "setting", default="CETM_wps", show_default=True,
              type=click.Choice(AblationSetting.names()))
@click.option("--resume", "resume_path", default=None, type=click.Path(exists=True))
@click.option("--force", is_flag=True)
@click.option("--set", "overrides", multiple=True,
              help="config override key=value (repeatable)")
@_common
def cmd_pretrain(data_dir, out_dir, config_path, setting, resume_path, force,
                 overrides, seed, precision, preset):
    """Pretrain the joint matching model."""
    out = _run_dir(out_dir, f"pretrain-{setting}-s{seed}", force or bool(resume_path))
    if config_path:
        with open(config_path) as f:
            base = json.load(f)
        base.update(data_dir=data_dir, out_dir=out)
        loss = T.LossConfig(**base.pop("loss", {}))
        cfg = T.TrainConfig(loss=loss, **base)
    elif preset == "desk":
        cfg = T.desk_train_config(data_dir, out, seed=seed)
    else:
        cfg = T.TrainConfig(data_dir=data_dir, out_dir=out, seed=seed)
    cfg = replace(cfg, setting=setting, seed=seed, precision=int(precision))
    cfg = _apply_overrides(cfg, overrides)
    result = T.pretrain(cfg, resume_from=resume_path)
    if result.aborted:
        raise T.NumericError("pretraining aborted on non-finite loss; "
                             f"last good checkpoint: {result.last_checkpoint}")
    click.echo(f"run complete: {result.run_dir}")
    click.echo(f"best checkpoint: {result.best_checkpoint}")


@cli.command("finetune")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--init", "init_ckpt", default=None, type=click.Path(exists=True),
              help="pretraining checkpoint to fine-tune from")
@click.option("--from-scratch", is_flag=True)
@click.option("--mode", type=click.Choice(["image", "text", "joint"]),
              default="image", show_default=True)
@click.option("--epochs", default=None, type=int)
@click.option("--num-labels", default=8, show_default=True)
@click.option("--force", is_flag=True)
@click.option("--set", "overrides", multiple=True,
              help="config override key=value (repeatable)")
@_common
def cmd_finetune(data_dir, out_dir, init_ckpt, from_scratch, mode, epochs,
                 num_labels, force, overrides, seed, precision, preset):
    """Train the multi-label classification head."""
    if not init_ckpt and not from_scratch:
        raise click.UsageError("give either --init CKPT or --from-scratch")
    tag = "ft" if init_ckpt else "fs"
    out = _run_dir(out_dir, f"finetune-{tag}-{mode}-s{seed}", force)
    feature_dim = 64 if preset == "desk" else 256
    max_len = 64 if preset == "desk" else 160
    if init_ckpt:
        cfg = T.FinetuneConfig(init_from=init_ckpt, head_lr=1e-4, backbone_lr=1e-5,
                               epochs=10 if epochs is None else epochs)
    else:
        cfg = T.FinetuneConfig(init_from="scratch", head_lr=1e-4, backbone_lr=1e-4,
                               epochs=20 if epochs is None else epochs)
    cfg = replace(cfg, data_dir=data_dir, out_dir=out, mode=mode, seed=seed,
                  precision=int(precision), preset=preset,
                  feature_dim=feature_dim, max_len=max_len, num_labels=num_labels)
    cfg = _apply_overrides(cfg, overrides)
    result = T.finetune_classifier(cfg)
    click.echo(f"final macro AUC: {result.final_macro_auc:.4f}")
    click.echo(f"checkpoint: {result.checkpoint}")


@cli.command("eval")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True)
@click.option("--subset", "subset_sizes", multiple=True, type=int)
@click.option("--k", "ks", default="1,5,10", show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--set", "overrides", multiple=True,
              help="config override key=value (must match the checkpoint)")
@_common
def cmd_eval(ckpt_path, data_dir, split, subset_sizes, ks, out_path, overrides,
             seed, precision, preset):
    """Cross-modal retrieval evaluation of a pretraining checkpoint."""
    ks = tuple(int(x) for x in ks.split(","))
    if preset == "desk":
        cfg = T.desk_train_config(data_dir, out_dir="", seed=seed)
    else:
        cfg = T.TrainConfig(data_dir=data_dir, seed=seed)
    cfg = replace(cfg, precision=int(precision))
    cfg = _apply_overrides(cfg, overrides)
    corpus = T.Corpus.load(data_dir, cfg.max_len, cfg.min_count, cfg.precision)
    model = T.build_model(cfg, len(corpus.vocab))
    tensors, meta = ckpt.load_checkpoint(ckpt_path)
    T._tensors_to_state(tensors, model)
    if split not in corpus.splits:
        raise D.DataError(f"split {split!r} not present in {data_dir}")
    sp = corpus.splits[split]
    v, s = T.encode_split(model, sp)
    sizes = list(subset_sizes) or [len(sp)]
    reports = E.retrieval_eval(v.numpy(), s.numpy(), sizes, seed=seed, ks=ks)
    rows = []
    for rep in reports:
        row = {"direction": rep.direction, "subset": rep.subset_size}
        row.update({f"R@{k}": r for k, r in rep.recalls.items()})
        rows.append(row)
    table = E.format_table(rows)
    click.echo(table, nl=False)
    if out_path:
        with open(out_path, "w") as f:
            json.dump([asdict(r) for r in reports], f, indent=2)


@cli.command("ablate")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--settings", default="TM_s,CEM_s,CETM_wps", show_default=True)
@click.option("--seeds", default="0", show_default=True)
@click.option("--force", is_flag=True)
@_common
def cmd_ablate(data_dir, out_dir, settings, seeds, force, seed, precision, preset):
    """Train several loss settings under a shared budget and tabulate R@K."""
    names = [s.strip() for s in settings.split(",")]
    for n in names:
        if n not in AblationSetting.names():
            raise click.UsageError(f"unknown setting {n!r}")
    out = _run_dir(out_dir, "ablation", force)
    if preset == "desk":
        base = T.desk_train_config(data_dir, out)
    else:
        base = T.TrainConfig(data_dir=data_dir, out_dir=out)
    base = replace(base, precision=int(precision))
    rows = E.ablation_run(names, base, seeds=[int(s) for s in seeds.split(",")],
                          out_path=os.path.join(out, "ablation.jsonl"))
    click.echo(E.format_table(rows), nl=False)


@cli.command("sweep")
@click.argument("grid_file", type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--force", is_flag=True)
@_common
def cmd_sweep(grid_file, data_dir, out_dir, force, seed, precision, preset):
    """Hyperparameter sweep from a JSON grid file.

    Grid file: {"base": {train-config overrides}, "grid": [{loss-config
    fields}, ...]}. Selects the winner by R@1 sum, first row wins ties."""
    with open(grid_file) as f:
        grid = json.load(f)
    out = _run_dir(out_dir, "sweep", force)
    base_over = grid.get("base", {})
    cells = grid.get("grid", [])
    if not cells:
        raise click.UsageError("grid file has no 'grid' entries")
    rows = []
    for i, cell in enumerate(cells):
        if preset == "desk":
            cfg = T.desk_train_config(data_dir, os.path.join(out, f"cell-{i}"),
                                      seed=seed)
        else:
            cfg = T.TrainConfig(data_dir=data_dir,
                                out_dir=os.path.join(out, f"cell-{i}"), seed=seed)
        cfg = replace(cfg, precision=int(precision), **base_over)
        cfg = replace(cfg, loss=T.LossConfig(**{**asdict(cfg.loss), **cell}))
        corpus = T.Corpus.load(cfg.data_dir, cfg.max_len, cfg.min_count,
                               cfg.precision)
        result = T.pretrain(cfg, corpus=corpus)
        model = T.build_model(cfg, len(corpus.vocab))
        tensors, _ = ckpt.load_checkpoint(result.best_checkpoint)
        T._tensors_to_state(tensors, model)
        test = corpus.splits.get("test") or corpus.splits["train"]
        v, s = T.encode_split(model, test)
        reports = E.retrieval_eval(v.numpy(), s.numpy(), [len(test)], seed=seed)
        row = {"cell": i, **cell}
        r1 = 0.0
        for rep in reports:
            row[f"{rep.direction}@1"] = rep.recalls[1]
            r1 += rep.recalls[1]
        row["r1_sum"] = r1
        rows.append(row)
    best = int(np.argmax([r["r1_sum"] for r in rows]))
    with open(os.path.join(out, "sweep.jsonl"), "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    click.echo(E.format_table(rows), nl=False)
    click.echo(f"best cell: {best} ({cells[best]})")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except (click.UsageError, click.BadParameter) as e:
        click.echo(f"usage error: {e.format_message()}", err=True)
        return 1
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        return 1
    except D.DataError as e:
        click.echo(f"data error: {e}", err=True)
        return 2
    except ckpt.CheckpointError as e:
        click.echo(f"data error: {e}", err=True)
        return 2
    except T.NumericError as e:
        click.echo(f"numeric failure: {e}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
