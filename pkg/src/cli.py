"""
CLIPin Desk - Command Line Interface
Corpus generation, training, ablation, evaluation and verification commands.
All artifacts of a command go under its ``--out`` directory with a manifest.
Every command reads ``--config`` and ``--seed``; flags override the file.
"""

import dataclasses
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import click

from config.config import (WEIGHTING_SCHEMES, AblationFlags, AugmentConfig, LatentSpec, ProbeConfig, TrainConfig,
                           config_snapshot, configure_logging, dims_preset_names, get_out_dir, load_config_file,
                           merge_overrides, snapshot_to_config)
from core.data import TokenCodebook, export_corpus, generate_corpus, load_pairs
from core.errors import CLIPinError, GradientMismatch, UsageError
from core.evaluation import (class_prompts, collapse_diagnostics, extract_features, linear_probe,
                             retrieval_recall, zero_shot_classify, zero_shot_metrics)
from core.numerics import Rng
from core.train import (LOG_COLUMNS, OOD_STREAM, build_corpus, build_ood_corpus, grad_check, run_ablation_suite,
                        run_training)
from utils.checkpoint import load_checkpoint, read_checkpoint_table
from utils.reporting import append_jsonl, print_table, write_manifest, write_tsv

logger = logging.getLogger(__name__)

SPLITS = ("train", "ood")

_CHOICES = {"weighting": click.Choice(WEIGHTING_SCHEMES), "dims": click.Choice(dims_preset_names())}
_CLICK_TYPES = {bool: click.BOOL, int: int, float: float, str: str}


def _config_fields():
    skip = {"ablation", "augment", "latent"}
    yield from (f for f in fields(TrainConfig) if f.name not in skip)
    for cls in (AblationFlags, AugmentConfig, LatentSpec):
        yield from fields(cls)


def _add_config_options(func, config_fields):
    for f in reversed(list(config_fields)):
        option_type = _CHOICES.get(f.name, _CLICK_TYPES.get(f.type, str))
        func = click.option(f"--{f.name.replace('_', '-')}", f.name, type=option_type, default=None,
                            help=f"Override {f.name}")(func)
    return config_option(func)


def config_option(func):
    return click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                        help="Plain-text key = value config file")(func)


def seed_option(func):
    return click.option("--seed", type=int, default=None, help="Override the config seed")(func)


def train_options(func):
    """One ``--flag`` per TrainConfig field, nested sections flattened."""
    return _add_config_options(func, _config_fields())


def corpus_options(func):
    """Seed, latent-generator flags and ``--dims`` for the image and caption geometry."""
    wanted = {"dims", "seed", "ood_looseness_rate", "ood_noise_sigma"}
    train_fields = [f for f in fields(TrainConfig) if f.name in wanted]
    return _add_config_options(func, [*train_fields, *fields(LatentSpec)])


def out_option(func):
    return click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                        help="Artifact directory (default: $CLIPIN_OUT_DIR)")(func)


def split_option(func):
    return click.option("--split", type=click.Choice(SPLITS), default="train", show_default=True,
                        help="Training corpus or the held-out shifted corpus")(func)


def build_config(config_path: Optional[str], overrides: Dict[str, Any]) -> TrainConfig:
    base = load_config_file(config_path) if config_path else TrainConfig()
    return merge_overrides(base, overrides)


def _require_positive(**counts: Optional[int]) -> None:
    for name, value in counts.items():
        if value is not None and value < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1, got {value}")


def _resolve_out(out_dir: Optional[str], command: str) -> Path:
    return Path(out_dir) if out_dir else get_out_dir() / command


def _config_from_checkpoint(ckpt_config: Dict[str, Any], config_path: Optional[str],
                            overrides: Dict[str, Any]) -> TrainConfig:
    base = snapshot_to_config(ckpt_config) if ckpt_config else TrainConfig()
    if config_path:
        base = load_config_file(config_path, base)
    return merge_overrides(base, overrides)


def _eval_dataset(cfg: TrainConfig, data_path: Optional[str], split: str):
    dims = cfg.dims_config()
    codebook = TokenCodebook(cfg.latent.k, cfg.latent.quantile_buckets)
    if data_path:
        if split != "train":
            raise UsageError("--data and --split ood are mutually exclusive")
        return load_pairs(data_path, codebook, dims.image_side, dims.max_text_len, cfg.latent.classes), codebook
    if split == "ood":
        dataset = build_ood_corpus(cfg)
        if dataset is None:
            raise UsageError("--split ood needs ood_n_samples > 0")
        return dataset, codebook
    return build_corpus(cfg), codebook


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--log-level", default=None, help="Logging level (default: $CLIPIN_LOG_LEVEL or INFO)")
def cli(log_level: Optional[str]) -> None:
    """CLIPin Desk: contrastive + non-contrastive image-text pretraining at desk scale."""
    configure_logging(log_level)


@cli.command("gen-data")
@click.option("--n", "n_samples", type=int, default=None,
              help="Number of pairs (default: the config's n_samples, or ood_n_samples with --split ood)")
@split_option
@corpus_options
@out_option
def gen_data(n_samples: Optional[int], split: str, config_path: Optional[str], out_dir: Optional[str],
             **overrides) -> None:
    """Generate a synthetic paired corpus and export it as PPM images + TSV records."""
    _require_positive(n=n_samples)
    cfg = build_config(config_path, overrides)
    dims = cfg.dims_config()
    if split == "ood":
        spec, stream, n = cfg.ood_latent(), OOD_STREAM, n_samples or cfg.ood_n_samples
    else:
        spec, stream, n = cfg.latent, None, n_samples or cfg.n_samples
    if n < 1:
        raise UsageError(f"{split} corpus size must be >= 1, got {n}")
    out = _resolve_out(out_dir, "corpus")
    dataset = generate_corpus(spec, n, Rng(cfg.seed), dims.image_side, dims.max_text_len, sample_stream=stream)
    corpus_hash = export_corpus(dataset, out, TokenCodebook(spec.k, spec.quantile_buckets))
    write_manifest(out, "gen-data", {**dataclasses.asdict(spec), "seed": cfg.seed, "n": n, "split": split},
                   {"corpus_hash": corpus_hash})
    click.echo(corpus_hash)


@cli.command()
@train_options
@out_option
@click.option("--resume", "resume_from", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Checkpoint to resume from")
def train(config_path: Optional[str], out_dir: Optional[str], resume_from: Optional[str], **overrides) -> None:
    """Pretrain on the seeded synthetic corpus."""
    cfg = build_config(config_path, overrides)
    out = _resolve_out(out_dir, "train")
    result = run_training(cfg, out, resume_from)
    write_manifest(out, "train", config_snapshot(cfg), {"final_step": result.state.step})
    if result.trace:
        print_table([{k: row[k] for k in LOG_COLUMNS} for row in result.trace[-5:]], title="Last steps")


@cli.command()
@train_options
@out_option
@click.option("--iterations", type=int, default=None, help="Probe gradient-descent iterations")
@click.option("--branch", type=click.Choice(["encoder", "pre", "cl"]), default=None)
def ablate(config_path: Optional[str], out_dir: Optional[str], iterations: Optional[int],
           branch: Optional[str], **overrides) -> None:
    """Train and evaluate the four ablation presets on the training and held-out corpora; writes ablation.tsv."""
    _require_positive(iterations=iterations)
    cfg = build_config(config_path, overrides)
    probe_cfg = ProbeConfig(seed=cfg.seed)
    probe_cfg = dataclasses.replace(probe_cfg, **{k: v for k, v in (("iterations", iterations), ("branch", branch))
                                                  if v is not None})
    out = _resolve_out(out_dir, "ablate")
    table = run_ablation_suite(cfg, out, probe_cfg)
    write_manifest(out, "ablate", config_snapshot(cfg))
    print_table(table, title="Ablation")


def _eval_common(func):
    func = click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)(func)
    func = click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), default=None,
                        help="Pair file to evaluate on (default: regenerate the chosen split)")(func)
    func = split_option(func)
    func = seed_option(func)
    func = config_option(func)
    return out_option(func)


@cli.command("eval-probe")
@_eval_common
@click.option("--branch", type=click.Choice(["encoder", "pre", "cl"]), default="cl", show_default=True)
@click.option("--iterations", type=int, default=ProbeConfig.iterations, show_default=True)
@click.option("--lr", type=float, default=ProbeConfig.lr, show_default=True)
def eval_probe(ckpt_path: str, data_path: Optional[str], split: str, seed: Optional[int],
               config_path: Optional[str], out_dir: Optional[str], branch: str, iterations: int, lr: float) -> None:
    """Linear-probe a checkpoint's frozen features (per-class AUC / AP)."""
    _require_positive(iterations=iterations)
    checkpoint = load_checkpoint(ckpt_path)
    cfg = _config_from_checkpoint(checkpoint.config, config_path, {"seed": seed})
    dataset, _ = _eval_dataset(cfg, data_path, split)
    probe_cfg = ProbeConfig(iterations=iterations, lr=lr, branch=branch, seed=cfg.seed)
    report = linear_probe(extract_features(checkpoint.state, dataset, branch), dataset.labels, probe_cfg)
    out = _resolve_out(out_dir, "eval")
    rows = [{"class": c, "auc": a, "ap": p} for c, a, p in
            zip([c for c in range(dataset.labels.shape[1]) if c not in report.skipped_classes],
                report.per_class_auc, report.per_class_ap)]
    write_tsv(rows, out / "probe.tsv")
    append_jsonl({"command": "eval-probe", "checkpoint": str(ckpt_path), "split": split, **report.to_record()},
                 out / "reports.jsonl")
    write_manifest(out, "eval-probe", config_snapshot(cfg), {"split": split})
    print_table(rows + [{"class": "mean", "auc": report.mean_auc, "ap": report.map}], title=f"Linear probe ({split})")


@cli.command("eval-zsc")
@_eval_common
def eval_zsc(ckpt_path: str, data_path: Optional[str], split: str, seed: Optional[int],
             config_path: Optional[str], out_dir: Optional[str]) -> None:
    """Prompt-based zero-shot classification, retrieval recall and collapse diagnostics."""
    checkpoint = load_checkpoint(ckpt_path)
    cfg = _config_from_checkpoint(checkpoint.config, config_path, {"seed": seed})
    dataset, codebook = _eval_dataset(cfg, data_path, split)
    state = checkpoint.state
    prompts = class_prompts(codebook, cfg.latent.classes, state.dims.max_text_len)
    report = zero_shot_metrics(zero_shot_classify(state, dataset.images, prompts), dataset.labels, dataset.primary)
    image_cl = extract_features(state, dataset, "cl", "image")
    report.retrieval = retrieval_recall(image_cl, extract_features(state, dataset, "cl", "text"))
    report.feature_std_min, report.effective_rank = collapse_diagnostics(image_cl)
    out = _resolve_out(out_dir, "eval")
    row = {"split": split, **{k: v for k, v in report.summary_row().items() if k not in ("mean_auc", "map")}}
    write_tsv([row], out / "zsc.tsv")
    append_jsonl({"command": "eval-zsc", "checkpoint": str(ckpt_path), "split": split, **report.to_record()},
                 out / "reports.jsonl")
    write_manifest(out, "eval-zsc", config_snapshot(cfg), {"split": split})
    print_table([row], title="Zero-shot")


@cli.command("grad-check")
@click.option("--dims", type=click.Choice(dims_preset_names()), default="tiny", show_default=True)
@click.option("--trials", type=int, default=20, show_default=True)
@click.option("--batch-size", type=int, default=4, show_default=True)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@seed_option
@config_option
@out_option
def grad_check_command(dims: str, trials: int, batch_size: int, tolerance: float, seed: Optional[int],
                       config_path: Optional[str], out_dir: Optional[str]) -> None:
    """Compare analytic gradients with central finite differences."""
    _require_positive(trials=trials)
    if batch_size < 2:
        raise UsageError(f"--batch-size must be >= 2, got {batch_size}")
    seed = build_config(config_path, {"seed": seed}).seed
    table = grad_check(dims, trials, seed, batch_size)
    if out_dir:
        write_tsv(table, Path(out_dir) / "grad_check.tsv")
        write_manifest(out_dir, "grad-check", {"dims": dims, "trials": trials, "seed": seed})
    print_table(table, title=f"Gradient check ({dims}, seed {seed})")
    worst = float(table["max_rel_error"].max())
    if worst >= tolerance:
        raise GradientMismatch(f"max relative error {worst:.3e} >= {tolerance:g}")


@cli.command("inspect-ckpt")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@seed_option
@config_option
def inspect_ckpt(path: str, seed: Optional[int], config_path: Optional[str]) -> None:
    """
    Print a checkpoint's tensor table and config echo without building the model.

    With ``--config`` / ``--seed`` the echo is also compared against the
    resolved configuration and every differing key is listed.
    """
    header, entries = read_checkpoint_table(path)
    click.echo(f"version {header['version']}  step {header['step']}  corpus seed {header['corpus_seed']}  "
               f"shared pre-projectors {header['share_pre_projectors']}")
    print_table([{"name": name, "shape": "x".join(map(str, shape)) or "scalar"} for name, shape in entries],
                title="Tensors")
    print_table([{"key": k, "value": v} for k, v in sorted(header["config"].items())], title="Config")
    if config_path is None and seed is None:
        return
    requested = config_snapshot(build_config(config_path, {"seed": seed}))
    stored = header["config"]
    diffs = [{"key": k, "checkpoint": stored.get(k), "requested": v}
             for k, v in sorted(requested.items()) if stored.get(k) != v]
    if diffs:
        print_table(diffs, title="Differences from requested config")
    else:
        click.echo("checkpoint matches the requested config")


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run the CLI and map outcomes to exit codes.

    Returns:
        int: 0 on success, 1 on usage errors, 2 on runtime or validation failures
    """
    try:
        result = cli.main(args=argv, prog_name="clipin", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("Aborted.", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except UsageError as e:
        click.echo(f"Usage error: {e}", err=True)
        return 1
    except (CLIPinError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        click.echo(f"Error: {e}", err=True)
        return 2
    return result if isinstance(result, int) else 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
