"""
Training Module for CLIPin Desk
AdamW with linear warmup, the per-step forward through online and target
branches, loss combination, EMA target update, ablation presets,
checkpointing, metrics logging and the finite-difference gradient check.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd
import torch
import torch.nn as nn

from config.config import (ABLATION_PRESETS, AblationFlags, DimsConfig, ProbeConfig, TrainConfig,
                           config_snapshot)
from core.data import BatchStream, PairBatch, PairDataset, TokenCodebook, generate_corpus, prefetch
from core.errors import CLIPinError, NonFiniteLoss, TrainingStepError
from core.evaluation import evaluate_model
from core.losses import LossBreakdown, LossTerms, breakdown, info_nce_loss, inter_modal_loss, intra_modal_loss, total_loss
from core.model import (ModelState, encode_image_target, encode_text_target, ema_update, init_model,
                        predict_inter, predict_intra, project_contrastive)
from core.numerics import DTYPE, Rng, Tensor, backward, finite_diff_param_grad, relative_error
from utils.checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from utils.reporting import read_tsv, write_tsv

logger = logging.getLogger(__name__)

LOG_FILE = "train_log.tsv"
LOG_COLUMNS = ["step", "l_cl_i2t", "l_cl_t2i", "l_inter_i2t", "l_inter_t2i", "l_intra_i", "l_intra_t",
               "lambda_inter", "lambda_intra", "total", "lr"]
ABLATION_FILE = "ablation.tsv"
OOD_STREAM = "ood"
GRAD_CHECK_LOSSES = ("cl", "inter", "intra", "total-fixed", "total-learnable")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_iters`` steps, constant afterwards."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if cfg.warmup_iters == 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_iters)


def parameter_groups(module: nn.Module, weight_decay: float) -> List[Dict[str, object]]:
    """Matrices decay; layer-norm gains, biases, temperature and loss-weight scalars do not."""
    decay, no_decay = [], []
    for _, p in module.named_parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def build_optimizer(state: ModelState, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW over the online parameters only."""
    state.online.tau_logit.requires_grad_(cfg.learnable_tau)
    return torch.optim.AdamW(
        parameter_groups(state.online, cfg.weight_decay),
        lr=lr_at(state.step, cfg),
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        foreach=False,
    )


def adamw_step(optimizer: torch.optim.Optimizer, lr_t: float) -> None:
    """
    One decoupled-weight-decay Adam update at learning rate ``lr_t``.

    theta <- theta - lr_t * m_hat / (sqrt(v_hat) + eps) - lr_t * wd * theta, with
    bias-corrected moments. Parameters without a gradient are left untouched.
    """
    for group in optimizer.param_groups:
        group["lr"] = lr_t
    optimizer.step()


def _tau(state: ModelState, cfg: TrainConfig) -> Union[float, Tensor]:
    return state.online.tau_logit.exp() if cfg.learnable_tau else cfg.tau


def forward_losses(state: ModelState, batch: PairBatch, flags: AblationFlags, tau: Union[float, Tensor],
                   targets: Optional[Sequence[Tensor]] = None) -> LossTerms:
    """
    Per-direction loss terms for one batch.

    Online paths read view 1, target paths view 2. ``targets`` may supply
    precomputed (u_tgt, v_tgt); they are recomputed from view 2 otherwise.
    """
    online = state.online
    need_ncl = flags.uses_target
    img = online.image_features(batch.images_v1, need_ncl)
    txt = online.text_features(batch.tokens_v1, need_ncl)
    u_cl, v_cl = project_contrastive(state, img.cl_pre, txt.cl_pre)
    l_cl_i2t, l_cl_t2i = info_nce_loss(u_cl, v_cl, tau)
    terms = {"l_cl_i2t": l_cl_i2t, "l_cl_t2i": l_cl_t2i}
    if need_ncl:
        if targets is None:
            targets = (encode_image_target(state, batch.images_v2), encode_text_target(state, batch.tokens_v2))
        u_tgt, v_tgt = targets
        if flags.use_inter:
            u = predict_inter(state, img.ncl, "image")
            v = predict_inter(state, txt.ncl, "text")
            terms["l_inter_i2t"], terms["l_inter_t2i"] = inter_modal_loss(u, v, u_tgt, v_tgt)
        if flags.use_intra:
            u_intra = predict_intra(state, img.ncl, "image")
            v_intra = predict_intra(state, txt.ncl, "text")
            terms["l_intra_i"], terms["l_intra_t"] = intra_modal_loss(u_intra, v_intra, u_tgt, v_tgt)
    return LossTerms(**terms)


def train_step(state: ModelState, batch: PairBatch, cfg: TrainConfig, optimizer: torch.optim.Optimizer) -> LossBreakdown:
    """
    One optimization step: forward, backward, AdamW update, EMA target update.

    Args:
        state (ModelState): Updated in place; ``step`` advances by one
        batch (PairBatch): Two augmented views per modality
        cfg (TrainConfig): Hyperparameters and ablation flags
        optimizer (Optimizer): From ``build_optimizer``

    Returns:
        LossBreakdown: Detached per-term losses and weights of this step

    Raises:
        NonFiniteLoss: If the combined loss is NaN or infinite (parameters untouched)
    """
    online = state.online
    lr_t = lr_at(state.step, cfg)
    parts = forward_losses(state, batch, cfg.ablation, _tau(state, cfg))
    total = total_loss(parts, cfg.weighting, online.s_inter, online.s_intra, cfg.ablation)
    result = breakdown(parts, total, cfg.weighting, online.s_inter, online.s_intra)
    if not math.isfinite(result.total):
        diagnostics = result.to_row()
        diagnostics.update({"lr": lr_t, "batch_ids": list(batch.ids[:8])})
        raise NonFiniteLoss(state.step, diagnostics)

    optimizer.zero_grad(set_to_none=True)
    backward(total)
    if cfg.grad_clip > 0:
        nn.utils.clip_grad_norm_([p for p in online.parameters() if p.grad is not None], cfg.grad_clip)
    adamw_step(optimizer, lr_t)
    ema_update(state, cfg.ema_beta)
    state.step += 1
    return result


@dataclass
class TrainResult:
    state: ModelState
    trace: List[Dict[str, Optional[float]]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    dataset: Optional[PairDataset] = None

    def totals(self) -> List[float]:
        return [row["total"] for row in self.trace]


def build_corpus(cfg: TrainConfig) -> PairDataset:
    dims = cfg.dims_config()
    return generate_corpus(cfg.latent, cfg.n_samples, Rng(cfg.seed), dims.image_side, dims.max_text_len)


def build_ood_corpus(cfg: TrainConfig) -> Optional[PairDataset]:
    """Held-out corpus from the same generative world with shifted looseness and noise; None when disabled."""
    if cfg.ood_n_samples == 0:
        return None
    dims = cfg.dims_config()
    return generate_corpus(cfg.ood_latent(), cfg.ood_n_samples, Rng(cfg.seed), dims.image_side, dims.max_text_len,
                           sample_stream=OOD_STREAM)


def _checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / "checkpoints" / f"step_{step:06d}.clpn"


def run_training(cfg: TrainConfig, out_dir=None, resume_from=None,
                 dataset: Optional[PairDataset] = None) -> TrainResult:
    """
    Train for ``cfg.total_steps`` steps on the seeded synthetic corpus.

    Args:
        cfg (TrainConfig): Validated configuration
        out_dir (str): Where the loss log and checkpoints go; nothing is written when None
        resume_from (str): Checkpoint to continue from
        dataset (PairDataset): Training pairs; generated from ``cfg.seed`` when None

    Returns:
        TrainResult: Final state, per-step loss rows and written checkpoints

    Raises:
        NonFiniteLoss: If a step diverges
        TrainingStepError: If any other error interrupts a step
    """
    cfg.validate()
    rng = Rng(cfg.seed)
    dims = cfg.dims_config()
    dataset = dataset if dataset is not None else build_corpus(cfg)
    snapshot = config_snapshot(cfg)

    if resume_from is not None:
        checkpoint = load_checkpoint(resume_from)
        state = checkpoint.state
        optimizer = build_optimizer(state, cfg)
        restore_optimizer(optimizer, state, checkpoint.optimizer_state)
        logger.info(f"Resuming from {resume_from} at step {state.step}")
    else:
        state = init_model(dims, rng, cfg.ablation.share_pre_projectors, cfg.tau)
        optimizer = build_optimizer(state, cfg)

    out_dir = Path(out_dir) if out_dir is not None else None
    result = TrainResult(state=state, dataset=dataset)
    if out_dir is not None and resume_from is not None and (out_dir / LOG_FILE).exists():
        previous = read_tsv(out_dir / LOG_FILE)
        previous = previous[previous["step"] < state.step].astype(object)
        result.trace = [{k: (None if pd.isna(v) else v) for k, v in row.items()}
                        for row in previous.to_dict("records")]

    start = state.step
    if start >= cfg.total_steps:
        logger.info(f"Nothing to do: step {start} >= total_steps {cfg.total_steps}")
        return result

    stream = BatchStream(dataset, cfg.batch_size, cfg.augment, rng.child("batches"), dims.vocab_size)
    logger.info(f"Training steps {start}..{cfg.total_steps} (batch {cfg.batch_size}, "
                f"weighting={cfg.weighting}, flags={dataclasses.asdict(cfg.ablation)})")

    def _save() -> None:
        path = _checkpoint_path(out_dir, state.step)
        save_checkpoint(path, state, optimizer, snapshot, cfg.seed)
        result.checkpoints.append(path)
        write_tsv(result.trace, out_dir / LOG_FILE, LOG_COLUMNS)

    try:
        for batch in prefetch(stream, start, cfg.total_steps, cfg.prefetch):
            step = state.step
            try:
                losses = train_step(state, batch, cfg, optimizer)
            except NonFiniteLoss as e:
                logger.error(f"Diverged at step {step}: {e.diagnostics}")
                raise
            except (CLIPinError, RuntimeError, ValueError) as e:
                logger.error(f"Step {step} failed: {e}")
                raise TrainingStepError(step, e) from e
            row = {"step": step, **losses.to_row(), "lr": lr_at(step, cfg)}
            result.trace.append(row)
            if step % 50 == 0:
                logger.info(f"step {step}: total={losses.total:.6f} l_cl={losses.l_cl_i2t + losses.l_cl_t2i:.6f}")
            if out_dir is not None and cfg.checkpoint_every > 0 and state.step % cfg.checkpoint_every == 0:
                _save()
    finally:
        # flush rows logged since the last checkpoint, also when a step raises
        if out_dir is not None and result.trace:
            write_tsv(result.trace, out_dir / LOG_FILE, LOG_COLUMNS)

    if out_dir is not None and (not result.checkpoints or result.checkpoints[-1] != _checkpoint_path(out_dir, state.step)):
        _save()
    logger.info(f"Training finished at step {state.step}")
    return result


def run_ablation_suite(cfg: TrainConfig, out_dir=None, probe_cfg: Optional[ProbeConfig] = None) -> pd.DataFrame:
    """
    Train and evaluate the four ablation presets on one shared corpus.

    Rows in order: CL; CL+inter; CL+inter+intra (both unshared); full model with
    shared pre-projectors. Every other setting comes from ``cfg``. Each row is
    evaluated on the training corpus and, unless ``cfg.ood_n_samples`` is 0, on
    the held-out shifted corpus (columns prefixed ``ood_``).

    Returns:
        DataFrame: One row per preset with its flags echoed and the evaluation metrics
    """
    cfg.validate()
    dataset = build_corpus(cfg)
    ood = build_ood_corpus(cfg)
    codebook = TokenCodebook(cfg.latent.k, cfg.latent.quantile_buckets)
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for name, flags in ABLATION_PRESETS.items():
        row_cfg = dataclasses.replace(cfg, ablation=dataclasses.replace(flags))
        logger.info(f"Ablation row {name!r}")
        result = run_training(row_cfg, None if out_dir is None else out_dir / name, dataset=dataset)
        report = evaluate_model(result.state, dataset, codebook, probe_cfg)
        row = {"row": name, **dataclasses.asdict(flags), **report.summary_row()}
        if ood is not None:
            ood_report = evaluate_model(result.state, ood, codebook, probe_cfg)
            row.update({f"ood_{k}": v for k, v in ood_report.summary_row().items()})
        row["final_total"] = result.trace[-1]["total"] if result.trace else float("nan")
        rows.append(row)
    table = pd.DataFrame(rows)
    if out_dir is not None:
        write_tsv(table, out_dir / ABLATION_FILE)
    return table


def _grad_check_batch(dims: DimsConfig, batch_size: int, rng: Rng) -> PairBatch:
    shape = (batch_size, dims.channels, dims.image_side, dims.image_side)
    token_shape = (batch_size, dims.max_text_len)

    def _tokens(stream: Rng) -> torch.Tensor:
        return torch.from_numpy(stream.integers(2, dims.vocab_size, size=token_shape)).to(torch.long)

    return PairBatch(
        images_v1=torch.from_numpy(rng.child("img1").random(shape)).to(DTYPE),
        images_v2=torch.from_numpy(rng.child("img2").random(shape)).to(DTYPE),
        tokens_v1=_tokens(rng.child("tok1")),
        tokens_v2=_tokens(rng.child("tok2")),
        labels=torch.zeros(batch_size, 1, dtype=torch.bool),
        ids=[f"g{i}" for i in range(batch_size)],
    )


def _grad_check_loss(name: str, state: ModelState, batch: PairBatch, targets) -> Tensor:
    online = state.online
    if name == "cl":
        parts = forward_losses(state, batch, AblationFlags(True, False, False), 0.07)
        return parts.l_cl_i2t + parts.l_cl_t2i
    if name == "inter":
        parts = forward_losses(state, batch, AblationFlags(True, True, False), 0.07, targets)
        return parts.l_inter_i2t + parts.l_inter_t2i
    if name == "intra":
        parts = forward_losses(state, batch, AblationFlags(True, False, True), 0.07, targets)
        return parts.l_intra_i + parts.l_intra_t
    weighting = name.split("-", 1)[1]
    tau = online.tau_logit.exp() if weighting == "learnable" else 0.07
    parts = forward_losses(state, batch, AblationFlags(), tau, targets)
    return total_loss(parts, weighting, online.s_inter, online.s_intra)


def _grad_check_state(dims: DimsConfig, rng: Rng) -> ModelState:
    """Fresh shared model with s_inter and s_intra moved off zero to distinct values."""
    state = init_model(dims, rng, share_pre_projectors=True)
    with torch.no_grad():
        state.online.s_inter.fill_(float(rng.child("s_inter").uniform(-0.5, 0.5)))
        state.online.s_intra.fill_(float(rng.child("s_intra").uniform(-0.5, 0.5)))
    return state


def grad_check(dims: str = "tiny", trials: int = 20, seed: int = 0, batch_size: int = 4,
               coords_per_param: int = 3, h: float = 1e-7) -> pd.DataFrame:
    """
    Compare autograd gradients with central differences for every loss.

    Each trial builds a fresh model and random batch from ``seed``, then probes
    ``coords_per_param`` random coordinates of every online parameter. The small
    default step keeps perturbations from crossing ReLU kinks.

    Returns:
        DataFrame: Columns loss, trials, max_rel_error, mean_rel_error
    """
    dims_cfg = DimsConfig.from_preset(dims)
    errors: Dict[str, List[float]] = {name: [] for name in GRAD_CHECK_LOSSES}
    for trial in range(trials):
        rng = Rng(seed).child("grad-check").child(trial)
        state = _grad_check_state(dims_cfg, rng)
        batch = _grad_check_batch(dims_cfg, batch_size, rng.child("batch"))
        targets = (encode_image_target(state, batch.images_v2), encode_text_target(state, batch.tokens_v2))
        params = state.online_named_parameters()
        for name in GRAD_CHECK_LOSSES:
            state.online.zero_grad(set_to_none=True)
            backward(_grad_check_loss(name, state, batch, targets))
            analytic, numeric = [], []
            for p_name, p in params:
                picks = rng.child("coords").child(p_name).integers(0, p.numel(), size=min(coords_per_param, p.numel()))
                idx, fd = finite_diff_param_grad(lambda: _grad_check_loss(name, state, batch, targets), p, h, picks)
                grad = p.grad.reshape(-1)[idx] if p.grad is not None else torch.zeros(idx.numel(), dtype=DTYPE)
                analytic.append(grad.detach())
                numeric.append(fd)
            errors[name].append(relative_error(torch.cat(analytic), torch.cat(numeric)))
    rows = [{"loss": name, "trials": trials, "max_rel_error": max(vals), "mean_rel_error": sum(vals) / len(vals)}
            for name, vals in errors.items()]
    table = pd.DataFrame(rows)
    logger.info(f"Gradient check ({dims}, {trials} trials): worst error {table['max_rel_error'].max():.3e}")
    return table
