"""
Evaluation Module for CLIPin Desk
Linear probing and prompt-based zero-shot classification scored with
per-class AUC / AP, plus retrieval recall and collapse diagnostics.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.stats import rankdata

from config.config import ProbeConfig
from core.data import PairDataset, TokenCodebook
from core.errors import DegenerateClass, EmptyPrompts, NoPositives, ShapeMismatch, SingleClass
from core.model import ModelState, project_contrastive
from core.numerics import DTYPE, Rng, Tensor, l2_normalize

logger = logging.getLogger(__name__)

BRANCHES = ("encoder", "pre", "cl")
EVAL_CHUNK = 256


@dataclass
class EvalReport:
    per_class_auc: List[float] = field(default_factory=list)
    mean_auc: float = float("nan")
    per_class_ap: List[float] = field(default_factory=list)
    map: float = float("nan")
    zsc_top1: float = float("nan")
    zsc_mean_auc: float = float("nan")
    zsc_map: float = float("nan")
    feature_std_min: float = float("nan")
    effective_rank: float = float("nan")
    retrieval: Dict[str, float] = field(default_factory=dict)
    skipped_classes: List[int] = field(default_factory=list)

    def to_record(self) -> Dict[str, object]:
        record = asdict(self)
        record.update(record.pop("retrieval"))
        return record

    def summary_row(self) -> Dict[str, float]:
        row = {
            "mean_auc": self.mean_auc,
            "map": self.map,
            "zsc_top1": self.zsc_top1,
            "zsc_mean_auc": self.zsc_mean_auc,
            "zsc_map": self.zsc_map,
            "feature_std_min": self.feature_std_min,
            "effective_rank": self.effective_rank,
        }
        row.update(self.retrieval)
        return row


def _as_numpy(x: Union[Tensor, Sequence[float]]) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def auc(scores, labels) -> float:
    """
    Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly, ties worth one half.

    Raises:
        SingleClass: If labels are all positive or all negative
    """
    s = _as_numpy(scores).astype(np.float64).ravel()
    y = _as_numpy(labels).astype(bool).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s, method="average")
    wins = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(wins / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """
    Mean of precision@rank over positive ranks; descending scores, ties kept in input order.

    Raises:
        NoPositives: If no label is positive
    """
    s = _as_numpy(scores).astype(np.float64).ravel()
    y = _as_numpy(labels).astype(bool).ravel()
    if not y.any():
        raise NoPositives("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits].mean())


@torch.no_grad()
def extract_features(state: ModelState, samples: Union[PairDataset, Tensor], branch: str = "cl",
                     modality: str = "image") -> Tensor:
    """
    Un-augmented online features at a tap point.

    Args:
        state (ModelState): Model (read only)
        samples: PairDataset, or an image / token tensor matching ``modality``
        branch (str): "encoder" (f output), "pre" (shared pre-projector) or "cl" (contrastive embedding)
        modality (str): "image" or "text"

    Returns:
        Tensor: [N, d_enc | d_pre | d_cl]
    """
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    if isinstance(samples, PairDataset):
        inputs = samples.images if modality == "image" else samples.tokens
    else:
        inputs = samples
    online = state.online
    chunks = []
    for start in range(0, inputs.shape[0], EVAL_CHUNK):
        part = inputs[start:start + EVAL_CHUNK]
        feats = online.image_features(part, need_ncl=False) if modality == "image" \
            else online.text_features(part, need_ncl=False)
        if branch == "encoder":
            chunks.append(feats.enc)
        elif branch == "pre":
            chunks.append(feats.pre)
        else:
            g_cl = online.g_cl_I if modality == "image" else online.g_cl_T
            chunks.append(g_cl(feats.cl_pre))
    return torch.cat(chunks).detach()


def probe_split(n: int, cfg: ProbeConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic train/held-out index split."""
    order = Rng(cfg.seed).child("probe-split").permutation(n)
    cut = int(round(cfg.train_fraction * n))
    return np.sort(order[:cut]), np.sort(order[cut:])


def linear_probe(features: Tensor, labels: Tensor, probe_cfg: Optional[ProbeConfig] = None) -> EvalReport:
    """
    One-vs-rest logistic regression per class on frozen features.

    Full-batch gradient descent, no regularization, features standardized with
    train-split statistics. AUC / AP are measured on the held-out split.

    Args:
        features (Tensor): [N, d]
        labels (Tensor): [N, C] bits
        probe_cfg (ProbeConfig): Iterations, learning rate, split fraction, seed

    Returns:
        EvalReport: per-class and mean AUC / AP; degenerate classes listed in ``skipped_classes``
    """
    cfg = probe_cfg or ProbeConfig()
    x = features.detach().to(DTYPE)
    y = labels.detach().to(DTYPE)
    if y.dim() == 1:
        y = y.unsqueeze(1)
    if x.dim() != 2 or x.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"features {tuple(x.shape)} and labels {tuple(y.shape)} do not align")
    train_idx, test_idx = probe_split(x.shape[0], cfg)
    x_train, x_test = x[train_idx], x[test_idx]
    mean = x_train.mean(dim=0)
    std = x_train.std(dim=0, correction=0).clamp_min(1e-12)
    x_train = (x_train - mean) / std
    x_test = (x_test - mean) / std

    report = EvalReport()
    for c in range(y.shape[1]):
        try:
            y_train, y_test = y[train_idx, c], y[test_idx, c]
            if y_train.min() == y_train.max():
                raise DegenerateClass(f"class {c} has a single label value in the train split")
            weight = torch.zeros(x.shape[1], dtype=DTYPE, requires_grad=True)
            bias = torch.zeros((), dtype=DTYPE, requires_grad=True)
            optimizer = torch.optim.SGD([weight, bias], lr=cfg.lr)
            for _ in range(cfg.iterations):
                optimizer.zero_grad()
                loss = torch.nn.functional.binary_cross_entropy_with_logits(x_train @ weight + bias, y_train)
                loss.backward()
                optimizer.step()
            scores = (x_test @ weight + bias).detach()
            report.per_class_auc.append(auc(scores, y_test))
            report.per_class_ap.append(average_precision(scores, y_test))
        except (DegenerateClass, SingleClass, NoPositives) as e:
            logger.warning(f"Skipping probe class {c}: {e}")
            report.skipped_classes.append(c)
    if report.per_class_auc:
        report.mean_auc = float(np.mean(report.per_class_auc))
        report.map = float(np.mean(report.per_class_ap))
    return report


@torch.no_grad()
def zero_shot_classify(state: ModelState, images: Tensor, prompts: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    """
    Cosine similarity between contrastive image embeddings and class-prompt embeddings.

    Args:
        state (ModelState): Model (read only)
        images (Tensor): [N, 3, H, W]
        prompts: [C, l] token tensor, or a list of C token sequences

    Returns:
        Tensor: [N, C] scores

    Raises:
        EmptyPrompts: If no prompt is supplied
    """
    if len(prompts) == 0:
        raise EmptyPrompts("zero-shot classification needs at least one prompt")
    prompt_tokens = prompts if isinstance(prompts, torch.Tensor) else torch.stack(list(prompts))
    image_emb = extract_features(state, images, "cl", "image")
    text_emb = extract_features(state, prompt_tokens, "cl", "text")
    return l2_normalize(image_emb) @ l2_normalize(text_emb).T


def zero_shot_metrics(scores: Tensor, labels: Tensor, primary: Optional[Tensor] = None) -> EvalReport:
    """Per-class AUC / AP of prompt scores against labels, plus top-1 against the primary class."""
    report = EvalReport()
    aucs, aps = [], []
    for c in range(scores.shape[1]):
        try:
            aucs.append(auc(scores[:, c], labels[:, c]))
            aps.append(average_precision(scores[:, c], labels[:, c]))
        except (SingleClass, NoPositives) as e:
            logger.warning(f"Skipping zero-shot class {c}: {e}")
            report.skipped_classes.append(c)
    if aucs:
        report.zsc_mean_auc = float(np.mean(aucs))
        report.zsc_map = float(np.mean(aps))
    if primary is not None and bool((primary >= 0).all()):
        predicted = torch.argmax(scores, dim=1)
        report.zsc_top1 = float((predicted == primary).to(DTYPE).mean())
    return report


def collapse_diagnostics(features: Tensor) -> Tuple[float, float]:
    """
    (min per-dimension std of l2-normalized rows, exp(entropy of normalized singular values)).
    """
    z = l2_normalize(features.detach().to(DTYPE))
    std_min = float(z.std(dim=0, correction=0).min())
    singular = torch.linalg.svdvals(z)
    p = singular / singular.sum()
    p = p[p > 0]
    entropy = float(-(p * torch.log(p)).sum())
    return std_min, math.exp(entropy)


def retrieval_recall(image_emb: Tensor, text_emb: Tensor, ks: Sequence[int] = (1, 5)) -> Dict[str, float]:
    """Image->text and text->image Recall@K for index-aligned pairs (ties count against the pair)."""
    sim = l2_normalize(image_emb.detach()) @ l2_normalize(text_emb.detach()).T
    diag = sim.diagonal()
    i2t_rank = (sim > diag.unsqueeze(1)).sum(dim=1) + (sim == diag.unsqueeze(1)).sum(dim=1) - 1
    t2i_rank = (sim > diag.unsqueeze(0)).sum(dim=0) + (sim == diag.unsqueeze(0)).sum(dim=0) - 1
    out = {}
    for k in ks:
        out[f"i2t_r{k}"] = float((i2t_rank < k).to(DTYPE).mean())
        out[f"t2i_r{k}"] = float((t2i_rank < k).to(DTYPE).mean())
    return out


def class_prompts(codebook: TokenCodebook, classes: int, max_text_len: int) -> Tensor:
    return torch.stack([codebook.class_prompt(c, max_text_len) for c in range(classes)])


def evaluate_model(state: ModelState, dataset: PairDataset, codebook: TokenCodebook,
                   probe_cfg: Optional[ProbeConfig] = None) -> EvalReport:
    """
    Run every protocol on one dataset: linear probe, zero-shot, retrieval, collapse.

    Returns:
        EvalReport: All fields populated
    """
    cfg = probe_cfg or ProbeConfig()
    classes = dataset.labels.shape[1]
    report = linear_probe(extract_features(state, dataset, cfg.branch), dataset.labels, cfg)

    scores = zero_shot_classify(state, dataset.images, class_prompts(codebook, classes, state.dims.max_text_len))
    zsc = zero_shot_metrics(scores, dataset.labels, dataset.primary)
    report.zsc_top1, report.zsc_mean_auc, report.zsc_map = zsc.zsc_top1, zsc.zsc_mean_auc, zsc.zsc_map

    image_cl = extract_features(state, dataset, "cl", "image")
    text_cl = extract_features(state, dataset, "cl", "text")
    report.retrieval = retrieval_recall(image_cl, text_cl)
    report.feature_std_min, report.effective_rank = collapse_diagnostics(image_cl)
    logger.info(f"Evaluation: probe AUC={report.mean_auc:.4f} mAP={report.map:.4f} "
                f"zsc top1={report.zsc_top1:.4f} std_min={report.feature_std_min:.4f} "
                f"erank={report.effective_rank:.2f}")
    return report
