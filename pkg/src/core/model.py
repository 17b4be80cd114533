"""
CLIPin Model Module
Image/text encoders, shared pre-projectors, contrastive and non-contrastive
sub-projectors, inter/intra predictors, and the EMA-tracked target branches.
"""

import copy
import logging
import math
from typing import Dict, Iterator, List, NamedTuple, Tuple

import torch
import torch.nn as nn

from config.config import PAD_TOKEN_ID, DimsConfig
from core.errors import PadOnlySequence, ShapeMismatch, TokenOutOfRange
from core.numerics import DTYPE, Rng, Tensor

logger = logging.getLogger(__name__)

MODALITIES = ("image", "text")

# (target attribute, online attribute)
TARGET_PAIRS = (
    ("f_theta_m", "f_theta"),
    ("f_phi_m", "f_phi"),
    ("g_pre_I_m", "g_pre_I"),
    ("g_pre_T_m", "g_pre_T"),
    ("g_ncl_I_m", "g_ncl_I"),
    ("g_ncl_T_m", "g_ncl_T"),
)


class ImageEncoder(nn.Module):
    """f_theta: flatten -> linear -> layer-norm -> ReLU -> linear."""

    def __init__(self, dims: DimsConfig):
        super().__init__()
        self.dims = dims
        in_features = dims.channels * dims.image_side * dims.image_side
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(in_features, dims.d_enc),
            nn.LayerNorm(dims.d_enc),
            nn.ReLU(),
            nn.Linear(dims.d_enc, dims.d_enc),
        )

    def forward(self, images: Tensor) -> Tensor:
        expected = (self.dims.channels, self.dims.image_side, self.dims.image_side)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeMismatch(f"images must be [B, {expected[0]}, {expected[1]}, {expected[2]}], "
                                f"got {tuple(images.shape)}")
        return self.net(images)


class TextEncoder(nn.Module):
    """f_phi: token embedding -> masked mean-pool over non-pad positions -> linear."""

    def __init__(self, dims: DimsConfig):
        super().__init__()
        self.dims = dims
        self.embedding = nn.Embedding(dims.vocab_size, dims.d_enc)
        self.proj = nn.Linear(dims.d_enc, dims.d_enc)

    def forward(self, tokens: torch.Tensor) -> Tensor:
        if tokens.dim() != 2:
            raise ShapeMismatch(f"tokens must be [B, l], got {tuple(tokens.shape)}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.dims.vocab_size):
            raise TokenOutOfRange(f"token ids must lie in [0, {self.dims.vocab_size})")
        mask = (tokens != PAD_TOKEN_ID).to(DTYPE)
        counts = mask.sum(dim=1, keepdim=True)
        if bool((counts == 0).any()):
            raise PadOnlySequence("a text sequence contains only padding")
        pooled = (self.embedding(tokens) * mask.unsqueeze(-1)).sum(dim=1) / counts
        return self.proj(pooled)


def pre_projector(dims: DimsConfig) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dims.d_enc, dims.d_pre), nn.LayerNorm(dims.d_pre), nn.ReLU())


def ncl_projector(dims: DimsConfig) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(dims.d_pre, dims.d_ncl),
        nn.LayerNorm(dims.d_ncl),
        nn.ReLU(),
        nn.Linear(dims.d_ncl, dims.d_ncl),
    )


def bottleneck_predictor(dims: DimsConfig) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(dims.d_ncl, dims.predictor_bottleneck),
        nn.LayerNorm(dims.predictor_bottleneck),
        nn.ReLU(),
        nn.Linear(dims.predictor_bottleneck, dims.d_ncl),
    )


class OnlineFeatures(NamedTuple):
    enc: Tensor
    pre: Tensor
    ncl: Tensor
    cl_pre: Tensor


class OnlineParams(nn.Module):
    """Every gradient-trained module plus the temperature and loss-weight scalars."""

    def __init__(self, dims: DimsConfig, share_pre_projectors: bool = True, tau: float = 0.07):
        super().__init__()
        self.share_pre_projectors = share_pre_projectors
        self.f_theta = ImageEncoder(dims)
        self.f_phi = TextEncoder(dims)
        self.g_pre_I = pre_projector(dims)
        self.g_pre_T = pre_projector(dims)
        self.g_ncl_I = ncl_projector(dims)
        self.g_ncl_T = ncl_projector(dims)
        self.g_cl_I = nn.Linear(dims.d_pre, dims.d_cl, bias=False)
        self.g_cl_T = nn.Linear(dims.d_pre, dims.d_cl, bias=False)
        self.q_inter_I = bottleneck_predictor(dims)
        self.q_inter_T = bottleneck_predictor(dims)
        self.q_intra_I = bottleneck_predictor(dims)
        self.q_intra_T = bottleneck_predictor(dims)
        if not share_pre_projectors:
            # contrastive path gets its own pre-projectors in the unshared ablation
            self.g_pre_cl_I = pre_projector(dims)
            self.g_pre_cl_T = pre_projector(dims)
        self.tau_logit = nn.Parameter(torch.tensor(math.log(tau), dtype=DTYPE))
        self.s_inter = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.s_intra = nn.Parameter(torch.zeros((), dtype=DTYPE))

    def image_features(self, images: Tensor, need_ncl: bool = True) -> OnlineFeatures:
        enc = self.f_theta(images)
        pre = self.g_pre_I(enc)
        ncl = self.g_ncl_I(pre) if need_ncl else None
        cl_pre = pre if self.share_pre_projectors else self.g_pre_cl_I(enc)
        return OnlineFeatures(enc, pre, ncl, cl_pre)

    def text_features(self, tokens: torch.Tensor, need_ncl: bool = True) -> OnlineFeatures:
        enc = self.f_phi(tokens)
        pre = self.g_pre_T(enc)
        ncl = self.g_ncl_T(pre) if need_ncl else None
        cl_pre = pre if self.share_pre_projectors else self.g_pre_cl_T(enc)
        return OnlineFeatures(enc, pre, ncl, cl_pre)


class TargetParams(nn.Module):
    """EMA mirror of the encoders, pre-projectors and non-contrastive sub-projectors."""

    def __init__(self, online: OnlineParams):
        super().__init__()
        for target_name, online_name in TARGET_PAIRS:
            setattr(self, target_name, copy.deepcopy(getattr(online, online_name)))
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def image(self, images: Tensor) -> Tensor:
        return self.g_ncl_I_m(self.g_pre_I_m(self.f_theta_m(images))).detach()

    @torch.no_grad()
    def text(self, tokens: torch.Tensor) -> Tensor:
        return self.g_ncl_T_m(self.g_pre_T_m(self.f_phi_m(tokens))).detach()


class ModelState(nn.Module):
    """Online parameters, their EMA target mirror and the training-step counter."""

    def __init__(self, dims: DimsConfig, online: OnlineParams):
        super().__init__()
        self.dims = dims
        self.online = online
        self.target = TargetParams(online)
        self.step = 0

    @property
    def share_pre_projectors(self) -> bool:
        return self.online.share_pre_projectors

    def target_pairs(self) -> Iterator[Tuple[str, nn.Module, nn.Module]]:
        for target_name, online_name in TARGET_PAIRS:
            yield target_name, getattr(self.target, target_name), getattr(self.online, online_name)

    def online_named_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        return list(self.online.named_parameters())

    def target_named_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        return list(self.target.named_parameters())


def _init_weights_(module: nn.Module, rng: Rng) -> None:
    """Scaled-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases, unit layer-norm gains."""
    with torch.no_grad():
        for name, sub in module.named_modules():
            if isinstance(sub, nn.Linear):
                fan_out, fan_in = sub.weight.shape
            elif isinstance(sub, nn.Embedding):
                fan_in, fan_out = sub.weight.shape
            elif isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                sub.bias.zero_()
                continue
            else:
                continue
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            values = rng.child(name).uniform(-bound, bound, size=tuple(sub.weight.shape))
            sub.weight.copy_(torch.from_numpy(values))
            if getattr(sub, "bias", None) is not None:
                sub.bias.zero_()


class ModelManager:
    """Builds and mutates ModelState objects."""

    def init_model(self, dims: DimsConfig, rng: Rng, share_pre_projectors: bool = True,
                   tau: float = 0.07) -> ModelState:
        dims.validate()
        online = OnlineParams(dims, share_pre_projectors=share_pre_projectors, tau=tau).to(DTYPE)
        _init_weights_(online, rng.child("init"))
        state = ModelState(dims, online)
        n_online = sum(p.numel() for p in online.parameters())
        n_target = sum(p.numel() for p in state.target.parameters())
        logger.info(f"Initialized model ({dims.preset}): {n_online} online / {n_target} target parameters, "
                    f"shared pre-projectors={share_pre_projectors}")
        return state

    def encode_image_online(self, state: ModelState, images: Tensor) -> Tuple[Tensor, Tensor]:
        feats = state.online.image_features(images)
        return feats.ncl, feats.pre

    def encode_text_online(self, state: ModelState, tokens: torch.Tensor) -> Tuple[Tensor, Tensor]:
        feats = state.online.text_features(tokens)
        return feats.ncl, feats.pre

    def encode_image_target(self, state: ModelState, images: Tensor) -> Tensor:
        return state.target.image(images)

    def encode_text_target(self, state: ModelState, tokens: torch.Tensor) -> Tensor:
        return state.target.text(tokens)

    def _predict(self, predictors: Dict[str, nn.Module], state: ModelState, online_feat: Tensor,
                 modality: str) -> Tensor:
        if modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
        if online_feat.dim() != 2 or online_feat.shape[1] != state.dims.d_ncl:
            raise ShapeMismatch(f"predictor input must be [B, {state.dims.d_ncl}], got {tuple(online_feat.shape)}")
        return predictors[modality](online_feat)

    def predict_inter(self, state: ModelState, online_feat: Tensor, modality: str) -> Tensor:
        return self._predict({"image": state.online.q_inter_I, "text": state.online.q_inter_T},
                             state, online_feat, modality)

    def predict_intra(self, state: ModelState, online_feat: Tensor, modality: str) -> Tensor:
        return self._predict({"image": state.online.q_intra_I, "text": state.online.q_intra_T},
                             state, online_feat, modality)

    def project_contrastive(self, state: ModelState, pre_feat_I: Tensor, pre_feat_T: Tensor) -> Tuple[Tensor, Tensor]:
        d_pre = state.dims.d_pre
        for name, feat in (("image", pre_feat_I), ("text", pre_feat_T)):
            if feat.dim() != 2 or feat.shape[1] != d_pre:
                raise ShapeMismatch(f"{name} pre-projector features must be [B, {d_pre}], got {tuple(feat.shape)}")
        return state.online.g_cl_I(pre_feat_I), state.online.g_cl_T(pre_feat_T)

    @torch.no_grad()
    def ema_update(self, state: ModelState, beta: float) -> None:
        """target <- beta * target + (1 - beta) * online, for every mirrored tensor."""
        if not 0.0 <= beta < 1.0:
            raise ValueError(f"EMA beta must be in [0, 1), got {beta}")
        for _, target, online in state.target_pairs():
            for p_t, p_o in zip(target.parameters(), online.parameters()):
                p_t.mul_(beta).add_(p_o.detach(), alpha=1.0 - beta)


# Global model manager instance
model_manager = ModelManager()


def init_model(dims: DimsConfig, rng: Rng, share_pre_projectors: bool = True, tau: float = 0.07) -> ModelState:
    """
    Build online parameters from the seeded stream and mirror them into the target.

    Args:
        dims (DimsConfig): Network widths
        rng (Rng): Seeded stream; weights come from its "init" sub-stream
        share_pre_projectors (bool): False builds the unshared ablation
        tau (float): Initial temperature behind the optional learnable log-tau

    Returns:
        ModelState: step 0, target value-equal to online
    """
    return model_manager.init_model(dims, rng, share_pre_projectors, tau)


def encode_image_online(state: ModelState, images: Tensor) -> Tuple[Tensor, Tensor]:
    """Returns (g_ncl(g_pre(f_theta(images))), g_pre(f_theta(images)))."""
    return model_manager.encode_image_online(state, images)


def encode_text_online(state: ModelState, tokens: torch.Tensor) -> Tuple[Tensor, Tensor]:
    """Returns (g_ncl(g_pre(f_phi(tokens))), g_pre(f_phi(tokens)))."""
    return model_manager.encode_text_online(state, tokens)


def encode_image_target(state: ModelState, images: Tensor) -> Tensor:
    return model_manager.encode_image_target(state, images)


def encode_text_target(state: ModelState, tokens: torch.Tensor) -> Tensor:
    return model_manager.encode_text_target(state, tokens)


def predict_inter(state: ModelState, online_feat: Tensor, modality: str) -> Tensor:
    return model_manager.predict_inter(state, online_feat, modality)


def predict_intra(state: ModelState, online_feat: Tensor, modality: str) -> Tensor:
    return model_manager.predict_intra(state, online_feat, modality)


def project_contrastive(state: ModelState, pre_feat_I: Tensor, pre_feat_T: Tensor) -> Tuple[Tensor, Tensor]:
    return model_manager.project_contrastive(state, pre_feat_I, pre_feat_T)


def ema_update(state: ModelState, beta: float) -> None:
    model_manager.ema_update(state, beta)
