"""Tests for the model module: shapes, init, target mirror, wiring and EMA."""

import pytest
import torch

from config.config import DimsConfig
from core.errors import ConfigError, PadOnlySequence, ShapeMismatch, TokenOutOfRange
from core.losses import info_nce_loss, inter_modal_loss, intra_modal_loss
from core.model import (ema_update, encode_image_online, encode_image_target, encode_text_online,
                        encode_text_target, init_model, predict_inter, predict_intra, project_contrastive)
from core.numerics import DTYPE, Rng, backward, finite_diff_param_grad, relative_error

from conftest import random_batch


def _params_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


class TestInit:
    def test_target_equals_online_at_init(self, tiny_state):
        assert tiny_state.step == 0
        for _, target, online in tiny_state.target_pairs():
            assert _params_equal(target, online)

    def test_same_seed_same_parameters(self, tiny_dims):
        a = init_model(tiny_dims, Rng(9))
        b = init_model(tiny_dims, Rng(9))
        for (_, pa), (_, pb) in zip(a.online_named_parameters(), b.online_named_parameters()):
            assert torch.equal(pa, pb)

    def test_requires_grad_flags(self, tiny_state):
        assert all(p.requires_grad for _, p in tiny_state.online_named_parameters())
        assert not any(p.requires_grad for _, p in tiny_state.target_named_parameters())

    def test_target_has_no_predictors_or_contrastive_heads(self, tiny_state):
        names = {name.split(".")[0] for name, _ in tiny_state.target_named_parameters()}
        assert names == {"f_theta_m", "f_phi_m", "g_pre_I_m", "g_pre_T_m", "g_ncl_I_m", "g_ncl_T_m"}

    def test_biases_zero_and_weights_bounded(self, tiny_state):
        for name, p in tiny_state.online_named_parameters():
            if name.endswith("bias"):
                assert torch.count_nonzero(p) == 0

    def test_full_scale_ordering_is_enforced(self):
        with pytest.raises(ConfigError):
            DimsConfig.from_preset("full-scale", d_cl=4096)

    def test_loss_weight_scalars_start_at_zero(self, tiny_state):
        assert float(tiny_state.online.s_inter) == 0.0
        assert float(tiny_state.online.s_intra) == 0.0


class TestEncoders:
    def test_encoder_shapes(self, tiny_state, tiny_batch, tiny_dims):
        ncl, pre = encode_image_online(tiny_state, tiny_batch.images_v1)
        assert ncl.shape == (4, tiny_dims.d_ncl)
        assert pre.shape == (4, tiny_dims.d_pre)
        assert tiny_state.online.f_theta(tiny_batch.images_v1).shape == (4, tiny_dims.d_enc)
        ncl_t, _ = encode_text_online(tiny_state, tiny_batch.tokens_v1[:2])
        assert ncl_t.shape == (2, tiny_dims.d_ncl)

    def test_desk_shapes(self):
        dims = DimsConfig.from_preset("desk")
        state = init_model(dims, Rng(0))
        images = torch.zeros(4, 3, dims.image_side, dims.image_side, dtype=DTYPE)
        ncl, _ = encode_image_online(state, images)
        assert ncl.shape == (4, dims.d_ncl)
        assert torch.isfinite(ncl).all()

    def test_image_shape_mismatch(self, tiny_state):
        with pytest.raises(ShapeMismatch):
            encode_image_online(tiny_state, torch.zeros(2, 3, 5, 5, dtype=DTYPE))

    def test_pad_only_sequence(self, tiny_state, tiny_dims):
        tokens = torch.zeros(2, tiny_dims.max_text_len, dtype=torch.long)
        tokens[0, 0] = 5
        with pytest.raises(PadOnlySequence):
            encode_text_online(tiny_state, tokens)

    def test_token_out_of_range(self, tiny_state, tiny_dims):
        tokens = torch.full((1, tiny_dims.max_text_len), tiny_dims.vocab_size, dtype=torch.long)
        with pytest.raises(TokenOutOfRange):
            encode_text_online(tiny_state, tokens)

    def test_pad_positions_do_not_matter(self, tiny_state, tiny_dims):
        tokens = torch.tensor([[5, 0, 9, 0, 12, 0, 0, 7]], dtype=torch.long)
        moved = torch.tensor([[5, 9, 0, 0, 12, 7, 0, 0]], dtype=torch.long)
        a, _ = encode_text_online(tiny_state, tokens)
        b, _ = encode_text_online(tiny_state, moved)
        assert torch.allclose(a, b, atol=1e-12)

    def test_forward_is_pure(self, tiny_state, tiny_batch):
        a, _ = encode_image_online(tiny_state, tiny_batch.images_v1)
        b, _ = encode_image_online(tiny_state, tiny_batch.images_v1)
        assert torch.equal(a, b)

    def test_target_matches_online_at_init(self, tiny_state, tiny_batch):
        online, _ = encode_image_online(tiny_state, tiny_batch.images_v2)
        assert torch.equal(encode_image_target(tiny_state, tiny_batch.images_v2), online.detach())
        online_t, _ = encode_text_online(tiny_state, tiny_batch.tokens_v2)
        assert torch.equal(encode_text_target(tiny_state, tiny_batch.tokens_v2), online_t.detach())

    def test_image_path_gradient_matches_finite_differences(self, tiny_state, tiny_batch):
        param = tiny_state.online.f_theta.net[1].weight

        def loss():
            return encode_image_online(tiny_state, tiny_batch.images_v1)[0].sum()

        backward(loss())
        idx, numeric = finite_diff_param_grad(loss, param, h=1e-7, indices=range(0, param.numel(), 7))
        assert relative_error(param.grad.reshape(-1)[idx], numeric) < 1e-4


class TestHeads:
    def test_predictor_shapes_and_independence(self, tiny_state, tiny_batch, tiny_dims):
        ncl, _ = encode_image_online(tiny_state, tiny_batch.images_v1)
        inter = predict_inter(tiny_state, ncl, "image")
        intra = predict_intra(tiny_state, ncl, "image")
        assert inter.shape == intra.shape == (4, tiny_dims.d_ncl)
        assert not torch.equal(inter, intra)

    def test_predictor_shape_check(self, tiny_state):
        with pytest.raises(ShapeMismatch):
            predict_inter(tiny_state, torch.zeros(2, 3, dtype=DTYPE), "text")

    def test_predictor_gradient(self, tiny_state, tiny_batch):
        ncl, _ = encode_text_online(tiny_state, tiny_batch.tokens_v1)
        ncl = ncl.detach()
        param = tiny_state.online.q_inter_T[0].weight

        def loss():
            return (predict_inter(tiny_state, ncl, "text") ** 2).sum()

        backward(loss())
        idx, numeric = finite_diff_param_grad(loss, param, h=1e-7, indices=range(0, param.numel(), 5))
        assert relative_error(param.grad.reshape(-1)[idx], numeric) < 1e-4

    def test_project_contrastive_shapes(self, tiny_state, tiny_dims):
        pre = torch.randn(3, tiny_dims.d_pre, dtype=DTYPE)
        u, v = project_contrastive(tiny_state, pre, pre)
        assert u.shape == v.shape == (3, tiny_dims.d_cl)
        with pytest.raises(ShapeMismatch):
            project_contrastive(tiny_state, pre[:, :3], pre)

    def test_truncating_identity_projection(self, tiny_state, tiny_dims):
        with torch.no_grad():
            tiny_state.online.g_cl_I.weight.copy_(torch.eye(tiny_dims.d_cl, tiny_dims.d_pre, dtype=DTYPE))
        pre = torch.randn(2, tiny_dims.d_pre, dtype=DTYPE)
        u, _ = project_contrastive(tiny_state, pre, pre)
        assert torch.equal(u, pre[:, :tiny_dims.d_cl])


class TestWiring:
    def _losses(self, state, batch):
        img = state.online.image_features(batch.images_v1)
        txt = state.online.text_features(batch.tokens_v1)
        u_cl, v_cl = project_contrastive(state, img.cl_pre, txt.cl_pre)
        u_tgt = encode_image_target(state, batch.images_v2)
        v_tgt = encode_text_target(state, batch.tokens_v2)
        l_cl = sum(info_nce_loss(u_cl, v_cl, 0.07))
        l_ncl = sum(inter_modal_loss(predict_inter(state, img.ncl, "image"), predict_inter(state, txt.ncl, "text"),
                                     u_tgt, v_tgt))
        l_ncl = l_ncl + sum(intra_modal_loss(predict_intra(state, img.ncl, "image"),
                                             predict_intra(state, txt.ncl, "text"), u_tgt, v_tgt))
        return l_cl, l_ncl

    def test_shared_pre_projector_receives_both_objectives(self, tiny_state):
        batch = random_batch(tiny_state.dims, seed=1)
        l_cl, l_ncl = self._losses(tiny_state, batch)
        g_pre = tiny_state.online.g_pre_I[0].weight
        grad_cl, = torch.autograd.grad(l_cl, g_pre, retain_graph=True)
        grad_ncl, = torch.autograd.grad(l_ncl, g_pre)
        assert grad_cl.abs().sum() > 0
        assert grad_ncl.abs().sum() > 0

    def test_unshared_contrastive_loss_never_reaches_ncl_head(self, unshared_state):
        batch = random_batch(unshared_state.dims, seed=2)
        l_cl, _ = self._losses(unshared_state, batch)
        backward(l_cl)
        for module in (unshared_state.online.g_ncl_I, unshared_state.online.g_ncl_T,
                       unshared_state.online.g_pre_I, unshared_state.online.g_pre_T):
            for p in module.parameters():
                assert p.grad is None or torch.count_nonzero(p.grad) == 0

    def test_target_never_receives_gradient(self, tiny_state):
        batch = random_batch(tiny_state.dims, seed=3)
        l_cl, l_ncl = self._losses(tiny_state, batch)
        backward(l_cl + l_ncl)
        for _, p in tiny_state.target_named_parameters():
            assert p.grad is None


class TestEma:
    def test_scalar_example(self, tiny_state):
        target = tiny_state.target.f_theta_m.net[1].bias
        online = tiny_state.online.f_theta.net[1].bias
        with torch.no_grad():
            target.fill_(1.0)
            online.fill_(0.0)
        ema_update(tiny_state, 0.95)
        assert torch.allclose(target, torch.full_like(target, 0.95), atol=0, rtol=0)

    def test_beta_zero_copies(self, tiny_state):
        with torch.no_grad():
            for _, p in tiny_state.online_named_parameters():
                p.add_(0.5)
        ema_update(tiny_state, 0.0)
        for _, target, online in tiny_state.target_pairs():
            assert _params_equal(target, online)

    def test_geometric_decay(self, tiny_state):
        with torch.no_grad():
            for _, p in tiny_state.online_named_parameters():
                p.add_(0.1)

        def gap():
            return torch.sqrt(sum(((t - o) ** 2).sum() for _, tm, om in tiny_state.target_pairs()
                                  for t, o in zip(tm.parameters(), om.parameters())))

        initial = float(gap())
        assert initial > 0
        for k in range(1, 51):
            ema_update(tiny_state, 0.95)
            assert abs(float(gap()) - initial * 0.95 ** k) < 1e-10

    def test_outputs_diverge_after_online_moves(self, tiny_state, tiny_batch):
        with torch.no_grad():
            tiny_state.online.f_theta.net[1].weight.mul_(1.5)
        ema_update(tiny_state, 0.95)
        online, _ = encode_image_online(tiny_state, tiny_batch.images_v1)
        assert not torch.equal(encode_image_target(tiny_state, tiny_batch.images_v1), online.detach())

    def test_invalid_beta(self, tiny_state):
        with pytest.raises(ValueError):
            ema_update(tiny_state, 1.0)
