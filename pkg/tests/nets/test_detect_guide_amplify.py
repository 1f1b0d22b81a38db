"""
Unit tests for the two-stage detect, guide and amplify network.
"""
import copy

import pytest
import torch

from app.errors import ConfigurationError
from app.nets.detect_guide_amplify import DetectGuideAmplifyNet
from app.nets.mae import MaskedAutoencoder
from app.services.metrics_service import stage_loss, total_loss

FULL_GROUPS = ['mae.encoder', 'mae.decoder', 'dssn', 'tapi.prompt', 'tapi.film', 'mae.decoder_stage2']


def _build(pretrained_mae, settings, **flags):
    torch.manual_seed(0)
    return DetectGuideAmplifyNet(copy.deepcopy(pretrained_mae), settings, **flags)


def _group_grad(module):
    grads = [p.grad.abs().sum() for p in module.parameters() if p.grad is not None]
    return float(sum(grads)) if grads else 0.0


class TestConstruction:
    """Test building the network under the ablation flags."""

    def test_full_model_groups(self, net):
        """Test every parameter group of the full model is present."""
        assert list(net.parameter_groups()) == FULL_GROUPS
        assert net.flags == {'use_dssn_dual': True, 'use_tapi': True, 'use_adaptive_decoder': True}

    def test_prior_is_frozen(self, net):
        """Test encoder and pretrained decoder are frozen, the rest trains."""
        for name, module in net.frozen_groups().items():
            assert all(not p.requires_grad for p in module.parameters()), name
        trainable = {id(p) for p in net.trainable_parameters()}
        for name in ('dssn', 'tapi.prompt', 'tapi.film', 'mae.decoder_stage2'):
            module = net.parameter_groups()[name]
            assert all(id(p) in trainable for p in module.parameters()), name

    def test_adaptive_decoder_requires_tapi(self, pretrained_mae, tiny_settings):
        """Test the adaptive decoder without prior injection is rejected."""
        with pytest.raises(ConfigurationError):
            _build(pretrained_mae, tiny_settings, use_tapi=False, use_adaptive_decoder=True)

    def test_resolution_mismatch(self, tiny_settings):
        """Test a prior built for another resolution is rejected."""
        mae = MaskedAutoencoder(tiny_settings.mae, 64)
        with pytest.raises(ConfigurationError):
            DetectGuideAmplifyNet(mae, tiny_settings)

    def test_without_tapi(self, pretrained_mae, tiny_settings):
        """Test rows I and II carry no prompt path and no Stage-2 decoder."""
        net = _build(pretrained_mae, tiny_settings, use_dssn_dual=False, use_tapi=False,
                     use_adaptive_decoder=False)
        assert net.tapi is None
        assert net.stage2_decoder is None
        assert list(net.parameter_groups()) == ['mae.encoder', 'mae.decoder', 'dssn']

    def test_frozen_decoder_variant(self, pretrained_mae, tiny_settings):
        """Test row III injects the prior without cloning the decoder."""
        net = _build(pretrained_mae, tiny_settings, use_adaptive_decoder=False)
        assert net.tapi is not None
        assert net.stage2_decoder is None


class TestForward:
    """Test the two-stage forward pass."""

    def test_forward_shapes(self, net):
        """Test both masks are B x 1 x H x W probabilities."""
        with torch.no_grad():
            m_crs, m_ref = net(torch.rand(2, 3, 32, 32))
        assert m_crs.shape == m_ref.shape == (2, 1, 32, 32)
        assert 0.0 <= m_ref.min() and m_ref.max() <= 1.0

    def test_trace_fields(self, net):
        """Test the trace carries every intermediate of both stages."""
        x = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            trace = net.forward_two_stage(x)
        assert trace.stage2_ran
        assert trace.prompts.shape == (2, 4, 16)
        assert trace.film.gamma.shape == (2, 32)
        assert torch.equal(trace.residual_s2, (x - trace.x_rec_s2).abs())

    def test_stage2_identity_at_init(self, net):
        """Test Stage 2 reproduces Stage 1 exactly before any training."""
        x = torch.rand(3, 3, 32, 32)
        with torch.no_grad():
            trace = net.forward_two_stage(x)
        assert torch.equal(trace.x_rec_s2, trace.x_rec_s1)
        assert torch.equal(trace.residual_s2, trace.residual_s1)
        assert torch.equal(trace.m_ref, trace.m_crs)

    def test_stage2_can_be_skipped(self, net):
        """Test stage2=False returns the coarse mask as the refined one."""
        with torch.no_grad():
            trace = net.forward_two_stage(torch.rand(1, 3, 32, 32), stage2=False)
        assert not trace.stage2_ran
        assert trace.m_ref is trace.m_crs
        assert trace.prompts is None

    def test_no_tapi_skips_stage2(self, pretrained_mae, tiny_settings):
        """Test without prior injection the refined mask is the coarse mask."""
        net = _build(pretrained_mae, tiny_settings, use_tapi=False, use_adaptive_decoder=False)
        with torch.no_grad():
            m_crs, m_ref = net(torch.rand(1, 3, 32, 32))
        assert m_ref is m_crs

    def test_encoder_runs_once_per_forward(self, net, mocker):
        """Test Stage 2 reuses the Stage-1 tokens instead of re-encoding the image."""
        spy = mocker.spy(net.mae.encoder, 'forward')
        with torch.no_grad():
            trace = net.forward_two_stage(torch.rand(2, 3, 32, 32))
        assert trace.stage2_ran
        assert spy.call_count == 1

    def test_stage1_reconstruction_ignores_training(self, net):
        """Test the prior reconstructs the same way in train and eval mode."""
        x = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            net.train()
            a = net.forward_two_stage(x).x_rec_s1
            net.eval()
            b = net.forward_two_stage(x).x_rec_s1
        assert torch.equal(a, b)


class TestGradientFlow:
    """Test which parameter groups learn from the joint loss."""

    def _step(self, net, optimizer, x, masks):
        trace = net.forward_two_stage(x)
        loss = total_loss(stage_loss(trace.m_ref, masks), stage_loss(trace.m_crs, masks)).l_total
        optimizer.zero_grad()
        loss.backward()
        return loss

    def test_frozen_groups_receive_no_gradient(self, net, forged_records):
        """Test backward never populates grads of the frozen prior."""
        x = torch.from_numpy(forged_records[0].image).unsqueeze(0)
        masks = torch.from_numpy(forged_records[0].mask).unsqueeze(0)
        optimizer = torch.optim.AdamW(list(net.trainable_parameters()), lr=1e-2)
        self._step(net, optimizer, x, masks)
        for module in net.frozen_groups().values():
            assert all(p.grad is None for p in module.parameters())

    def test_every_trainable_group_learns(self, net, forged_records):
        """Test after a few steps the prompt path, FiLM and Stage-2 decoder all get gradient."""
        x = torch.stack([torch.from_numpy(r.image) for r in forged_records])
        masks = torch.stack([torch.from_numpy(r.mask) for r in forged_records])
        optimizer = torch.optim.AdamW(list(net.trainable_parameters()), lr=1e-2)
        # zero-initialized fusion and FiLM heads open one group per step
        for _ in range(2):
            self._step(net, optimizer, x, masks)
            optimizer.step()
        self._step(net, optimizer, x, masks)
        groups = net.parameter_groups()
        for name in ('dssn', 'tapi.prompt', 'tapi.film', 'mae.decoder_stage2'):
            assert _group_grad(groups[name]) > 0.0, name

    def test_loss_is_finite(self, net, forged_records):
        """Test the joint loss on real records is finite and positive."""
        x = torch.stack([torch.from_numpy(r.image) for r in forged_records])
        masks = torch.stack([torch.from_numpy(r.mask) for r in forged_records])
        optimizer = torch.optim.AdamW(list(net.trainable_parameters()), lr=1e-2)
        loss = self._step(net, optimizer, x, masks)
        assert torch.isfinite(loss)
        assert loss.item() > 0.0
