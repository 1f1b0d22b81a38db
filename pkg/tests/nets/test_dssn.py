"""
Unit tests for the dual-stream segmentation network.
"""
import pytest
import torch

from app.errors import ConfigurationError, ShapeError
from app.nets.dssn import (
    CrossAttentionFusion, DualStreamSegmenter, FusionDecoder, OverlapPatchEmbed, tokens_to_map,
)
from app.settings import DSSNConfig


@pytest.fixture
def dssn_config():
    """Four shallow stages for 32x32 inputs (token grids 8, 4, 2, 1)."""
    return DSSNConfig(stage_dims=(8, 16, 16, 16), num_heads=(1, 1, 2, 2), depths=(1, 1, 1, 1),
                      sr_ratios=(8, 4, 2, 1), decoder_dim=16)


@pytest.fixture
def segmenter(dssn_config):
    torch.manual_seed(0)
    return DualStreamSegmenter(dssn_config, 32).eval()


def _randomize_fusion(segmenter):
    torch.manual_seed(1)
    with torch.no_grad():
        for fusion in segmenter.fusion:
            fusion.proj.weight.normal_(0.0, 0.5)


class TestBuildingBlocks:
    """Test stage components."""

    def test_overlap_patch_embed_downsamples(self):
        """Test kernel 2s-1 with padding keeps an exact stride-s grid."""
        embed = OverlapPatchEmbed(3, 8, stride=4)
        tokens, grid = embed(torch.rand(2, 3, 32, 32))
        assert grid == (8, 8)
        assert tokens.shape == (2, 64, 8)

    def test_tokens_to_map_layout(self):
        """Test tokens are laid back out row-major."""
        tokens = torch.arange(6, dtype=torch.float32).reshape(1, 6, 1)
        grid = tokens_to_map(tokens, (2, 3))
        assert grid[0, 0].tolist() == [[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]


class TestCrossAttentionFusion:
    """Test the content-queries-artifact fusion layer."""

    def test_output_equals_content_at_init(self):
        """Test the zero-initialized projection makes fusion an identity on f_con."""
        fusion = CrossAttentionFusion(16, 2)
        f_con, f_art = torch.rand(2, 4, 16), torch.rand(2, 4, 16)
        assert torch.equal(fusion(f_con, f_art), f_con)

    def test_attention_rows_sum_to_one(self):
        """Test kept attention weights are a distribution over artifact tokens."""
        fusion = CrossAttentionFusion(16, 2)
        fusion.keep_attention = True
        fusion(torch.rand(2, 4, 16), torch.rand(2, 4, 16))
        assert fusion.last_attention.shape == (2, 2, 4, 4)
        assert torch.allclose(fusion.last_attention.sum(dim=-1), torch.ones(2, 2, 4))

    def test_attention_not_kept_by_default(self):
        """Test no attention tensor is retained unless asked."""
        fusion = CrossAttentionFusion(16, 2)
        fusion(torch.rand(1, 4, 16), torch.rand(1, 4, 16))
        assert fusion.last_attention is None

    def test_indivisible_heads_raise(self):
        """Test a dim not divisible by the head count raises."""
        with pytest.raises(ConfigurationError):
            CrossAttentionFusion(10, 3)

    def test_mismatched_streams_raise(self):
        """Test fusing features of different shapes raises ShapeError."""
        fusion = CrossAttentionFusion(16, 2)
        with pytest.raises(ShapeError):
            fusion(torch.rand(1, 4, 16), torch.rand(1, 16, 16))


class TestFusionDecoder:
    """Test the all-MLP decoder."""

    def test_empty_feature_list_raises(self):
        """Test decoding nothing raises ShapeError."""
        with pytest.raises(ShapeError):
            FusionDecoder((8, 16), 16)([], (32, 32))

    def test_wrong_stage_count_raises(self, segmenter):
        """Test a truncated feature list raises ShapeError."""
        features = segmenter.encode_streams(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32))
        with pytest.raises(ShapeError):
            segmenter.decoder(features[:2], (32, 32))


class TestDualStreamSegmenter:
    """Test the two-stream segmenter."""

    def test_mask_shape_and_range(self, segmenter):
        """Test the output is a B x 1 x H x W probability map."""
        with torch.no_grad():
            mask = segmenter(torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32))
        assert mask.shape == (2, 1, 32, 32)
        assert mask.min() > 0.0
        assert mask.max() < 1.0

    def test_stage_features(self, segmenter):
        """Test one feature set per stage on the configured grids."""
        features = segmenter.encode_streams(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32))
        assert [f.grid for f in features] == [(8, 8), (4, 4), (2, 2), (1, 1)]
        assert [f.f_fused.shape[-1] for f in features] == [8, 16, 16, 16]
        assert all(f.f_art is not None for f in features)

    def test_residual_has_no_effect_at_init(self, segmenter):
        """Test the artifact stream is silent until the fusion projection moves."""
        x = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            a = segmenter(x, torch.rand(2, 3, 32, 32))
            b = segmenter(x, torch.rand(2, 3, 32, 32))
        assert torch.equal(a, b)

    def test_residual_changes_mask_once_fusion_is_trained(self, segmenter):
        """Test a non-zero fusion projection lets the residual steer the mask."""
        _randomize_fusion(segmenter)
        x = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            a = segmenter(x, torch.zeros(2, 3, 32, 32))
            b = segmenter(x, torch.rand(2, 3, 32, 32))
        assert not torch.allclose(a, b)

    def test_batch_permutation_equivariance(self, segmenter):
        """Test permuting the batch permutes the masks and nothing else."""
        _randomize_fusion(segmenter)
        generator = torch.Generator().manual_seed(2)
        x = torch.rand(3, 3, 32, 32, generator=generator)
        residual = torch.rand(3, 3, 32, 32, generator=generator)
        order = torch.tensor([2, 0, 1])
        with torch.no_grad():
            masks = segmenter(x, residual)
            permuted = segmenter(x[order], residual[order])
        assert torch.allclose(permuted, masks[order], atol=1e-6)

    def test_zero_residual_artifact_stream_ignores_image(self, segmenter):
        """Test with a zero residual every artifact-stream stage output is the same for any image."""
        _randomize_fusion(segmenter)
        residual = torch.zeros(2, 3, 32, 32)
        with torch.no_grad():
            a = segmenter.encode_streams(torch.rand(2, 3, 32, 32), residual)
            b = segmenter.encode_streams(torch.rand(2, 3, 32, 32), residual)
        for stage_a, stage_b in zip(a, b):
            assert torch.equal(stage_a.f_art, stage_b.f_art)
            assert not torch.equal(stage_a.f_con, stage_b.f_con)

    def test_fuse_cross_attention_by_stage(self, segmenter):
        """Test the per-stage fusion entry point."""
        f_con, f_art = torch.rand(1, 16, 16), torch.rand(1, 16, 16)
        assert torch.equal(segmenter.fuse_cross_attention(1, f_con, f_art), f_con)

    def test_decode_mask_matches_forward(self, segmenter):
        """Test decode_mask on encoded streams equals the forward pass."""
        x, r = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            expected = segmenter(x, r)
            mask = segmenter.decode_mask(segmenter.encode_streams(x, r), (32, 32))
        assert torch.equal(mask, expected)

    @pytest.mark.parametrize('x_shape,r_shape', [
        ((1, 3, 32, 32), (1, 3, 16, 16)),
        ((1, 1, 32, 32), (1, 1, 32, 32)),
        ((3, 32, 32), (3, 32, 32)),
    ])
    def test_bad_inputs_raise(self, segmenter, x_shape, r_shape):
        """Test mismatched shapes or non-RGB inputs raise ShapeError."""
        with pytest.raises(ShapeError):
            segmenter(torch.rand(*x_shape), torch.rand(*r_shape))

    def test_fusion_feedforward_off_keeps_content_path(self, dssn_config):
        """Test without feed-forward the next stage reads un-fused content tokens."""
        dssn_config.fusion_feedforward = False
        torch.manual_seed(0)
        segmenter = DualStreamSegmenter(dssn_config, 32).eval()
        _randomize_fusion(segmenter)
        x = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            a = segmenter.encode_streams(x, torch.zeros(1, 3, 32, 32))
            b = segmenter.encode_streams(x, torch.rand(1, 3, 32, 32))
        assert all(torch.equal(fa.f_con, fb.f_con) for fa, fb in zip(a, b))

    def test_resolution_checked_against_stages(self, dssn_config):
        """Test a resolution the stage layout cannot divide raises."""
        with pytest.raises(ConfigurationError):
            DualStreamSegmenter(dssn_config, 40)


class TestSingleStream:
    """Test the concatenated-input ablation mode."""

    def test_single_stream_has_no_artifact_branch(self, dssn_config):
        """Test single-stream mode builds one 6-channel stream and no fusion."""
        segmenter = DualStreamSegmenter(dssn_config, 32, dual=False)
        assert not hasattr(segmenter, 'artifact')
        assert not hasattr(segmenter, 'fusion')
        assert segmenter.content[0].patch_embed.proj.in_channels == 6

    def test_single_stream_reads_residual(self, dssn_config):
        """Test the residual reaches the mask through the concatenated input."""
        torch.manual_seed(0)
        segmenter = DualStreamSegmenter(dssn_config, 32, dual=False).eval()
        x = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            a = segmenter(x, torch.zeros(1, 3, 32, 32))
            b = segmenter(x, torch.rand(1, 3, 32, 32))
        assert a.shape == (1, 1, 32, 32)
        assert not torch.allclose(a, b)

    def test_single_stream_features(self, dssn_config):
        """Test features carry no artifact tokens and f_fused is f_con."""
        segmenter = DualStreamSegmenter(dssn_config, 32, dual=False)
        features = segmenter.encode_streams(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32))
        assert all(f.f_art is None and f.f_fused is f.f_con for f in features)

    def test_fusion_unavailable(self, dssn_config):
        """Test asking a single-stream model to fuse raises."""
        segmenter = DualStreamSegmenter(dssn_config, 32, dual=False)
        with pytest.raises(ConfigurationError):
            segmenter.fuse_cross_attention(0, torch.rand(1, 64, 8), torch.rand(1, 64, 8))
