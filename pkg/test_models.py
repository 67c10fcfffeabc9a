"""
Tests for the S4 denoiser, the conditioning encoders and the stage-1 forecaster.
"""

import sys
from pathlib import Path

import pytest
import torch
import torch.nn.functional as F

# Add project root to path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from config.errors import ConfigError, DivergenceError, ShapeError
from models.conditioning import (
    ConditioningConfig,
    ConditioningEncoder,
    CrossAttentionFusion,
    ImageEncoder,
    TemporalEncoder,
)
from models.denoiser import (
    Denoiser,
    DenoiserConfig,
    ResidualBlock,
    S4DLayer,
    sinusoidal_embedding,
)
from models.forecaster import DiffusionForecaster


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def tiny_config(**overrides):
    values = dict(n_blocks=2, channels=8, horizon=6, ssm_state_dim=4, diffusion_step_embed_dim=8)
    values.update(overrides)
    return DenoiserConfig(**values)


class TestStepEmbedding:
    def test_deterministic(self):
        t = torch.tensor([5, 5])
        embedding = sinusoidal_embedding(t, 16)
        assert torch.equal(embedding[0], embedding[1])

    def test_first_and_last_steps_differ(self):
        first, last = sinusoidal_embedding(torch.tensor([1, 100]), 64)
        assert float(F.cosine_similarity(first, last, dim=0)) < 0.999

    def test_odd_dimension_is_zero_padded(self):
        embedding = sinusoidal_embedding(torch.tensor([3]), 7)
        assert embedding.shape == (1, 7)
        assert float(embedding[0, -1]) == 0.0


class TestS4DLayer:
    def test_zero_input_gives_zero_output_with_zero_bias(self):
        layer = S4DLayer(channels=4, state_dim=8)
        with torch.no_grad():
            layer.output.bias.zero_()
        out = layer(torch.zeros(2, 4, 6))
        assert torch.equal(out, torch.zeros(2, 4, 6))

    def test_impulse_returns_kernel(self):
        layer = S4DLayer(channels=4, state_dim=8).double()
        u = torch.zeros(1, 4, 6, dtype=torch.float64)
        u[0, 2, 0] = 1.0
        y = layer.linear(u)
        kernel = layer.kernel(6)
        expected = kernel[2].clone()
        expected[0] += layer.D[2]
        assert torch.allclose(y[0, 2], expected, atol=1e-10)
        assert torch.allclose(y[0, [0, 1, 3]], torch.zeros(3, 6, dtype=torch.float64), atol=1e-12)

    def test_convolution_matches_recurrence(self):
        layer = S4DLayer(channels=3, state_dim=8).double()
        u = torch.randn(2, 3, 6, dtype=torch.float64)
        A_bar, CB = layer.discrete_parameters()
        state = torch.zeros(2, 3, layer.modes, dtype=torch.complex128)
        outputs = []
        for k in range(6):
            state = A_bar * state + u[:, :, k, None]
            outputs.append(2.0 * (CB * state).sum(-1).real + layer.D * u[:, :, k])
        recurrence = torch.stack(outputs, dim=-1)
        assert torch.allclose(layer.linear(u), recurrence, atol=1e-5)

    def test_unstable_kernel_is_reported(self):
        layer = S4DLayer(channels=2, state_dim=4)
        with torch.no_grad():
            layer.log_dt.fill_(10.0)
            layer.log_A_real.fill_(-30.0)
            layer.C.fill_(1e38)
        with pytest.raises(DivergenceError, match="kernel"):
            layer.kernel(6)


class TestResidualBlock:
    def test_zero_cond_equals_unconditional(self):
        block = ResidualBlock(channels=8, state_dim=4, step_embed_dim=8)
        x, step = torch.randn(2, 8, 6), torch.randn(2, 8)
        with_zero = block(x, step, torch.zeros(2, 8))
        without = block(x, step, None)
        assert torch.equal(with_zero.residual, without.residual)
        assert torch.equal(with_zero.skip, without.skip)

    def test_different_cond_changes_skip(self):
        block = ResidualBlock(channels=8, state_dim=4, step_embed_dim=8)
        x, step = torch.randn(1, 8, 6), torch.randn(1, 8)
        first = block(x, step, torch.randn(1, 8)).skip
        second = block(x, step, torch.randn(1, 8)).skip
        assert float((first - second).norm()) > 0

    def test_zeroed_weights_keep_identity_shortcut(self):
        block = ResidualBlock(channels=8, state_dim=4, step_embed_dim=8)
        with torch.no_grad():
            for parameter in block.parameters():
                parameter.zero_()
        x = torch.randn(3, 8, 6)
        assert torch.equal(block(x, torch.randn(3, 8)).residual, x)

    def test_cond_shape_is_checked(self):
        block = ResidualBlock(channels=8, state_dim=4, step_embed_dim=8)
        with pytest.raises(ShapeError):
            block(torch.randn(2, 8, 6), torch.randn(2, 8), torch.randn(2, 5))


class TestDenoiser:
    def test_output_shape(self):
        model = Denoiser(tiny_config())
        out = model(torch.randn(2, 6), torch.tensor([1, 50]), torch.randn(2, 8))
        assert out.shape == (2, 6)

    @pytest.mark.parametrize("horizon", [1, 6, 13])
    def test_any_horizon(self, horizon):
        model = Denoiser(tiny_config(horizon=horizon))
        assert model(torch.randn(3, horizon), torch.tensor([1, 2, 3])).shape == (3, horizon)

    def test_single_block_equals_projected_skip(self):
        model = Denoiser(tiny_config(n_blocks=1)).eval()
        xt, t, cond = torch.randn(2, 6), torch.tensor([4, 9]), torch.randn(2, 8)
        h = model.input_projection(xt.unsqueeze(1))
        skip = model.blocks[0](h, model.step_embedding(t), cond).skip
        assert torch.allclose(model(xt, t, cond), model.project(skip))

    def test_eval_forward_is_bitwise_deterministic(self):
        model = Denoiser(tiny_config()).eval()
        xt, t, cond = torch.randn(4, 6), torch.tensor([1, 2, 3, 4]), torch.randn(4, 8)
        assert torch.equal(model(xt, t, cond), model(xt, t, cond))

    def test_non_finite_block_is_named(self):
        model = Denoiser(tiny_config())
        with torch.no_grad():
            model.blocks[1].output_projection.bias.fill_(float("nan"))
        with pytest.raises(DivergenceError, match="block 1"):
            model(torch.randn(2, 6), torch.tensor([1, 2]))

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            Denoiser(tiny_config(channels=0))

    def test_gradients_match_finite_differences(self):
        model = Denoiser(tiny_config()).double()
        xt = torch.randn(3, 6, dtype=torch.float64)
        t = torch.tensor([2, 17, 60])
        cond = torch.randn(3, 8, dtype=torch.float64)
        weights = torch.randn(3, 6, dtype=torch.float64)

        def loss_fn():
            return (model(xt, t, cond) * weights).sum()

        model.zero_grad()
        loss_fn().backward()
        eps = 1e-6
        for name, parameter in model.named_parameters():
            flat = parameter.data.view(-1)
            grad = parameter.grad.view(-1)
            for index in range(0, flat.numel(), max(1, flat.numel() // 3)):
                original = float(flat[index])
                with torch.no_grad():
                    flat[index] = original + eps
                    up = float(loss_fn())
                    flat[index] = original - eps
                    down = float(loss_fn())
                    flat[index] = original
                numeric = (up - down) / (2 * eps)
                analytic = float(grad[index])
                scale = max(abs(numeric), abs(analytic))
                assert abs(numeric - analytic) <= 1e-3 * scale + 1e-7, (name, index, numeric, analytic)


class TestConditioning:
    def test_temporal_encoder_width(self):
        encoder = TemporalEncoder(channels=64)
        out = encoder(torch.tensor([[0.1, 0.2, 0.3, 0.4]]))
        assert out.shape == (1, 64)

    def test_out_of_range_dates(self):
        with pytest.raises(ShapeError):
            TemporalEncoder(channels=8)(torch.tensor([[0.1, 1.5, 0.3, 0.4]]))

    def test_image_encoder_tokens(self):
        encoder = ImageEncoder(channels=16, horizon=6, config=ConditioningConfig())
        assert encoder(torch.rand(2, 3, 64, 64)).shape == (2, 16, 6)

    def test_resnet_backbone_tokens(self):
        encoder = ImageEncoder(channels=16, horizon=6, config=ConditioningConfig(backbone="resnet18"))
        assert encoder(torch.rand(1, 3, 64, 64)).shape == (1, 16, 6)

    @pytest.mark.parametrize("shape", [(1, 3, 64, 48), (1, 1, 64, 64), (1, 3, 16, 16)])
    def test_bad_images(self, shape):
        encoder = ImageEncoder(channels=16, horizon=6, config=ConditioningConfig())
        with pytest.raises(ShapeError):
            encoder(torch.rand(*shape))

    def test_fusion_attention_weights(self):
        fusion = CrossAttentionFusion(channels=16, horizon=6, heads=4)
        fused, weights = fusion(torch.randn(2, 16, 6), torch.randn(2, 16), return_weights=True)
        assert fused.shape == (2, 16)
        assert weights.shape == (2, 6)
        assert torch.allclose(weights.sum(dim=1), torch.ones(2), atol=1e-6)

    def test_single_token_gets_all_attention(self):
        fusion = CrossAttentionFusion(channels=16, horizon=1, heads=4).eval()
        _, weights = fusion(torch.randn(3, 16, 1), torch.randn(3, 16), return_weights=True)
        assert torch.equal(weights, torch.ones(3, 1))

    def test_identical_tokens_without_positions_are_order_free(self):
        fusion = CrossAttentionFusion(channels=16, horizon=6, heads=4, positional=False).eval()
        tokens = torch.randn(2, 16, 1).expand(2, 16, 6).contiguous()
        query = torch.randn(2, 16)
        fused, weights = fusion(tokens, query, return_weights=True)
        permuted, _ = fusion(tokens[:, :, torch.randperm(6)], query, return_weights=True)
        assert torch.allclose(weights, torch.full((2, 6), 1 / 6), atol=1e-6)
        assert torch.allclose(fused, permuted, atol=1e-6)

    def test_tokens_without_positions_are_permutation_invariant(self):
        fusion = CrossAttentionFusion(channels=16, horizon=6, heads=4, positional=False).eval()
        tokens, query = torch.randn(2, 16, 6), torch.randn(2, 16)
        order = torch.tensor([5, 3, 0, 1, 4, 2])
        assert torch.allclose(fusion(tokens, query), fusion(tokens[:, :, order], query), atol=1e-5)

    def test_full_size_image_gives_channels_by_horizon(self):
        encoder = ImageEncoder(channels=64, horizon=6, config=ConditioningConfig()).eval()
        assert encoder(torch.rand(1, 3, 256, 256)).shape == (1, 64, 6)

    def test_identical_images_give_identical_tokens(self):
        encoder = ImageEncoder(channels=16, horizon=6, config=ConditioningConfig()).eval()
        image = torch.rand(1, 3, 32, 32)
        assert torch.equal(encoder(image), encoder(image.clone()))
        batch = encoder(image.expand(2, 3, 32, 32).contiguous())
        assert torch.allclose(batch[0], batch[1], atol=1e-6)

    def test_swapping_day_and_week_changes_embedding(self):
        encoder = TemporalEncoder(channels=16)
        dates = torch.tensor([[0.2, 0.7, 0.5, 0.4]])
        swapped = dates[:, [1, 0, 2, 3]]
        assert float((encoder(dates) - encoder(swapped)).norm()) > 0

    def test_full_conditioning_shape(self):
        encoder = ConditioningEncoder(channels=16, horizon=6)
        cond = encoder(torch.rand(3, 3, 32, 32), torch.rand(3, 4))
        assert cond.shape == (3, 16)

    def test_without_images_cond_is_temporal_embedding(self):
        encoder = ConditioningEncoder(channels=16, horizon=6, config=ConditioningConfig(use_image=False))
        dates = torch.rand(2, 4)
        assert torch.equal(encoder(torch.rand(2, 3, 32, 32), dates), encoder.temporal_encoder(dates))
        assert encoder.image_encoder is None

    def test_without_dates_cond_ignores_dates(self):
        encoder = ConditioningEncoder(channels=16, horizon=6,
                                      config=ConditioningConfig(use_temporal=False)).eval()
        images = torch.rand(2, 3, 32, 32)
        first = encoder(images, torch.rand(2, 4))
        second = encoder(images, torch.rand(2, 4))
        assert torch.equal(first, second)

    def test_both_modalities_off_is_rejected(self):
        with pytest.raises(ConfigError):
            ConditioningEncoder(channels=16, horizon=6,
                                config=ConditioningConfig(use_image=False, use_temporal=False))

    def test_heads_must_divide_channels(self):
        with pytest.raises(ConfigError):
            ConditioningEncoder(channels=10, horizon=6, config=ConditioningConfig(heads=4))


class TestForecaster:
    def test_forward_and_adapter_agree(self):
        model = DiffusionForecaster(tiny_config(), ConditioningConfig(heads=2, base_width=4)).eval()
        images, dates = torch.rand(2, 3, 32, 32), torch.rand(2, 4)
        xt, t = torch.randn(2, 6), torch.tensor([3, 30])
        direct = model(xt, t, images, dates)
        adapted = model.as_denoiser()(xt, t, model.condition(images, dates))
        assert torch.equal(direct, adapted)
        assert model.as_denoiser().horizon == 6

    def test_gradients_reach_every_encoder_parameter(self):
        model = DiffusionForecaster(tiny_config(), ConditioningConfig(heads=2, base_width=4))
        images, dates = torch.rand(3, 3, 32, 32), torch.rand(3, 4)
        model(torch.randn(3, 6), torch.tensor([1, 20, 90]), images, dates).pow(2).sum().backward()
        for name, parameter in model.encoder.named_parameters():
            assert parameter.grad is not None, name
            assert torch.any(parameter.grad != 0), name

    def test_conditioned_gradients_match_finite_differences(self):
        model = DiffusionForecaster(tiny_config(), ConditioningConfig(heads=2, base_width=4)).double()
        images = torch.rand(2, 3, 32, 32, dtype=torch.float64)
        dates = torch.rand(2, 4, dtype=torch.float64)
        xt = torch.randn(2, 6, dtype=torch.float64)
        t = torch.tensor([5, 40])
        weights = torch.randn(2, 6, dtype=torch.float64)

        def loss_fn():
            return (model(xt, t, images, dates) * weights).sum()

        model.zero_grad()
        loss_fn().backward()
        eps = 1e-6
        checked = set()
        for name, parameter in model.named_parameters():
            flat = parameter.data.view(-1)
            grad = parameter.grad.view(-1)
            for index in range(0, flat.numel(), max(1, flat.numel() // 2)):
                original = float(flat[index])
                with torch.no_grad():
                    flat[index] = original + eps
                    up = float(loss_fn())
                    flat[index] = original - eps
                    down = float(loss_fn())
                    flat[index] = original
                numeric = (up - down) / (2 * eps)
                analytic = float(grad[index])
                scale = max(abs(numeric), abs(analytic))
                assert abs(numeric - analytic) <= 1e-3 * scale + 1e-7, (name, index, numeric, analytic)
            checked.add(name.split(".")[0])
        assert checked == {"denoiser", "encoder"}
