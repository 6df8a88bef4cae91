import numpy as np
import pytest

from sepformer.attention import AttentionSpec, positional_encoding
from sepformer.gradcheck import check_gradients
from sepformer.ndkernel import Tensor
from sepformer.transformer import (init_transformer_layer,
                                   init_transformer_stack,
                                   transformer_layer, transformer_stack)


def zero_params(params):
    for t in params.named("x").values():
        t.data[...] = 0.0
    return params


@pytest.fixture
def spec():
    return AttentionSpec("full", heads=2, d_model=8)


class TestLayer:
    def test_zero_weights_pass_input_through(self, spec, rng):
        params = zero_params(init_transformer_layer(
            spec, 8, 12, np.random.default_rng(0)))
        z = rng.standard_normal((8, 6))
        out = transformer_layer(Tensor(z), params, spec)
        np.testing.assert_array_equal(out.data, z)

    def test_residual_wiring_audit_bit_exact(self, spec, rng):
        params = init_transformer_layer(spec, 8, 12,
                                        np.random.default_rng(1))
        z = Tensor(rng.standard_normal((8, 6)))
        internals = {}
        out = transformer_layer(z, params, spec, internals=internals)
        expected = (internals["ffw_branch"].data
                    + internals["attn_branch"].data) + z.data
        assert np.array_equal(out.data, expected)

    def test_attention_branch_is_zero_when_output_matrix_is_zero(
            self, spec, rng):
        params = init_transformer_layer(spec, 8, 12,
                                        np.random.default_rng(2))
        params.attn.wo.data[...] = 0.0
        z = Tensor(rng.standard_normal((8, 6)))
        internals = {}
        transformer_layer(z, params, spec, internals=internals)
        np.testing.assert_array_equal(internals["attn_branch"].data,
                                      np.zeros((8, 6)))

    def test_gradient_through_full_layer(self, spec):
        rng = np.random.default_rng(3)
        params = init_transformer_layer(spec, 8, 12, rng)
        z = Tensor(rng.uniform(-1, 1, (8, 6)))
        tensors = [z] + list(params.named("p").values())
        err = check_gradients(lambda: transformer_layer(z, params, spec),
                              tensors)
        assert err < 1e-4


class TestStack:
    def test_zero_layers_add_positions_and_double_residual(self, spec, rng):
        params = init_transformer_stack(spec, 8, 12, 3,
                                        np.random.default_rng(0))
        zero_params(params)
        z = rng.standard_normal((8, 5))
        out = transformer_stack(Tensor(z), params, spec)
        table = positional_encoding(5, 8).data.T
        np.testing.assert_array_equal(out.data, (z + table) + z)

    def test_positional_encoding_can_be_disabled(self, spec, rng):
        params = init_transformer_stack(spec, 8, 12, 2,
                                        np.random.default_rng(0),
                                        use_positional_encoding=False)
        zero_params(params)
        z = rng.standard_normal((8, 5))
        out = transformer_stack(Tensor(z), params, spec)
        np.testing.assert_array_equal(out.data, 2 * z)

    def test_disabling_positions_changes_real_output(self, spec, rng):
        z = Tensor(rng.standard_normal((8, 5)))
        with_pe = transformer_stack(
            z, init_transformer_stack(spec, 8, 12, 2,
                                      np.random.default_rng(4)), spec)
        without_pe = transformer_stack(
            z, init_transformer_stack(spec, 8, 12, 2,
                                      np.random.default_rng(4),
                                      use_positional_encoding=False), spec)
        assert not np.allclose(with_pe.data, without_pe.data)

    @pytest.mark.parametrize("depth", [1, 4, 8])
    def test_output_shape_preserved(self, spec, rng, depth):
        params = init_transformer_stack(spec, 8, 12, depth,
                                        np.random.default_rng(0))
        out = transformer_stack(Tensor(rng.standard_normal((8, 7))),
                                params, spec)
        assert out.shape == (8, 7)

    def test_depth_must_be_positive(self, spec):
        with pytest.raises(ValueError):
            init_transformer_stack(spec, 8, 12, 0, np.random.default_rng(0))

    def test_gradient_through_stack(self, spec):
        rng = np.random.default_rng(5)
        params = init_transformer_stack(spec, 8, 12, 2, rng)
        z = Tensor(rng.uniform(-1, 1, (8, 5)))
        err = check_gradients(lambda: transformer_stack(z, params, spec),
                              [z])
        assert err < 1e-4


def test_layer_parameter_count_formula():
    # full-size layer: q/k/v (3*d*F) + recombination (d*d) + two norms
    # (4*F) + feed-forward (F*dff + dff + dff*F + F)
    spec = AttentionSpec("full", heads=8, d_model=256)
    params = init_transformer_layer(spec, 256, 1024,
                                    np.random.default_rng(0))
    total = sum(t.size for t in params.named("p").values())
    expected = 3 * 256 * 256 + 256 * 256 + 4 * 256 \
        + 256 * 1024 + 1024 + 1024 * 256 + 256
    assert total == expected == 788736
