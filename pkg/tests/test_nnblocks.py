import unittest

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from condfuse.exceptions import ShapeError, ValidationError
from condfuse.nnblocks import (AttentionConfig, Backbone, BackboneConfig, FeaturePyramid, Linear, MLP,
                               MultiHeadAttention, TransformerEncoderDecoder)
from condfuse.tensorcore import Tensor, gradcheck, softmax

TINY_BACKBONE = BackboneConfig(level_channels=[4, 8, 12, 16])


def _dense_attention(attn, query, key_value):
    q = query @ attn.q_proj.weight.data + attn.q_proj.bias.data
    k = key_value @ attn.k_proj.weight.data + attn.k_proj.bias.data
    v = key_value @ attn.v_proj.weight.data + attn.v_proj.bias.data
    heads, head_dim = attn.cfg.num_heads, attn.cfg.head_dim
    outputs = []
    for h in range(heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        scores = q[:, cols] @ k[:, cols].T / np.sqrt(head_dim)
        outputs.append(softmax(Tensor(scores)).data @ v[:, cols])
    return np.concatenate(outputs, axis=1) @ attn.out_proj.weight.data + attn.out_proj.bias.data


class ModuleTests(unittest.TestCase):
    def test_parameter_names_follow_attribute_paths(self):
        mlp = MLP(4, 8, np.random.default_rng(0))

        names = [name for name, _ in mlp.named_parameters()]

        self.assertEqual(["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"], names)
        self.assertEqual("fc2.bias", mlp.fc2.bias.name)

    def test_backbone_names_nest_through_lists(self):
        backbone = Backbone(TINY_BACKBONE, np.random.default_rng(0))

        names = dict(backbone.named_parameters())

        self.assertIn("levels.0.blocks.0.conv1.weight", names)
        self.assertIn("levels.3.downsample.bias", names)

    def test_state_dict_round_trip(self):
        source = MLP(4, 8, np.random.default_rng(0))
        target = MLP(4, 8, np.random.default_rng(1))

        target.load_state_dict(source.state_dict())

        for (name, a), (_, b) in zip(source.named_parameters(), target.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    def test_load_state_dict_rejects_missing_names(self):
        state = MLP(4, 8, np.random.default_rng(0)).state_dict()
        del state["fc1.bias"]

        with self.assertRaises(ValidationError):
            MLP(4, 8, np.random.default_rng(0)).load_state_dict(state)

    def test_load_state_dict_rejects_wrong_shape(self):
        state = MLP(4, 8, np.random.default_rng(0)).state_dict()
        state["fc1.bias"] = np.zeros(3)

        with self.assertRaises(ShapeError):
            MLP(4, 8, np.random.default_rng(0)).load_state_dict(state)

    def test_freeze_stops_gradients(self):
        layer = Linear(3, 2, np.random.default_rng(0))
        layer.freeze()
        x = Tensor(np.ones((1, 3)), requires_grad=True)

        layer(x).sum().backward()

        self.assertIsNone(layer.weight.grad)
        self.assertIsNotNone(x.grad)

    def test_zero_init_linear_outputs_bias(self):
        layer = Linear(3, 2, np.random.default_rng(0), zero_init=True)

        out = layer(Tensor(np.ones((5, 3))))

        np.testing.assert_array_equal(np.zeros((5, 2)), out.data)


class AttentionTests(unittest.TestCase):
    def test_heads_must_divide_dim(self):
        with self.assertRaises(PydanticValidationError):
            AttentionConfig(model_dim=6, num_heads=4)

    def test_matches_dense_reference(self):
        rng = np.random.default_rng(2)
        attn = MultiHeadAttention(AttentionConfig(model_dim=8, num_heads=2), rng)
        query, key_value = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))

        out, weights = attn(Tensor(query), Tensor(key_value), return_weights=True)

        np.testing.assert_allclose(_dense_attention(attn, query, key_value), out.data, atol=1e-12)
        self.assertEqual((2, 3, 5), weights.shape)
        np.testing.assert_allclose(np.ones((2, 3)), weights.data.sum(axis=-1))

    def test_batched_equals_unbatched_rows(self):
        rng = np.random.default_rng(3)
        attn = MultiHeadAttention(AttentionConfig(model_dim=4, num_heads=1), rng)
        query, key_value = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 6, 4))

        batched = attn(Tensor(query), Tensor(key_value)).data

        for b in range(2):
            np.testing.assert_allclose(attn(Tensor(query[b]), Tensor(key_value[b])).data, batched[b], atol=1e-12)

    def test_empty_keys_raise(self):
        attn = MultiHeadAttention(AttentionConfig(model_dim=4), np.random.default_rng(0))

        with self.assertRaises(ShapeError):
            attn(Tensor(np.ones((2, 4))), Tensor(np.ones((0, 4))))

    def test_dim_mismatch_raises(self):
        attn = MultiHeadAttention(AttentionConfig(model_dim=4), np.random.default_rng(0))

        with self.assertRaises(ShapeError):
            attn(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 5))))

    def test_encoder_decoder_output_shapes(self):
        model = TransformerEncoderDecoder(8, 2, 1, 1, 3, np.random.default_rng(0))

        self.assertEqual((3, 8), model(Tensor(np.ones((5, 8)))).shape)
        self.assertEqual((2, 3, 8), model(Tensor(np.ones((2, 5, 8)))).shape)

    def test_encoder_decoder_ignores_sequence_order(self):
        rng = np.random.default_rng(6)
        model = TransformerEncoderDecoder(8, 2, 2, 2, 3, rng)
        sequence = rng.normal(size=(7, 8))

        original = model(Tensor(sequence)).data
        shuffled = model(Tensor(sequence[rng.permutation(7)])).data

        np.testing.assert_allclose(original, shuffled, atol=1e-10)

    def test_attention_gradcheck(self):
        rng = np.random.default_rng(4)
        attn = MultiHeadAttention(AttentionConfig(model_dim=4, num_heads=2), rng)
        query = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        key_value = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        weights = rng.normal(size=(3, 4))

        error = gradcheck(lambda: (attn(query, key_value) * weights).sum(), [query, key_value, attn.q_proj.weight])

        self.assertLessEqual(error, 1e-4)


class BackboneTests(unittest.TestCase):
    def test_level_shapes_for_batch(self):
        backbone = Backbone(TINY_BACKBONE, np.random.default_rng(0))

        pyramid = backbone(Tensor(np.zeros((2, 3, 64, 32))))

        self.assertEqual([(2, 4, 16, 8), (2, 8, 8, 4), (2, 12, 4, 2), (2, 16, 2, 1)], pyramid.shapes)
        self.assertTrue(pyramid.is_finite())

    def test_unbatched_image(self):
        backbone = Backbone(TINY_BACKBONE, np.random.default_rng(0))

        pyramid = backbone(Tensor(np.zeros((3, 32, 32))))

        self.assertEqual((16, 1, 1), pyramid[3].shape)

    def test_rejects_sizes_not_divisible_by_32(self):
        backbone = Backbone(TINY_BACKBONE, np.random.default_rng(0))

        with self.assertRaises(ShapeError):
            backbone(Tensor(np.zeros((1, 3, 48, 32))))

    def test_config_validation(self):
        for channels in ([4, 8, 12], [8, 8, 12, 16], [4, 8, 12, 18]):
            with self.assertRaises(PydanticValidationError):
                BackboneConfig(level_channels=channels)

    def test_more_blocks_means_more_parameters(self):
        one = Backbone(BackboneConfig(level_channels=[4, 8, 12, 16], blocks_per_level=1), np.random.default_rng(0))
        two = Backbone(BackboneConfig(level_channels=[4, 8, 12, 16], blocks_per_level=2), np.random.default_rng(0))

        self.assertLess(one.num_parameters(), two.num_parameters())

    def test_default_parameter_count(self):
        backbone = Backbone(BackboneConfig(), np.random.default_rng(0))

        self.assertEqual(436176, backbone.num_parameters())

    def test_pyramid_needs_four_levels(self):
        with self.assertRaises(ShapeError):
            FeaturePyramid([Tensor(np.zeros((1, 2, 2)))] * 3)


if __name__ == "__main__":
    unittest.main()
