import numpy as np
from django.test import SimpleTestCase

from vit_quant.exceptions import DegenerateError, DomainError, FormatError, ShapeError, UsageError
from vit_quant.layers import BLOCK_KINDS, LayerId, LayerKind, block_layer_ids
from vit_quant.lrp import (
    ImportanceTable,
    contribution_scores,
    importance_scores,
    layer_score_maps,
    lrp_run,
    propagate_binary,
    propagate_linear,
    relevance_map,
    score_importance,
)
from vit_quant.vit import ViTConfig, init_params

from .factories import small_config, small_dataset, small_params


def brute_force_linear(x, weight, relevance):
    result = np.zeros_like(x)
    for i in range(weight.shape[1]):
        positive = [max(x[j] * weight[j, i], 0.0) for j in range(len(x))]
        total = sum(positive)
        for j in range(len(x)):
            if total > 0:
                result[j] += positive[j] / total * relevance[i]
    return result


class LinearRuleTests(SimpleTestCase):
    def test_hand_examples(self):
        np.testing.assert_allclose(propagate_linear([1.0, 2.0], [[1.0], [1.0]], [1.0]), [1 / 3, 2 / 3])
        np.testing.assert_allclose(propagate_linear([1.0, 2.0], [[1.0], [-1.0]], [1.0]), [1.0, 0.0])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0.1, 1.0, 4)
        weight = rng.normal(size=(4, 3))
        relevance = rng.uniform(0.0, 1.0, 3)
        expected = brute_force_linear(x, weight, relevance)
        expected *= relevance.sum() / expected.sum()
        np.testing.assert_allclose(propagate_linear(x, weight, relevance), expected, rtol=1e-12)

    def test_conserves_relevance(self):
        rng = np.random.default_rng(1)
        result = propagate_linear(rng.normal(size=(2, 5, 6)), rng.normal(size=(6, 4)), np.full((2, 5, 4), 0.1))
        self.assertAlmostEqual(result.sum(), 4.0, places=12)
        self.assertTrue(np.all(result >= 0))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            propagate_linear(np.ones(3), np.ones((2, 2)), np.ones(2))


class BinaryRuleTests(SimpleTestCase):
    def test_add_with_equal_operands(self):
        a = np.array([0.5, 1.0, 2.0])
        r_a, r_b = propagate_binary(a, a.copy(), "add", np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(r_a, [0.5, 1.0, 1.5])
        np.testing.assert_allclose(r_b, [0.5, 1.0, 1.5])

    def test_add_with_zero_residual(self):
        relevance = np.array([0.2, 0.8])
        r_a, r_b = propagate_binary(np.array([1.0, 3.0]), np.zeros(2), "add", relevance)
        np.testing.assert_allclose(r_a, relevance)
        np.testing.assert_array_equal(r_b, np.zeros(2))

    def test_scalar_matmul(self):
        r_a, r_b = propagate_binary(np.array([[2.0]]), np.array([[3.0]]), "matmul", np.array([[1.0]]))
        self.assertAlmostEqual(float(r_a.sum() + r_b.sum()), 1.0)
        self.assertAlmostEqual(float(r_a.sum()), 0.5)

    def test_matmul_splits_along_positive_products(self):
        a = np.array([[1.0, 2.0]])
        b = np.array([[1.0], [1.0]])
        r_a, r_b = propagate_binary(a, b, "matmul", np.array([[3.0]]))
        np.testing.assert_allclose(r_a, [[0.5, 1.0]])
        np.testing.assert_allclose(r_b, [[0.5], [1.0]])

    def test_unknown_op(self):
        with self.assertRaises(UsageError):
            propagate_binary(np.ones(2), np.ones(2), "mul", np.ones(2))


class RelevanceMapTests(SimpleTestCase):
    def test_all_negative_product(self):
        np.testing.assert_array_equal(relevance_map(-np.ones((2, 3)), np.ones((2, 3)), head_axis=None), np.zeros((2, 3)))

    def test_single_head(self):
        grad = np.array([[[1.0, -2.0], [0.5, 3.0]]])
        relevance = np.array([[[2.0, 1.0], [4.0, 0.5]]])
        np.testing.assert_array_equal(relevance_map(grad, relevance), [[2.0, 0.0], [2.0, 1.5]])

    def test_opposite_heads(self):
        product = np.array([[1.0, 2.0], [3.0, 4.0]])
        grad = np.stack([product, -product])
        np.testing.assert_allclose(relevance_map(grad, np.ones_like(grad)), product / 2)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            relevance_map(np.ones((2, 3)), np.ones((3, 2)))


class PropagationTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.params = small_params(seed=3)
        cls.dataset = small_dataset(n_per_class=2)

    def test_relevance_is_conserved_down_to_the_image(self):
        state = lrp_run(self.params, self.dataset.images[0], target=1)
        self.assertLess(state.max_step_drift, 1e-9)
        self.assertAlmostEqual(float(state.input_relevance.sum()), 1.0, places=6)
        self.assertEqual(state.input_relevance.shape, (1, 16, 16, 3))

    def test_conservation_over_random_inputs(self):
        params = init_params(ViTConfig(), seed=4)
        rng = np.random.default_rng(4)
        for index in range(50):
            image = rng.uniform(size=params.config.image_shape)
            state = lrp_run(params, image, target=int(rng.integers(params.config.classes)))
            self.assertLessEqual(state.max_step_drift, 1e-8, msg=f"input {index}")
            self.assertAlmostEqual(float(state.input_relevance.sum()), 1.0, delta=1e-6, msg=f"input {index}")

    def test_maps_depend_on_the_target(self):
        image = self.dataset.images[0]
        first = lrp_run(self.params, image, target=0)
        second = lrp_run(self.params, image, target=1)
        self.assertGreater(np.abs(first.input_relevance - second.input_relevance).max(), 1e-6)
        qkv = LayerId(2, LayerKind.QKV)
        self.assertFalse(np.allclose(layer_score_maps(first)[qkv], layer_score_maps(second)[qkv], rtol=0, atol=1e-9))

    def test_parameters_carry_no_relevance(self):
        state = lrp_run(self.params, self.dataset.images[0], target=0)
        weight = state.record.params["blocks.1.qkv.weight"]
        self.assertNotIn(weight.index, state.relevance)

    def test_target_out_of_range(self):
        with self.assertRaises(DomainError):
            lrp_run(self.params, self.dataset.images[0], target=3)

    def test_score_maps_cover_every_block_layer(self):
        state = lrp_run(self.params, self.dataset.images[0], target=2)
        maps = layer_score_maps(state)
        self.assertEqual(set(maps), set(block_layer_ids(self.params.config.blocks)))
        tokens, heads = self.params.config.tokens, self.params.config.heads
        self.assertEqual(maps[LayerId(1, LayerKind.ATTN)].shape, (tokens, tokens))
        self.assertEqual(maps[LayerId(1, LayerKind.MATMUL1)].shape, (2 * tokens, self.params.config.head_dim))
        self.assertEqual(maps[LayerId(1, LayerKind.QKV)].shape, (tokens, self.params.config.embed_dim))
        self.assertGreater(heads, 1)
        self.assertTrue(all(np.all(score_map >= 0) for score_map in maps.values()))

    def test_contribution_scores(self):
        first = contribution_scores(self.params, self.dataset, samples=3, seed=1)
        second = contribution_scores(self.params, self.dataset, samples=3, seed=1)
        self.assertEqual(first, second)
        self.assertEqual(len(first), 7 * self.params.config.blocks)
        self.assertTrue(all(value >= 0 for value in first.values()))

    def test_sample_count_bounds(self):
        with self.assertRaises(UsageError):
            contribution_scores(self.params, self.dataset, samples=0)
        with self.assertRaises(UsageError):
            contribution_scores(self.params, self.dataset, samples=len(self.dataset) + 1)

    def test_score_importance_sums_to_one(self):
        table = score_importance(self.params, self.dataset, samples=2, seed=0, target="predicted")
        self.assertAlmostEqual(sum(table.importance.values()), 1.0, places=12)
        self.assertEqual(table.samples, 2)


class ImportanceTableTests(SimpleTestCase):
    def test_uniform_contributions(self):
        layer_ids = block_layer_ids(4)
        table = importance_scores({layer_id: 0.3 for layer_id in layer_ids})
        for layer_id in layer_ids:
            self.assertAlmostEqual(table[layer_id], 1 / 28)

    def test_two_layers(self):
        first, second = LayerId(1, LayerKind.QKV), LayerId(1, LayerKind.FC2)
        table = importance_scores({first: 3.0, second: 1.0})
        self.assertEqual(table[first], 0.75)
        self.assertEqual(table[second], 0.25)
        self.assertEqual(table.ranking(), [second, first])

    def test_all_zero(self):
        with self.assertRaises(DegenerateError):
            importance_scores({layer_id: 0.0 for layer_id in block_layer_ids(2)})

    def test_ties_follow_block_and_kind_order(self):
        table = importance_scores({layer_id: 1.0 for layer_id in block_layer_ids(2)})
        self.assertEqual(table.ranking()[:7], [LayerId(1, kind) for kind in BLOCK_KINDS])

    def test_csv_is_exact(self):
        rng = np.random.default_rng(0)
        table = importance_scores({layer_id: rng.uniform() for layer_id in block_layer_ids(3)}, samples=16)
        restored = ImportanceTable.from_csv(table.to_csv())
        self.assertEqual(restored.importance, table.importance)
        self.assertEqual(restored.contributions, table.contributions)
        self.assertEqual(restored.samples, 16)

    def test_csv_with_wrong_columns(self):
        with self.assertRaises(FormatError):
            ImportanceTable.from_csv("layer,score\nb1.qkv,0.5\n")


class SmallInstanceOracleTests(SimpleTestCase):
    """One block, one head, two features and two tokens, checked against loop implementations."""

    def test_qkv_input_relevance(self):
        config = small_config(image_size=1, patch_size=1, embed_dim=2, heads=1, blocks=1, classes=2)
        params = init_params(config, seed=4)
        image = np.random.default_rng(0).uniform(size=(1, 1, 3))
        state = lrp_run(params, image, target=1)

        (normed,) = state.record.nodes[LayerId(1, LayerKind.QKV)]
        (product,) = [node for node in state.tape.consumers(normed) if node.op == "matmul"]
        weight = state.tape.nodes[product.inputs[1]].value
        upstream = state.relevance_of(product)[0]
        x = normed.value[0]
        self.assertEqual(x.shape, (2, 2))

        expected = np.stack([brute_force_linear(row, weight, r) for row, r in zip(x, upstream)])
        expected *= upstream.sum() / expected.sum()
        np.testing.assert_allclose(state.relevance_of(normed)[0], expected, atol=1e-8)
        self.assertAlmostEqual(float(state.input_relevance.sum()), 1.0, places=6)

    def test_residual_split_matches_loops(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        relevance = rng.uniform(size=(2, 2))
        expected_a, expected_b = np.zeros((2, 2)), np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                pa, pb = max(a[i, j], 0.0), max(b[i, j], 0.0)
                if pa + pb > 0:
                    expected_a[i, j] = pa / (pa + pb) * relevance[i, j]
                    expected_b[i, j] = pb / (pa + pb) * relevance[i, j]
        scale = relevance.sum() / (expected_a.sum() + expected_b.sum())
        r_a, r_b = propagate_binary(a, b, "add", relevance)
        np.testing.assert_allclose(r_a, expected_a * scale, atol=1e-12)
        np.testing.assert_allclose(r_b, expected_b * scale, atol=1e-12)


class ContributionPropertyTests(SimpleTestCase):
    def test_single_sample_equals_the_map_means(self):
        params = small_params(seed=8)
        dataset = small_dataset(n_per_class=1)
        scores = contribution_scores(params, dataset, samples=1, seed=0)
        chosen = int(np.random.default_rng(0).choice(len(dataset), size=1, replace=False)[0])
        state = lrp_run(params, dataset.images[chosen], int(dataset.labels[chosen]))
        for layer_id, score_map in layer_score_maps(state).items():
            self.assertAlmostEqual(scores[layer_id], float(score_map.mean()), places=14)

    def test_rescaling_keeps_importance_and_ranking(self):
        rng = np.random.default_rng(1)
        contributions = {layer_id: rng.uniform() for layer_id in block_layer_ids(4)}
        table = importance_scores(contributions)
        scaled = importance_scores({layer_id: 8.0 * value for layer_id, value in contributions.items()})
        self.assertEqual(scaled.ranking(), table.ranking())
        for layer_id in contributions:
            self.assertAlmostEqual(scaled[layer_id], table[layer_id], places=15)
        self.assertAlmostEqual(sum(table.importance.values()), 1.0, delta=1e-10)
