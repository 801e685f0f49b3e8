import numpy as np
from django.test import SimpleTestCase

from vit_quant.bit_allocator import (
    AllocationMode,
    BitAllocation,
    PRESETS,
    allocate_bits,
    allocate_preset,
    layer_param_counts,
    model_size_bits,
    uniform_allocation,
)
from vit_quant.exceptions import AllocationError, ConfigError, FormatError, UsageError
from vit_quant.layers import BLOCK_KINDS, LayerId, LayerKind, block_layer_ids
from vit_quant.vit import ViTConfig

# patch_embed + 4 x (qkv + proj + fc1 + fc2) + head for the default toy config
DEFAULT_PARAM_COUNT = (192 * 64 + 64) + 4 * ((64 * 192 + 192) + (64 * 64 + 64) + (64 * 256 + 256) + (256 * 64 + 64)) + (64 * 3 + 3)


def random_importance(blocks, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.uniform(size=7 * blocks)
    return {layer_id: value / values.sum() for layer_id, value in zip(block_layer_ids(blocks), values)}


class SizeTests(SimpleTestCase):
    def test_parameter_count_closed_form(self):
        counts = layer_param_counts(ViTConfig())
        self.assertEqual(sum(counts.values()), DEFAULT_PARAM_COUNT)
        self.assertEqual(DEFAULT_PARAM_COUNT, 211459)
        self.assertNotIn(LayerId(1, LayerKind.ATTN), counts)

    def test_uniform_size(self):
        config = ViTConfig()
        self.assertEqual(model_size_bits(uniform_allocation(config, 4), config), 4 * DEFAULT_PARAM_COUNT)

    def test_uniform_allocation_covers_every_layer(self):
        alloc = uniform_allocation(ViTConfig(), 6)
        self.assertEqual(alloc.layer_ids(), sorted(ViTConfig().layer_ids(), key=lambda layer_id: layer_id.sort_key))
        self.assertIsNone(alloc.w_bits(LayerId(2, LayerKind.MATMUL2)))
        self.assertEqual(alloc.a_bits(LayerId(2, LayerKind.MATMUL2)), 6)

    def test_uniform_below_minimum(self):
        with self.assertRaises(UsageError):
            uniform_allocation(ViTConfig(), 1)


class FixedDemotionModeTests(SimpleTestCase):
    def test_twelve_blocks(self):
        config = ViTConfig(blocks=12)
        alloc = allocate_bits(random_importance(12), 4, AllocationMode.PAPER, config)
        for block in (1, 2):
            for kind in BLOCK_KINDS:
                bits = alloc[LayerId(block, kind)]
                self.assertEqual(bits.a_bits, 5)
                self.assertEqual(bits.w_bits, 5 if kind.has_weights else None)
        for block in range(3, 13):
            widths = [alloc.a_bits(LayerId(block, kind)) for kind in BLOCK_KINDS]
            self.assertEqual(widths.count(3), 2)
            self.assertEqual(widths.count(4), 5)
        self.assertEqual(alloc.w_bits(LayerId.stem()), 4)
        self.assertEqual(alloc.w_bits(LayerId.head()), 4)

    def test_least_important_layers_are_demoted(self):
        importance = {layer_id: 1.0 for layer_id in block_layer_ids(4)}
        importance[LayerId(3, LayerKind.FC2)] = 0.1
        importance[LayerId(3, LayerKind.ATTN)] = 0.2
        alloc = allocate_bits(importance, 4, "paper", ViTConfig())
        self.assertEqual(alloc.a_bits(LayerId(3, LayerKind.FC2)), 3)
        self.assertEqual(alloc.a_bits(LayerId(3, LayerKind.ATTN)), 3)
        self.assertEqual(alloc.a_bits(LayerId(3, LayerKind.QKV)), 4)

    def test_missing_importance(self):
        with self.assertRaises(AllocationError):
            allocate_bits({}, 4, "paper", ViTConfig())


class GreedyModeTests(SimpleTestCase):
    def test_budget_is_met(self):
        config = ViTConfig()
        alloc = allocate_bits(random_importance(4), 4, AllocationMode.GREEDY, config)
        budget = model_size_bits(uniform_allocation(config, 4), config)
        self.assertLessEqual(model_size_bits(alloc, config), budget)
        for block in (3, 4):
            for kind in BLOCK_KINDS:
                self.assertEqual(alloc.a_bits(LayerId(block, kind)), 3)

    def test_uniform_scores_are_deterministic(self):
        config = ViTConfig()
        importance = {layer_id: 1.0 for layer_id in block_layer_ids(4)}
        first = allocate_bits(importance, 4, "greedy", config)
        second = allocate_bits(importance, 4, "greedy", config)
        self.assertEqual(first.layers, second.layers)
        self.assertLessEqual(model_size_bits(first, config), model_size_bits(uniform_allocation(config, 4), config))

    def test_activation_sites_follow_their_block(self):
        alloc = allocate_bits(random_importance(4), 4, "greedy", ViTConfig())
        self.assertEqual(alloc.a_bits(LayerId(1, LayerKind.MATMUL1)), 5)
        self.assertEqual(alloc.a_bits(LayerId(4, LayerKind.ATTN)), 3)

    def test_random_tables_stay_within_budget(self):
        for blocks in (4, 12):
            config = ViTConfig(blocks=blocks)
            budget = model_size_bits(uniform_allocation(config, 4), config)
            for seed in range(100 if blocks == 4 else 20):
                alloc = allocate_bits(random_importance(blocks, seed), 4, "greedy", config)
                self.assertLessEqual(model_size_bits(alloc, config), budget, msg=f"blocks={blocks} seed={seed}")

    def test_unattainable_budget(self):
        with self.assertRaises(AllocationError) as ctx:
            allocate_bits(random_importance(3), 4, "greedy", ViTConfig(blocks=3))
        self.assertIn("shortfall", ctx.exception.context)

    def test_demotion_below_minimum(self):
        with self.assertRaises(UsageError):
            allocate_bits(random_importance(4), 2, "greedy", ViTConfig())


class PresetTests(SimpleTestCase):
    def test_unguided_preset_uses_the_tie_break_order(self):
        alloc = allocate_preset(random_importance(4), 4, "b12-fixed", ViTConfig())
        for block in (3, 4):
            self.assertEqual(alloc.a_bits(LayerId(block, LayerKind.QKV)), 3)
            self.assertEqual(alloc.a_bits(LayerId(block, LayerKind.MATMUL1)), 3)
            self.assertEqual(alloc.a_bits(LayerId(block, LayerKind.ATTN)), 4)

    def test_boost_preset_exceeds_the_budget(self):
        config = ViTConfig()
        alloc = allocate_preset(None, 4, "b12-boost", config)
        self.assertGreater(model_size_bits(alloc, config), model_size_bits(uniform_allocation(config, 4), config))
        self.assertEqual(alloc.a_bits(LayerId(3, LayerKind.FC1)), 4)

    def test_single_block_boost(self):
        alloc = allocate_preset(None, 4, "b1-boost", ViTConfig())
        self.assertEqual(alloc.w_bits(LayerId(1, LayerKind.QKV)), 5)
        self.assertEqual(alloc.w_bits(LayerId(2, LayerKind.QKV)), 4)

    def test_relevance_presets_differ_only_in_boosted_blocks(self):
        first, both = PRESETS["b1-lrp"], PRESETS["b12-lrp"]
        self.assertEqual(first["mode"], both["mode"])
        self.assertEqual({**first, "boost_blocks": both["boost_blocks"]}, both)
        config = ViTConfig()
        budget = model_size_bits(uniform_allocation(config, 4), config)
        for preset in ("b1-lrp", "b12-lrp"):
            alloc = allocate_preset(random_importance(4), 4, preset, config)
            self.assertLessEqual(model_size_bits(alloc, config), budget, preset)

    def test_unknown_preset(self):
        with self.assertRaises(UsageError):
            allocate_preset(None, 4, "b3-lrp", ViTConfig())


class BitAllocationTests(SimpleTestCase):
    def test_missing_layer(self):
        alloc = uniform_allocation(ViTConfig(blocks=2), 4)
        with self.assertRaises(ConfigError):
            alloc[LayerId(3, LayerKind.QKV)]

    def test_check_config(self):
        alloc = uniform_allocation(ViTConfig(blocks=6), 4)
        with self.assertRaises(ConfigError):
            alloc.check_config(ViTConfig(blocks=4))
        with self.assertRaises(ConfigError):
            uniform_allocation(ViTConfig(blocks=2), 4).check_config(ViTConfig(blocks=4))
        alloc.check_config(ViTConfig(blocks=6))

    def test_csv(self):
        alloc = allocate_bits(random_importance(4), 4, "greedy", ViTConfig())
        restored = BitAllocation.from_csv(alloc.to_csv())
        self.assertEqual(restored.layers, alloc.layers)
        self.assertIs(restored.mode, AllocationMode.GREEDY)
        self.assertEqual(restored.base_bits, 4)

    def test_csv_mixing_modes(self):
        text = "layer,w_bits,a_bits,mode,base_bits\npatch_embed,4,4,uniform,4\nhead,4,4,greedy,4\n"
        with self.assertRaises(FormatError):
            BitAllocation.from_csv(text)
