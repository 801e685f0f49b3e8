"""Per-layer bit widths under a model-size budget.

Mixed modes raise every layer of the first `boost_blocks` blocks by one bit and
demote the least important layers of the remaining blocks. The patch embedding
and the head always stay at the base width.
"""
import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum

import tablib

from .exceptions import AllocationError, ConfigError, FormatError, UsageError
from .layers import BLOCK_KINDS, LayerId
from .vit import expected_shapes

logger = logging.getLogger(__name__)

MIN_BITS = 2


class AllocationMode(str, Enum):
    UNIFORM = "uniform"
    PAPER = "paper"
    GREEDY = "greedy"
    BOOST = "boost"

    @property
    def is_mixed(self):
        return self is not AllocationMode.UNIFORM


# named presets for the mixed-precision ablation rows
PRESETS = {
    "uniform": {"mode": AllocationMode.UNIFORM},
    "b1-boost": {"mode": AllocationMode.BOOST, "boost_blocks": 1},
    "b12-boost": {"mode": AllocationMode.BOOST, "boost_blocks": 2},
    "b12-fixed": {"mode": AllocationMode.PAPER, "boost_blocks": 2, "demote_per_block": 2, "guided": False},
    "b1-lrp": {"mode": AllocationMode.GREEDY, "boost_blocks": 1},
    "b12-lrp": {"mode": AllocationMode.GREEDY, "boost_blocks": 2},
}


@dataclass(frozen=True)
class LayerBits:
    w_bits: int
    a_bits: int

    def __str__(self):
        return f"{self.a_bits}" if self.w_bits is None else f"{self.w_bits}/{self.a_bits}"


@dataclass(frozen=True)
class BitAllocation:
    layers: dict
    mode: AllocationMode
    base_bits: int

    HEADERS = ("layer", "w_bits", "a_bits", "mode", "base_bits")

    def __post_init__(self):
        object.__setattr__(self, "mode", AllocationMode(self.mode))
        for layer_id, bits in self.layers.items():
            if bits.a_bits < MIN_BITS or (bits.w_bits is not None and bits.w_bits < MIN_BITS):
                raise AllocationError(f"{layer_id} is allocated fewer than {MIN_BITS} bits", layer=str(layer_id))
            if layer_id.has_weights == (bits.w_bits is None):
                raise AllocationError(f"{layer_id} weight bits do not match the layer kind", layer=str(layer_id))

    def __getitem__(self, layer_id):
        try:
            return self.layers[layer_id]
        except KeyError:
            raise ConfigError(f"layer {layer_id} has no allocation", layer=str(layer_id)) from None

    def layer_ids(self):
        return sorted(self.layers, key=lambda layer_id: layer_id.sort_key)

    def w_bits(self, layer_id):
        return self[layer_id].w_bits

    def a_bits(self, layer_id):
        return self[layer_id].a_bits

    def check_config(self, config):
        """Refuse allocations naming layers the config lacks, or missing some it has."""
        expected = set(config.layer_ids())
        unknown = set(self.layers) - expected
        if unknown:
            raise ConfigError(
                "allocation references layers absent from the config",
                layers=",".join(sorted(str(layer_id) for layer_id in unknown)),
            )
        missing = expected - set(self.layers)
        if missing:
            raise ConfigError(
                "allocation does not cover every layer",
                layers=",".join(sorted(str(layer_id) for layer_id in missing)),
            )

    def to_dataset(self):
        data = tablib.Dataset(headers=list(self.HEADERS), title="allocation")
        for layer_id in self.layer_ids():
            bits = self.layers[layer_id]
            data.append(
                (str(layer_id), "" if bits.w_bits is None else bits.w_bits, bits.a_bits, self.mode.value, self.base_bits)
            )
        return data

    def to_csv(self):
        return self.to_dataset().export("csv")

    @classmethod
    def from_csv(cls, text):
        data = tablib.Dataset().load(text, format="csv")
        if tuple(data.headers or ()) != cls.HEADERS:
            raise FormatError("allocation table has unexpected columns", columns=",".join(data.headers or ()))
        layers, modes, bases = {}, set(), set()
        try:
            for row in data.dict:
                w_bits = int(row["w_bits"]) if row["w_bits"] not in ("", None) else None
                layers[LayerId.parse(row["layer"])] = LayerBits(w_bits, int(row["a_bits"]))
                modes.add(row["mode"])
                bases.add(int(row["base_bits"]))
        except ValueError as exc:
            raise FormatError(f"malformed allocation table: {exc}") from exc
        if len(modes) != 1 or len(bases) != 1:
            raise FormatError("allocation table must name exactly one mode and base width")
        return cls(layers, AllocationMode(modes.pop()), bases.pop())


def layer_param_counts(model):
    """Weight plus bias count of each weight-bearing layer; accepts ViTParams or ViTConfig."""
    config = getattr(model, "config", model)
    shapes = expected_shapes(config)
    counts = {}
    for layer_id in config.layer_ids():
        prefix = layer_id.param_prefix
        if prefix is None:
            continue
        weight, bias = shapes[f"{prefix}.weight"], shapes[f"{prefix}.bias"]
        counts[layer_id] = weight[0] * weight[1] + bias[0]
    return counts


def model_size_bits(alloc, model):
    return sum(count * alloc.w_bits(layer_id) for layer_id, count in layer_param_counts(model).items())


def uniform_allocation(config, bits):
    if bits < MIN_BITS:
        raise UsageError(f"bit width must be >= {MIN_BITS}", bits=bits)
    layers = {
        layer_id: LayerBits(bits if layer_id.has_weights else None, bits) for layer_id in config.layer_ids()
    }
    return BitAllocation(layers, AllocationMode.UNIFORM, bits)


def _set(layers, layer_id, bits):
    layers[layer_id] = LayerBits(bits if layer_id.has_weights else None, bits)


def _modal_activation_bits(layers, blocks):
    """Activation-only sites take the most common width among their block's weight layers."""
    for block in range(1, blocks + 1):
        widths = Counter(
            layers[LayerId(block, kind)].a_bits for kind in BLOCK_KINDS if kind.has_weights
        )
        modal = max(widths.items(), key=lambda item: (item[1], item[0]))[0]
        for kind in BLOCK_KINDS:
            if not kind.has_weights:
                _set(layers, LayerId(block, kind), modal)


def _importance_of(importance, layer_id):
    # without scores every layer ties and the block/kind order decides
    if importance is None:
        return 1.0
    try:
        return importance[layer_id]
    except KeyError:
        raise AllocationError(f"no importance score for {layer_id}", layer=str(layer_id)) from None


def allocate_bits(
    importance,
    base_bits,
    mode,
    params,
    boost_blocks=2,
    demote_per_block=2,
    demote_depth=1,
):
    mode = AllocationMode(mode)
    config = params.config if hasattr(params, "config") else params
    baseline = uniform_allocation(config, base_bits)
    if not mode.is_mixed:
        return baseline

    low = base_bits - demote_depth
    if demote_depth < 1 or low < MIN_BITS:
        raise UsageError(
            f"mixed modes need base_bits - demote_depth >= {MIN_BITS}", base_bits=base_bits, demote_depth=demote_depth
        )
    if not 1 <= boost_blocks < config.blocks:
        raise UsageError("boost_blocks must leave at least one block to demote", boost_blocks=boost_blocks, blocks=config.blocks)

    layers = dict(baseline.layers)
    for block in range(1, boost_blocks + 1):
        for kind in BLOCK_KINDS:
            _set(layers, LayerId(block, kind), base_bits + 1)
    rest = range(boost_blocks + 1, config.blocks + 1)

    if mode is AllocationMode.PAPER:
        if not 1 <= demote_per_block <= len(BLOCK_KINDS):
            raise UsageError("demote_per_block out of range", demote_per_block=demote_per_block)
        for block in rest:
            ranked = sorted(
                (LayerId(block, kind) for kind in BLOCK_KINDS),
                key=lambda layer_id: (_importance_of(importance, layer_id), layer_id.sort_key),
            )
            for layer_id in ranked[:demote_per_block]:
                _set(layers, layer_id, low)
            logger.debug(f"Block {block}: demoted {', '.join(str(layer_id) for layer_id in ranked[:demote_per_block])}")

    elif mode is AllocationMode.GREEDY:
        counts = layer_param_counts(config)
        budget = model_size_bits(baseline, config)
        candidates = sorted(
            (LayerId(block, kind) for block in rest for kind in BLOCK_KINDS if kind.has_weights),
            key=lambda layer_id: (_importance_of(importance, layer_id) / counts[layer_id], layer_id.sort_key),
        )
        size = model_size_bits(BitAllocation(layers, mode, base_bits), config)
        demoted = []
        for layer_id in candidates:
            if size <= budget:
                break
            size -= counts[layer_id] * (layers[layer_id].w_bits - low)
            _set(layers, layer_id, low)
            demoted.append(layer_id)
        if size > budget:
            raise AllocationError(
                "size budget unattainable with the demotable layers", shortfall=size - budget, budget=budget
            )
        _modal_activation_bits(layers, config.blocks)
        logger.info(f"Greedy allocation demoted {len(demoted)} layers: {', '.join(str(layer_id) for layer_id in demoted)}")

    alloc = BitAllocation(layers, mode, base_bits)
    size, budget = model_size_bits(alloc, config), model_size_bits(baseline, config)
    logger.info(f"Allocation {mode.value}: {size} bits against a uniform budget of {budget} bits")
    return alloc


def allocate_preset(importance, base_bits, preset, params, demote_depth=1):
    try:
        options = dict(PRESETS[preset])
    except KeyError:
        raise UsageError(f"unknown allocation preset '{preset}'", choices=",".join(PRESETS)) from None
    if not options.pop("guided", True):
        importance = None
    return allocate_bits(importance, base_bits, params=params, demote_depth=demote_depth, **options)
