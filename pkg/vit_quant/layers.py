"""Addressing for the quantized layers: seven per block plus the stem and the head."""
from dataclasses import dataclass
from enum import Enum

from .exceptions import ConfigError

STEM_BLOCK = 0
HEAD_BLOCK = -1


class LayerKind(str, Enum):
    QKV = "qkv"
    MATMUL1 = "matmul1"
    ATTN = "attn"
    MATMUL2 = "matmul2"
    PROJ = "proj"
    FC1 = "fc1"
    FC2 = "fc2"
    PATCH_EMBED = "patch_embed"
    HEAD = "head"

    @property
    def has_weights(self):
        return self in WEIGHT_KINDS


# order is the deterministic tie-break order
BLOCK_KINDS = (
    LayerKind.QKV,
    LayerKind.MATMUL1,
    LayerKind.ATTN,
    LayerKind.MATMUL2,
    LayerKind.PROJ,
    LayerKind.FC1,
    LayerKind.FC2,
)
WEIGHT_KINDS = frozenset(
    {
        LayerKind.QKV,
        LayerKind.PROJ,
        LayerKind.FC1,
        LayerKind.FC2,
        LayerKind.PATCH_EMBED,
        LayerKind.HEAD,
    }
)
# number of quantized activation inputs per layer kind
INPUT_SLOTS = {kind: 1 for kind in LayerKind}
INPUT_SLOTS[LayerKind.MATMUL1] = 2

# parameter prefix of the linear layer behind each weight-bearing kind
_WEIGHT_PREFIX = {
    LayerKind.QKV: "qkv",
    LayerKind.PROJ: "proj",
    LayerKind.FC1: "fc1",
    LayerKind.FC2: "fc2",
}


@dataclass(frozen=True)
class LayerId:
    block: int
    kind: LayerKind

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind is LayerKind.PATCH_EMBED and self.block != STEM_BLOCK:
            raise ConfigError("patch_embed lives in the stem", block=self.block)
        if self.kind is LayerKind.HEAD and self.block != HEAD_BLOCK:
            raise ConfigError("head lives after the last block", block=self.block)
        if self.kind in BLOCK_KINDS and self.block < 1:
            raise ConfigError("block layers are numbered from 1", block=self.block, kind=self.kind.value)

    @classmethod
    def stem(cls):
        return cls(STEM_BLOCK, LayerKind.PATCH_EMBED)

    @classmethod
    def head(cls):
        return cls(HEAD_BLOCK, LayerKind.HEAD)

    @classmethod
    def parse(cls, text):
        text = text.strip()
        if text == LayerKind.PATCH_EMBED.value:
            return cls.stem()
        if text == LayerKind.HEAD.value:
            return cls.head()
        block, _, kind = text.partition(".")
        if not block.startswith("b") or not block[1:].isdigit() or not kind:
            raise ConfigError(f"unrecognised layer id '{text}'")
        try:
            return cls(int(block[1:]), LayerKind(kind))
        except ValueError as exc:
            raise ConfigError(f"unrecognised layer kind in '{text}'") from exc

    def __str__(self):
        if self.kind in (LayerKind.PATCH_EMBED, LayerKind.HEAD):
            return self.kind.value
        return f"b{self.block}.{self.kind.value}"

    @property
    def in_block(self):
        return self.kind in BLOCK_KINDS

    @property
    def has_weights(self):
        return self.kind.has_weights

    @property
    def sort_key(self):
        if self.kind is LayerKind.PATCH_EMBED:
            return (0, 0, 0)
        if self.kind is LayerKind.HEAD:
            return (2, 0, 0)
        return (1, self.block, BLOCK_KINDS.index(self.kind))

    @property
    def param_prefix(self):
        """Name prefix of this layer's weight and bias in ViTParams."""
        if self.kind is LayerKind.PATCH_EMBED:
            return "patch_embed"
        if self.kind is LayerKind.HEAD:
            return "head"
        if self.kind not in _WEIGHT_PREFIX:
            return None
        return f"blocks.{self.block}.{_WEIGHT_PREFIX[self.kind]}"


def block_layer_ids(blocks):
    return [LayerId(block, kind) for block in range(1, blocks + 1) for kind in BLOCK_KINDS]


def all_layer_ids(blocks):
    return [LayerId.stem(), *block_layer_ids(blocks), LayerId.head()]
