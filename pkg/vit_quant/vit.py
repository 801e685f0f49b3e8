"""Compact vision transformer recorded on a Tape.

Images are channel-last (H, W, C); a single image or a batch (B, H, W, C) is
accepted. Every graph carries a batch axis internally.
"""
import logging
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np
from scipy.stats import truncnorm

from .exceptions import ConfigError, ContractError, DivergenceError, ShapeError, UsageError
from .layers import LayerId, LayerKind, all_layer_ids
from .quantizers import FULL_PRECISION_BITS, Scheme, fake_quant
from .tensor_ad import Tape, backward, freeze

logger = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 4
    mlp_ratio: float = 4.0
    classes: int = 3
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "embed_dim", "heads", "blocks", "classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive count", **{name: getattr(self, name)})
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads", embed_dim=self.embed_dim, heads=self.heads)
        if self.image_size % self.patch_size:
            raise ConfigError(
                "image_size must be divisible by patch_size",
                image_size=self.image_size,
                patch_size=self.patch_size,
            )
        if self.mlp_ratio <= 0 or int(self.mlp_ratio * self.embed_dim) < 1:
            raise ConfigError("mlp_ratio must be positive", mlp_ratio=self.mlp_ratio)
        if self.ln_eps < 0:
            raise ConfigError("ln_eps must be non-negative", ln_eps=self.ln_eps)

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def tokens(self):
        return self.num_patches + 1

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self):
        return int(self.mlp_ratio * self.embed_dim)

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def image_shape(self):
        return (self.image_size, self.image_size, self.channels)

    def layer_ids(self):
        return all_layer_ids(self.blocks)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError("unknown ViT config fields", fields=",".join(sorted(unknown)))
        return cls(**data)


def expected_shapes(config):
    """Parameter names and shapes in their canonical order."""
    D, hidden = config.embed_dim, config.hidden_dim
    shapes = {
        "patch_embed.weight": (config.patch_dim, D),
        "patch_embed.bias": (D,),
        "cls_token": (D,),
        "pos_embed": (config.tokens, D),
    }
    for block in range(1, config.blocks + 1):
        prefix = f"blocks.{block}"
        shapes.update(
            {
                f"{prefix}.ln1.gamma": (D,),
                f"{prefix}.ln1.beta": (D,),
                f"{prefix}.qkv.weight": (D, 3 * D),
                f"{prefix}.qkv.bias": (3 * D,),
                f"{prefix}.proj.weight": (D, D),
                f"{prefix}.proj.bias": (D,),
                f"{prefix}.ln2.gamma": (D,),
                f"{prefix}.ln2.beta": (D,),
                f"{prefix}.fc1.weight": (D, hidden),
                f"{prefix}.fc1.bias": (hidden,),
                f"{prefix}.fc2.weight": (hidden, D),
                f"{prefix}.fc2.bias": (D,),
            }
        )
    shapes.update(
        {
            "norm.gamma": (D,),
            "norm.beta": (D,),
            "head.weight": (D, config.classes),
            "head.bias": (config.classes,),
        }
    )
    return shapes


class ViTParams:
    """Immutable parameter set; `replace` returns a new instance."""

    def __init__(self, config, tensors):
        self.config = config
        shapes = expected_shapes(config)
        missing = set(shapes) - set(tensors)
        extra = set(tensors) - set(shapes)
        if missing or extra:
            raise ConfigError(
                "parameter names do not match the config",
                missing=",".join(sorted(missing)) or "-",
                unexpected=",".join(sorted(extra)) or "-",
            )
        self.tensors = {}
        for name, shape in shapes.items():
            value = freeze(tensors[name])
            if value.shape != shape:
                raise ShapeError(f"parameter {name} has the wrong shape", expected=shape, got=value.shape)
            if not np.all(np.isfinite(value)):
                raise ContractError(f"parameter {name} has non-finite entries")
            self.tensors[name] = value

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def replace(self, updates):
        unknown = set(updates) - set(self.tensors)
        if unknown:
            raise ConfigError("cannot replace unknown parameters", names=",".join(sorted(unknown)))
        return ViTParams(self.config, {**self.tensors, **updates})

    def layer_param_count(self, layer_id):
        prefix = layer_id.param_prefix
        if prefix is None:
            return 0
        return self[f"{prefix}.weight"].size + self[f"{prefix}.bias"].size

    def equals(self, other):
        return self.config == other.config and all(
            np.array_equal(value, other[name]) for name, value in self.items()
        )


def init_params(config, seed=0):
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".gamma"):
            tensors[name] = np.ones(shape)
        elif name.endswith((".bias", ".beta")):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = truncnorm.rvs(-2.0, 2.0, scale=INIT_STD, size=shape, random_state=rng)
    return ViTParams(config, tensors)


@dataclass
class ActivationRecord:
    """Tape nodes observed at every quantization point of one graph."""

    nodes: dict = field(default_factory=dict)
    attention: dict = field(default_factory=dict)
    hidden: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    logits: object = None

    def values(self):
        return {layer_id: tuple(node.value for node in nodes) for layer_id, nodes in self.nodes.items()}

    def inputs(self, layer_id):
        try:
            return tuple(node.value for node in self.nodes[layer_id])
        except KeyError:
            raise UsageError(f"no activation recorded for {layer_id}", layer=str(layer_id)) from None


class GraphHook:
    """Full-precision hook: records what it sees and changes nothing."""

    def __init__(self):
        self.record = ActivationRecord()

    def weight(self, layer_id, value):
        return value

    def activation(self, tape, layer_id, *nodes):
        self.record.nodes[layer_id] = nodes
        return nodes


def _keeps_full_precision(qp):
    # log codes keep a fixed sqrt(2) ratio at any width
    return qp.scheme is not Scheme.UNIFORM and qp.bits >= FULL_PRECISION_BITS


class QuantizingHook(GraphHook):
    """Routes weights and inputs of every layer through fake quantization."""

    def __init__(self, qmodel):
        super().__init__()
        self.qmodel = qmodel

    def weight(self, layer_id, value):
        return fake_quant(value, self.qmodel.weight_params(layer_id))

    def activation(self, tape, layer_id, *nodes):
        layer = self.qmodel.layer(layer_id)
        quantized = tuple(
            node
            if _keeps_full_precision(qp)
            else tape.straight_through(node, partial(fake_quant, qp=qp), label=str(layer_id), name=f"{layer_id}.fq{slot}")
            for slot, (node, qp) in enumerate(zip(nodes, layer.inputs))
        )
        self.record.nodes[layer_id] = nodes
        return quantized


def _as_batch(config, images):
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != config.image_shape:
        raise ConfigError("image shape does not match the config", expected=config.image_shape, got=images.shape)
    return images, single


def _linear(tape, hook, params, layer_id, x):
    prefix = layer_id.param_prefix
    record = hook.record.params
    weight = tape.param(hook.weight(layer_id, params[f"{prefix}.weight"]), name=f"{prefix}.weight")
    bias = tape.param(params[f"{prefix}.bias"], name=f"{prefix}.bias")
    record[weight.name] = weight
    record[bias.name] = bias
    return tape.linear(x, weight, bias, name=str(layer_id))


def _layernorm(tape, hook, params, prefix, x, eps):
    gamma = tape.param(params[f"{prefix}.gamma"], name=f"{prefix}.gamma")
    beta = tape.param(params[f"{prefix}.beta"], name=f"{prefix}.beta")
    hook.record.params[gamma.name] = gamma
    hook.record.params[beta.name] = beta
    return tape.layernorm(x, gamma, beta, eps=eps, name=prefix)


def _block(tape, hook, params, block, x):
    config = params.config
    B, T, D = x.shape
    h, Dh = config.heads, config.head_dim
    prefix = f"blocks.{block}"

    normed = _layernorm(tape, hook, params, f"{prefix}.ln1", x, config.ln_eps)
    (normed,) = hook.activation(tape, LayerId(block, LayerKind.QKV), normed)
    qkv = _linear(tape, hook, params, LayerId(block, LayerKind.QKV), normed)
    qkv = tape.reshape(qkv, (B, T, 3, h, Dh))
    qkv = tape.transpose(qkv, (2, 0, 3, 1, 4))
    q = tape.take(qkv, 0, 0, name=f"{prefix}.q")
    k = tape.take(qkv, 0, 1, name=f"{prefix}.k")
    v = tape.take(qkv, 0, 2, name=f"{prefix}.v")

    q, k = hook.activation(tape, LayerId(block, LayerKind.MATMUL1), q, k)
    scores = tape.matmul(q, tape.transpose(k, (0, 1, 3, 2)), name=f"{prefix}.matmul1")
    scores = tape.scale(scores, Dh**-0.5)
    attn = tape.softmax(scores, axis=-1, name=f"{prefix}.attn")
    hook.record.attention[block] = attn
    (attn,) = hook.activation(tape, LayerId(block, LayerKind.ATTN), attn)

    (v,) = hook.activation(tape, LayerId(block, LayerKind.MATMUL2), v)
    context = tape.matmul(attn, v, name=f"{prefix}.matmul2")
    context = tape.transpose(context, (0, 2, 1, 3))
    context = tape.reshape(context, (B, T, D))
    (context,) = hook.activation(tape, LayerId(block, LayerKind.PROJ), context)
    x = tape.add(x, _linear(tape, hook, params, LayerId(block, LayerKind.PROJ), context))

    normed = _layernorm(tape, hook, params, f"{prefix}.ln2", x, config.ln_eps)
    (normed,) = hook.activation(tape, LayerId(block, LayerKind.FC1), normed)
    hidden = tape.gelu(_linear(tape, hook, params, LayerId(block, LayerKind.FC1), normed))
    (hidden,) = hook.activation(tape, LayerId(block, LayerKind.FC2), hidden)
    return tape.add(x, _linear(tape, hook, params, LayerId(block, LayerKind.FC2), hidden), name=f"{prefix}.out")


def _patchify(tape, config, images):
    B, g, p, C = images.shape[0], config.grid, config.patch_size, config.channels
    x = tape.reshape(images, (B, g, p, g, p, C))
    x = tape.transpose(x, (0, 1, 3, 2, 4, 5))
    return tape.reshape(x, (B, config.num_patches, config.patch_dim), name="patches")


def build_graph(tape, params, images, hook):
    """Record the full forward pass of `images` (B, H, W, C) on `tape`; returns the logits node."""
    config = params.config
    B = images.shape[0]
    image_node = tape.input(images, name="images")
    patches = _patchify(tape, config, image_node)
    (patches,) = hook.activation(tape, LayerId.stem(), patches)
    tokens = _linear(tape, hook, params, LayerId.stem(), patches)

    cls_token = tape.param(params["cls_token"], name="cls_token")
    pos_embed = tape.param(params["pos_embed"], name="pos_embed")
    hook.record.params.update({"cls_token": cls_token, "pos_embed": pos_embed})
    cls_tokens = tape.broadcast(cls_token, (B, 1, config.embed_dim))
    x = tape.add(tape.concat([cls_tokens, tokens], axis=1), pos_embed, name="embed")
    hook.record.hidden[0] = x

    for block in range(1, config.blocks + 1):
        x = _block(tape, hook, params, block, x)
        hook.record.hidden[block] = x

    x = _layernorm(tape, hook, params, "norm", x, config.ln_eps)
    cls_out = tape.take(x, 1, 0, name="cls_out")
    (cls_out,) = hook.activation(tape, LayerId.head(), cls_out)
    logits = _linear(tape, hook, params, LayerId.head(), cls_out)
    hook.record.logits = logits
    return logits


@dataclass
class ForwardResult:
    logits: np.ndarray
    record: ActivationRecord = None
    tape: Tape = None


def _run(params, image, hook):
    images, single = _as_batch(params.config, image)
    tape = Tape()
    logits = build_graph(tape, params, images, hook).value
    return (logits[0] if single else logits), tape


def forward(params, image, hooks=False):
    hook = GraphHook()
    logits, tape = _run(params, image, hook)
    if not hooks:
        return ForwardResult(logits)
    return ForwardResult(logits, hook.record, tape)


def forward_quantized(params, image, qmodel, hooks=False):
    """Forward pass with every layer's weights and inputs fake-quantized.

    LayerNorm, residual adds and GELU stay in full precision. Parameters folded
    during calibration replace their originals first.
    """
    hook = QuantizingHook(qmodel)
    logits, tape = _run(qmodel.fold_into(params), image, hook)
    if not hooks:
        return ForwardResult(logits)
    return ForwardResult(logits, hook.record, tape)


def predict_logits(params, images, qmodel=None, batch_size=64):
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise UsageError("no images to evaluate")
    run = forward if qmodel is None else partial(forward_quantized, qmodel=qmodel)
    chunks = [run(params, images[start : start + batch_size]).logits for start in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0)


def mean_loss(params, images, labels, batch_size=64):
    logits = predict_logits(params, images, batch_size=batch_size)
    labels = np.asarray(labels, dtype=np.int64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def train_toy(params, dataset, epochs=30, lr=0.05, seed=0, batch_size=32):
    """Plain minibatch SGD on the cross-entropy loss."""
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    if lr <= 0:
        raise UsageError("learning rate must be positive", lr=lr)
    if epochs < 0 or batch_size < 1:
        raise UsageError("epochs must be >= 0 and batch_size >= 1", epochs=epochs, batch_size=batch_size)

    rng = np.random.default_rng(seed)
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    logger.info(f"Training toy ViT on {len(labels)} images for {epochs} epochs (lr={lr}, seed={seed})")

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(labels))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            hook = GraphHook()
            tape = Tape()
            logits = build_graph(tape, params, images[batch], hook)
            loss = tape.cross_entropy(logits, labels[batch])
            if not np.isfinite(loss.value):
                raise DivergenceError("training loss is not finite", epoch=epoch)
            grads = backward(tape, loss)
            params = params.replace(
                {name: node.value - lr * grads[node] for name, node in hook.record.params.items()}
            )
            losses.append(float(loss.value) * len(batch))
        epoch_loss = sum(losses) / len(labels)
        logger.info(f"Epoch {epoch}/{epochs}: loss={epoch_loss:.6f}")
    return params


def plant_ln_outliers(params, channels=2, gain=1024.0):
    """Scale the `channels` LayerNorm outputs with the largest |gamma| at every ln1/ln2 by `gain`.

    The matching input rows of qkv/fc1 are divided by `gain`, so the float network is
    unchanged for power-of-two gains while the LayerNorm outputs carry the strong
    inter-channel variation the reparameterized quantizers are built for.
    """
    if channels == 0 or gain == 1.0:
        return params
    config = params.config
    if not 0 < channels <= config.embed_dim:
        raise UsageError("outlier channels must lie in [0, embed_dim]", channels=channels)
    mantissa, _ = np.frexp(gain)
    if gain < 1.0 or mantissa != 0.5:
        raise UsageError("outlier gain must be a power of two >= 1", gain=gain)

    updates = {}
    for block in range(1, config.blocks + 1):
        prefix = f"blocks.{block}"
        for norm, following in (("ln1", "qkv"), ("ln2", "fc1")):
            gamma = params[f"{prefix}.{norm}.gamma"]
            picked = np.argsort(-np.abs(gamma), kind="stable")[:channels]
            factor = np.ones_like(gamma)
            factor[picked] = gain
            updates[f"{prefix}.{norm}.gamma"] = gamma * factor
            updates[f"{prefix}.{norm}.beta"] = params[f"{prefix}.{norm}.beta"] * factor
            updates[f"{prefix}.{following}.weight"] = params[f"{prefix}.{following}.weight"] / factor[:, None]
    logger.info(f"Planted {channels} LayerNorm outlier channels per site (gain {gain:g})")
    return params.replace(updates)
