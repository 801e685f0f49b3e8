"""Relevance propagation over a recorded ViT tape and per-layer importance scores.

Relevance flows from the logits toward the input image. Only nodes derived
from the image carry relevance; parameters and constants drop out at the step
that consumes them and the step is renormalised so the total is conserved.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import tablib

from .exceptions import ContractError, DegenerateError, DomainError, FormatError, ShapeError, UsageError
from .layers import LayerId, LayerKind, block_layer_ids
from .tensor_ad import PRIMITIVES, backward, unbroadcast
from .vit import forward

logger = logging.getLogger(__name__)

# single-input rules that pass relevance through unchanged
TRANSPARENT_OPS = frozenset({"add", "mul", "scale", "layernorm", "softmax", "gelu", "straight_through"})
TARGETS = ("label", "predicted")


def _safe_divide(numerator, denominator):
    positive = denominator > 0
    return np.where(positive, numerator / np.where(positive, denominator, 1.0), 0.0)


def _renormalise(relevances, total):
    current = math.fsum(float(r.sum()) for r in relevances)
    if current <= 0:
        return relevances
    return [r * (total / current) for r in relevances]


def propagate_linear(x, weight, relevance):
    """Positive-subset rule for y = x @ W.

    Contributions x_j * w_ji < 0 are discarded; each output's relevance is
    shared among its remaining contributions in proportion to their size.
    """
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    relevance = np.asarray(relevance, dtype=np.float64)
    if x.shape[-1] != weight.shape[0] or relevance.shape[-1] != weight.shape[-1]:
        raise ShapeError("relevance shapes do not match the linear layer", x=x.shape, weight=weight.shape, relevance=relevance.shape)
    z = x[..., :, None] * weight
    z = np.where(z >= 0, z, 0.0)
    share = _safe_divide(z, z.sum(axis=-2, keepdims=True))
    result = (share * relevance[..., None, :]).sum(axis=-1)
    (result,) = _renormalise([result], float(relevance.sum()))
    return result


def propagate_binary(a, b, op, relevance):
    """Split relevance between two activation operands of `add` or `matmul`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    relevance = np.asarray(relevance, dtype=np.float64)
    total = math.fsum(relevance.ravel())
    if op == "add":
        a_pos = np.maximum(np.broadcast_to(a, relevance.shape), 0.0)
        b_pos = np.maximum(np.broadcast_to(b, relevance.shape), 0.0)
        denominator = a_pos + b_pos
        r_a = unbroadcast(_safe_divide(a_pos, denominator) * relevance, a.shape)
        r_b = unbroadcast(_safe_divide(b_pos, denominator) * relevance, b.shape)
        return tuple(_renormalise([r_a, r_b], total))
    if op == "matmul":
        z = np.einsum("...nk,...km->...nkm", a, b)
        z = np.where(z >= 0, z, 0.0)
        share = _safe_divide(z, z.sum(axis=-2, keepdims=True))
        contributions = share * relevance[..., :, None, :]
        r_a = unbroadcast(contributions.sum(axis=-1), a.shape)
        r_b = unbroadcast(contributions.sum(axis=-3), b.shape)
        # each operand carries half of the total
        (r_a,) = _renormalise([r_a], total / 2.0)
        (r_b,) = _renormalise([r_b], total / 2.0)
        return r_a, r_b
    raise UsageError(f"no binary relevance rule for '{op}'")


@dataclass
class RelevanceState:
    tape: object
    record: object
    gradients: object
    relevance: dict
    target: int
    logits: np.ndarray
    max_step_drift: float = 0.0
    step_drifts: list = field(default_factory=list, repr=False)

    def relevance_of(self, node):
        index = node.index if hasattr(node, "index") else int(node)
        value = self.relevance.get(index)
        if value is None:
            return np.zeros_like(self.tape.nodes[index].value)
        return value

    def gradient_of(self, node):
        return self.gradients[node]

    @property
    def input_relevance(self):
        inputs = [node for node in self.tape.nodes if node.kind == "input"]
        return self.relevance_of(inputs[0])


def _step(tape, node, relevance):
    """Relevance of each input of `node` (None for inputs that carry none)."""
    inputs = [tape.nodes[i] for i in node.inputs]
    tracked = [inp.tracks_input for inp in inputs]
    primitive = PRIMITIVES[node.op]

    if primitive.structural:
        pieces = primitive.vjp(relevance, node.value, *(inp.value for inp in inputs), **node.attrs)
        kept = [piece if keep else None for piece, keep in zip(pieces, tracked)]
        renormalised = iter(_renormalise([p for p in kept if p is not None], float(relevance.sum())))
        return [next(renormalised) if piece is not None else None for piece in kept]

    if sum(tracked) == 2:
        return list(propagate_binary(inputs[0].value, inputs[1].value, node.op, relevance))

    if node.op == "matmul":
        if not tracked[0]:
            raise ContractError("relevance cannot enter a matmul through its right operand", node=node.index)
        return [propagate_linear(inputs[0].value, inputs[1].value, relevance), None]

    if node.op in TRANSPARENT_OPS:
        return [unbroadcast(relevance, inp.shape) if keep else None for inp, keep in zip(inputs, tracked)]

    raise ContractError(f"no relevance rule for '{node.op}'", node=node.index)


def propagate(tape, output, seed):
    """Walk the tape in reverse from `output`; returns (relevance per node index, step drifts)."""
    relevance = {output.index: np.asarray(seed, dtype=np.float64)}
    drifts = []
    for node in reversed(tape.nodes[: output.index + 1]):
        current = relevance.get(node.index)
        if current is None or node.is_leaf or not node.tracks_input:
            continue
        incoming = _step(tape, node, current)
        passed = [piece for piece in incoming if piece is not None]
        drifts.append(abs(math.fsum(float(p.sum()) for p in passed) - float(current.sum())))
        for index, piece in zip(node.inputs, incoming):
            if piece is None:
                continue
            relevance[index] = relevance[index] + piece if index in relevance else piece
    return relevance, drifts


def lrp_run(params, image, target):
    """Seed a one-hot relevance at class `target` and propagate it to the image."""
    classes = params.config.classes
    if not 0 <= int(target) < classes:
        raise DomainError("target class out of range", target=target, classes=classes)
    result = forward(params, np.asarray(image, dtype=np.float64)[None], hooks=True)
    logits = result.record.logits
    seed = np.zeros(logits.shape)
    seed[0, int(target)] = 1.0
    gradients = backward(result.tape, logits, seed)
    relevance, drifts = propagate(result.tape, logits, seed)
    return RelevanceState(
        tape=result.tape,
        record=result.record,
        gradients=gradients,
        relevance=relevance,
        target=int(target),
        logits=result.logits[0],
        max_step_drift=max(drifts, default=0.0),
        step_drifts=drifts,
    )


def relevance_map(grad, relevance, head_axis=0):
    """Positive part of gradient x relevance, averaged over the head axis when one is given."""
    grad = np.asarray(grad, dtype=np.float64)
    relevance = np.asarray(relevance, dtype=np.float64)
    if grad.shape != relevance.shape:
        raise ShapeError("gradient and relevance shapes differ", grad=grad.shape, relevance=relevance.shape)
    product = np.maximum(grad * relevance, 0.0)
    if head_axis is None:
        return product
    return product.mean(axis=head_axis)


# kinds whose observed inputs are split per head (h, T, ...) once the batch axis is dropped
_HEADED = frozenset({LayerKind.MATMUL1, LayerKind.ATTN, LayerKind.MATMUL2})


def layer_score_maps(state):
    maps = {}
    for layer_id, nodes in state.record.nodes.items():
        if not layer_id.in_block:
            continue
        head_axis = 0 if layer_id.kind in _HEADED else None
        parts = [
            relevance_map(state.gradient_of(node)[0], state.relevance_of(node)[0], head_axis=head_axis)
            for node in nodes
        ]
        maps[layer_id] = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)
    return maps


def contribution_scores(params, dataset, samples, seed=0, target="label"):
    """Average map mean per block layer over `samples` images drawn without replacement."""
    if target not in TARGETS:
        raise UsageError(f"unknown relevance target '{target}'", choices=",".join(TARGETS))
    if samples < 1:
        raise UsageError("importance needs at least one sample", samples=samples)
    if samples > len(dataset):
        raise UsageError("more importance samples than images", samples=samples, images=len(dataset))

    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(dataset), size=samples, replace=False))
    layer_ids = block_layer_ids(params.config.blocks)
    totals = {layer_id: [] for layer_id in layer_ids}
    worst_drift = 0.0
    for count, index in enumerate(chosen, start=1):
        image = dataset.images[index]
        if target == "label":
            cls = int(dataset.labels[index])
        else:
            cls = int(np.argmax(forward(params, image).logits))
        state = lrp_run(params, image, cls)
        worst_drift = max(worst_drift, state.max_step_drift)
        for layer_id, score_map in layer_score_maps(state).items():
            totals[layer_id].append(float(score_map.mean()))
        if count % 32 == 0:
            logger.info(f"Relevance propagated for {count}/{samples} images")
    logger.info(f"Contribution scores over {samples} images (max step drift {worst_drift:.2e})")
    return {layer_id: math.fsum(values) / samples for layer_id, values in totals.items()}


@dataclass(frozen=True)
class ImportanceTable:
    contributions: dict
    importance: dict
    samples: int

    HEADERS = ("layer", "contribution", "importance", "samples")

    def __post_init__(self):
        if set(self.contributions) != set(self.importance):
            raise ContractError("contribution and importance cover different layers")
        if any(value < 0 for value in self.contributions.values()):
            raise ContractError("contribution scores must be non-negative")

    def layer_ids(self):
        return sorted(self.importance, key=lambda layer_id: layer_id.sort_key)

    def __getitem__(self, layer_id):
        return self.importance[layer_id]

    def ranking(self):
        """Layer ids from least to most important, ties in block/kind order."""
        return sorted(self.importance, key=lambda layer_id: (self.importance[layer_id], layer_id.sort_key))

    def blocks(self):
        return sorted({layer_id.block for layer_id in self.importance})

    def to_dataset(self):
        data = tablib.Dataset(headers=list(self.HEADERS), title="importance")
        for layer_id in self.layer_ids():
            data.append(
                (str(layer_id), repr(self.contributions[layer_id]), repr(self.importance[layer_id]), self.samples)
            )
        return data

    def to_csv(self):
        return self.to_dataset().export("csv")

    @classmethod
    def from_csv(cls, text):
        data = tablib.Dataset().load(text, format="csv")
        if tuple(data.headers or ()) != cls.HEADERS:
            raise FormatError("importance table has unexpected columns", columns=",".join(data.headers or ()))
        contributions, importance, samples = {}, {}, set()
        try:
            for row in data.dict:
                layer_id = LayerId.parse(row["layer"])
                contributions[layer_id] = float(row["contribution"])
                importance[layer_id] = float(row["importance"])
                samples.add(int(row["samples"]))
        except ValueError as exc:
            raise FormatError(f"malformed importance table: {exc}") from exc
        if len(samples) > 1:
            raise FormatError("importance table mixes sample counts")
        return cls(contributions, importance, samples.pop() if samples else 0)


def importance_scores(contributions, samples=0):
    """Normalise contributions so the importance of all scored layers sums to one."""
    contributions = {layer_id: float(value) for layer_id, value in contributions.items()}
    if any(value < 0 for value in contributions.values()):
        raise ContractError("contribution scores must be non-negative")
    total = math.fsum(contributions.values())
    if total <= 0:
        raise DegenerateError("all contribution scores are zero", layers=len(contributions))
    importance = {layer_id: value / total for layer_id, value in contributions.items()}
    return ImportanceTable(contributions, importance, samples)


def score_importance(params, dataset, samples, seed=0, target="label"):
    contributions = contribution_scores(params, dataset, samples, seed=seed, target=target)
    table = importance_scores(contributions, samples)
    top = table.ranking()[-1]
    logger.info(f"Most important layer: {top} (I={table[top]:.4f})")
    return table
