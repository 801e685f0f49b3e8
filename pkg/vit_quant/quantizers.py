"""Uniform, log2 and log-sqrt2 quantizers with percentile calibration."""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .exceptions import CalibrationError, ContractError, DomainError, UsageError
from .layers import INPUT_SLOTS, LayerId, LayerKind

logger = logging.getLogger(__name__)

SCALE_FLOOR = 1e-12
DEFAULT_PERCENTILE = 99.99
# 32/32 denotes the full-precision path; log sites at this width are not quantized
FULL_PRECISION_BITS = 32
SQRT2 = np.sqrt(2.0)


class Scheme(str, Enum):
    UNIFORM = "uniform"
    LOG2 = "log2"
    LOGSQRT2 = "logsqrt2"

    @property
    def is_logarithmic(self):
        return self is not Scheme.UNIFORM


class Granularity(str, Enum):
    LAYER = "per-layer"
    CHANNEL = "per-channel"


@dataclass(frozen=True, eq=False)
class QuantParams:
    scheme: Scheme
    bits: int
    granularity: Granularity
    scale: np.ndarray
    zero_point: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        object.__setattr__(self, "bits", int(self.bits))
        scale = np.array(self.scale, dtype=np.float64)
        zero_point = np.array(self.zero_point, dtype=np.int64)
        scale.setflags(write=False)
        zero_point.setflags(write=False)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zero_point)

        if self.bits < 1:
            raise ContractError("bit width must be >= 1", bits=self.bits)
        if not np.all(scale > 0):
            raise ContractError("quantization scale must be positive")
        if self.granularity is Granularity.CHANNEL and scale.ndim != 1:
            raise ContractError("per-channel scale must be a vector", shape=scale.shape)
        if self.granularity is Granularity.LAYER and scale.ndim != 0:
            raise ContractError("per-layer scale must be a scalar", shape=scale.shape)
        if zero_point.shape != scale.shape:
            raise ContractError(
                "zero-point and scale shapes differ", scale=scale.shape, zero_point=zero_point.shape
            )
        if self.scheme is Scheme.UNIFORM and (
            np.any(zero_point < 0) or np.any(zero_point > self.qmax)
        ):
            raise ContractError("zero-point outside [0, 2^b - 1]", bits=self.bits)

    @property
    def qmax(self):
        return 2**self.bits - 1

    @property
    def base(self):
        return SQRT2 if self.scheme is Scheme.LOGSQRT2 else 2.0

    @property
    def channels(self):
        return None if self.scale.ndim == 0 else self.scale.shape[0]

    def with_bits(self, bits):
        return QuantParams(self.scheme, bits, self.granularity, self.scale, self.zero_point)

    def same_as(self, other):
        return (
            self.scheme is other.scheme
            and self.bits == other.bits
            and self.granularity is other.granularity
            and np.array_equal(self.scale, other.scale)
            and np.array_equal(self.zero_point, other.zero_point)
        )

    def describe(self):
        return f"{self.scheme.value}/{self.granularity.value}/{self.bits}b"


def round_half_away(x):
    """Round to nearest, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def percentile_range(samples, percentile, axis=None):
    """Two-sided range: the (100 - p)-th and p-th percentiles."""
    if percentile >= 100:
        return samples.min(axis=axis), samples.max(axis=axis)
    lo, hi = np.percentile(samples, [100.0 - percentile, percentile], axis=axis)
    return lo, hi


def uniform_params(lo, hi, bits, granularity=Granularity.LAYER):
    """Scale and zero-point for a uniform quantizer covering [lo, hi]."""
    lo = np.array(lo, dtype=np.float64)
    hi = np.array(hi, dtype=np.float64)
    # a constant range is widened to include zero
    degenerate = hi - lo <= 0
    lo = np.where(degenerate, np.minimum(lo, 0.0), lo)
    hi = np.where(degenerate, np.maximum(hi, 0.0), hi)
    qmax = 2**bits - 1
    scale = np.maximum((hi - lo) / qmax, SCALE_FLOOR)
    zero_point = np.clip(round_half_away(-lo / scale), 0, qmax)
    return QuantParams(Scheme.UNIFORM, bits, granularity, scale, zero_point)


def _check_samples(samples):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise CalibrationError("no calibration samples")
    return samples


def uniform_calibrate(samples, bits, percentile=DEFAULT_PERCENTILE, granularity=Granularity.LAYER):
    samples = _check_samples(samples)
    if not 0 < percentile <= 100:
        raise UsageError("percentile must lie in (0, 100]", percentile=percentile)
    if bits < 1:
        raise UsageError("bit width must be >= 1", bits=bits)
    granularity = Granularity(granularity)
    if granularity is Granularity.CHANNEL:
        lo, hi = percentile_range(samples.reshape(-1, samples.shape[-1]), percentile, axis=0)
    else:
        lo, hi = percentile_range(samples.ravel(), percentile)
    return uniform_params(lo, hi, bits, granularity)


def log_calibrate(samples, bits, scheme=Scheme.LOGSQRT2):
    """Logarithmic quantizers anchor the scale at the observed maximum."""
    samples = _check_samples(samples)
    if np.any(samples < 0):
        raise DomainError("logarithmic quantizers take non-negative inputs")
    scale = max(float(samples.max()), SCALE_FLOOR)
    return QuantParams(scheme, bits, Granularity.LAYER, scale, 0)


def _expect(qp, *schemes):
    if qp.scheme not in schemes:
        raise ContractError(
            f"quantizer scheme {qp.scheme.value} not accepted here",
            expected=",".join(scheme.value for scheme in schemes),
        )


def _check_codes(q, qp):
    q = np.asarray(q)
    if np.any(q < 0) or np.any(q > qp.qmax):
        raise ContractError("quantized codes outside [0, 2^b - 1]", bits=qp.bits)
    return q.astype(np.int64)


def uniform_quant(x, qp):
    _expect(qp, Scheme.UNIFORM)
    x = np.asarray(x, dtype=np.float64)
    q = round_half_away(x / qp.scale) + qp.zero_point
    return np.clip(q, 0, qp.qmax).astype(np.int64)


def uniform_dequant(q, qp):
    _expect(qp, Scheme.UNIFORM)
    q = _check_codes(q, qp)
    return qp.scale * (q - qp.zero_point).astype(np.float64)


def _resolve_base(qp, base):
    _expect(qp, Scheme.LOG2, Scheme.LOGSQRT2)
    if base is not None and not np.isclose(base, qp.base):
        raise ContractError("base disagrees with the quantizer scheme", base=base, scheme=qp.scheme.value)
    return qp.base


def log_quant(x, qp, base=None):
    base = _resolve_base(qp, base)
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise DomainError("logarithmic quantizers take non-negative inputs")
    steps_per_octave = 2.0 if base == SQRT2 else 1.0
    with np.errstate(divide="ignore"):
        exponent = -np.log2(x / qp.scale) * steps_per_octave
    # exact zeros land on the smallest representable value
    q = np.where(x == 0, qp.qmax, np.clip(round_half_away(np.where(x == 0, 0.0, exponent)), 0, qp.qmax))
    return q.astype(np.int64)


def log_dequant(q, qp, base=None):
    base = _resolve_base(qp, base)
    q = _check_codes(q, qp)
    if base == SQRT2:
        return qp.scale * np.exp2(-q / 2.0)
    return qp.scale * np.exp2(-q.astype(np.float64))


def logsqrt2_to_log2(q, scale):
    """Split log-sqrt2 codes into a power-of-two shift and a parity scale selector."""
    q = np.asarray(q, dtype=np.int64)
    return q // 2, q % 2


def log2_scales(scale):
    """The two precomputed scales of the log2 inference form: even and odd codes."""
    return float(scale), float(scale) / SQRT2


def log2_shift_dequant(shift, parity, scale):
    even, odd = log2_scales(scale)
    return np.ldexp(np.where(parity == 0, even, odd), -np.asarray(shift, dtype=np.int64))


def fake_quant(x, qp):
    """Quantize then dequantize; scheme-dispatched."""
    x = np.asarray(x, dtype=np.float64)
    if qp.scheme is Scheme.UNIFORM:
        return uniform_dequant(uniform_quant(x, qp), qp)
    if qp.scheme is Scheme.LOGSQRT2:
        shift, parity = logsqrt2_to_log2(log_quant(x, qp), qp.scale)
        return log2_shift_dequant(shift, parity, qp.scale)
    return log_dequant(log_quant(x, qp), qp)


@dataclass(frozen=True)
class LayerQuant:
    """Quantizers of one layer: weight (absent for matmul1/attn/matmul2) and inputs."""

    weight: QuantParams
    inputs: tuple

    def same_as(self, other):
        if (self.weight is None) != (other.weight is None):
            return False
        if self.weight is not None and not self.weight.same_as(other.weight):
            return False
        return len(self.inputs) == len(other.inputs) and all(
            mine.same_as(theirs) for mine, theirs in zip(self.inputs, other.inputs)
        )


@dataclass(frozen=True, eq=False)
class QuantModel:
    """Calibrated quantizers for every layer plus the parameters folded during calibration."""

    layers: dict
    allocation: object
    folded: dict
    provenance: dict

    def __post_init__(self):
        for layer_id, layer in self.layers.items():
            if layer_id.kind is LayerKind.ATTN:
                if not all(qp.scheme.is_logarithmic for qp in layer.inputs):
                    raise ContractError(f"{layer_id} must use a logarithmic quantizer")
            elif not all(qp.scheme is Scheme.UNIFORM for qp in layer.inputs):
                raise ContractError(f"{layer_id} must use the uniform quantizer")
            if layer_id.has_weights and layer.weight is None:
                raise ContractError(f"{layer_id} is missing its weight quantizer")
            if not layer_id.has_weights and layer.weight is not None:
                raise ContractError(f"{layer_id} carries no weights")
            if len(layer.inputs) != INPUT_SLOTS[layer_id.kind]:
                raise ContractError(f"{layer_id} expects {INPUT_SLOTS[layer_id.kind]} input quantizers")

    def layer(self, layer_id):
        try:
            return self.layers[layer_id]
        except KeyError:
            raise CalibrationError(f"layer {layer_id} is not calibrated", layer=str(layer_id)) from None

    def weight_params(self, layer_id):
        return self.layer(layer_id).weight

    def input_params(self, layer_id, slot=0):
        return self.layer(layer_id).inputs[slot]

    def check_covers(self, layer_ids):
        for layer_id in layer_ids:
            self.layer(layer_id)

    def log2_inference_scales(self, block):
        """Even/odd scales of the log2 form of a block's attention quantizer."""
        qp = self.input_params(LayerId(block, LayerKind.ATTN))
        return log2_scales(qp.scale)

    def fold_into(self, params):
        return params.replace(self.folded) if self.folded else params
