"""Clipped reparameterization of post-LayerNorm activation quantizers.

Channel-wise scales and zero-points of a LayerNorm output are clipped at
mean +/- n_sigma std, and the variation is folded into the LayerNorm affine
parameters and the weights of the linear layer that consumes it. The
residual branch reads the LayerNorm input, so it is never rewritten.
"""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .exceptions import CalibrationError, ShapeError, UsageError
from .layers import LayerId, LayerKind
from .quantizers import (
    SCALE_FLOOR,
    Granularity,
    QuantParams,
    Scheme,
    round_half_away,
    uniform_calibrate,
)

logger = logging.getLogger(__name__)

DEFAULT_N_SIGMA = 2.0


class LNMode(str, Enum):
    LAYERWISE = "layerwise"
    CHANNELWISE = "channelwise"
    SCALE_REPARAM = "scale_reparam"
    CLIPPED_CW = "clipped_cw"


# LayerNorm site of each block and the layer reading it
LN_SITES = {"ln1": LayerKind.QKV, "ln2": LayerKind.FC1}


@dataclass(frozen=True, eq=False)
class ChannelQuant:
    scale: np.ndarray
    zero_point: np.ndarray
    bits: int

    def __post_init__(self):
        scale = np.array(self.scale, dtype=np.float64)
        zero_point = np.array(self.zero_point, dtype=np.float64)
        if scale.ndim != 1 or zero_point.shape != scale.shape:
            raise ShapeError("channel scale and zero-point must be equal-length vectors", scale=scale.shape, zero_point=zero_point.shape)
        if not np.all(scale > 0):
            raise CalibrationError("channel scales must be positive")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zero_point)

    @property
    def channels(self):
        return self.scale.shape[0]

    def to_quant_params(self):
        """Install as a per-channel uniform quantizer; zero-points are rounded here."""
        qmax = 2**self.bits - 1
        zero_point = np.clip(round_half_away(self.zero_point), 0, qmax)
        return QuantParams(Scheme.UNIFORM, self.bits, Granularity.CHANNEL, self.scale, zero_point)


@dataclass(frozen=True, eq=False)
class ReparamFactors:
    v1: np.ndarray
    v2: np.ndarray
    scale: np.ndarray

    @property
    def is_identity(self):
        return bool(np.all(self.v1 == 1.0) and np.all(self.v2 == 0.0))


def channelwise_calibrate(activations, bits, percentile=100.0):
    """Per-channel range pooled over batch and token positions."""
    activations = np.asarray(activations, dtype=np.float64)
    if activations.size == 0:
        raise CalibrationError("no activations to calibrate channel-wise")
    qp = uniform_calibrate(activations, bits, percentile=percentile, granularity=Granularity.CHANNEL)
    return ChannelQuant(qp.scale, qp.zero_point, bits)


def _clip_at(values, n_sigma, floor=None):
    mean, std = values.mean(), values.std()
    lower, upper = mean - n_sigma * std, mean + n_sigma * std
    if floor is not None:
        lower = max(lower, floor)
    return np.clip(values, lower, upper)


def clip_quant_params(cq, n_sigma=DEFAULT_N_SIGMA):
    if not n_sigma > 0:
        raise UsageError("n_sigma must be positive", n_sigma=n_sigma)
    if np.isinf(n_sigma):
        clipped = ChannelQuant(cq.scale, cq.zero_point, cq.bits)
    else:
        clipped = ChannelQuant(
            _clip_at(cq.scale, n_sigma, floor=SCALE_FLOOR),
            _clip_at(cq.zero_point, n_sigma),
            cq.bits,
        )
    return clipped, variation_factors(cq, clipped)


def variation_factors(cq, target):
    return ReparamFactors(
        v1=cq.scale / target.scale,
        v2=cq.zero_point - target.zero_point,
        scale=cq.scale.copy(),
    )


def reparameterize_layernorm(gamma, beta, f):
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != f.v1.shape or beta.shape != f.v1.shape:
        raise ShapeError("LayerNorm affine parameters do not match the factors", gamma=gamma.shape, factors=f.v1.shape)
    return gamma / f.v1, (beta + f.scale * f.v2) / f.v1


def reparameterize_next_layer(weight, bias, f):
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weight.ndim != 2 or weight.shape[0] != f.v1.shape[0]:
        raise ShapeError("next-layer weight input axis does not match the factors", weight=weight.shape, factors=f.v1.shape)
    if bias.shape != (weight.shape[1],):
        raise ShapeError("next-layer bias does not match the weight", weight=weight.shape, bias=bias.shape)
    return f.v1[:, None] * weight, bias - (f.scale * f.v2) @ weight


@dataclass
class CrlResult:
    params: object
    site_params: dict
    factors: dict
    folded: dict


def _site_samples(calib, layer_id):
    samples = calib.get(layer_id)
    if samples is None or len(samples) == 0:
        raise CalibrationError(f"no calibration data for LayerNorm site {layer_id}", layer=str(layer_id))
    return np.asarray(samples[0], dtype=np.float64)


def _fold(params, block, ln, next_kind, f, folded):
    ln_prefix = f"blocks.{block}.{ln}"
    next_prefix = LayerId(block, next_kind).param_prefix
    gamma, beta = reparameterize_layernorm(params[f"{ln_prefix}.gamma"], params[f"{ln_prefix}.beta"], f)
    weight, bias = reparameterize_next_layer(params[f"{next_prefix}.weight"], params[f"{next_prefix}.bias"], f)
    folded.update(
        {
            f"{ln_prefix}.gamma": gamma,
            f"{ln_prefix}.beta": beta,
            f"{next_prefix}.weight": weight,
            f"{next_prefix}.bias": bias,
        }
    )


def apply_crl(params, calib, bits, n_sigma=DEFAULT_N_SIGMA, mode=LNMode.CLIPPED_CW, percentile=100.0):
    """Calibrate both LayerNorm sites of every block and fold the chosen reparameterization.

    `calib` maps LayerId to the tuple of pooled activations observed at that
    layer's input; `bits` maps LayerId to the activation width of the site.
    """
    mode = LNMode(mode)
    site_params, factors, folded = {}, {}, {}
    for block in range(1, params.config.blocks + 1):
        for ln, next_kind in LN_SITES.items():
            layer_id = LayerId(block, next_kind)
            samples = _site_samples(calib, layer_id)
            width = bits[layer_id] if isinstance(bits, dict) else bits
            if mode is LNMode.LAYERWISE:
                site_params[layer_id] = uniform_calibrate(samples, width, percentile=percentile)
                continue
            cq = channelwise_calibrate(samples, width, percentile=percentile)
            if mode is LNMode.CHANNELWISE:
                site_params[layer_id] = cq.to_quant_params()
                continue
            if mode is LNMode.SCALE_REPARAM:
                target = ChannelQuant(
                    np.full(cq.channels, cq.scale.mean()), np.full(cq.channels, cq.zero_point.mean()), width
                )
                f = variation_factors(cq, target)
                qp = target.to_quant_params()
                site_params[layer_id] = QuantParams(
                    Scheme.UNIFORM, width, Granularity.LAYER, qp.scale[0], qp.zero_point[0]
                )
            else:
                target, f = clip_quant_params(cq, n_sigma)
                site_params[layer_id] = target.to_quant_params()
                clipped = int(np.count_nonzero(f.v1 != 1.0))
                logger.debug(f"{layer_id}: {clipped}/{cq.channels} channel scales clipped at {n_sigma} sigma")
            factors[layer_id] = f
            _fold(params, block, ln, next_kind, f, folded)
    logger.info(f"LayerNorm sites calibrated in {mode.value} mode ({len(site_params)} sites, {len(folded)} tensors folded)")
    return CrlResult(params.replace(folded) if folded else params, site_params, factors, folded)
