"""Discretized mixture-of-logistics distributions over 8-bit sample values.

A pixel's three subpixels share K mixture weights; each channel has its own
means, log-scales and coupling coefficients, so one pixel consumes
Q = 10*K parameters.  The effective mean of a later channel is a weighted sum
of the *means* (never the observed values) of earlier channels, which keeps
all three channel distributions computable before any value is decoded.

Bin probabilities are CDF differences evaluated on a shared grid of 257 bin
edges; the two outermost bins absorb the tails, so the 256-entry pmf sums to
the mixture-weight total exactly (telescoping), not just approximately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, stable_sigmoid

LOG_SCALE_FLOOR = -7.0
PROB_FLOOR = 2.0 ** -62
_LOG2_E = 1.0 / np.log(2.0)


def params_per_pixel(k: int) -> int:
    return 10 * k


def normalize_values(v) -> np.ndarray:
    """Map 8-bit values to [-1, 1]; a bijection on the 256-point grid."""
    return 2.0 * np.asarray(v, dtype=np.float64) / 255.0 - 1.0


def _lower_edges(v) -> np.ndarray:
    # lower edge of bin v in normalized space; upper edge of v is _lower_edges(v+1)
    return (2.0 * np.asarray(v, dtype=np.float64) - 1.0) / 255.0 - 1.0


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class DmolParams:
    """Mixture parameters for one pixel.

    ``logits`` is (K,), shared across channels; ``means``, ``log_scales`` and
    ``coeffs`` are (3, K).  Coupling order: coeffs[0] feeds G from R,
    coeffs[1] feeds B from R, coeffs[2] feeds B from G.
    """

    logits: np.ndarray
    means: np.ndarray
    log_scales: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        k = self.logits.shape[-1]
        for name in ("means", "log_scales", "coeffs"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (3, k):
                raise ValueError(f"{name} must have shape (3, {k}), got {arr.shape}")
            setattr(self, name, arr)

    @property
    def k(self) -> int:
        return self.logits.shape[-1]

    def weights(self) -> np.ndarray:
        return softmax(self.logits)

    def scales(self) -> np.ndarray:
        return np.exp(np.maximum(self.log_scales, LOG_SCALE_FLOOR))


def channel_means(means: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Effective per-channel means with mean-coupling across channels.

    Accepts (..., 3, K) arrays and returns the same shape.
    """
    means = np.asarray(means, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    c = np.tanh(coeffs)
    mu_r = means[..., 0, :]
    mu_g = means[..., 1, :] + c[..., 0, :] * mu_r
    mu_b = means[..., 2, :] + c[..., 1, :] * mu_r + c[..., 2, :] * mu_g
    return np.stack([mu_r, mu_g, mu_b], axis=-2)


def discretized_pmf(means, scales, weights) -> np.ndarray:
    """Probability of every 8-bit value under one channel's mixture.

    ``means``/``scales``/``weights`` broadcast to (..., K); the result is
    (..., 256) in float64 and sums to 1 (up to the weight normalization).
    """
    mu, s, pi = np.broadcast_arrays(
        np.asarray(means, dtype=np.float64),
        np.asarray(scales, dtype=np.float64),
        np.asarray(weights, dtype=np.float64),
    )
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    edges = _lower_edges(np.arange(257))
    z = (edges - mu[..., None]) / s[..., None]      # (..., K, 257)
    cdf = stable_sigmoid(z)
    cdf[..., 0] = 0.0
    cdf[..., 256] = 1.0
    # mixing before differencing is exact (linearity) and 1/K the diff work;
    # the clamp only absorbs sub-ulp rounding inversions of the CDF
    cdf_mix = np.einsum("...k,...kv->...v", pi, cdf)
    pmf = np.maximum(np.diff(cdf_mix, axis=-1), 0.0)
    if not np.all(np.isfinite(pmf)):
        raise ArithmeticError("non-finite pmf")
    return pmf


def bin_prob(means, scales, weights, values) -> np.ndarray:
    """Probability of the observed values only (same math as discretized_pmf).

    ``values`` is an integer array broadcasting against the leading dims of
    the (..., K) parameter arrays; returns the per-entry bin probability.
    """
    mu = np.asarray(means, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)
    pi = np.asarray(weights, dtype=np.float64)
    v = np.asarray(values)
    lo = _lower_edges(v)[..., None]
    hi = _lower_edges(v + 1)[..., None]
    cdf_lo = stable_sigmoid((lo - mu) / s)
    cdf_hi = stable_sigmoid((hi - mu) / s)
    cdf_lo = np.where((v == 0)[..., None], 0.0, cdf_lo)
    cdf_hi = np.where((v == 255)[..., None], 1.0, cdf_hi)
    return np.einsum("...k,...k->...", pi, cdf_hi - cdf_lo)


def neg_log_likelihood(params: DmolParams, rgb) -> tuple[np.ndarray, int]:
    """Bits to code one pixel's three samples, channel by channel.

    Returns (bits[3], floored) where ``floored`` counts channels whose
    probability underflowed and was clamped to the 2^-62 floor.
    """
    rgb = np.asarray(rgb, dtype=np.int64)
    if rgb.shape != (3,) or rgb.min() < 0 or rgb.max() > 255:
        raise ValueError("rgb must be three values in [0, 255]")
    mus = channel_means(params.means, params.coeffs)
    scales = params.scales()
    pi = params.weights()
    pmf = discretized_pmf(mus, scales, pi[None, :])   # (3, 256)
    p = pmf[np.arange(3), rgb]
    floored = int(np.count_nonzero(p < PROB_FLOOR))
    bits = -np.log2(np.maximum(p, PROB_FLOOR))
    return bits, floored


def entropy_upper_bound(weights, scales) -> np.ndarray | float:
    """Upper bound (nats) on the differential entropy of a logistic mixture.

    U = H(weights) + sum_k pi_k * (ln s_k + 2); the mixture entropy never
    exceeds the weight entropy plus the expected component entropy, and a
    single logistic with scale s has differential entropy ln s + 2.
    Used only to order pixels, so any monotone-equivalent base would do.
    """
    pi = np.asarray(weights, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)
    weight_entropy = -np.sum(pi * np.log(np.maximum(pi, 1e-300)), axis=-1)
    component = np.sum(pi * (np.log(s) + 2.0), axis=-1)
    out = weight_entropy + component
    return float(out) if np.ndim(out) == 0 else out


# -- parameter-map plumbing (network output with Q = 10K channels) ------------
#
# Channel layout of a parameter map, fixed for the life of the format:
#   [0:K]       mixture logits (shared by the three channels)
#   [K:4K]      means, channel-major (R block, G block, B block)
#   [4K:7K]     log-scales, channel-major
#   [7K:10K]    coupling coefficients: G<-R, B<-R, B<-G


def split_param_map(p: np.ndarray, k: int):
    """Split a (Q, ...) parameter map into logits/means/log_scales/coeffs."""
    if p.shape[0] != params_per_pixel(k):
        raise ValueError(f"param map has {p.shape[0]} channels, expected {params_per_pixel(k)}")
    logits = p[0:k]
    means = p[k:4 * k].reshape(3, k, *p.shape[1:])
    log_scales = p[4 * k:7 * k].reshape(3, k, *p.shape[1:])
    coeffs = p[7 * k:10 * k].reshape(3, k, *p.shape[1:])
    return logits, means, log_scales, coeffs


def pmf_tables(p: np.ndarray, k: int) -> tuple[np.ndarray, int]:
    """Coding distributions for a batch of pixels.

    ``p`` is (Q, S) network output for S pixels; returns ((S, 3, 256) float64
    pmf tables, floored-count-placeholder 0).  Tables follow the exact same
    formulas as ``discretized_pmf``; the decoder calls this with bit-identical
    inputs and therefore reproduces the encoder's tables exactly.
    """
    logits, means, log_scales, coeffs = split_param_map(np.asarray(p, dtype=np.float64), k)
    pi = softmax(logits.T)                                  # (S, K)
    mus = channel_means(means.transpose(2, 0, 1), coeffs.transpose(2, 0, 1))  # (S, 3, K)
    scales = np.exp(np.maximum(log_scales.transpose(2, 0, 1), LOG_SCALE_FLOOR))
    pmf = discretized_pmf(mus, scales, pi[:, None, :])      # (S, 3, 256)
    return pmf, 0


def nll_bits_from_map(p: np.ndarray, k: int, values: np.ndarray) -> tuple[np.ndarray, int]:
    """Model bits for observed values, one (S, 3) array for S pixels.

    ``values`` is (S, 3) uint8.  Matches the coding tables' probabilities.
    """
    logits, means, log_scales, coeffs = split_param_map(np.asarray(p, dtype=np.float64), k)
    pi = softmax(logits.T)
    mus = channel_means(means.transpose(2, 0, 1), coeffs.transpose(2, 0, 1))
    scales = np.exp(np.maximum(log_scales.transpose(2, 0, 1), LOG_SCALE_FLOOR))
    prob = bin_prob(mus, scales, pi[:, None, :], np.asarray(values, dtype=np.int64))
    floored = int(np.count_nonzero(prob < PROB_FLOOR))
    bits = -np.log2(np.maximum(prob, PROB_FLOOR))
    return bits, floored


def entropy_bound_map(p: np.ndarray, k: int) -> np.ndarray:
    """Per-pixel mean (over channels) of the entropy upper bound, from a map.

    The clamped log-scale *is* ln s, so no exponential is needed.
    """
    logits, _means, log_scales, _coeffs = split_param_map(np.asarray(p, dtype=np.float64), k)
    pi = softmax(logits.T)                                  # (S, K)
    ls = np.maximum(log_scales.transpose(2, 0, 1), LOG_SCALE_FLOOR)  # (S, 3, K)
    weight_entropy = -np.sum(pi * np.log(np.maximum(pi, 1e-300)), axis=-1)
    component = np.sum(pi[:, None, :] * (ls + 2.0), axis=-1)         # (S, 3)
    return weight_entropy + component.mean(axis=-1)


# -- differentiable loss path --------------------------------------------------


class FloorCounter:
    """Accumulates how often the probability floor fired in a loss pass."""

    def __init__(self):
        self.count = 0


def nll_bits_graph(p_sel: Tensor, k: int, values: np.ndarray,
                   floor_counter: FloorCounter | None = None) -> Tensor:
    """Differentiable coding cost in bits for selected pixels.

    ``p_sel`` is an (N, Q, S) tensor of mixture parameters for S pixels per
    batch item; ``values`` is the matching (N, 3, S) uint8 array.  Returns an
    (N, 3, S) tensor of bits whose gradients flow into every parameter field.
    """
    n, q, s = p_sel.shape
    if q != params_per_pixel(k):
        raise ValueError(f"param tensor has {q} channels, expected {params_per_pixel(k)}")
    values = np.asarray(values)
    dt = p_sel.dtype

    log_pi = T.log_softmax(p_sel[:, 0:k], axis=1)           # (N, K, S)
    pi = T.exp(log_pi)

    mus = []
    couple = []
    for c in range(3):
        couple.append(T.tanh(p_sel[:, 7 * k + c * k:7 * k + (c + 1) * k]))
    mu_r = p_sel[:, k:2 * k]
    mu_g = p_sel[:, 2 * k:3 * k] + couple[0] * mu_r
    mu_b = p_sel[:, 3 * k:4 * k] + couple[1] * mu_r + couple[2] * mu_g
    mus = [mu_r, mu_g, mu_b]

    per_channel = []
    for c in range(3):
        v = values[:, c, :]
        lo = _lower_edges(v)[:, None, :].astype(dt)         # constants
        hi = _lower_edges(v + 1)[:, None, :].astype(dt)
        top = (v == 255)[:, None, :]
        bot = (v == 0)[:, None, :]
        log_s = T.maximum(p_sel[:, 4 * k + c * k:4 * k + (c + 1) * k], LOG_SCALE_FLOOR)
        inv_s = T.exp(-log_s)
        cdf_hi = T.sigmoid((T.Tensor(hi) - mus[c]) * inv_s)
        cdf_lo = T.sigmoid((T.Tensor(lo) - mus[c]) * inv_s)
        # tail bins absorb everything beyond the outermost edges
        cdf_hi = cdf_hi * (~top).astype(dt) + top.astype(dt)
        cdf_lo = cdf_lo * (~bot).astype(dt)
        prob = (pi * (cdf_hi - cdf_lo)).sum(axis=1)          # (N, S)
        if floor_counter is not None:
            floor_counter.count += int(np.count_nonzero(prob.data < PROB_FLOOR))
        bits = T.log(T.maximum(prob, PROB_FLOOR)) * (-_LOG2_E)
        per_channel.append(T.reshape(bits, (n, 1, s)))
    return T.concat_channels(per_channel)
