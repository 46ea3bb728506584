"""Dropout sampling executor and the brute-force statistical oracles that
validate every propagated moment.

Reproducibility contract: each (sample index, dropout layer index) pair gets
its own counter-derived RNG stream from the run seed, so results are
bit-identical no matter how or in what order the samples are evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network
from .layers import (
    Conv2DSpec,
    DenseSpec,
    DropoutSpec,
    MaxPool2DSpec,
    ReluSpec,
    SoftmaxSpec,
    conv2d_det,
    dense_det,
    dropout_sample,
    maxpool2d_det,
    relu_det,
    softmax_det,
)
from .moments import MomentTensor


def sample_stream(seed: int, sample_index: int, layer_index: int) -> np.random.Generator:
    """Independent generator keyed by (seed, sample, layer)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(sample_index, layer_index))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class MomentEstimate:
    """Sample moments with their standard errors.

    variance is the unbiased estimator (divisor T-1); the variance standard
    error uses the fourth-central-moment formula, so it stays valid for
    non-Gaussian outputs.
    """

    mean: np.ndarray
    variance: np.ndarray
    standard_error_mean: np.ndarray
    standard_error_variance: np.ndarray
    n_samples: int


@dataclass(frozen=True)
class SampleBatch:
    """T stacked stochastic outputs from repeated masked forward passes."""

    outputs: np.ndarray  # (T, ...)
    t: int
    seed: int

    def moments(self) -> MomentEstimate:
        return estimate_moments(self)


def _moments_from_power_sums(n, s1, s2, s3, s4):
    mean = s1 / n
    # unbiased variance and central fourth moment from raw power sums
    m2 = s2 / n - mean**2
    var = m2 * n / (n - 1)
    m4 = (s4 - 4 * mean * s3 + 6 * mean**2 * s2) / n - 3 * mean**4
    var_of_var = (m4 - (n - 3) / (n - 1) * var**2) / n
    se_mean = np.sqrt(np.maximum(var, 0.0) / n)
    se_var = np.sqrt(np.maximum(var_of_var, 0.0))
    return MomentEstimate(
        mean=mean,
        variance=np.maximum(var, 0.0),
        standard_error_mean=se_mean,
        standard_error_variance=se_var,
        n_samples=int(n),
    )


def estimate_moments(batch) -> MomentEstimate:
    """Per-component sample mean, unbiased variance, and standard errors."""
    arr = batch.outputs if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=np.float64)
    n = arr.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples to estimate a variance")
    s1 = arr.sum(axis=0)
    s2 = np.square(arr).sum(axis=0)
    s3 = (arr**3).sum(axis=0)
    s4 = (arr**4).sum(axis=0)
    return _moments_from_power_sums(float(n), s1, s2, s3, s4)


def mc_forward(model: network.ModelSpec, x, t: int, seed: int = 0) -> SampleBatch:
    """T stochastic forward passes with fresh Bernoulli masks per pass.

    Deterministic given (model, x, t, seed) and independent of evaluation
    order, since every pass pulls its masks from its own keyed stream.
    """
    if not (isinstance(t, int) and t >= 1):
        raise ValueError(f"sample count must be an integer >= 1, got {t!r}")
    xb, squeeze = network._as_batch(model, x)
    outputs = []
    for i in range(t):
        out = network._run_arrays(
            model,
            xb,
            lambda h, layer, idx, i=i: dropout_sample(h, layer, sample_stream(seed, i, idx)),
        )
        outputs.append(out[0] if squeeze else out)
    return SampleBatch(outputs=np.stack(outputs, axis=0), t=t, seed=seed)


class _RunningMoments:
    """Streaming raw power sums so huge oracle runs stay memory-bounded."""

    def __init__(self):
        self.n = 0.0
        self.s1 = self.s2 = self.s3 = self.s4 = 0.0

    def add(self, chunk: np.ndarray) -> None:
        self.n += chunk.shape[0]
        self.s1 = self.s1 + chunk.sum(axis=0)
        sq = np.square(chunk)
        self.s2 = self.s2 + sq.sum(axis=0)
        self.s3 = self.s3 + (sq * chunk).sum(axis=0)
        self.s4 = self.s4 + np.square(sq).sum(axis=0)

    def finalize(self) -> MomentEstimate:
        if self.n < 2:
            raise ValueError("need at least 2 samples")
        return _moments_from_power_sums(self.n, self.s1, self.s2, self.s3, self.s4)


def layer_oracle(
    layer,
    input_dist,
    n_samples: int,
    seed: int = 0,
    chunk_size: int = 200_000,
    component: int | None = None,
) -> MomentEstimate:
    """Estimate a layer's output moments by brute force.

    input_dist is either a MomentTensor (independent Gaussian inputs) or a
    plain array (a fixed point input).  The layer is applied to each draw via
    its deterministic forward, except dropout which samples fresh masks.
    If ``component`` is given, only that flat output component's moments are
    accumulated (the layer itself is still applied in full).
    """
    rng = np.random.default_rng(seed)
    if isinstance(input_dist, MomentTensor):
        mean = input_dist.expectation
        std = np.sqrt(input_dist.variance)
        point = None
    else:
        point = np.asarray(input_dist, dtype=np.float64)
        mean = np.asarray(input_dist, dtype=np.float64)
        std = np.zeros_like(mean)
    if int(n_samples) < 2:
        raise ValueError("need at least 2 oracle samples")

    # For conv/pool layers checked at a single component, draw only that
    # component's receptive field and evaluate the output by its definition;
    # statistically identical (other inputs cannot affect the component) and
    # independent of the production patch-matrix code path.
    if component is not None and isinstance(layer, (Conv2DSpec, MaxPool2DSpec)):
        mean, std, reducer = _receptive_field(layer, mean, std, component)
    else:
        reducer = None

    acc = _RunningMoments()
    remaining = int(n_samples)
    while remaining > 0:
        n = min(chunk_size, remaining)
        remaining -= n
        if point is not None and reducer is None:
            draws = np.broadcast_to(point, (n,) + point.shape).copy()
        else:
            draws = mean + std * rng.standard_normal((n,) + mean.shape)
        if reducer is not None:
            out = reducer(draws)
        elif isinstance(layer, DropoutSpec):
            out = draws * (rng.random(draws.shape) >= layer.rate)
        elif isinstance(layer, DenseSpec):
            out = dense_det(draws, layer)
        elif isinstance(layer, Conv2DSpec):
            out = conv2d_det(draws, layer)
        elif isinstance(layer, MaxPool2DSpec):
            out = maxpool2d_det(draws, layer)
        elif isinstance(layer, ReluSpec):
            out = relu_det(draws)
        elif isinstance(layer, SoftmaxSpec):
            out = softmax_det(draws)
        else:
            raise TypeError(f"no oracle for layer {type(layer).__name__}")
        if component is not None and reducer is None:
            out = out.reshape(out.shape[0], -1)[:, component]
        acc.add(out)
    return acc.finalize()


def _receptive_field(layer, mean, std, component):
    """Moments of one output component's input patch plus its evaluator."""
    from .layers import _conv_geometry

    c_in, h, w = mean.shape
    if isinstance(layer, Conv2DSpec):
        kh, kw = layer.kernel_size
        oh, ow, (pt, _, pl, _) = _conv_geometry(h, w, kh, kw, layer.stride, layer.padding)
        oc_i, rest = divmod(component, oh * ow)
        y, x = divmod(rest, ow)
        mp_ = np.pad(mean, ((0, 0), (pt, kh), (pl, kw)))  # generous right/bottom pad
        sp_ = np.pad(std, ((0, 0), (pt, kh), (pl, kw)))
        y0, x0 = y * layer.stride, x * layer.stride
        patch_mean = mp_[:, y0 : y0 + kh, x0 : x0 + kw]
        patch_std = sp_[:, y0 : y0 + kh, x0 : x0 + kw]
        kern = layer.kernel[oc_i]
        bias = layer.bias[oc_i]

        def reducer(draws):
            return np.tensordot(draws, kern, axes=([1, 2, 3], [0, 1, 2])) + bias

        return patch_mean, patch_std, reducer
    n = layer.size
    oh, ow = h // n, w // n
    c_i, rest = divmod(component, oh * ow)
    y, x = divmod(rest, ow)
    patch_mean = mean[c_i, y * n : (y + 1) * n, x * n : (x + 1) * n]
    patch_std = std[c_i, y * n : (y + 1) * n, x * n : (x + 1) * n]

    def reducer(draws):
        return draws.reshape(draws.shape[0], -1).max(axis=1)

    return patch_mean, patch_std, reducer
