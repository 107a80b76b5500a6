"""Dense NCHW tensors and axis-set statistics.

Everything in this library works on contiguous 64-bit float arrays laid
out as (batch, channel, height, width).  Statistics are pooled over one
of four axis sets and come back with singleton reduced axes so they
broadcast straight onto the input they came from:

    BATCH_SPATIAL     pools (N, H, W)   -> (1, C, 1, 1), one value per channel
    CHANNEL_SPATIAL   pools (C, H, W)   -> (N, 1, 1, 1), one value per sample
    SPATIAL           pools (H, W)      -> (N, C, 1, 1), one value per (sample, channel)
    group_spatial(g)  pools (H, W) and the channels inside each of g groups
                                        -> (N, C, 1, 1), constant within a group

Grouped statistics keep the full channel axis (each group's value is
repeated across its member channels), so they broadcast exactly like the
other statistics.

Reductions delegate to numpy's pairwise summation over the reduced axes
in C order (W fastest, N slowest).  The summation order is fixed, so
identical inputs give bit-identical results from run to run.

Variances are always biased (divisor = size of the reduced set).
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AxisSet:
    """Index set a statistic pools over. ``groups`` is used only by grouped reductions."""

    kind: str
    groups: int = 0


BATCH_SPATIAL = AxisSet("batch_spatial")
CHANNEL_SPATIAL = AxisSet("channel_spatial")
SPATIAL = AxisSet("spatial")


def group_spatial(groups):
    """Axis set pooling (H, W) plus the channels inside each of ``groups`` groups."""
    groups = int(groups)
    if groups < 1:
        raise ValueError(f"group count must be >= 1, got {groups}")
    return AxisSet("group_spatial", groups)


def as_tensor4(x):
    """Validate and return ``x`` as a contiguous float64 (N, C, H, W) array."""
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if x.ndim != 4:
        raise ValueError(f"expected a 4-D (N, C, H, W) array, got ndim={x.ndim}")
    if min(x.shape) < 1:
        raise ValueError(f"all dimensions must be >= 1, got shape {x.shape}")
    return x


def _check_groups(axes, channels):
    g = axes.groups
    if g < 1:
        raise ValueError(f"group count must be >= 1, got {g}")
    if channels % g:
        raise ValueError(f"{channels} channels are not divisible into {g} groups")
    return g


def stat_shape(axes, shape):
    """Shape of the statistic `reduce_mean` produces for ``axes`` on input ``shape``."""
    n, c, h, w = shape
    if axes.kind == "batch_spatial":
        return (1, c, 1, 1)
    if axes.kind == "channel_spatial":
        return (n, 1, 1, 1)
    if axes.kind in ("spatial", "group_spatial"):
        return (n, c, 1, 1)
    raise ValueError(f"unknown axis set {axes.kind!r}")


def reduced_count(axes, shape):
    """Number of elements pooled into one statistic value."""
    n, c, h, w = shape
    if axes.kind == "batch_spatial":
        return n * h * w
    if axes.kind == "channel_spatial":
        return c * h * w
    if axes.kind == "spatial":
        return h * w
    if axes.kind == "group_spatial":
        g = _check_groups(axes, c)
        return (c // g) * h * w
    raise ValueError(f"unknown axis set {axes.kind!r}")


def reduce_mean(x, axes):
    """Arithmetic mean over the axis set, broadcast-shaped (singleton reduced axes)."""
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if axes.kind == "batch_spatial":
        return x.mean(axis=(0, 2, 3), keepdims=True)
    if axes.kind == "channel_spatial":
        return x.mean(axis=(1, 2, 3), keepdims=True)
    if axes.kind == "spatial":
        return x.mean(axis=(2, 3), keepdims=True)
    if axes.kind == "group_spatial":
        g = _check_groups(axes, c)
        m = x.reshape(n, g, c // g, h, w).mean(axis=(2, 3, 4))
        # repeat each group's value across its member channels
        return np.repeat(m, c // g, axis=1).reshape(n, c, 1, 1)
    raise ValueError(f"unknown axis set {axes.kind!r}")


def reduce_var(x, mean, axes):
    """Biased variance over the axis set; ``mean`` must come from `reduce_mean`."""
    x = as_tensor4(x)
    expected = stat_shape(axes, x.shape)
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != expected:
        raise ValueError(
            f"mean shape {mean.shape} does not match statistic shape {expected} "
            f"for axis set {axes.kind!r}"
        )
    d = x - mean
    return reduce_mean(d * d, axes)


_BINARY_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def broadcast_binary(x, s, op):
    """Elementwise ``x (op) s`` with ``s`` expanded along its singleton axes.

    ``s`` must have size 1 or the matching size along every axis.  Division
    refuses zero divisor elements instead of emitting inf/nan.
    """
    try:
        fn = _BINARY_OPS[op]
    except KeyError:
        raise ValueError(f"op must be one of {sorted(_BINARY_OPS)}, got {op!r}") from None
    x = as_tensor4(x)
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 4:
        raise ValueError(f"statistic must be 4-D, got ndim={s.ndim}")
    for axis, (xs, ss) in enumerate(zip(x.shape, s.shape)):
        if ss not in (1, xs):
            raise ValueError(
                f"axis {axis}: size {ss} does not broadcast against {xs}"
            )
    if op == "div" and np.any(s == 0.0):
        raise ValueError("division by a statistic with zero elements")
    return fn(x, s)


def rel_error(a, b, floor):
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def max_rel_error(a, b, floor=1e-8):
    """Maximum elementwise relative error with an absolute floor on the denominator."""
    return float(np.max(rel_error(a, b, floor)))
