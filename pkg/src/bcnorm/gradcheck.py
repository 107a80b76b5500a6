"""Finite-difference validation of analytic backward passes.

The oracle is deliberately independent of the code it checks: it only
ever calls a layer's *forward* pass.  A scalar loss is formed by a fixed,
seeded random projection of the layer output; central differences of
that loss are compared against the analytic gradients, per parameter
group, with a relative-error floor so near-zero entries do not blow up
the ratio.

Layers with running statistics must be checked with their EMA updates
suspended (``update_stats=False``), otherwise the two evaluations of
f(x + h) and f(x - h) would see different state and the +-h symmetry
central differences rely on would be broken.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor_ops import rel_error


def finite_diff(f, x, h=1e-5):
    """Central differences of a scalar function, elementwise over ``x``.

    Returns an array of f's partial derivatives, (f(x + h*e) - f(x - h*e)) / 2h.
    """
    if not h > 0.0:
        raise ValueError(f"step must be > 0, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    xt = x.copy()
    flat = xt.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(xt))
        flat[i] = orig - h
        fm = float(f(xt))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at element {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class GroupCheck:
    """Comparison outcome for one parameter group."""

    max_rel_error: float
    worst_index: int
    passed: bool


@dataclass
class GradReport:
    """Per-group outcome of checking one layer's backward pass."""

    layer: str
    h: float
    tol: float
    groups: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(g.passed for g in self.groups.values())

    def rows(self):
        """One (layer, group, max_rel_error, worst_index, h, tol, status) row per group."""
        return [
            (self.layer, name, g.max_rel_error, g.worst_index, self.h, self.tol,
             "pass" if g.passed else "FAIL")
            for name, g in self.groups.items()
        ]


def _compare(analytic, numeric, tol, floor):
    errs = rel_error(analytic, numeric, floor)
    worst = int(np.argmax(errs))
    err = float(errs.flat[worst])
    return GroupCheck(err, worst, err < tol)


def check_layer(layer, x, tol=1e-4, seed=0, h=1e-5, floor=1e-6, name=None):
    """Check a layer's analytic gradients against central differences.

    The layer must expose ``forward(x, training=True, update_stats=...)``,
    ``backward(dy) -> dx``, a ``params`` dict of named arrays, and a
    ``grads`` dict filled by backward.  The loss is sum(W * forward(x))
    for a seeded uniform projection W, scaled by 1/output-size so the
    loss stays O(1) and its evaluation noise stays far below tol * floor.
    """
    x = np.asarray(x, dtype=np.float64)
    # separate stream from whatever seeded x: a projection correlated with
    # the input can be a null direction of a standardizing layer, which
    # turns the whole check into a comparison of rounding noise
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x70C7)))

    def run(t):
        return layer.forward(t, training=True, update_stats=False)

    out_shape = run(x).shape
    proj = rng.uniform(-1.0, 1.0, size=out_shape) / float(np.prod(out_shape))

    def loss_from_input(t):
        return float(np.sum(proj * run(t)))

    # analytic pass first; copy results before the probes overwrite the cache
    run(x)
    dx = np.array(layer.backward(proj))
    analytic_params = {k: v.copy() for k, v in layer.grads.items()}

    report = GradReport(layer=name or type(layer).__name__, h=h, tol=tol)
    report.groups["x"] = _compare(dx, finite_diff(loss_from_input, x, h), tol, floor)

    for pname, param in layer.params.items():
        def loss_from_param(v, _param=param):
            saved = _param.copy()
            _param[...] = v
            try:
                return loss_from_input(x)
            finally:
                _param[...] = saved

        numeric = finite_diff(loss_from_param, param.copy(), h)
        report.groups[pname] = _compare(analytic_params[pname], numeric, tol, floor)
    return report
