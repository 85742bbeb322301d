"""Central finite-difference verification of backward passes.

The check drives any ``Layer`` through a scalar probe loss
``sum(forward(x) * g)`` for a fixed random cotangent ``g``, so the exact
gradient of the probe w.r.t. every input and parameter coordinate equals
the analytic backward output.  Each coordinate is then compared against a
central difference with a per-element step ``h = base_h * max(|v|, 1)``.
Run layers in float64; float32 drowns the comparison in roundoff.
"""

import numpy as np

from .errors import NumericError


class GradCheckResult:
    """Max relative error plus the worst offending coordinates."""

    def __init__(self, max_rel_error, worst):
        self.max_rel_error = max_rel_error
        self.worst = worst  # list of (label, analytic, numeric, rel), sorted desc

    def __repr__(self):
        return f"GradCheckResult(max_rel_error={self.max_rel_error:.3e})"


def _rel_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _coord_indices(size, max_coords, rng):
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def finite_diff_check(layer, x, mode="train", seed=0, base_h=1e-3,
                      max_coords=None, check_input=True, check_params=True,
                      n_worst=5):
    """Compare analytic gradients of ``layer`` against central differences.

    Returns a GradCheckResult whose ``max_rel_error`` covers every checked
    input and parameter coordinate (subsampled to ``max_coords`` per array
    when given).
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)

    out0 = layer.forward(x, mode)
    if not np.all(np.isfinite(out0)):
        raise NumericError("forward produced non-finite values at the base point")
    g = rng.standard_normal(out0.shape)

    layer.zero_grads()
    dx = layer.backward(g)
    analytic_params = [(name, p, p.grad.copy()) for name, p in layer.named_params()]

    def probe(xv):
        return float(np.sum(layer.forward(xv, mode) * g))

    records = []

    def check_array(label, arr, analytic, refresh):
        flat = arr.reshape(-1)
        ana = analytic.reshape(-1)
        for idx in _coord_indices(flat.size, max_coords, rng):
            orig = flat[idx]
            h = base_h * max(abs(orig), 1.0)
            flat[idx] = orig + h
            lp = refresh()
            flat[idx] = orig - h
            lm = refresh()
            flat[idx] = orig
            num = (lp - lm) / (2.0 * h)
            records.append((f"{label}[{idx}]", ana[idx], num,
                            _rel_error(ana[idx], num)))

    if check_input:
        check_array("input", x, dx, lambda: probe(x))
    if check_params:
        for name, p, saved in analytic_params:
            check_array(name, p.value, saved, lambda: probe(x))

    # leave the layer's cache consistent with the unperturbed point
    layer.forward(x, mode)
    layer.zero_grads()

    records.sort(key=lambda r: r[3], reverse=True)
    max_rel = records[0][3] if records else 0.0
    return GradCheckResult(max_rel, records[:n_worst])
