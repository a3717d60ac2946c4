"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Layer

STEP = 1e-5
# entries whose gradients are both below this are compared absolutely
ABS_FLOOR = 1e-6


@dataclass
class GradcheckReport:
    name: str
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.n_checked} entries)")


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR)


def _probe(size: int, max_entries, rng) -> np.ndarray:
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_entries, replace=False))


def numeric_gradient(f, x: np.ndarray, entries, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. the given flat entries of ``x`` (in place)."""
    flat = x.reshape(-1)
    out = np.empty(len(entries))
    for k, i in enumerate(entries):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * h)
    return out


def check_function(name, f, grad, x, tolerance=1e-4, max_entries=None, seed=0, h=STEP):
    """Compare ``grad(x)`` against central differences of scalar ``f(x)``."""
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    entries = _probe(x.size, max_entries, rng)
    analytic = np.asarray(grad(x.copy()), dtype=np.float64).reshape(-1)[entries]
    numeric = numeric_gradient(lambda: f(x), x, entries, h)
    return GradcheckReport(name, float(relative_error(analytic, numeric).max()),
                           len(entries), tolerance)


def check_layer(name, layer: Layer, x, train=True, tolerance=1e-4, max_entries=60,
                seed=0, h=STEP, before_forward=None):
    """Check input and parameter gradients of ``layer`` under loss = sum(R * layer(x)).

    ``before_forward`` is called ahead of every forward pass (used to reset
    dropout masks). At most ``max_entries`` coordinates of each tensor are
    probed.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)

    def run():
        if before_forward is not None:
            before_forward()
        return layer.forward(x, train)

    out = run()
    proj = rng.standard_normal(out.shape)
    for p in layer.params():
        p.zero_grad()
    dx = layer.backward(proj.copy())

    def loss():
        return float((run() * proj).sum())

    errors = []
    n = 0
    entries = _probe(x.size, max_entries, rng)
    errors.append(relative_error(dx.reshape(-1)[entries], numeric_gradient(loss, x, entries, h)))
    n += len(entries)
    for p in layer.params():
        entries = _probe(p.value.size, max_entries, rng)
        analytic = p.grad.reshape(-1)[entries].copy()
        errors.append(relative_error(analytic, numeric_gradient(loss, p.value, entries, h)))
        n += len(entries)
    return GradcheckReport(name, float(max(e.max() for e in errors)), n, tolerance)


def _spread(rng, shape):
    """Distinct, well-separated values (no max-pool ties, no ReLU kinks within h)."""
    n = int(np.prod(shape))
    v = (rng.permutation(n) + 0.5) / n * 4.0 - 2.0
    return v.reshape(shape)


def _layer_cases(rng):
    from .layers import (BatchNorm, Conv2d, Dense, Dropout, Flatten, GlobalTimeAvgPool,
                         HeteroFreqMaxPool, MaxPoolTime, ReLU)
    f64 = np.float64
    drop = Dropout(0.5)

    def reset_drop():
        drop.rng = np.random.default_rng(7)

    bn_eval = BatchNorm("bn", 4, dtype=f64)
    bn_eval.running_mean.value[:] = rng.standard_normal(4)
    bn_eval.running_var.value[:] = rng.uniform(0.5, 2.0, 4)
    return [
        ("conv3x3", Conv2d("conv", 3, 4, rng, f64), rng.standard_normal((2, 6, 5, 3)), True, None),
        ("conv3x3_narrowing", Conv2d("conv", 6, 2, rng, f64), rng.standard_normal((2, 4, 5, 6)),
         True, None),
        ("batchnorm_train", BatchNorm("bn", 4, dtype=f64), rng.standard_normal((3, 4, 5, 4)),
         True, None),
        ("batchnorm_eval", bn_eval, rng.standard_normal((3, 4, 5, 4)), False, None),
        ("relu", ReLU(), _spread(rng, (2, 3, 4, 2)), True, None),
        ("dropout", drop, rng.standard_normal((4, 10)), True, reset_drop),
        ("maxpool_time", MaxPoolTime(), _spread(rng, (2, 4, 7, 3)), True, None),
        ("hetero_freq_pool", HeteroFreqMaxPool(), _spread(rng, (2, 6, 5, 3)), True, None),
        ("global_time_avg", GlobalTimeAvgPool(), rng.standard_normal((2, 3, 6, 4)), True, None),
        ("flatten", Flatten(), rng.standard_normal((2, 3, 1, 4)), True, None),
        ("dense", Dense("fc", 7, 5, rng, f64), rng.standard_normal((3, 7)), True, None),
    ]


def _loss_cases(rng, seed, tolerance):
    from .losses import contrastive_loss, softmax_cross_entropy

    logits = rng.standard_normal((4, 5))
    labels = rng.integers(0, 5, size=4)
    yield check_function("softmax_cross_entropy", lambda z: softmax_cross_entropy(z, labels)[0],
                         lambda z: softmax_cross_entropy(z, labels)[1], logits, tolerance,
                         seed=seed)
    # distances kept away from 0 and from the margin, where the loss has kinks
    z_i = rng.standard_normal((6, 4))
    z_j = z_i + rng.standard_normal((6, 4))
    d = np.sqrt(((z_i - z_j) ** 2).sum(axis=1))
    y = np.array([0, 1, 0, 1, 0, 1])
    margin = float(np.median(d[y == 1])) if np.ptp(d[y == 1]) > 0.2 else float(d.max() + 1)
    while np.min(np.abs(d - margin)) < 1e-3:
        margin += 0.01
    yield check_function("contrastive_loss_zi",
                         lambda z: contrastive_loss(z, z_j, y, margin)[0],
                         lambda z: contrastive_loss(z, z_j, y, margin)[1], z_i, tolerance,
                         seed=seed)
    yield check_function("contrastive_loss_zj",
                         lambda z: contrastive_loss(z_i, z, y, margin)[0],
                         lambda z: contrastive_loss(z_i, z, y, margin)[2], z_j, tolerance,
                         seed=seed)


def run_suite(tolerance: float = 1e-4, seeds: int = 10) -> list[GradcheckReport]:
    """Finite-difference check of every differentiable operator, in double precision.

    Each operator is checked under ``seeds`` random draws; the report keeps
    the worst relative error.
    """
    worst: dict = {}
    for seed in range(seeds):
        rng = np.random.default_rng([seed, 17])
        reports = [check_layer(name, layer, x, train, tolerance, seed=seed, before_forward=hook)
                   for name, layer, x, train, hook in _layer_cases(rng)]
        reports += list(_loss_cases(rng, seed, tolerance))
        for r in reports:
            prev = worst.get(r.name)
            if prev is None:
                worst[r.name] = r
            else:
                worst[r.name] = GradcheckReport(r.name, max(prev.max_rel_error, r.max_rel_error),
                                                prev.n_checked + r.n_checked, tolerance)
    return list(worst.values())
