"""Central finite-difference verification of every analytic gradient.

Each check draws a random float64 instance per seed, compares analytic and
numerical gradients per tensor, and keeps the worst relative error over
seeds. The relative error of a tensor is ``||a - n|| / max(||a||, ||n||)``;
when both norms are below ``ZERO_FLOOR`` the gradient is exactly zero
analytically and only finite-difference noise remains, so it counts as 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .losses import MSLossConfig, cross_entropy, ms_loss

LAYER_TOL = 1e-4
END_TO_END_TOL = 1e-3
STEP = 1e-6
# whole-model losses carry ~1e-7 coordinate gradients; a larger step keeps
# roundoff well under the tolerance
END_TO_END_STEP = 1e-5
ZERO_FLOOR = 1e-7


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    seeds: int

    @property
    def passed(self):
        return bool(self.max_rel_err < self.tol)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} max_rel_err={self.max_rel_err:.3e}  tol={self.tol:.0e}  seeds={self.seeds}"


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < ZERO_FLOOR:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numeric_gradient(f, x, coords=None, h=STEP):
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (mutated in place).

    ``coords`` restricts the check to a list of flat indices.
    """
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def directional_derivative(f, x, direction, h=STEP):
    old = x.copy()
    x += h * direction
    fp = f()
    x[...] = old - h * direction
    fm = f()
    x[...] = old
    return (fp - fm) / (2 * h)


def _worst(pairs):
    return max(relative_error(a, n) for a, n in pairs)


# ------------------------------------------------------------ per-layer


def check_gelu(rng):
    x = rng.normal(size=(4, 5)) * 2
    up = rng.normal(size=x.shape)
    f = lambda: float((L.gelu_forward(x) * up).sum())
    return _worst([(L.gelu_backward(x, up), numeric_gradient(f, x))])


def check_involution_bilinear(rng):
    c = int(rng.choice([1, 2, 4]))
    g = int(rng.choice([d for d in (1, 2) if c % d == 0]))
    k = int(rng.choice([1, 3, 5]))
    cfg = L.InvolutionConfig(channels=c, kernel_size=k, groups=g)
    x = rng.normal(size=(2, 4, 3, c))
    h = rng.normal(size=(2, 4, 3, k, k, g))
    up = rng.normal(size=x.shape)
    f = lambda: float((L.involution_forward(x, h, cfg) * up).sum())
    gx, gh = L.involution_backward(x, h, cfg, up)
    return _worst([(gx, numeric_gradient(f, x)), (gh, numeric_gradient(f, h))])


def check_involution_chain(rng):
    c = int(rng.choice([1, 3]))
    layer = L.Involution(L.InvolutionConfig(channels=c), rng, np.float64)
    layer.params["bn_gamma"][:] = rng.uniform(0.5, 1.5, size=1)
    layer.params["bn_beta"][:] = rng.normal(size=1)
    layer.update_stats = False
    x = rng.normal(size=(2, 4, 4, c))
    up = rng.normal(size=x.shape)
    f = lambda: float((layer.forward(x, train=True) * up).sum())
    layer.forward(x, train=True)
    gx = layer.backward(up)
    grads = dict(layer.grads)
    pairs = [(gx, numeric_gradient(f, x))]
    pairs += [(grads[name], numeric_gradient(f, p)) for name, p in layer.params.items()]
    return _worst(pairs)


def check_batchnorm(rng):
    x = rng.normal(size=(3, 4, 2)) * 2 + 1
    state = L.BatchNormState.fresh(2, np.float64)
    state.gamma[:] = rng.uniform(0.5, 1.5, size=2)
    state.beta[:] = rng.normal(size=2)
    state.running_mean[:] = rng.normal(size=2)
    state.running_var[:] = rng.uniform(0.5, 2.0, size=2)
    pairs = []
    for train in (True, False):
        up = rng.normal(size=x.shape)
        f = lambda: float((L.batchnorm_forward(x, state, train, update=False)[0] * up).sum())
        _, cache = L.batchnorm_forward(x, state, train, update=False)
        gx, gg, gb = L.batchnorm_backward(up, state, cache)
        pairs += [(gx, numeric_gradient(f, x)), (gg, numeric_gradient(f, state.gamma)),
                  (gb, numeric_gradient(f, state.beta))]
    return _worst(pairs)


def check_conv2d(rng):
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.normal(size=(2, 4, 5, cin))
    w = rng.normal(size=(3, 3, cin, cout))
    b = rng.normal(size=cout)
    up = rng.normal(size=(2, 4, 5, cout))
    f = lambda: float((L.conv2d_forward(x, w, b) * up).sum())
    gx, gw, gb = L.conv2d_backward(x, w, up)
    return _worst([(gx, numeric_gradient(f, x)), (gw, numeric_gradient(f, w)), (gb, numeric_gradient(f, b))])


def check_gap(rng):
    x = rng.normal(size=(2, 3, 4, 3))
    up = rng.normal(size=(2, 3))
    f = lambda: float((L.gap_forward(x) * up).sum())
    return _worst([(L.gap_backward(x.shape, up), numeric_gradient(f, x))])


def check_dense(rng):
    x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)
    up = rng.normal(size=(3, 4))
    f = lambda: float((L.dense_forward(x, w, b) * up).sum())
    gx, gw, gb = L.dense_backward(x, w, up)
    return _worst([(gx, numeric_gradient(f, x)), (gw, numeric_gradient(f, w)), (gb, numeric_gradient(f, b))])


def check_l2normalize(rng):
    x = rng.normal(size=(3, 6))
    up = rng.normal(size=x.shape)
    f = lambda: float((L.l2normalize_forward(x)[0] * up).sum())
    y, norms = L.l2normalize_forward(x)
    return _worst([(L.l2normalize_backward(y, norms, up), numeric_gradient(f, x))])


def check_cross_entropy(rng):
    logits = rng.normal(size=(4, 10)) * 2
    labels = rng.integers(0, 10, size=4)
    _, grad = cross_entropy(logits, labels)
    return _worst([(grad, numeric_gradient(lambda: cross_entropy(logits, labels)[0], logits))])


def check_ms_loss(rng):
    e = rng.normal(size=(8, 4))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    labels = rng.integers(0, 2, size=8)
    cfg = MSLossConfig()
    _, grad = ms_loss(e, labels, cfg)
    return _worst([(grad, numeric_gradient(lambda: ms_loss(e, labels, cfg)[0], e))])


# ----------------------------------------------------------- end to end


def _model_loss_fn(model, x, y, cfg):
    def f():
        out = model.forward(x, train=True)
        if model.loss == "ce":
            return cross_entropy(out, y)[0]
        return ms_loss(out, y, cfg)[0]
    return f


def check_end_to_end(rng, loss, preset="hybrid1", spatial=5, coords_per_tensor=4, batch=2):
    """Whole trunk + head on a small batch.

    Every trainable tensor is checked along one random direction plus a few
    sampled coordinates, which covers every parameter without one
    finite-difference pair per scalar.
    """
    from .models import build_preset

    model = build_preset(preset, (spatial, spatial, 1), seed=int(rng.integers(2**31)),
                         loss=loss, dtype=np.float64)
    for layer in model.trunk:
        if isinstance(layer, L.Involution):
            layer.update_stats = False
            layer.params["bn_beta"][:] = rng.normal(size=1)
        else:
            # non-zero biases so every bias gradient is exercised
            for name, p in layer.params.items():
                if name == "bias":
                    p[:] = rng.normal(size=p.shape) * 0.1
    x = rng.random((batch, spatial, spatial, 1))
    # MS needs two classes with two samples each for positives and negatives
    y = np.repeat([3, 5], batch // 2) if loss == "ms" else rng.integers(0, 10, size=batch)
    cfg = MSLossConfig()
    f = _model_loss_fn(model, x, y, cfg)
    out = model.forward(x, train=True)
    grad = cross_entropy(out, y)[1] if loss == "ce" else ms_loss(out, y, cfg)[1]
    model.backward(grad)
    worst = 0.0
    for (layer, name), g in zip(model.trainable(), [a.copy() for a in model.gradients()]):
        p = layer.params[name]
        direction = rng.normal(size=p.shape)
        analytic = float((g * direction).sum())
        numeric = directional_derivative(f, p, direction, END_TO_END_STEP)
        worst = max(worst, relative_error([analytic], [numeric]))
        coords = rng.choice(p.size, size=min(coords_per_tensor, p.size), replace=False)
        worst = max(worst, relative_error(g.reshape(-1)[coords], numeric_gradient(f, p, coords, END_TO_END_STEP)))
    return worst


LAYER_CHECKS = {
    "gelu": check_gelu,
    "involution_bilinear": check_involution_bilinear,
    "involution_kernel_chain": check_involution_chain,
    "batchnorm": check_batchnorm,
    "conv2d": check_conv2d,
    "gap": check_gap,
    "dense": check_dense,
    "l2normalize": check_l2normalize,
    "cross_entropy": check_cross_entropy,
    "ms_loss": check_ms_loss,
}

END_TO_END_CHECKS = {
    "end_to_end_hybrid1_ce": lambda rng: check_end_to_end(rng, "ce"),
    "end_to_end_hybrid1_ms": lambda rng: check_end_to_end(rng, "ms", batch=4),
}


def run_all(seed=0, n_seeds=20, checks=None):
    """Run every check over ``n_seeds`` seeds; returns a list of :class:`CheckResult`."""
    selected = {**LAYER_CHECKS, **END_TO_END_CHECKS}
    if checks is not None:
        selected = {k: v for k, v in selected.items() if k in checks}
    results = []
    for name, fn in selected.items():
        tol = END_TO_END_TOL if name in END_TO_END_CHECKS else LAYER_TOL
        worst = 0.0
        for s in range(n_seeds):
            worst = max(worst, fn(np.random.default_rng([seed, s, len(name)])))
        results.append(CheckResult(name, worst, tol, n_seeds))
    return results
