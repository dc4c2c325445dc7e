"""Central finite-difference checks for every differentiable primitive and the model.

Primitive checks run in float64 so the comparison measures the backward
formulas, not float32 rounding. The whole-model check is run twice: once in
float64 and once with the float32 backward pass compared against differences
taken on a float64 copy of the same weights. Its step is small (1e-6) so the
perturbation rarely moves a pre-activation across the LeakyReLU kink. Each op is checked on several seeded random instances with
the scalar objective ``sum(out * R)`` for a fixed random ``R``. The error of
one instance is ``|g_num - g_ana| / max(|g_num|, |g_ana|, 1e-12)`` over a
random subset of coordinates (vector 2-norms); an op's entry is the maximum
over instances.

Ops are looked up through the ``ops``/``losses``/``model`` modules at call
time, so a patched backward is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses, model as model_mod
from .data import rng_stream
from .nn import ops

OP_TOL = 1e-3
MODEL_TOL = 1e-2
OP_EPS = 1e-2
MODEL_EPS = 1e-6
INSTANCES = 5
COORDS = 24


@dataclass
class GradcheckEntry:
    name: str
    instances: int
    max_rel_err: float
    tol: float

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err <= self.tol

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<30} instances={self.instances} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} {status}"


@dataclass
class GradcheckReport:
    seed: int
    entries: list = field(default_factory=list)

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    def text(self):
        lines = [f"gradcheck seed={self.seed}"]
        lines += [e.line() for e in self.entries]
        lines.append("result: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines) + "\n"


def rel_err(num, ana):
    num = np.asarray(num, dtype=np.float64).ravel()
    ana = np.asarray(ana, dtype=np.float64).ravel()
    den = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
    return float(np.linalg.norm(num - ana) / den)


def numeric_grad(f, arr, coords, eps):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` at flat ``coords`` (``arr`` is perturbed in place)."""
    flat = arr.reshape(-1)
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * eps)
    return out


def _coords(rng, size, n=COORDS):
    return rng.choice(size, size=min(n, size), replace=False)


def _check(f, inputs, grads, rng, eps):
    """Worst error over all checked inputs of one instance."""
    worst = 0.0
    for arr, g in zip(inputs, grads):
        idx = _coords(rng, arr.size)
        num = numeric_grad(f, arr, idx, eps)
        worst = max(worst, rel_err(num, np.asarray(g).reshape(-1)[idx]))
    return worst


def _away_from_zero(rng, shape, margin):
    """Normal samples pushed off the kink at 0 by more than ``margin``."""
    x = rng.standard_normal(shape)
    return np.where(x >= 0, x + 2 * margin, x - 2 * margin)


# ---------------------------------------------------------------- per-op instances

def _conv_instance(rng, kernel, stride):
    cin, cout = rng.integers(1, 4), rng.integers(1, 4)
    shape = tuple(int(v) for v in rng.integers(3, 7, size=3))
    if stride == 2:
        shape = tuple(s + s % 2 for s in shape)
    spec = ops.ConvSpec(int(cin), int(cout), kernel=kernel, stride=stride)
    x = rng.standard_normal((cin,) + shape)
    w = rng.standard_normal(spec.weight_shape()) * 0.5
    b = rng.standard_normal(cout)
    out, _ = ops.conv3d_forward(x, w, b, spec, keep=False)
    R = rng.standard_normal(out.shape)

    def f():
        return float(np.sum(ops.conv3d_forward(x, w, b, spec, keep=False)[0] * R))

    _, cache = ops.conv3d_forward(x, w, b, spec)
    gx, gw, gb = ops.conv3d_backward(R, cache, w)
    return f, (x, w, b), (gx, gw, gb)


def _gn_instance(rng):
    groups = int(rng.integers(1, 4))
    C = groups * int(rng.integers(1, 3))
    shape = (C,) + tuple(int(v) for v in rng.integers(2, 5, size=3))
    x = rng.standard_normal(shape) * 2 + 1
    gamma = rng.standard_normal(C)
    beta = rng.standard_normal(C)
    R = rng.standard_normal(shape)

    def f():
        return float(np.sum(ops.group_norm(x, groups, gamma, beta, keep=False)[0] * R))

    _, cache = ops.group_norm(x, groups, gamma, beta)
    return f, (x, gamma, beta), ops.group_norm_backward(R, cache, gamma)


def _leaky_instance(rng):
    shape = tuple(int(v) for v in rng.integers(2, 6, size=4))
    x = _away_from_zero(rng, shape, OP_EPS)
    R = rng.standard_normal(shape)

    def f():
        return float(np.sum(ops.leaky_relu(x, keep=False)[0] * R))

    _, cache = ops.leaky_relu(x)
    return f, (x,), (ops.leaky_relu_backward(R, cache),)


def _sigmoid_instance(rng):
    shape = tuple(int(v) for v in rng.integers(2, 6, size=4))
    x = rng.standard_normal(shape) * 2
    R = rng.standard_normal(shape)

    def f():
        return float(np.sum(ops.sigmoid(x, keep=False)[0] * R))

    _, cache = ops.sigmoid(x)
    return f, (x,), (ops.sigmoid_backward(R, cache),)


def _upsample_instance(rng):
    shape = (int(rng.integers(1, 3)),) + tuple(int(v) for v in rng.integers(1, 5, size=3))
    x = rng.standard_normal(shape)
    R = rng.standard_normal((shape[0],) + tuple(2 * s for s in shape[1:]))

    def f():
        return float(np.sum(ops.trilinear_upsample2x(x) * R))

    return f, (x,), (ops.trilinear_upsample2x_backward(R),)


def _dense_instance(rng):
    n, m = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    x, w, b = rng.standard_normal(n), rng.standard_normal((m, n)), rng.standard_normal(m)
    R = rng.standard_normal(m)

    def f():
        return float(np.sum(ops.dense(x, w, b) * R))

    return f, (x, w, b), ops.dense_backward(R, x, w)


def _dice_instance(rng):
    shape = tuple(int(v) for v in rng.integers(2, 6, size=3))
    p = rng.uniform(0.05, 0.95, shape)
    t = (rng.random(shape) < 0.4).astype(np.float64)
    s = float(rng.choice([0.0, 1.0, 100.0]))
    if s == 0.0 and not t.any():
        t.flat[0] = 1.0

    def f():
        return losses.soft_dice_loss(p, t, s)[0]

    return f, (p,), (losses.soft_dice_loss(p, t, s)[1],)


def _l2_instance(rng):
    shape = tuple(int(v) for v in rng.integers(2, 6, size=4))
    r, x = rng.standard_normal(shape), rng.standard_normal(shape)

    def f():
        return losses.l2_loss(r, x)[0]

    return f, (r,), (losses.l2_loss(r, x)[1],)


def _kl_instance(rng):
    k = int(rng.integers(1, 12))
    mu, lv = rng.standard_normal(k), rng.standard_normal(k)
    n = int(rng.integers(1, 100))

    def f():
        return losses.kl_loss(mu, lv, n)[0]

    _, gm, gl = losses.kl_loss(mu, lv, n)
    return f, (mu, lv), (gm, gl)


OP_CHECKS = (
    ("conv3d_k3_s1", lambda r: _conv_instance(r, 3, 1)),
    ("conv3d_k3_s2", lambda r: _conv_instance(r, 3, 2)),
    ("conv3d_k1_s1", lambda r: _conv_instance(r, 1, 1)),
    ("group_norm", _gn_instance),
    ("leaky_relu", _leaky_instance),
    ("sigmoid", _sigmoid_instance),
    ("trilinear_upsample2x", _upsample_instance),
    ("dense", _dense_instance),
    ("soft_dice_loss", _dice_instance),
    ("l2_loss", _l2_instance),
    ("kl_loss", _kl_instance),
)


def check_op(name, make, seed, instances=INSTANCES):
    worst = 0.0
    for i in range(instances):
        rng = rng_stream(seed, "gradcheck", name, i)
        f, inputs, grads = make(rng)
        err = _check(f, inputs, grads, rng, OP_EPS)
        worst = max(worst, err if np.isfinite(err) else np.inf)
    return GradcheckEntry(name, instances, worst, OP_TOL)


# ---------------------------------------------------------------- whole model

GRADCHECK_MODEL = model_mod.ModelConfig(
    in_channels=2, base_filters=4, levels=3, patch=(16, 16, 16), latent_dim=4, vae_channels=4
)


def check_model(seed, instances=INSTANCES, n_params=12, dtype=np.float64):
    """Combined loss of the model against finite differences on ``n_params``
    randomly chosen parameter entries per instance.

    The differences are always taken on a float64 copy of the weights; with
    ``dtype=np.float32`` the analytic side is the float32 backward pass, so
    its rounding is measured against an accurate reference.
    """
    worst = 0.0
    for i in range(instances):
        rng = rng_stream(seed, "gradcheck", "model", i)
        ref = model_mod.build_model(GRADCHECK_MODEL, int(rng.integers(2**31)), dtype=np.float64)
        # nonzero biases and GN shifts so their gradients are exercised too
        for t in ref.params.values():
            if t.data.ndim == 1:
                t.data += 0.1 * rng.standard_normal(t.data.shape)
        x = rng.standard_normal((GRADCHECK_MODEL.in_channels,) + GRADCHECK_MODEL.patch)
        regions = (rng.random((3,) + GRADCHECK_MODEL.patch) < 0.3).astype(np.float64)
        noise_seed = int(rng.integers(2**31))
        if dtype != np.float64:
            m = model_mod.Model(GRADCHECK_MODEL, dtype)
            for name, t in ref.params.items():
                m.params[name].data[...] = t.data
                t.data[...] = m.params[name].data  # both copies hold the same representable values
            x = x.astype(dtype)
        else:
            m = ref

        def loss(net, xin, reg):
            out = model_mod.forward(net, xin, "train", np.random.default_rng(noise_seed))
            return losses.combined_loss(out, xin, reg)

        _, _, g = loss(m, x, regions.astype(x.dtype))
        grads = model_mod.backward(m, g["seg_probs"], g["recon"], g["mu"], g["logvar"])
        x64 = x.astype(np.float64)
        names = sorted(ref.params)
        picks = rng.choice(len(names), size=n_params, replace=False)
        num, ana = [], []
        for j in picks:
            name = names[j]
            flat_idx = int(rng.integers(ref.params[name].data.size))
            num.append(numeric_grad(lambda: loss(ref, x64, regions)[0], ref.params[name].data, [flat_idx], MODEL_EPS)[0])
            ana.append(grads[name].reshape(-1)[flat_idx])
        worst = max(worst, rel_err(num, ana))
    label = "model(combined_loss)" if dtype == np.float64 else f"model_{np.dtype(dtype).name}(combined_loss)"
    return GradcheckEntry(label, instances, worst, MODEL_TOL)


def gradcheck_suite(seed=0, include_model=True) -> GradcheckReport:
    report = GradcheckReport(seed)
    for name, make in OP_CHECKS:
        report.entries.append(check_op(name, make, seed))
    if include_model:
        report.entries.append(check_model(seed))
        report.entries.append(check_model(seed, dtype=np.float32))
    return report
