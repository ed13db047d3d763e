"""Central finite-difference checks of tape gradients.

Every check runs in 64-bit precision.  The error measure is normwise:
``max|tape - fd| / max(max|tape|, max|fd|, floor)`` per tensor.  The floor
is ``1e-6 * max(1, |loss|)``: a gradient that is exactly zero (a bias
feeding a batch norm) is then judged against the difference quotient's
rounding noise, which grows with the loss value.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .layers import (GA, NA, BatchNorm1d, BlockLayer, ChannelLayerNorm, GroupConv1d,
                     global_attention, neighborhood_attention)
from .na_kernel import CLAMPED, PADDED, NaConfig, TileShape
from .tensor import Tape, Tensor

EPS = 1e-5
DENOM_FLOOR = 1e-6


def finite_difference(f: Callable[[], Tensor], t: Tensor, indices, eps=EPS) -> np.ndarray:
    out = np.empty(len(indices))
    for n, idx in enumerate(indices):
        orig = t.data[idx]
        t.data[idx] = orig + eps
        fp = f().item()
        t.data[idx] = orig - eps
        fm = f().item()
        t.data[idx] = orig
        out[n] = (fp - fm) / (2 * eps)
    return out


def tape_gradients(f: Callable[[], Tensor], tensors) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return [t.grad.copy() for t in tensors]


def relative_error(analytic, numeric, floor=DENOM_FLOOR) -> float:
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    if a.size == 0:
        return 0.0
    denom = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / denom)


def check_gradients(f, tensors, eps=EPS, per_tensor=None, rng=None) -> float:
    """Worst relative error over ``tensors``; ``per_tensor`` samples that
    many random entries of each tensor instead of all of them."""
    rng = rng or np.random.default_rng(0)
    grads = tape_gradients(f, tensors)
    floor = DENOM_FLOOR * max(1.0, abs(f().item()))
    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = np.arange(t.size)
        if per_tensor is not None and t.size > per_tensor:
            flat = rng.choice(t.size, per_tensor, replace=False)
        idx = [np.unravel_index(i, t.shape) for i in flat]
        num = finite_difference(f, t, idx, eps)
        worst = max(worst, relative_error([g[i] for i in idx], num, floor))
    return worst


def projected_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)``: a generic loss with a dense gradient."""
    return tn.sum_(out * Tensor(weights))


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} rel_err={self.error:.2e}  (tol {self.tolerance:.0e})"


def _rand(rng, *shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


# each check builds 64-bit inputs and returns the worst relative error

def _unary(op, positive=False):
    def run(rng):
        x = _rand(rng, 3, 4)
        if positive:
            x.data[:] = np.abs(x.data) + 0.5
        w = rng.standard_normal((3, 4))
        return check_gradients(lambda: projected_loss(op(x), w), [x])
    return run


def _check_matmul(rng):
    a, b = _rand(rng, 4, 5), _rand(rng, 5, 3)
    w = rng.standard_normal((4, 3))
    return check_gradients(lambda: projected_loss(tn.matmul(a, b), w), [a, b])


def _check_broadcast_arith(rng):
    a, b = _rand(rng, 2, 3, 4), _rand(rng, 3, 1)
    b.data[:] = np.abs(b.data) + 0.5
    w = rng.standard_normal((2, 3, 4))
    return check_gradients(lambda: projected_loss((a * b - a) / b + b, w), [a, b])


def _check_softmax(rng):
    x = _rand(rng, 3, 5)
    w = rng.standard_normal((3, 5))
    e1 = check_gradients(lambda: projected_loss(tn.softmax(x, 1), w), [x])
    e2 = check_gradients(lambda: projected_loss(tn.log_softmax(x, 0), w), [x])
    return max(e1, e2)


def _check_reductions(rng):
    x, y = _rand(rng, 3, 4), _rand(rng, 3, 2)

    def f():
        v = tn.variance_along(x, 1) + tn.mean(x, 0).sum() + tn.max_along(x, 1)
        c = tn.concat([x, y], axis=1)
        p = tn.pad_end(c[:, 1:5], 2, 1, 0.0, axis=1)
        return tn.sum_(v * v) + tn.sum_(p * p * Tensor(np.arange(21.0).reshape(3, 7)))
    return check_gradients(f, [x, y])


def _na_inputs(rng, H=2, T=11, d=4):
    return [_rand(rng, 1, H, T, d) for _ in range(3)]


def _check_na(impl, mode):
    def run(rng):
        q, k, v = _na_inputs(rng)
        cfg = NaConfig(window=5, heads=2, channels=8, padding_mode=mode)
        w = rng.standard_normal(q.shape)
        return check_gradients(
            lambda: projected_loss(neighborhood_attention(q, k, v, cfg, TileShape(4, 4, 4), impl), w),
            [q, k, v])
    return run


def _check_ga(rng):
    q, k, v = _na_inputs(rng, T=7)
    w = rng.standard_normal(q.shape)
    return check_gradients(lambda: projected_loss(global_attention(q, k, v), w), [q, k, v])


def _check_group_conv(rng):
    x = _rand(rng, 2, 8, 9)
    c1 = GroupConv1d(8, 4, kernel=1, groups=2, rng=rng)
    c2 = GroupConv1d(8, 8, kernel=2, stride=2, groups=4, rng=rng)
    w1, w2 = rng.standard_normal((2, 4, 9)), rng.standard_normal((2, 8, 4))

    def f():
        return projected_loss(c1(x), w1) + projected_loss(c2(x), w2)
    return check_gradients(f, [x] + c1.parameters() + c2.parameters())


def _check_norms(rng):
    x = _rand(rng, 3, 4, 5)
    bn, ln = BatchNorm1d(4), ChannelLayerNorm(4)
    for p in bn.parameters() + ln.parameters():
        p.data[:] = rng.standard_normal(p.shape)
    w = rng.standard_normal((3, 4, 5))
    return check_gradients(lambda: projected_loss(bn(x) * ln(x), w),
                           [x] + bn.parameters() + ln.parameters())


def _check_asp(rng):
    from .model import AttentiveStatsPooling
    x = _rand(rng, 2, 6, 7)
    pool = AttentiveStatsPooling(6, bottleneck=4, rng=rng)
    w = rng.standard_normal((2, 12))
    return check_gradients(lambda: projected_loss(pool(x), w), [x] + pool.parameters())


def _check_aam(rng):
    from .model import AamSubcenterHead, aam_subcenter_loss
    emb = _rand(rng, 3, 6)
    head = AamSubcenterHead(6, 4, k=3, margin=0.2, scale=32.0, rng=rng)
    labels = np.array([0, 2, 3])
    return check_gradients(lambda: aam_subcenter_loss(emb, labels, head), [emb, head.parameters()[0]])


def _check_block(rng):
    x = _rand(rng, 2, 8, 9)
    layers = [BlockLayer(8, kind=NA, heads=2, groups=2, window=3, ffn_hidden=16, rng=rng),
              BlockLayer(8, kind=GA, heads=2, groups=2, ffn_hidden=16, rng=rng)]
    w = rng.standard_normal((2, 8, 9))

    def f():
        h = x
        for layer in layers:
            h = layer(h)
        return projected_loss(h, w)
    params = [p for layer in layers for p in layer.parameters()]
    return check_gradients(f, [x] + params, per_tensor=5, rng=rng)


def miniature_config(**overrides):
    from .model import ModelConfig
    base = dict(variant="pcf", layers_per_block=1, channels=16, na_heads=2, ga_heads=2, window=3,
                mfa_channels=16, embedding_dim=8, asp_bottleneck=8, ffn_mult=2, n_mels=8,
                group_schedule=(2, 2, 1, 1), use_drop_path=False, tile="4x4x4")
    base.update(overrides)
    return ModelConfig(**base)


def _check_model(variant):
    def run(rng):
        from .model import AamSubcenterHead, SpeakerModel, aam_subcenter_loss
        cfg = miniature_config(variant=variant)
        model = SpeakerModel(cfg, seed=int(rng.integers(1 << 31)))
        head = AamSubcenterHead(cfg.embedding_dim, 4, rng=rng)
        x = _rand(rng, 3, cfg.n_mels, 20, requires_grad=False)
        labels = np.array([0, 1, 3])
        return check_gradients(lambda: aam_subcenter_loss(model(x), labels, head),
                               model.parameters() + head.parameters(), per_tensor=5, rng=rng)
    return run


CHECKS = {
    "matmul": (_check_matmul, 1e-4),
    "add/sub/mul/div broadcast": (_check_broadcast_arith, 1e-4),
    "tanh": (_unary(tn.tanh), 1e-4),
    "sigmoid": (_unary(tn.sigmoid), 1e-4),
    "relu": (_unary(tn.relu), 1e-4),
    "gelu": (_unary(tn.gelu), 1e-4),
    "exp": (_unary(tn.exp), 1e-4),
    "log": (_unary(tn.log, positive=True), 1e-4),
    "sqrt": (_unary(tn.sqrt, positive=True), 1e-4),
    "power": (_unary(lambda x: tn.power(x, 3.0)), 1e-4),
    "softmax/log_softmax": (_check_softmax, 1e-4),
    "reductions/concat/slice/pad": (_check_reductions, 1e-4),
    "na naive padded": (_check_na("naive", PADDED), 1e-4),
    "na naive clamped": (_check_na("naive", CLAMPED), 1e-4),
    "na blocked": (_check_na("blocked", PADDED), 1e-4),
    "global attention": (_check_ga, 1e-4),
    "group conv": (_check_group_conv, 1e-4),
    "batch/layer norm": (_check_norms, 1e-4),
    "attentive stats pooling": (_check_asp, 1e-4),
    "aam subcenter loss": (_check_aam, 1e-4),
    "na/ga block (2 layers)": (_check_block, 1e-4),
    "full model (pcf)": (_check_model("pcf"), 1e-3),
    "full model (mfa)": (_check_model("mfa"), 1e-3),
}


def run_check(name: str, seed: int = 0) -> CheckResult:
    fn, tol = CHECKS[name]
    with tn.precision(np.float64):
        err = fn(np.random.default_rng(seed))
    return CheckResult(name, err, tol)


def run_suite(seed: int = 0, names=None) -> list[CheckResult]:
    return [run_check(name, seed) for name in (names or CHECKS)]
