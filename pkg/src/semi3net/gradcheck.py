"""Central finite-difference checks for every differentiable operation.

Error metric: ``|analytic - numeric| / max(1, |numeric|)``, maximised over
the checked coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import apply_co_attention, apply_self_attention, attention_mask, build_attention
from .backbone import BackboneConfig
from .losses import LossWeights, alignment_loss, contrastive_loss, hybrid_loss
from .model import build_model, forward_triple
from .params import ParameterStore
from .tensor import Tensor

STEP = 1e-6
OP_TOL = 1e-5
E2E_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_error:.3e} (tol {self.tolerance:g}, {self.checked} coords)"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP,
                 coords: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr``, perturbed in place.

    Only ``coords`` are evaluated when given; others are left at 0.
    """
    g = np.zeros_like(arr)
    it = coords if coords is not None else list(np.ndindex(arr.shape))
    for idx in it:
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def check_function(name: str, build: Callable[..., Tensor], inputs: Sequence[Tensor],
                   tol: float = OP_TOL, h: float = STEP, rng: np.random.Generator | None = None) -> CheckResult:
    """Check ``sum(build(*inputs) * w)`` for a fixed random weighting ``w``.

    Random output weights make the scalar depend on every output element
    without the cancellations a plain sum can hide.
    """
    rng = rng or np.random.default_rng(0)
    with T.no_record():
        probe = build(*inputs)
    w = rng.uniform(-1, 1, size=probe.shape)

    def scalar() -> Tensor:
        out = build(*inputs)
        return T.sum(T.elementwise_mul(out, T.constant(w))) if out.ndim else out

    with T.recording():
        grads = T.backward(scalar())

    def f() -> float:
        with T.no_record():
            return scalar().item()

    worst, count = 0.0, 0
    for x in inputs:
        if not x.requires_grad:
            continue
        num = numeric_grad(f, x.data, h)
        worst = max(worst, relative_error(grads[x], num))
        count += x.size
    return CheckResult(name, worst, tol, count)


def _param(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    x = _param(rng, 2, 2, 5, 5)
    k = _param(rng, 3, 2, 3, 3)
    b = _param(rng, 3)
    out.append(check_function("conv2d pad1", lambda x, k, b: T.conv2d(x, k, b, 1, 1), [x, k, b], rng=rng))
    out.append(check_function("conv2d stride2", lambda x, k, b: T.conv2d(x, k, b, 2, 0), [x, k, b], rng=rng))
    out.append(check_function("maxpool2d", lambda x: T.maxpool2d(x, 2, 2), [_param(rng, 2, 3, 4, 6)], rng=rng))
    out.append(check_function("linear", T.linear, [_param(rng, 3, 5), _param(rng, 4, 5), _param(rng, 4)], rng=rng))
    out.append(check_function("relu", T.relu, [_param(rng, 4, 6)], rng=rng))
    out.append(check_function("clamp_min", lambda a: T.clamp_min(a, 0.1), [_param(rng, 4, 6)], rng=rng))
    out.append(check_function("sigmoid", T.sigmoid, [_param(rng, 4, 6, lo=-4, hi=4)], rng=rng))
    out.append(check_function("global_avg_pool", T.global_avg_pool, [_param(rng, 2, 3, 4, 5)], rng=rng))
    out.append(check_function("elementwise_mul", T.elementwise_mul, [_param(rng, 3, 4), _param(rng, 3, 4)], rng=rng))
    out.append(check_function("channel_scale", T.channel_scale, [_param(rng, 2, 3, 4, 4), _param(rng, 2, 3)], rng=rng))
    out.append(check_function("l2_normalize", T.l2_normalize, [_param(rng, 3, 5)], rng=rng))
    out.append(check_function("row_distance", T.row_distance, [_param(rng, 4, 5), _param(rng, 4, 5)], rng=rng))
    out.append(check_function("row_sq_distance", T.row_sq_distance, [_param(rng, 4, 5), _param(rng, 4, 5)], rng=rng))
    y = np.eye(4)[rng.integers(0, 4, size=3)]
    out.append(check_function("cross_entropy", lambda z: T.cross_entropy(z, T.constant(y)),
                              [_param(rng, 3, 4, lo=-3, hi=3)], rng=rng))
    out.append(check_function("reshape+mean", lambda a: T.mean(T.reshape(a, (6, 2))), [_param(rng, 3, 4)], rng=rng))

    unit = lambda a: T.l2_normalize(a)  # noqa: E731
    fa, fb = _param(rng, 4, 6), _param(rng, 4, 6)
    lsim = np.array([1.0, 0.0, 1.0, 0.0])
    # margin 1.8 keeps the hinge active for typical unit-vector distances
    out.append(check_function("contrastive_loss",
                              lambda a, b: contrastive_loss(unit(a), unit(b), lsim, 1.8), [fa, fb], rng=rng))
    out.append(check_function("alignment_loss", lambda a, b: alignment_loss(unit(a), unit(b)), [fa, fb], rng=rng))

    store = ParameterStore(seed)
    ai = build_attention(store, "image.attn", 8, 4)
    ae = build_attention(store, "edgemap.attn", 8, 4)
    for p in store.entries.values():
        p.data = rng.uniform(-1, 1, size=p.shape)
    xi, xe = _param(rng, 2, 8, 3, 3), _param(rng, 2, 8, 3, 3)
    params = list(store.entries.values())
    out.append(check_function("attention_mask", lambda x, *_: attention_mask(ai, x), [xi, *params], rng=rng))
    out.append(check_function("apply_self_attention", lambda x, *_: apply_self_attention(ai, x), [xi, *params], rng=rng))

    def co(xi_, xe_, *_):
        a, b = apply_co_attention(ai, ae, xi_, xe_)
        return T.add(T.reshape(a, (-1,)), T.scale(T.reshape(b, (-1,)), 0.7))

    out.append(check_function("apply_co_attention", co, [xi, xe, *params], rng=rng))
    return out


DESK = BackboneConfig(in_channels=3, stages=((1, 8), (1, 16)), fc_dims=(64,), embed_dim=32,
                      num_classes=8, input_size=16)


def end_to_end_check(config: BackboneConfig = DESK, seed: int = 0, per_tensor: int | None = 24,
                     weights: LossWeights | None = None, strategy: str = "semi3",
                     use_co_attention: bool = True) -> CheckResult:
    """Full triple forward + hybrid loss on a 2-sample batch (one positive, one negative).

    ``per_tensor`` random coordinates are checked in every parameter tensor
    (all coordinates when ``None``).
    """
    rng = np.random.default_rng(seed)
    weights = weights or LossWeights()
    model = build_model(config, strategy, seed=seed, use_co_attention=use_co_attention, weights=weights)
    model.tie()
    for _, p in model.store.unique():
        if p.data.any():
            continue
        p.data = rng.normal(0.0, 0.05, size=p.shape)  # non-zero biases exercise every path
    shape = (2, config.in_channels, config.input_size, config.input_size)
    S, I, E = (T.constant(rng.uniform(-0.5, 0.5, size=shape)) for _ in range(3))
    cats = (np.array([0, 1]), np.array([0, 2 % config.num_classes]), np.array([0, 2 % config.num_classes]))
    l_sim = np.array([1.0, 0.0])
    # a wide SE/SI margin keeps the negative hinge active, so that branch is checked too
    weights = LossWeights(weights.alpha, weights.beta, weights.gamma, m1=2.5, m2=2.5)

    def loss() -> Tensor:
        out = forward_triple(model, S, I, E)
        return hybrid_loss(out, cats, l_sim, weights)[0]

    with T.recording():
        grads = T.backward(loss())

    def f() -> float:
        with T.no_record():
            return loss().item()

    worst, count = 0.0, 0
    for _, p in model.store.unique():
        if per_tensor is None or p.size <= per_tensor:
            coords = list(np.ndindex(p.shape))
        else:
            flat = rng.choice(p.size, size=per_tensor, replace=False)
            coords = [np.unravel_index(i, p.shape) for i in flat]
        num = numeric_grad(f, p.data, STEP, coords)
        sel = tuple(np.array(c) for c in zip(*coords))
        worst = max(worst, relative_error(grads[p][sel], num[sel]))
        count += len(coords)
    return CheckResult(f"end-to-end {strategy} co_attention={use_co_attention}", worst, E2E_TOL, count)


def run_suite(seed: int = 0, per_tensor: int | None = 24) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results = op_checks(seed)
    results.append(end_to_end_check(seed=seed, per_tensor=per_tensor))
    return results, time.perf_counter() - t0
