"""The gradient-check suite: every differentiable op, the relation heads and a small network."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .gradcheck import grad_check
from .network import NetworkConfig, forward, init, loss
from .relation import (
    ChannelRelationParams, SpatialRelationParams, apply_integration, channel_relation_augment,
    channel_relation_map, spatial_relation_augment, spatial_relation_feature,
)
from .tensor import Tensor

DEFAULT_TOL = 1e-4


@dataclass(frozen=True)
class Case:
    name: str
    fn: Callable[..., Tensor]
    inputs: Callable[[np.random.Generator], list[np.ndarray]]


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= self.tol


def _away_from_zero(rng, shape, margin=0.05):
    # keeps relu kinks out of reach of the finite-difference step
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x) + (x == 0) * margin, x)


def _labels(rng, shape, k):
    lab = rng.integers(0, k, size=shape)
    lab.flat[0] = 255
    return lab


def _spatial(*ps):
    return SpatialRelationParams(*ps)


def _channel(*ps):
    return ChannelRelationParams(*ps)


def _relation_params(rng, c, c_e):
    return [rng.standard_normal((c_e, c)) * 0.5, rng.standard_normal(c_e) * 0.5,
            rng.standard_normal((c_e, c)) * 0.5, rng.standard_normal(c_e) * 0.5]


_CE_LABELS = _labels(np.random.default_rng(99), (2, 3, 4), 4)
_PROBES = [np.random.default_rng(98).standard_normal(s) for s in ((2, 3, 5, 6), (2, 3, 3, 3))]


def _conv3x3_both_strides(x, w, b):
    """Stride 1 and stride 2 in one scalar, so conv3x3 is a single entry."""
    y1 = T.sum_all(T.mul(T.conv3x3(x, w, b, stride=1), Tensor(_PROBES[0])))
    y2 = T.sum_all(T.mul(T.conv3x3(x, w, b, stride=2), Tensor(_PROBES[1])))
    return T.add(y1, y2)


def op_cases() -> list[Case]:
    """One case per autograd Function, named after the op it exercises.

    Ops that accept a leading batch axis are checked with a batch of two,
    which is the path training takes.
    """
    return [
        Case("add", lambda a, b: T.add(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)]),
        Case("mul", lambda a, b: T.mul(a, b), lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((3, 1))]),
        Case("scale", lambda a: T.scale(a, -1.7), lambda r: [r.standard_normal((3, 3))]),
        Case("sum", lambda a: T.sum_all(a), lambda r: [r.standard_normal((2, 5))]),
        Case("relu", lambda a: T.relu(a), lambda r: [_away_from_zero(r, (4, 5))]),
        Case("matmul", lambda a, b: T.matmul(a, b), lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4, 2))]),
        Case("conv1x1", lambda x, w, b: T.conv1x1(x, w, b),
             lambda r: [r.standard_normal((2, 3, 4, 5)), r.standard_normal((2, 3)), r.standard_normal(2)]),
        Case("conv3x3", _conv3x3_both_strides,
             lambda r: [r.standard_normal((2, 2, 5, 6)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)]),
        Case("softmax_rows", lambda a: T.softmax_rows(a), lambda r: [r.standard_normal((2, 4, 5)) * 2]),
        Case("global_avg_pool", lambda a: T.global_avg_pool(a), lambda r: [r.standard_normal((2, 3, 4, 2))]),
        Case("reshape", lambda a: T.reshape(a, (6, 4)), lambda r: [r.standard_normal((2, 3, 4))]),
        Case("transpose2d", lambda a: T.transpose2d(a), lambda r: [r.standard_normal((2, 3, 5))]),
        Case("concat_channels", lambda a, b: T.concat_channels(a, b),
             lambda r: [r.standard_normal((2, 2, 3, 3)), r.standard_normal((2, 4, 3, 3))]),
        Case("upsample_nearest", lambda a: T.upsample_nearest(a, 2), lambda r: [r.standard_normal((2, 2, 3, 2))]),
        Case("softmax_cross_entropy", lambda z: T.softmax_cross_entropy(z, _CE_LABELS),
             lambda r: [r.standard_normal((2, 4, 3, 4))]),
    ]


def relation_cases() -> list[Case]:
    c, h, w = 4, 5, 6

    def x_and(r, spatial=True, channel=True):
        out = [r.standard_normal((2, c, h, w))]
        out += _relation_params(r, c, c) if spatial else []
        out += _relation_params(r, c, c) if channel else []
        return out

    return [
        Case("spatial_relation_feature", lambda x, *p: spatial_relation_feature(x, _spatial(*p)),
             lambda r: x_and(r, channel=False)),
        Case("spatial_relation_augment", lambda x, *p: spatial_relation_augment(x, _spatial(*p)),
             lambda r: x_and(r, channel=False)),
        Case("channel_relation_map", lambda x, *p: channel_relation_map(x, _channel(*p)),
             lambda r: x_and(r, spatial=False)),
        Case("channel_relation_augment", lambda x, *p: channel_relation_augment(x, _channel(*p)),
             lambda r: x_and(r, spatial=False)),
        Case("serial_integration",
             lambda x, *p: apply_integration(x, "serial", _spatial(*p[:4]), _channel(*p[4:])), x_and),
        Case("parallel_integration",
             lambda x, *p: apply_integration(x, "parallel", _spatial(*p[:4]), _channel(*p[4:])), x_and),
    ]


def network_case(seed: int = 0) -> Case:
    """Batch loss of a 2-class, 8x8-tile serial network with respect to every parameter."""
    cfg = NetworkConfig(num_classes=2, tile=(8, 8), stage_channels=(2, 2, 2), stage_strides=(2, 4, 8),
                        mode="serial", seed=seed)
    net = init(cfg)
    names = list(net.parameters())
    rng = np.random.default_rng(seed + 1)
    image = rng.random((2, 3, 8, 8))
    labels = _labels(rng, (2, 8, 8), 2)

    originals = dict(net.parameters())

    def fn(*params):
        # route the probe tensors through the network by swapping them into its slots
        _swap(net, dict(zip(names, params)))
        try:
            return loss(forward(net, Tensor(image)), labels)
        finally:
            _swap(net, originals)

    def inputs(_r):
        # nudge weights away from zero so relu kinks sit far from the probe step
        return [p.data + 0.1 * np.random.default_rng(seed + 2).standard_normal(p.shape)
                for p in net.parameters().values()]

    return Case("network_serial_2class_8x8", fn, inputs)


def _swap(net, tensors: dict) -> None:
    """Point the network's parameter slots at ``tensors`` (keyed by parameter name)."""
    for i, (w, b) in enumerate(net.stem):
        net.stem[i] = (tensors.get(f"stem{i}.w", w), tensors.get(f"stem{i}.b", b))
    for s, st in enumerate(net.stages):
        st.convs = [(tensors.get(f"stage{s}.conv{j}.w", w), tensors.get(f"stage{s}.conv{j}.b", b))
                    for j, (w, b) in enumerate(st.convs)]
        for attr, prefix, fields in (("channel", "crm", ("w_uc", "b_uc", "w_vc", "b_vc")),
                                     ("spatial", "srm", ("w_us", "b_us", "w_vs", "b_vs"))):
            params = getattr(st, attr)
            if params is None:
                continue
            for f in fields:
                key = f"stage{s}.{prefix}.{f}"
                if key in tensors:
                    setattr(params, f, tensors[key])
        st.cls_w = tensors.get(f"stage{s}.cls.w", st.cls_w)
        st.cls_b = tensors.get(f"stage{s}.cls.b", st.cls_b)


def all_cases() -> list[Case]:
    return op_cases() + relation_cases() + [network_case()]


def run_suite(cases: Sequence[Case] | None = None, tol: float = DEFAULT_TOL, seed: int = 0,
              eps: float = 1e-5) -> list[CheckResult]:
    results = []
    for k, case in enumerate(all_cases() if cases is None else cases):
        arrays = case.inputs(np.random.default_rng([seed, k]))
        t0 = time.perf_counter()
        try:
            err = grad_check(case.fn, [Tensor(a) for a in arrays], eps=eps, seed=seed)
        except ArithmeticError:
            err = float("inf")
        results.append(CheckResult(case.name, float(err), tol, time.perf_counter() - t0))
    return results


def format_results(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'rel. error':>10}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:>10.2e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
