"""Finite-difference checks for every differentiable op, SE block, loss and network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .se import SEVariant, cse_forward, init_se_params, scse_forward, sse_forward
from .tensor import Tensor, check_gradients
from .training import soft_dice_loss, weighted_logistic_loss
from .zoo import build_network, forward_segment, preset_spec

BLOCK_TOL = 1e-5
NET_TOL = 1e-4
NET_SAMPLE_FRACTION = 0.01
NET_INPUT_SIZE = 16


@dataclass
class GradcheckResult:
    name: str
    errors: Dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _leaf(rng, shape, name, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, name=name)


def _project(out_fn: Callable[[], Tensor], shape_probe: Tensor, rng) -> Callable[[], Tensor]:
    """Reduce an op's output to a scalar via a fixed random projection."""
    weights = rng.standard_normal(shape_probe.shape)
    return lambda: (out_fn() * weights).sum()


def _problem_conv(rng):
    x, w, b = _leaf(rng, (2, 3, 5, 5), "input"), _leaf(rng, (4, 3, 3, 3), "weight"), _leaf(rng, (4,), "bias")
    out = lambda: T.conv2d(x, w, b, stride=1, padding=1)
    return _project(out, out(), rng), [x, w, b]


def _problem_conv_strided(rng):
    x, w = _leaf(rng, (1, 2, 7, 7), "input"), _leaf(rng, (3, 2, 3, 3), "weight")
    out = lambda: T.conv2d(x, w, None, stride=2, padding=0)
    return _project(out, out(), rng), [x, w]


def _problem_fc(rng):
    x, w, b = _leaf(rng, (3, 5), "input"), _leaf(rng, (4, 5), "weight"), _leaf(rng, (4,), "bias")
    out = lambda: T.fully_connected(x, w, b)
    return _project(out, out(), rng), [x, w, b]


def _problem_pool(rng):
    x = _leaf(rng, (2, 2, 4, 4), "input")
    out = lambda: T.max_pool2d(x, 2)[0]
    return _project(out, out(), rng), [x]


def _problem_unpool(rng):
    x = _leaf(rng, (2, 2, 3, 3), "input")
    idx = rng.integers(0, 4, size=(2, 2, 3, 3))
    out = lambda: T.max_unpool2d(x, idx, 2)
    return _project(out, out(), rng), [x]


def _problem_upsample(rng):
    x = _leaf(rng, (1, 2, 3, 3), "input")
    out = lambda: T.upsample_nearest(x, 2)
    return _project(out, out(), rng), [x]


def _problem_relu(rng):
    x = _leaf(rng, (3, 4), "input")
    out = lambda: T.relu(x)
    return _project(out, out(), rng), [x]


def _problem_sigmoid(rng):
    x = _leaf(rng, (3, 4), "input", -4, 4)
    out = lambda: T.sigmoid(x)
    return _project(out, out(), rng), [x]


def _problem_softmax(rng):
    x = _leaf(rng, (2, 3, 2, 2), "logits", -2, 2)
    out = lambda: T.softmax_channels(x)
    return _project(out, out(), rng), [x]


def _problem_concat(rng):
    a, b = _leaf(rng, (1, 2, 3, 3), "a"), _leaf(rng, (1, 3, 3, 3), "b")
    out = lambda: T.concat_channels(a, b)
    return _project(out, out(), rng), [a, b]


def _problem_arith(rng):
    a, b = _leaf(rng, (2, 3), "a", 0.5, 2), _leaf(rng, (3,), "b", 0.5, 2)
    out = lambda: T.tlog(a * b + a / b) - T.texp(b).mean() + a.sum(axis=0, keepdims=True)
    return _project(out, out(), rng), [a, b]


def _se_input(rng, c=4):
    return _leaf(rng, (2, c, 5, 5), "U")


def _se_leaves(p) -> List[Tensor]:
    return list(p.tensors().values())


def _problem_cse(rng):
    u = _se_input(rng)
    p = init_se_params(SEVariant.CSE, 4, 2, seed=int(rng.integers(1 << 30)), prefix="cse")
    out = lambda: cse_forward(u, p)
    return _project(out, out(), rng), [u] + _se_leaves(p)


def _problem_sse(rng):
    u = _se_input(rng)
    p = init_se_params(SEVariant.SSE, 4, 2, seed=int(rng.integers(1 << 30)), prefix="sse")
    out = lambda: sse_forward(u, p)
    return _project(out, out(), rng), [u] + _se_leaves(p)


def _problem_scse(rng):
    u = _se_input(rng)
    p = init_se_params(SEVariant.SCSE, 4, 2, seed=int(rng.integers(1 << 30)), prefix="scse")
    out = lambda: scse_forward(u, p.channel_part(), p.spatial_part())
    return _project(out, out(), rng), [u] + _se_leaves(p)


def _problem_loss_ce(rng):
    logits = _leaf(rng, (2, 3, 4, 4), "logits", -2, 2)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    weights = rng.uniform(0.5, 2.0, size=3)
    return (lambda: weighted_logistic_loss(logits, labels, weights)), [logits]


def _problem_loss_dice(rng):
    probs = _leaf(rng, (2, 3, 4, 4), "probs", 0.05, 1.0)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    return (lambda: soft_dice_loss(probs, labels)), [probs]


LAYER_PROBLEMS = {
    "conv": _problem_conv,
    "conv-strided": _problem_conv_strided,
    "fully-connected": _problem_fc,
    "max-pool": _problem_pool,
    "max-unpool": _problem_unpool,
    "upsample": _problem_upsample,
    "relu": _problem_relu,
    "sigmoid": _problem_sigmoid,
    "softmax": _problem_softmax,
    "concat": _problem_concat,
    "arithmetic": _problem_arith,
}
SE_PROBLEMS = {"cse": _problem_cse, "sse": _problem_sse, "scse": _problem_scse}
LOSS_PROBLEMS = {"loss-ce": _problem_loss_ce, "loss-dice": _problem_loss_dice}
BLOCK_PROBLEMS = {**LAYER_PROBLEMS, **SE_PROBLEMS, **LOSS_PROBLEMS}
CLI_BLOCKS = ("cse", "sse", "scse", "conv", "loss-ce", "loss-dice", "net")


def gradcheck_block(name: str, seed: int = 0, eps: float = 1e-5) -> GradcheckResult:
    if name not in BLOCK_PROBLEMS:
        raise KeyError(f"unknown block {name!r}")
    fn, params = BLOCK_PROBLEMS[name](np.random.default_rng(seed))
    return GradcheckResult(name, check_gradients(fn, params, eps=eps), BLOCK_TOL)


def sample_elements(sizes: List[int], fraction: float, rng: np.random.Generator) -> Dict[int, List[int]]:
    """Uniformly pick ``fraction`` of all scalars; returns {tensor index: flat indices}."""
    total = sum(sizes)
    k = max(1, int(round(fraction * total)))
    picks = np.sort(rng.choice(total, size=k, replace=False))
    offsets = np.cumsum([0] + list(sizes))
    out: Dict[int, List[int]] = {i: [] for i in range(len(sizes))}
    for f in picks:
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        out[i].append(int(f - offsets[i]))
    return out


def gradcheck_network(
    arch: str = "unet",
    variant="scse",
    seed: int = 0,
    eps: float = 1e-5,
    fraction: float = NET_SAMPLE_FRACTION,
    size: int = NET_INPUT_SIZE,
) -> GradcheckResult:
    """End-to-end check of d mean(logits) / d params on the desk preset.

    Biases are moved off their zero initialization so that the check point
    is generic (zero biases feeding dead units put pre-activations exactly on
    a ReLU kink, where the derivative does not exist).
    """
    net = build_network(preset_spec("desk", arch, variant), seed)
    rng = np.random.default_rng([seed, 1])
    for name, p in net.params.items():
        if name.endswith(".bias"):
            p.data[...] = rng.uniform(-0.1, 0.1, size=p.shape)
    x = rng.random((1, net.spec.input_channels, size, size))
    params = net.parameters()
    sample = sample_elements([p.size for p in params], fraction, rng)
    errors = check_gradients(lambda: forward_segment(net, x).mean(), params, eps=eps, sample=sample)
    errors = {k: v for (k, v), p in zip(errors.items(), params) if sample[params.index(p)]}
    label = f"net[{arch},{SEVariant.parse(variant).value}]"
    return GradcheckResult(label, errors, NET_TOL)


def group_errors(result: GradcheckResult) -> Dict[str, float]:
    """Collapse per-tensor errors into parameter groups (layer prefixes)."""
    groups: Dict[str, float] = {}
    for key, err in result.errors.items():
        group = key.rsplit(".", 1)[0] if "." in key else key
        groups[group] = max(groups.get(group, 0.0), err)
    return groups
