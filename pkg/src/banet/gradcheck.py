"""Central finite-difference checks of every backward rule.

The error for one tensor is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
with the maxima taken over the whole tensor, so entries whose true gradient is
zero are judged against the tensor's gradient scale. Each differentiable op is
checked on random small instances through the objective ``sum(out * R)``
for a fixed random ``R``; the network checks use pixel cross-entropy.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ad
from . import backbone as bb
from . import fusion as fu
from .config import FUSION_MODES, preset
from .model import BANet
from .texture import texture_forward
from .weights import Scope, WeightStore

FD_STEP = 1e-3
TOLERANCE = 1e-3
# float32 round-off at this step leaves a ~5e-4 noise floor; see README
DEFAULT_DTYPE = np.float64
WEIGHT_JITTER = 0.5
# absolute gradient magnitude treated as exactly zero (float64 FD noise is ~1e-11)
ZERO_FLOOR = 1e-7
KINK_RETRIES = 3
# input entries sampled per network check; every parameter entry is checked
NETWORK_INPUT_ENTRIES = 256
# entries per tensor for the ablation-mode networks
ABLATION_ENTRIES = 8


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ZERO_FLOOR) -> float:
    """max|a - n| / max(|a|, |n|) over the tensor.

    Tensors whose gradient is structurally zero (a bias in front of a
    shift-invariant op, e.g. softmax or training-mode batch norm) have only
    rounding noise on both sides; below `floor` in absolute value they count
    as exact.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale <= floor:
        return 0.0
    return float(np.abs(analytic.astype(np.float64) - numeric).max() / scale)


def _evaluate(objective: Callable[[], float]) -> tuple[float, tuple]:
    with ad.record_kinks() as kinks:
        value = objective()
    return value, tuple(kinks)


def numeric_gradient(objective: Callable[[], float], array: np.ndarray, h: float = FD_STEP,
                     indices=None, shrink: int = KINK_RETRIES) -> np.ndarray:
    """d objective / d array by central differences, perturbing `array` in place.

    The step actually taken is measured after rounding to the array's dtype.
    `indices` restricts the check to some flat positions (others stay 0).
    When the two probes see a different ReLU sign pattern than the base point
    the difference straddles a kink and measures no derivative; the step is
    then divided by 10 (up to `shrink` times) until both sides agree.
    """
    flat = array.reshape(-1)
    grad = np.zeros(flat.shape, np.float64)
    _, base = _evaluate(objective)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        step = h
        for _ in range(shrink + 1):
            flat[i] = orig + step
            plus_x = flat[i]
            f_plus, k_plus = _evaluate(objective)
            flat[i] = orig - step
            minus_x = flat[i]
            f_minus, k_minus = _evaluate(objective)
            if k_plus == base and k_minus == base:
                break
            step /= 10.0
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (float(plus_x) - float(minus_x))
    return grad.reshape(array.shape)


def check_function(fn: Callable[..., ad.Node], inputs: list[np.ndarray], rng: np.random.Generator,
                   h: float = FD_STEP, dtype=DEFAULT_DTYPE) -> float:
    """Max relative error over all inputs of ``fn(*nodes)`` under ``sum(out * R)``."""
    inputs = [np.array(a, dtype=dtype) for a in inputs]
    with ad.no_grad():
        probe = fn(*[ad.constant(a) for a in inputs]).value
    weights = rng.normal(size=probe.shape)

    def objective():
        with ad.no_grad():
            out = fn(*[ad.constant(a) for a in inputs]).value
        return float((out.astype(np.float64) * weights).sum())

    nodes = [ad.parameter(a) for a in inputs]
    out = fn(*nodes)
    ad.backward(ad.sum(ad.mul(out, weights.astype(out.value.dtype))))
    return max(relative_error(n.grad, numeric_gradient(objective, a, h)) for n, a in zip(nodes, inputs))


# ---------------------------------------------------------------------------
# op cases: each returns (fn, inputs) for one random instance
# ---------------------------------------------------------------------------

def _r(rng, *shape, scale=1.0):
    return (rng.normal(size=shape) * scale).astype(np.float32)


def _away_from_zero(rng, *shape):
    x = rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return x.astype(np.float32)


def _case_conv2d(rng):
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h = int(rng.integers(k, 6))
    return (lambda x, w, b: ad.conv2d(x, w, b, s, p)), [_r(rng, n, c, h, h), _r(rng, o, c, k, k), _r(rng, o)]


def _case_conv2d_depthwise(rng):
    c, k = int(rng.integers(1, 4)), int(rng.choice([2, 3]))
    s = int(rng.integers(1, 3))
    return (lambda x, w, b: ad.conv2d(x, w, b, s, 1, c)), [_r(rng, 2, c, 5, 5), _r(rng, c, 1, k, k), _r(rng, c)]


def _case_batch_norm(rng):
    training = bool(rng.integers(0, 2))
    c = int(rng.integers(1, 4))
    rm, rv = _r(rng, c, scale=0.3), rng.uniform(0.5, 2.0, c).astype(np.float32)
    fn = lambda x, g, b: ad.batch_norm(x, g, b, rm, rv, training=training)[0]  # noqa: E731
    return fn, [_r(rng, 2, c, 3, 3), _r(rng, c), _r(rng, c)]


def _case_layer_norm(rng):
    c = int(rng.integers(3, 7))
    return ad.layer_norm, [_r(rng, 2, 3, c), _r(rng, c), _r(rng, c)]


def _case_instance_norm(rng):
    return ad.instance_norm, [_r(rng, 2, 2, 3, int(rng.integers(2, 4)))]


def _case_softmax(rng):
    axis = int(rng.choice([-1, 1]))
    return (lambda x: ad.softmax(x, axis)), [_r(rng, 2, 3, 4)]


def _case_relu(rng):
    return ad.relu, [_away_from_zero(rng, 3, 5)]


def _case_sigmoid(rng):
    return ad.sigmoid, [_r(rng, 3, 5, scale=2.0)]


def _case_gelu(rng):
    return ad.gelu, [_r(rng, 3, 5, scale=2.0)]


def _case_matmul(rng):
    m, k, p = rng.integers(1, 5, size=3)
    return ad.matmul, [_r(rng, 2, m, k), _r(rng, 2, k, p)]


def _case_upsample_nearest(rng):
    f = int(rng.integers(1, 4))
    return (lambda x: ad.upsample(x, f, "nearest")), [_r(rng, 1, 2, 3, 2)]


def _case_upsample_bilinear(rng):
    f = int(rng.integers(1, 4))
    return (lambda x: ad.upsample(x, f, "bilinear")), [_r(rng, 1, 2, 3, 2)]


def _case_concat(rng):
    return (lambda a, b: ad.concat([a, b], 1)), [_r(rng, 2, 1, 3, 3), _r(rng, 2, 2, 3, 3)]


def _case_add(rng):
    return ad.add_same, [_r(rng, 2, 3, 2), _r(rng, 2, 3, 2)]


def _case_hadamard(rng):
    return ad.hadamard, [_r(rng, 2, 3, 2), _r(rng, 2, 3, 2)]


def _case_tokens(rng):
    fn = lambda x: ad.tokens_to_nchw(ad.scale(ad.nchw_to_tokens(x), 2.0), 3, 2)  # noqa: E731
    return fn, [_r(rng, 2, 4, 3, 2)]


def _case_div(rng):
    return ad.div, [_r(rng, 2, 3, 4), rng.uniform(1.0, 2.0, (2, 3, 1)).astype(np.float32)]


def _case_linear(rng):
    return ad.linear, [_r(rng, 2, 3, 4), _r(rng, 5, 4), _r(rng, 5)]


def _case_l2_normalize(rng):
    return (lambda x: ad.l2_normalize(x, 1)), [_r(rng, 2, 3, 4)]


def _case_sum(rng):
    return (lambda x: ad.sum(x, axis=1, keepdims=True)), [_r(rng, 2, 3, 4)]


def _case_cross_entropy(rng):
    labels = rng.integers(0, 3, size=(2, 2, 3))
    labels[0, 0, 0] = 255
    return (lambda z: ad.cross_entropy(z, labels, ignore_label=255)), [_r(rng, 2, 3, 2, 3)]


OP_CASES: dict[str, Callable] = {
    "conv2d": _case_conv2d,
    "conv2d_depthwise": _case_conv2d_depthwise,
    "batch_norm": _case_batch_norm,
    "layer_norm": _case_layer_norm,
    "instance_norm": _case_instance_norm,
    "softmax": _case_softmax,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "gelu": _case_gelu,
    "matmul": _case_matmul,
    "upsample_nearest": _case_upsample_nearest,
    "upsample_bilinear": _case_upsample_bilinear,
    "concat": _case_concat,
    "add": _case_add,
    "hadamard": _case_hadamard,
    "tokens_reshape": _case_tokens,
    "div": _case_div,
    "linear": _case_linear,
    "l2_normalize": _case_l2_normalize,
    "sum": _case_sum,
    "cross_entropy": _case_cross_entropy,
}


# ---------------------------------------------------------------------------
# module and network cases (all weights and the input are checked)
# ---------------------------------------------------------------------------

def jitter(store: WeightStore, rng: np.random.Generator, scale: float = WEIGHT_JITTER) -> None:
    """Move every parameter off its initial value.

    At initialization biases are zero and attention maps are nearly uniform,
    which leaves normalizations with near-zero variance and hides parts of
    the backward rules; checks run at a generic point instead.
    """
    for name, value in store.parameters().items():
        store[name] = value + rng.normal(0.0, scale, value.shape)


def check_module(build: Callable[[ad.Node, Scope], ad.Node], x: np.ndarray, seed: int = 0,
                 training: bool = True, h: float = FD_STEP, max_entries: int | None = None,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE) -> float:
    """Finite-difference check of a parameterised module over its input and weights."""
    rng = rng or np.random.default_rng(seed)
    store = WeightStore(dtype=dtype)
    x = np.array(x, dtype=dtype)
    with ad.no_grad():
        build(ad.constant(x), Scope(store, rng=np.random.default_rng(seed)))
    jitter(store, rng)
    return check_store(build, store, x, rng, training, h, max_entries)


def check_store(build, store: WeightStore, x: np.ndarray, rng: np.random.Generator,
                training: bool = True, h: float = FD_STEP, max_entries: int | None = None,
                labels: np.ndarray | None = None, input_entries: int | None = None) -> float:
    """Check d loss / d (input and every parameter `build` reads from `store`)."""
    x = np.array(x, dtype=store.dtype)

    def run(inp, track):
        sc = Scope(store, training=training, track=track)
        return build(inp, sc), sc

    with ad.no_grad():
        probe = run(ad.constant(x), False)[0].value
    if labels is None:
        weights = rng.normal(size=probe.shape)

        def value(out):
            return float((out.value.astype(np.float64) * weights).sum())

        def loss_node(out):
            return ad.sum(ad.mul(out, weights.astype(out.value.dtype)))
    else:
        def value(out):
            return _cross_entropy_f64(out.value, labels)

        def loss_node(out):
            return ad.cross_entropy(out, labels)

    def objective():
        with ad.no_grad():
            return value(run(ad.constant(x), False)[0])

    def compare(analytic, arr, limit):
        idx = _pick(arr, limit, rng)
        numeric = numeric_gradient(objective, arr, h, idx)
        if idx is not None:
            mask = np.zeros(arr.size, bool)
            mask[idx] = True
            analytic = np.where(mask.reshape(arr.shape), analytic, 0.0)
        return relative_error(analytic, numeric)

    xin = ad.parameter(x)
    out, sc = run(xin, True)
    ad.backward(loss_node(out))
    worst = compare(xin.grad, x, input_entries if input_entries is not None else max_entries)
    for name, node in sc.tracked().items():
        worst = max(worst, compare(node.grad, store[name], max_entries))
    return worst


def _pick(arr, max_entries, rng):
    if max_entries is None or arr.size <= max_entries:
        return None
    return rng.choice(arr.size, max_entries, replace=False)


def _cross_entropy_f64(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    picked = np.take_along_axis(z, labels[:, None].astype(np.int64), axis=1)[:, 0]
    return float((lse - picked).mean())


def check_network(mode: str = "fam", seed: int = 0, size: int = 64, batch: int = 2,
                  h: float = FD_STEP, max_entries: int | None = None, dtype=DEFAULT_DTYPE) -> float:
    """Cross-entropy gradcheck of the micro-preset network in training mode."""
    cfg = preset("micro").replace(fusion={"fusion_mode": mode})
    model = BANet.initialize(cfg, seed)
    store = model.weights.copy(dtype)
    rng = np.random.default_rng(seed + 1)
    jitter(store, rng)
    x = rng.normal(size=(batch, 3, size, size))
    labels = rng.integers(0, cfg.fusion.num_classes, size=(batch, size, size))
    net = BANet(cfg, store)
    return check_store(lambda inp, sc: net.forward(inp, sc), store, x, rng, True, h, max_entries, labels,
                       input_entries=NETWORK_INPUT_ENTRIES)


MODULE_CASES: dict[str, Callable[[np.random.Generator], tuple]] = {
    "stem": lambda rng: (lambda x, sc: bb.stem(x, sc, 4, 2), _r(rng, 2, 3, 8, 8)),
    "patch_embed": lambda rng: (lambda x, sc: bb.patch_embed(x, sc), _r(rng, 2, 2, 4, 4)),
    "emsa": lambda rng: (lambda x, sc: bb.emsa(x, (4, 4), 2, 2, sc), _r(rng, 2, 16, 4)),
    "transformer_block": lambda rng: (lambda x, sc: bb.transformer_block(x, (2, 2), sc, 2, 1, 2.0),
                                      _r(rng, 2, 4, 4)),
    "texture_path": lambda rng: (lambda x, sc: texture_forward(x, sc, (3, 4)), _r(rng, 2, 3, 16, 16)),
    "linear_attention": lambda rng: (lambda x, sc: fu.linear_attention(x, sc, 2), _r(rng, 2, 4, 3, 3)),
    "lam": lambda rng: (lambda x, sc: fu.lam(x, 3, sc, 2), _r(rng, 2, 8, 2, 2)),
    "seg_head": lambda rng: (lambda x, sc: fu.seg_head(x, 3, sc, 4), _r(rng, 2, 4, 2, 2)),
}


@dataclass
class SuiteResult:
    errors: dict[str, float] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < TOLERANCE for e in self.errors.values())

    def report(self) -> str:
        width = max(len(k) for k in self.errors)
        lines = [f"{'op':<{width}}  max_rel_err  status"]
        for name, err in self.errors.items():
            lines.append(f"{name:<{width}}  {err:11.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
        return "\n".join(lines)


def run_suite(seed: int = 0, instances: int = 20, modes=FUSION_MODES,
              module_instances: int = 3, full_mode: str = "fam",
              sampled_entries: int = ABLATION_ENTRIES, log=None) -> SuiteResult:
    """Every op case, every module case and one micro network per fusion mode.

    The `full_mode` network checks every parameter entry; the other fusion
    modes check `sampled_entries` random entries per tensor to bound runtime.
    """
    result = SuiteResult()
    rng = np.random.default_rng(seed)
    for name, case in OP_CASES.items():
        t0 = time.perf_counter()
        errs = []
        for _ in range(instances):
            fn, inputs = case(rng)
            errs.append(check_function(fn, inputs, rng))
        result.errors[name] = max(errs)
        result.seconds[name] = time.perf_counter() - t0
        if log:
            log(f"{name}: {result.errors[name]:.3e}")
    for name, case in MODULE_CASES.items():
        t0 = time.perf_counter()
        errs = []
        for i in range(module_instances):
            build, x = case(rng)
            errs.append(check_module(build, x, seed=seed + i, rng=rng))
        result.errors[name] = max(errs)
        result.seconds[name] = time.perf_counter() - t0
        if log:
            log(f"{name}: {result.errors[name]:.3e}")
    for mode in modes:
        t0 = time.perf_counter()
        key = f"banet[{mode}]"
        limit = None if mode == full_mode else sampled_entries
        result.errors[key] = check_network(mode, seed, max_entries=limit)
        result.seconds[key] = time.perf_counter() - t0
        if log:
            log(f"{key}: {result.errors[key]:.3e}")
    return result
