"""The student decoder: 16 normalized readings -> bottleneck h, gaze, validity.

Topology (default widths)::

    LN(16) -> FC 16->256 + act -> FC 256->256 + act            (upscaling block)
           -> x + FC(act(FC(LN(x))))                           (residual bottleneck)
           -> FC 256->256 + act = h                            (pre-head)
           -> gaze head FC 256->3, validity head FC 256->1 + sigmoid
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import N_MASKS
from .numerics import (ACTIVATIONS, ContractError, Param, dense_backward, dense_forward,
                       layer_norm_backward, layer_norm_forward, sigmoid)

BOTTLENECK = 256
HEAD_NAMES = ("head.gaze.W", "head.gaze.b", "head.valid.W", "head.valid.b")

# per-element cost of non-dense ops, used by count_flops
LN_FLOPS_PER_ELEMENT = 8
ACT_FLOPS_PER_ELEMENT = {"relu": 1, "gelu": 8}
SIGMOID_FLOPS = 4


@dataclass(frozen=True)
class DecoderConfig:
    n_in: int = N_MASKS
    width: int = BOTTLENECK
    activation: str = "relu"
    eps: float = 1e-5

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.n_in < 2 or self.width < 2:
            raise ContractError("decoder widths must be at least 2")

    def shapes(self) -> dict[str, tuple]:
        n, w = self.n_in, self.width
        return {
            "in_norm.scale": (n,), "in_norm.shift": (n,),
            "up.W": (w, n), "up.b": (w,),
            "up2.W": (w, w), "up2.b": (w,),
            "res.norm.scale": (w,), "res.norm.shift": (w,),
            "res.fc1.W": (w, w), "res.fc1.b": (w,),
            "res.fc2.W": (w, w), "res.fc2.b": (w,),
            "pre.W": (w, w), "pre.b": (w,),
            "head.gaze.W": (3, w), "head.gaze.b": (3,),
            "head.valid.W": (1, w), "head.valid.b": (1,),
        }


class DecoderParams:
    """Named decoder parameters in a fixed order."""

    def __init__(self, config: DecoderConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        shapes = config.shapes()
        if set(arrays) != set(shapes):
            missing = sorted(set(shapes) - set(arrays))
            extra = sorted(set(arrays) - set(shapes))
            raise ContractError(f"decoder parameter set mismatch: missing {missing}, extra {extra}")
        self.params: dict[str, Param] = {}
        for name, shape in shapes.items():
            a = np.asarray(arrays[name])
            if a.shape != shape:
                raise ContractError(f"layer {name}: shape {a.shape}, expected {shape}")
            self.params[name] = Param(name, np.array(a, dtype=a.dtype if a.dtype == np.float64
                                                     else np.float32))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def __iter__(self):
        return iter(self.params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.config, {k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> "DecoderParams":
        out = DecoderParams(self.config, self.arrays())
        for p in out:
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return out

    def zero_grad(self):
        for p in self:
            p.zero_grad()

    def equals(self, other: "DecoderParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(a, other[k]) for k, a in self.arrays().items())


@dataclass
class DecoderOutput:
    h: np.ndarray
    gaze: np.ndarray
    gaze_unit: np.ndarray
    valid_prob: np.ndarray
    valid: np.ndarray
    valid_logit: np.ndarray
    degenerate: np.ndarray


def count_params(p) -> int:
    cfg = p.config if isinstance(p, DecoderParams) else p
    return int(sum(np.prod(s) for s in cfg.shapes().values()))


def count_flops(p) -> int:
    """FLOPs of one forward pass: 2*MACs + bias adds + per-element op costs."""
    cfg = p.config if isinstance(p, DecoderParams) else p
    n, w = cfg.n_in, cfg.width
    act = ACT_FLOPS_PER_ELEMENT[cfg.activation]
    dense = [(n, w), (w, w), (w, w), (w, w), (w, w), (w, 3), (w, 1)]
    total = sum(2 * i * o + o for i, o in dense)
    total += 2 * n                                  # (y - mean) * inv_std
    total += LN_FLOPS_PER_ELEMENT * (n + w)         # two layer norms
    total += act * 4 * w                            # up, up2, res.fc1, pre
    total += w                                      # residual add
    total += SIGMOID_FLOPS + 3 * 2 + 2              # sigmoid, gaze norm and divide
    return int(total)


def init_params(seed: int, config: DecoderConfig | None = None,
                teacher_heads: dict[str, np.ndarray] | None = None) -> DecoderParams:
    """Fan-in scaled uniform weights (stdev 1/sqrt(fan_in)), zero biases, unit norms.

    ``teacher_heads`` may supply any of the gaze/validity head arrays, which are
    copied verbatim.
    """
    config = config or DecoderConfig()
    rng = np.random.default_rng([seed, 0xDEC])
    arrays = {}
    for name, shape in config.shapes().items():
        if name.endswith(".W"):
            limit = np.sqrt(3.0 / shape[1])
            arrays[name] = rng.uniform(-limit, limit, shape).astype(np.float32)
        elif name.endswith(".scale"):
            arrays[name] = np.ones(shape, np.float32)
        else:
            arrays[name] = np.zeros(shape, np.float32)
    shapes = config.shapes()
    for name, value in (teacher_heads or {}).items():
        if name not in HEAD_NAMES:
            continue
        value = np.asarray(value, dtype=np.float32)
        if value.shape != shapes[name]:
            raise ContractError(f"teacher head {name}: shape {value.shape}, expected {shapes[name]}")
        arrays[name] = value.copy()
    return DecoderParams(config, arrays)


def forward(y_norm: np.ndarray, p: DecoderParams, keep_cache: bool = False):
    """Batched forward pass.  ``y_norm`` is (B, n_in) or (n_in,).

    Returns a :class:`DecoderOutput` (and the backward cache if requested).
    """
    y = np.asarray(y_norm)
    single = y.ndim == 1
    if single:
        y = y[None, :]
    if not np.all(np.isfinite(y)):
        raise ContractError("decoder input is not finite")
    cfg = p.config
    act, _ = ACTIVATIONS[cfg.activation]
    z, ln0 = layer_norm_forward(y, p["in_norm.scale"], p["in_norm.shift"], cfg.eps)
    u1 = dense_forward(z, p["up.W"], p["up.b"])
    a1 = act(u1)
    u2 = dense_forward(a1, p["up2.W"], p["up2.b"])
    a2 = act(u2)
    r0, ln1 = layer_norm_forward(a2, p["res.norm.scale"], p["res.norm.shift"], cfg.eps)
    u3 = dense_forward(r0, p["res.fc1.W"], p["res.fc1.b"])
    a3 = act(u3)
    r = dense_forward(a3, p["res.fc2.W"], p["res.fc2.b"])
    x = a2 + r
    u4 = dense_forward(x, p["pre.W"], p["pre.b"])
    h = act(u4)
    g = dense_forward(h, p["head.gaze.W"], p["head.gaze.b"])
    logit = dense_forward(h, p["head.valid.W"], p["head.valid.b"])[:, 0]
    prob = sigmoid(logit)
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    degenerate = norm[:, 0] == 0
    unit = np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)
    out = DecoderOutput(h, g, unit, prob, (prob > 0.5).astype(np.int8), logit, degenerate)
    if single:
        out = DecoderOutput(*(getattr(out, f)[0] for f in out.__dataclass_fields__))
    if not keep_cache:
        return out
    cache = (y, ln0, z, u1, a1, u2, a2, ln1, r0, u3, a3, x, u4, h)
    return out, cache


def backward(cache, p: DecoderParams, d_h=None, d_gaze=None, d_logit=None) -> np.ndarray:
    """Accumulate parameter gradients into ``p`` and return d loss / d y_norm.

    ``d_h`` is any gradient arriving directly on the bottleneck (feature
    distillation); ``d_gaze`` (B, 3) and ``d_logit`` (B,) are head gradients.
    """
    y, ln0, z, u1, a1, u2, a2, ln1, r0, u3, a3, x, u4, h = cache
    _, act_b = ACTIVATIONS[p.config.activation]
    P = p.params
    B = h.shape[0]
    dh = np.zeros_like(h) if d_h is None else np.array(d_h, dtype=h.dtype).reshape(B, -1)

    def acc(name, g):
        P[name].grad += g.astype(P[name].grad.dtype, copy=False)

    if d_gaze is not None:
        dx, dW, db = dense_backward(h, p["head.gaze.W"], np.asarray(d_gaze).reshape(B, 3))
        acc("head.gaze.W", dW)
        acc("head.gaze.b", db)
        dh = dh + dx
    if d_logit is not None:
        dx, dW, db = dense_backward(h, p["head.valid.W"], np.asarray(d_logit).reshape(B, 1))
        acc("head.valid.W", dW)
        acc("head.valid.b", db)
        dh = dh + dx
    du4 = act_b(u4, dh)
    dx, dW, db = dense_backward(x, p["pre.W"], du4)
    acc("pre.W", dW)
    acc("pre.b", db)
    da2 = dx
    dr, dW, db = dense_backward(a3, p["res.fc2.W"], dx)
    acc("res.fc2.W", dW)
    acc("res.fc2.b", db)
    du3 = act_b(u3, dr)
    dr0, dW, db = dense_backward(r0, p["res.fc1.W"], du3)
    acc("res.fc1.W", dW)
    acc("res.fc1.b", db)
    d, ds, dsh = layer_norm_backward(dr0, ln1)
    acc("res.norm.scale", ds)
    acc("res.norm.shift", dsh)
    da2 = da2 + d
    du2 = act_b(u2, da2)
    da1, dW, db = dense_backward(a1, p["up2.W"], du2)
    acc("up2.W", dW)
    acc("up2.b", db)
    du1 = act_b(u1, da1)
    dz, dW, db = dense_backward(z, p["up.W"], du1)
    acc("up.W", dW)
    acc("up.b", db)
    dy, ds, dsh = layer_norm_backward(dz, ln0)
    acc("in_norm.scale", ds)
    acc("in_norm.shift", dsh)
    return dy


# -- deployment packing -------------------------------------------------------------

PackedDecoder = namedtuple("PackedDecoder", [
    "mean", "inv_std", "in_scale", "in_shift", "W_up", "b_up", "W_up2", "b_up2",
    "res_scale", "res_shift", "W_r1", "b_r1", "W_r2", "b_r2", "W_pre", "b_pre",
    "W_g", "b_g", "W_v", "b_v", "activation", "eps"])


def pack_for_inference(p: DecoderParams, stats) -> PackedDecoder:
    """Contiguous float32 copies of everything the deployment path reads."""
    f = lambda a: np.ascontiguousarray(a, dtype=np.float32)
    return PackedDecoder(
        f(stats.mean), f(1.0 / stats.std), f(p["in_norm.scale"]), f(p["in_norm.shift"]),
        f(p["up.W"]), f(p["up.b"]), f(p["up2.W"]), f(p["up2.b"]),
        f(p["res.norm.scale"]), f(p["res.norm.shift"]),
        f(p["res.fc1.W"]), f(p["res.fc1.b"]), f(p["res.fc2.W"]), f(p["res.fc2.b"]),
        f(p["pre.W"]), f(p["pre.b"]), f(p["head.gaze.W"]), f(p["head.gaze.b"]),
        f(p["head.valid.W"]), f(p["head.valid.b"]),
        0 if p.config.activation == "relu" else 1, float(p.config.eps))


def deployment_engine(p: DecoderParams, stats, backend=None):
    """Single-sample inference object with ``infer(y_raw, gaze_out) -> valid_prob``."""
    return kernels.inference_engine(pack_for_inference(p, stats), backend)
