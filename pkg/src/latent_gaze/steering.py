"""Latent gaze steering in the decoder's 256-d bottleneck.

A small controller maps a (source, target) gaze pair to a displacement
``dh`` so that the frozen gaze head reads the target gaze from ``h + dh``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig
from .geometry import PITCH_RANGE, YAW_RANGE
from .numerics import (ACTIVATIONS, AdamState, ContractError, Param, adam_step, cosine_distance,
                       cosine_distance_grad, dense_backward, dense_forward)
from .synth_eye import EyeArrays, gaze_to_vector
from .training import angular_errors, cosine_lr, measurements, predict

log = logging.getLogger(__name__)

UNIT_TOL = 1e-3
ACTIVATION = "gelu"


class SteeringError(RuntimeError):
    pass


class SteeringController:
    """Dense 6 -> hidden -> 256; the output layer starts at zero."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {k: Param(k, np.array(v)) for k, v in params.items()}

    @classmethod
    def init(cls, seed: int, hidden: int = 128, width: int = 256) -> "SteeringController":
        rng = np.random.default_rng([seed, 0x57EE])
        lim = np.sqrt(3.0 / 6)
        return cls({
            "fc1.W": rng.uniform(-lim, lim, (hidden, 6)).astype(np.float32),
            "fc1.b": np.zeros(hidden, np.float32),
            "fc2.W": np.zeros((width, hidden), np.float32),
            "fc2.b": np.zeros(width, np.float32),
        })

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}

    def __getitem__(self, k):
        return self.params[k].value

    def delta(self, g_s, g_t, keep_cache: bool = False):
        act, _ = ACTIVATIONS[ACTIVATION]
        x = np.concatenate([np.atleast_2d(g_s), np.atleast_2d(g_t)], axis=1)
        u = dense_forward(x, self["fc1.W"], self["fc1.b"])
        a = act(u)
        d = dense_forward(a, self["fc2.W"], self["fc2.b"])
        return (d, (x, u, a)) if keep_cache else d

    def delta_backward(self, cache, dd):
        x, u, a = cache
        _, act_b = ACTIVATIONS[ACTIVATION]
        da, dW, db = dense_backward(a, self["fc2.W"], dd)
        self.params["fc2.W"].grad += dW
        self.params["fc2.b"].grad += db
        _, dW, db = dense_backward(x, self["fc1.W"], act_b(u, da))
        self.params["fc1.W"].grad += dW
        self.params["fc1.b"].grad += db


def _check_unit(g, name):
    n = np.linalg.norm(np.atleast_2d(g), axis=1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise ContractError(f"{name} must be unit vectors (norm off by > {UNIT_TOL})")


def steer(h, g_s, g_t, c: SteeringController) -> np.ndarray:
    """``h + C(g_s, g_t)``; batched over rows."""
    h = np.asarray(h)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(g_s)) and np.all(np.isfinite(g_t))):
        raise ContractError("steer inputs must be finite")
    _check_unit(g_s, "g_s")
    _check_unit(g_t, "g_t")
    d = c.delta(g_s, g_t)
    return h + (d[0] if h.ndim == 1 else d)


def gaze_head(ckpt: Checkpoint, h) -> np.ndarray:
    p = ckpt.decoder
    return dense_forward(np.atleast_2d(h), p["head.gaze.W"], p["head.gaze.b"])


def _unit(g):
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def random_targets(rng: np.random.Generator, n: int) -> np.ndarray:
    return gaze_to_vector(rng.uniform(*PITCH_RANGE, n), rng.uniform(*YAW_RANGE, n)).astype(np.float32)


def encode(ckpt: Checkpoint, data: EyeArrays):
    """Bottleneck features and predicted unit gaze of the ground-truth-valid samples."""
    keep = np.flatnonzero(data.valid == 1)
    sub = data.take(keep)
    out = predict(ckpt, measurements(sub, ckpt.bank))
    ok = ~out.degenerate
    return out.h[ok], out.gaze_unit[ok].astype(np.float32), sub.vectors[ok], keep[ok]


def steering_loss(c: SteeringController, ckpt: Checkpoint, h, g_s, g_t, mu: float,
                  backward: bool = True) -> float:
    """cos_dist(head(h + C(s,t)), g_t) + mu * |C(s,t) + C(t,s)|^2, averaged over rows."""
    B = h.shape[0]
    d1, c1 = c.delta(g_s, g_t, keep_cache=True)
    d2, c2 = c.delta(g_t, g_s, keep_cache=True)
    g = gaze_head(ckpt, h + d1)
    cyc = d1 + d2
    loss = cosine_distance(g, g_t).mean() + mu * (cyc * cyc).sum(axis=1).mean()
    if backward:
        dg = cosine_distance_grad(g, g_t) / B
        dd1 = dg @ ckpt.decoder["head.gaze.W"]
        dcyc = 2.0 * mu * cyc / B
        c.delta_backward(c1, dd1 + dcyc)
        c.delta_backward(c2, dcyc)
    return float(loss)


@dataclass
class ControllerResult:
    controller: SteeringController
    cycle_rmse: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def train_controller(ckpt: Checkpoint, data: EyeArrays, cfg: RunConfig,
                     val_data: EyeArrays | None = None) -> ControllerResult:
    """Optimize only the controller; decoder and masks are read, never written."""
    s = cfg.steering
    val = val_data if val_data is not None else data
    h_v, gs_v, gt_v, _ = encode(ckpt, val)
    mae = float(angular_errors(gs_v, gt_v).mean()) if len(gs_v) else float("inf")
    if mae > s.max_decoder_mae:
        raise SteeringError(f"decoder validation MAE {mae:.2f} deg exceeds "
                            f"{s.max_decoder_mae:.1f} deg; train the decoder first")
    h, g_s, _, _ = encode(ckpt, data)
    c = SteeringController.init(cfg.train.seed, s.hidden, h.shape[1])
    rng = np.random.default_rng([cfg.train.seed, 0x5EE7])
    probe = rng.choice(len(h_v), size=min(512, len(h_v)), replace=False)
    probe_t = random_targets(rng, len(probe))
    adam = AdamState(s.learning_rate)
    result = ControllerResult(c)
    report_every = max(1, s.steps // 20)
    for step in range(s.steps):
        idx = rng.integers(0, len(h), s.batch_size)
        g_t = random_targets(rng, s.batch_size)
        same = rng.random(s.batch_size) < s.identity_fraction
        g_t[same] = g_s[idx][same]
        loss = steering_loss(c, ckpt, h[idx], g_s[idx], g_t, s.cycle_weight)
        lr = cosine_lr(s.learning_rate, step, s.steps, cfg.train.lr_decay)
        adam_step(c.params.values(), adam, lr)
        result.losses.append(loss)
        if (step + 1) % report_every == 0:
            result.cycle_rmse.append(_cycle_rmse(c, h_v[probe], gs_v[probe], probe_t))
    return result


def _cycle_rmse(c, h, g_s, g_t) -> float:
    h2 = steer(steer(h, g_s, g_t, c), g_t, g_s, c)
    return float(np.sqrt((((h2 - h) ** 2).sum(axis=1) / h.shape[1]).mean()))


@dataclass
class SteeringReport:
    forward_error: float
    backward_error: float
    latent_roundtrip_rmse: float
    identity_error: float
    decoder_reprediction_error: float
    delta_rms: float
    n: int
    forward_errors: np.ndarray = field(repr=False, default=None)
    backward_errors: np.ndarray = field(repr=False, default=None)


def roundtrip_eval(c: SteeringController, ckpt: Checkpoint, data: EyeArrays,
                   seed: int = 0) -> SteeringReport:
    """Steer each valid sample to a random target and back; errors are medians."""
    h, g_s, _, _ = encode(ckpt, data)
    rng = np.random.default_rng([seed, 0x4EE7])
    g_t = random_targets(rng, len(h))
    h1 = steer(h, g_s, g_t, c)
    h2 = steer(h1, g_t, g_s, c)
    fwd = angular_errors(_unit(gaze_head(ckpt, h1)), g_t)
    bwd = angular_errors(_unit(gaze_head(ckpt, h2)), g_s)
    ident = angular_errors(_unit(gaze_head(ckpt, steer(h, g_s, g_s, c))), g_s)
    repred = angular_errors(_unit(gaze_head(ckpt, h)), g_s)
    width = h.shape[1]
    rmse = float(np.sqrt((((h2 - h) ** 2).sum(axis=1) / width).mean()))
    delta_rms = float(np.sqrt((((h1 - h) ** 2).sum(axis=1) / width).mean()))
    return SteeringReport(float(np.median(fwd)), float(np.median(bwd)), rmse,
                          float(np.median(ident)), float(np.median(repred)), delta_rms,
                          len(h), fwd, bwd)


def write_steering(report: SteeringReport, path, config_hash: str = "") -> Path:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["metric", "value"])
        for name in ("forward_error", "backward_error", "latent_roundtrip_rmse",
                     "identity_error", "decoder_reprediction_error", "delta_rms", "n"):
            v = getattr(report, name)
            wr.writerow([name, f"{v:.6f}" if isinstance(v, float) else v])
    return Path(path)


def controller_to_checkpoint(ckpt: Checkpoint, c: SteeringController) -> Checkpoint:
    out = ckpt.copy()
    out.adam = ckpt.adam
    out.steer = {k: v.copy() for k, v in c.arrays().items()}
    return out


def controller_from_checkpoint(ckpt: Checkpoint) -> SteeringController:
    if not ckpt.steer:
        raise SteeringError("checkpoint has no steering controller (run steer-train)")
    return SteeringController(ckpt.steer)
