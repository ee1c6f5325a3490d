"""Differentiable model of the passive optical front end.

Each of the 16 channels integrates the eye patch through one binary mask,
``y_k = <I, m_k>``.  During training a mask is the sigmoid of its logits at a
temperature; in hard mode it is the thresholded logits, with gradients passed
straight through the sigmoid.  Pixels outside the aperture never see light
and are zero in every mask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import hadamard

from .geometry import MASK_RADIUS, N_MASKS, PATCH_SIZE, circle_mask, in_circle_count
from .numerics import ContractError
from .pnm import read_pbm, write_pbm

log = logging.getLogger(__name__)

SATURATED_LOGIT = 10.0
STD_FLOOR = 1e-6
FULL_SCALE = float(in_circle_count())

# Design geometry of the fabricated encoder, recorded with exported masks.
MLA_APERTURE_MM = 1.0
MLA_FOCAL_MM = 1.94
MASK_SPOT_MM = 0.256
SENSOR_PITCH_MM = (4.0, 3.88)


@dataclass
class MaskBank:
    logits: np.ndarray
    temperature: float = 1.0
    mode: str = "train"
    frozen: bool = False

    def __post_init__(self):
        if self.mode not in ("train", "hard"):
            raise ContractError(f"unknown mask mode {self.mode!r}")
        if not self.temperature > 0:
            raise ContractError("mask temperature must be positive")
        self.logits = np.ascontiguousarray(self.logits, dtype=np.float32)

    @property
    def n_masks(self) -> int:
        return self.logits.shape[0]

    def hardened(self) -> "MaskBank":
        return replace(self, logits=self.logits.copy(), mode="hard")

    def copy(self) -> "MaskBank":
        return replace(self, logits=self.logits.copy())


@dataclass
class NoiseConfig:
    readout_sigma: float = 0.002
    gain_jitter_sigma: float = 0.01
    enabled: bool = True

    def __post_init__(self):
        if self.readout_sigma < 0 or self.gain_jitter_sigma < 0:
            raise ContractError("noise sigmas must be non-negative")


NOISE_OFF = NoiseConfig(0.0, 0.0, False)


@dataclass
class Measurement:
    y: np.ndarray
    normalized: bool = False


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float32), np.float32(STD_FLOOR))

    def apply(self, y: np.ndarray) -> np.ndarray:
        return (y - self.mean) / self.std

    @classmethod
    def identity(cls, n: int = N_MASKS) -> "NormalizationStats":
        return cls(np.zeros(n, np.float32), np.ones(n, np.float32))


def _support_flat() -> np.ndarray:
    return circle_mask().reshape(-1)


def _sigmoid32(x):
    x = np.clip(np.asarray(x, dtype=np.float32), -80.0, 80.0)
    return np.float32(1.0) / (np.float32(1.0) + np.exp(-x))


def realize_masks(bank: MaskBank) -> np.ndarray:
    """Masks of shape (K, 256, 256): sigmoid(logits/T) in train mode, {0,1} in hard mode."""
    if bank.mode == "hard":
        m = (bank.logits > 0).astype(np.float32)
    else:
        m = _sigmoid32(bank.logits / np.float32(bank.temperature))
    m[:, ~circle_mask()] = 0.0
    return m


def mask_derivative(bank: MaskBank) -> np.ndarray:
    """d mask / d logit used by the backward pass (the same in both modes)."""
    s = _sigmoid32(bank.logits / np.float32(bank.temperature))
    d = s * (1.0 - s) / np.float32(bank.temperature)
    d[:, ~circle_mask()] = 0.0
    return d


def mean_bit_distance(bank: MaskBank) -> float:
    """Mean distance of in-aperture train-mode mask values to the nearest of {0, 1}."""
    s = _sigmoid32(bank.logits / np.float32(bank.temperature))[:, circle_mask()]
    return float(np.minimum(s, 1.0 - s).mean())


def draw_noise(rng: np.random.Generator, n: int, k: int, noise: NoiseConfig):
    """Per-reading multiplicative gain jitter and additive readout noise."""
    if not noise.enabled:
        return None
    gain = rng.normal(0.0, noise.gain_jitter_sigma, (n, k)).astype(np.float32)
    read = rng.normal(0.0, noise.readout_sigma * FULL_SCALE, (n, k)).astype(np.float32)
    return gain, read


def measure_flat(images: np.ndarray, masks: np.ndarray, noise_draw=None) -> np.ndarray:
    """Batched readings: ``images`` (B, P) and ``masks`` (K, P) -> (B, K)."""
    y = images @ masks.T
    if noise_draw is not None:
        gain, read = noise_draw
        y = y * (1.0 + gain) + read
    return y


def measure_backward(images: np.ndarray, masks: np.ndarray, dy: np.ndarray,
                     noise_draw=None, mask_grad: np.ndarray | None = None):
    """Gradients of the readings w.r.t. images (B, P) and mask logits (K, P)."""
    if noise_draw is not None:
        dy = dy * (1.0 + noise_draw[0])
    d_images = dy @ masks
    d_logits = None
    if mask_grad is not None:
        d_logits = (images.T @ dy).T * mask_grad
    return d_images, d_logits


def measure(patch, bank: MaskBank, noise: NoiseConfig = NOISE_OFF,
            rng: np.random.Generator | None = None) -> Measurement:
    """Readings of one patch (256x256) or a batch (B, 256, 256)."""
    patch = np.asarray(patch, dtype=np.float32)
    single = patch.ndim == 2
    if patch.shape[-2:] != (PATCH_SIZE, PATCH_SIZE):
        raise ContractError(f"patch shape {patch.shape} is not {PATCH_SIZE}x{PATCH_SIZE}")
    X = patch.reshape(-1, PATCH_SIZE * PATCH_SIZE)
    M = realize_masks(bank).reshape(bank.n_masks, -1)
    draw = None
    if noise.enabled:
        if rng is None:
            raise ContractError("noise is enabled but no rng was given")
        draw = draw_noise(rng, X.shape[0], bank.n_masks, noise)
    y = measure_flat(X, M, draw)
    return Measurement(y[0] if single else y)


def fit_normalization(measurements) -> NormalizationStats:
    """Per-channel mean and standard deviation over a set of readings."""
    if isinstance(measurements, np.ndarray):
        Y = measurements
    else:
        Y = np.stack([m.y if isinstance(m, Measurement) else np.asarray(m) for m in measurements]) \
            if len(measurements) else np.empty((0, 0))
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] < 2:
        raise ContractError("fit_normalization needs at least two measurements")
    return NormalizationStats(Y.mean(axis=0), Y.std(axis=0))


# -- banks -----------------------------------------------------------------------

def learned_bank(seed: int, n_masks: int = N_MASKS, init_scale: float = 0.5,
                 temperature: float = 1.0, block: int = 1) -> MaskBank:
    """Trainable bank with random logits inside the aperture.

    ``block > 1`` draws one logit per ``block x block`` cell, so the initial
    channels differ at a spatial scale the eye's dark regions actually move on.
    """
    if block < 1 or PATCH_SIZE % block:
        raise ContractError(f"init block {block} must divide {PATCH_SIZE}")
    rng = np.random.default_rng([seed, 0xBA4C])
    cells = PATCH_SIZE // block
    coarse = rng.normal(0.0, init_scale, (n_masks, cells, cells)).astype(np.float32)
    logits = np.repeat(np.repeat(coarse, block, axis=1), block, axis=2)
    logits[:, ~circle_mask()] = -SATURATED_LOGIT
    return MaskBank(logits, temperature, "train", False)


def random_bank(seed: int, density: float = 0.5, n_masks: int = N_MASKS) -> MaskBank:
    """Frozen bank of independent Bernoulli(density) pixels."""
    if not 0.0 < density < 1.0:
        raise ContractError(f"density {density} must lie strictly between 0 and 1")
    rng = np.random.default_rng([seed, 0x4A4D])
    on = rng.random((n_masks, PATCH_SIZE, PATCH_SIZE)) < density
    on[:, ~circle_mask()] = False
    logits = np.where(on, SATURATED_LOGIT, -SATURATED_LOGIT).astype(np.float32)
    return MaskBank(logits, 1.0, "hard", True)


def hadamard_bank() -> MaskBank:
    """Frozen bank of the 16 Walsh-Hadamard patterns on a 4x4 grid of 64 px blocks."""
    H = hadamard(16)
    block = PATCH_SIZE // 4
    ones = np.ones((block, block), dtype=np.int8)
    logits = np.empty((16, PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
    for k in range(16):
        pattern = np.kron(H[k].reshape(4, 4), ones) > 0
        logits[k] = np.where(pattern, SATURATED_LOGIT, -SATURATED_LOGIT)
    logits[:, ~circle_mask()] = -SATURATED_LOGIT
    return MaskBank(logits, 1.0, "hard", True)


def make_bank(kind: str, seed: int, n_masks: int = N_MASKS, density: float = 0.5,
              init_scale: float = 0.5, init_block: int = 1) -> MaskBank:
    if kind == "learned":
        return learned_bank(seed, n_masks, init_scale, block=init_block)
    if kind == "random":
        return random_bank(seed, density, n_masks)
    if kind == "hadamard":
        if n_masks != 16:
            raise ContractError("the Hadamard bank has exactly 16 masks")
        return hadamard_bank()
    raise ContractError(f"unknown bank mode {kind!r}")


# -- fabrication export -------------------------------------------------------------

def export_masks(bank: MaskBank, out_dir) -> list[Path]:
    """Write one P4 bitmap per mask plus ``masks_summary.txt``.

    Bitmap convention: a set bit (black) is opaque chrome, i.e. mask value 0.
    """
    if bank.mode != "hard":
        raise ContractError("only hard-mode banks can be exported")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    masks = realize_masks(bank) > 0.5
    names = [out / f"mask_{k:02d}.pbm" for k in range(bank.n_masks)]
    clash = [p.name for p in names + [out / "masks_summary.txt"] if p.exists()]
    if clash:
        log.warning("overwriting %d existing mask files in %s", len(clash), out)
    for path, m in zip(names, masks):
        write_pbm(path, ~m)
    total = masks.shape[1] * masks.shape[2]
    lines = [
        f"masks {bank.n_masks} size {PATCH_SIZE}x{PATCH_SIZE} aperture_radius_px {MASK_RADIUS:g}",
        f"mla_aperture_mm {MLA_APERTURE_MM} focal_mm {MLA_FOCAL_MM} "
        f"spot_mm {MASK_SPOT_MM} feature_mm {MASK_SPOT_MM / PATCH_SIZE:.6f}",
        f"sensor_pitch_mm {SENSOR_PITCH_MM[0]} x {SENSOR_PITCH_MM[1]}",
        "bitmap: 1 = opaque, 0 = transmissive",
        "mask fill_factor in_aperture_fill",
    ]
    inside = in_circle_count()
    for k, m in enumerate(masks):
        on = int(m.sum())
        lines.append(f"{k:02d} {on / total:.6f} {on / inside:.6f}")
    (out / "masks_summary.txt").write_text("\n".join(lines) + "\n")
    return names


def import_masks(in_dir, n_masks: int = N_MASKS) -> MaskBank:
    src = Path(in_dir)
    logits = np.empty((n_masks, PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
    for k in range(n_masks):
        opaque = read_pbm(src / f"mask_{k:02d}.pbm")
        if opaque.shape != (PATCH_SIZE, PATCH_SIZE):
            raise ContractError(f"mask_{k:02d}.pbm has shape {opaque.shape}")
        logits[k] = np.where(opaque, -SATURATED_LOGIT, SATURATED_LOGIT)
    logits[:, ~circle_mask()] = -SATURATED_LOGIT
    return MaskBank(logits, 1.0, "hard", True)
