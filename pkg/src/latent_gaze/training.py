"""Objective, training loop, evaluation and K-point subject calibration."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .checkpoint import Checkpoint, read_container
from .config import ConfigError, LossWeights, RunConfig
from .decoder import DecoderConfig, HEAD_NAMES, backward, forward, init_params
from .geometry import PATCH_SIZE, circle_mask
from .numerics import (AdamState, ContractError, Param, adam_step, binary_cross_entropy,
                       binary_cross_entropy_logit_grad, cosine_distance, cosine_distance_grad)
from .optics import (MaskBank, NormalizationStats, _sigmoid32, draw_noise, fit_normalization,
                     make_bank, mean_bit_distance, measure_flat, realize_masks)
from .synth_eye import EyeArrays, draw_augmentation, gaze_to_vector

log = logging.getLogger(__name__)

TEACHER_MAX_DEG = 2.0
DARK_LEVEL = 0.5
TEACHER_SCALE = 1.0
STATS_FIT_LIMIT = 4096


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good: Checkpoint):
        super().__init__(msg)
        self.last_good = last_good


# -- objective -------------------------------------------------------------------

@dataclass
class TeacherOutput:
    h_T: np.ndarray
    gaze_T: np.ndarray


@dataclass
class LossResult:
    loss: float
    per_sample: np.ndarray
    d_gaze: np.ndarray
    d_h: np.ndarray | None
    d_logit: np.ndarray
    terms: dict = field(default_factory=dict)


def total_loss(gaze, h, valid_logit, gaze_gt, v, teacher: TeacherOutput | None,
               w: LossWeights, reduction: str = "mean") -> LossResult:
    """Weighted sum of supervised, validity, gaze-distillation and feature terms.

    Gaze and feature terms are gated by the ground-truth validity ``v``; the
    validity BCE applies to every sample.  Gradients are returned with respect
    to the raw gaze head output, the bottleneck ``h`` and the validity logit.
    """
    gaze = np.atleast_2d(gaze)
    h = np.atleast_2d(h)
    gaze_gt = np.atleast_2d(gaze_gt)
    logit = np.atleast_1d(valid_logit)
    v = np.atleast_1d(np.asarray(v, dtype=gaze.dtype))
    if w.distills and teacher is None:
        raise ConfigError("distillation weights are set but no teacher was given")
    B = gaze.shape[0]
    scale = 1.0 / B if reduction == "mean" else 1.0
    gate = v[:, None]
    terms = {}

    sup = cosine_distance(gaze, gaze_gt)
    per = w.lambda_sup * v * sup
    d_gaze = w.lambda_sup * gate * cosine_distance_grad(gaze, gaze_gt)
    terms["sup"] = sup

    p = 1.0 / (1.0 + np.exp(-logit))
    bce = binary_cross_entropy(p, v)
    per = per + w.lambda_cls * bce
    d_logit = w.lambda_cls * binary_cross_entropy_logit_grad(logit, v)
    terms["cls"] = bce

    d_h = None
    if teacher is not None and w.distills:
        gT = np.atleast_2d(teacher.gaze_T)
        hT = np.atleast_2d(teacher.h_T)
        if w.lambda_gaze_distill > 0:
            gd = cosine_distance(gaze, gT)
            per = per + w.lambda_gaze_distill * v * gd
            d_gaze = d_gaze + w.lambda_gaze_distill * gate * cosine_distance_grad(gaze, gT)
            terms["gaze_distill"] = gd
        if w.lambda_feat_distill > 0:
            diff = h - hT
            fd = (diff * diff).sum(axis=1)
            per = per + w.lambda_feat_distill * v * fd
            d_h = w.lambda_feat_distill * gate * 2.0 * diff * scale
            terms["feat_distill"] = fd
    return LossResult(float(per.sum() * scale), per, d_gaze * scale, d_h, d_logit * scale, terms)


# -- mock teacher ----------------------------------------------------------------------

_MOMENT_ORDERS = [(p, q) for p in range(4) for q in range(4)]
_BLOCK = 16


def _block_fraction() -> np.ndarray:
    m = circle_mask().astype(np.float64)
    return m.reshape(_BLOCK, PATCH_SIZE // _BLOCK, _BLOCK, PATCH_SIZE // _BLOCK).mean(axis=(1, 3))


def _teacher_projection(width: int) -> np.ndarray:
    rng = np.random.default_rng(0x7EAC)
    return rng.normal(0.0, 1.0, (width, len(_MOMENT_ORDERS)))


def teacher_moments(patches: np.ndarray, return_blocks: bool = False):
    """16 darkness-weighted moments of the 16x16 block-mean map, per patch.

    Darkness counts only how far a block falls below mid-gray, so the moments
    track the iris and pupil rather than the skin.
    """
    X = np.asarray(patches).reshape(-1, PATCH_SIZE, PATCH_SIZE)
    s = PATCH_SIZE // _BLOCK
    blocks = X.reshape(-1, _BLOCK, s, _BLOCK, s).mean(axis=(2, 4), dtype=np.float64)
    frac = _block_fraction()
    dark = np.clip(DARK_LEVEL * frac - blocks, 0.0, None)
    u = np.linspace(-1.0, 1.0, _BLOCK)
    mass = dark.sum(axis=(1, 2)) + 1e-9
    feats = np.empty((X.shape[0], len(_MOMENT_ORDERS)))
    for j, (p, q) in enumerate(_MOMENT_ORDERS):
        if p == 0 and q == 0:
            feats[:, j] = mass / (DARK_LEVEL * frac.sum())
        else:
            w = np.outer(u ** p, u ** q)
            feats[:, j] = (dark * w).sum(axis=(1, 2)) / mass
    return (feats, blocks) if return_blocks else feats


def _perturb(g: np.ndarray, rng: np.random.Generator, max_deg: float) -> np.ndarray:
    g = g / np.linalg.norm(g)
    a = rng.normal(size=3)
    a -= a.dot(g) * g
    a /= np.linalg.norm(a)
    ang = math.radians(rng.uniform(0.0, max_deg))
    return math.cos(ang) * g + math.sin(ang) * a


def mock_teacher(patches, gaze_gt, seed: int = 0, width: int = 256) -> TeacherOutput:
    """Frozen stand-in for the image-space teacher.

    ``h_T`` is a fixed random linear map of image moments, rectified to match
    the student's non-negative bottleneck and scaled so that |h_T|^2 is O(1).
    ``gaze_T`` is the label rotated by at most 2 degrees with a rotation seeded
    by (seed, CRC32 of the patch's block-mean map).
    """
    X = np.asarray(patches, dtype=np.float32)
    single = X.ndim == 2
    X = X.reshape(-1, PATCH_SIZE, PATCH_SIZE)
    G = np.atleast_2d(np.asarray(gaze_gt, dtype=np.float64))
    A = _teacher_projection(width)
    moments, blocks = teacher_moments(X, return_blocks=True)
    h = np.maximum(moments @ A.T, 0.0) * (TEACHER_SCALE / math.sqrt(width))
    gT = np.empty_like(G)
    for i in range(X.shape[0]):
        rng = np.random.default_rng([seed, zlib.crc32(blocks[i].tobytes())])
        gT[i] = _perturb(G[i], rng, TEACHER_MAX_DEG)
    h = h.astype(np.float32)
    gT = gT.astype(np.float32)
    return TeacherOutput(h[0], gT[0]) if single else TeacherOutput(h, gT)


@dataclass
class TeacherTable:
    """Teacher outputs from a file, keyed by training sample order."""

    h: np.ndarray
    gaze: np.ndarray
    heads: dict

    @classmethod
    def load(cls, path, n_samples: int, width: int = 256) -> "TeacherTable":
        _, e = read_container(path)
        if "teacher.h" not in e or "teacher.gaze" not in e:
            raise ConfigError(f"{path}: teacher file needs teacher.h and teacher.gaze")
        h, g = e["teacher.h"], e["teacher.gaze"]
        if h.shape != (n_samples, width) or g.shape != (n_samples, 3):
            raise ConfigError(f"{path}: teacher shapes {h.shape}/{g.shape} do not match "
                              f"{n_samples} samples")
        return cls(h, g, {k: v for k, v in e.items() if k in HEAD_NAMES})


# -- helpers -----------------------------------------------------------------------------

def _labels(data: EyeArrays, idx, flips=None) -> np.ndarray:
    yaw = data.yaw[idx]
    if flips is not None:
        yaw = np.where(flips, -yaw, yaw)
    return gaze_to_vector(data.pitch[idx], yaw).astype(np.float32)


def _patches(data: EyeArrays, idx) -> np.ndarray:
    return data.images[idx].reshape(len(idx), -1).astype(np.float32) * np.float32(1 / 255)


def measurements(data: EyeArrays, bank: MaskBank, batch: int = 512, hard: bool = True,
                 limit: int | None = None) -> np.ndarray:
    """Noise-free readings of (the first ``limit``) samples."""
    b = bank.hardened() if hard else bank
    M = realize_masks(b).reshape(b.n_masks, -1)
    n = len(data) if limit is None else min(limit, len(data))
    out = np.empty((n, b.n_masks), np.float32)
    for s in range(0, n, batch):
        idx = np.arange(s, min(s + batch, n))
        out[idx] = measure_flat(_patches(data, idx), M)
    return out


def temperature_at(step: int, total: int, start: float, end: float) -> float:
    if total <= 1:
        return end if total == 1 else start
    return float(start * (end / start) ** (step / (total - 1)))


def batch_gradients(dec, stats: NormalizationStats, X, M, g_gt, v, w: LossWeights,
                    teacher: TeacherOutput | None = None, draw=None, M_der=None):
    """Loss of one batch; decoder gradients accumulate into ``dec``.

    Returns ``(loss_result, mask_logit_grad)``.  The mask gradient is gated per
    sample by ``v`` so invalid samples shape only the decoder's validity path,
    never the optics.  It is None when ``M_der`` is None (frozen bank).
    """
    v = np.asarray(v, dtype=np.float32)
    Y = measure_flat(X, M, draw)
    out, cache = forward(stats.apply(Y), dec, keep_cache=True)
    res = total_loss(out.gaze, out.h, out.valid_logit, g_gt, v, teacher, w)
    dYn = backward(cache, dec, res.d_h, res.d_gaze, res.d_logit)
    if M_der is None:
        return res, None
    dY = dYn / stats.std * v[:, None]
    if draw is not None:
        dY = dY * (1.0 + draw[0])
    return res, (dY.T @ X) * M_der


def initial_checkpoint(cfg: RunConfig, teacher_heads=None) -> Checkpoint:
    t = cfg.train
    bank = make_bank(t.bank_mode, t.seed, t.n_masks, t.mask_density, t.mask_init_scale,
                     t.mask_init_block)
    bank.temperature = t.temperature_start if t.bank_mode == "learned" else 1.0
    dec = init_params(t.seed, DecoderConfig(t.n_masks, t.width, t.activation), teacher_heads)
    stats = NormalizationStats.identity(t.n_masks)
    return Checkpoint(dec, bank, stats, cfg.hash(), cfg.to_dict())


# -- training ----------------------------------------------------------------------------

@dataclass
class CurveRow:
    epoch: int
    train_loss: float
    val_mae_deg: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list[CurveRow]
    bit_distance: list[float]


def train(data: EyeArrays, cfg: RunConfig, val_data: EyeArrays | None = None,
          teacher: TeacherTable | None = None,
          progress: Callable[[CurveRow], None] | None = None) -> TrainResult:
    """Jointly optimize mask logits (learned mode) and the decoder."""
    t = cfg.train
    if len(data) == 0:
        raise ContractError("training set is empty")
    w = cfg.loss
    if w.distills and t.teacher_source == "none":
        raise ConfigError("distillation weights > 0 need a teacher (teacher_source mock|file)")
    if t.teacher_source == "file" and teacher is None:
        teacher = TeacherTable.load(t.teacher_file, len(data), t.width)
    ckpt = initial_checkpoint(cfg, teacher.heads if teacher else None)
    # provisional stats under the initial masks; refit after the warm-up epoch
    ckpt.stats = fit_normalization(measurements(data, ckpt.bank, hard=False,
                                                limit=STATS_FIT_LIMIT))
    if t.epochs == 0:
        return TrainResult(ckpt, [], [])

    learned = t.bank_mode == "learned"
    noise = cfg.noise.to_noise()
    rng = np.random.default_rng([t.seed, 0x7A1])
    dec = ckpt.decoder
    bank = ckpt.bank
    logits = Param("bank.logits", bank.logits.reshape(bank.n_masks, -1))
    support = circle_mask().reshape(-1)
    adam_dec = AdamState(t.learning_rate)
    adam_mask = AdamState(t.mask_learning_rate)
    n = len(data)
    steps_per_epoch = math.ceil(n / t.batch_size)
    total_steps = steps_per_epoch * t.epochs
    step = 0
    curve: list[CurveRow] = []
    bit_dist: list[float] = []
    last_good = ckpt.copy()
    use_teacher = w.distills

    for epoch in range(1, t.epochs + 1):
        perm = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = np.sort(perm[b * t.batch_size:(b + 1) * t.batch_size])
            B = len(idx)
            lr = cosine_lr(t.learning_rate, step, total_steps, t.lr_decay)
            if t.augment:
                aug = draw_augmentation(rng, B)
                X = kernels.warp_batch(data.images[idx], aug, 1.0 / 255.0).reshape(B, -1)
                flips = aug[:, 3] != 0
            else:
                X = _patches(data, idx)
                flips = None
            g_gt = _labels(data, idx, flips)
            v = data.valid[idx].astype(np.float32)

            if learned:
                bank.temperature = temperature_at(step, total_steps, t.temperature_start,
                                                  t.temperature_end)
                s = _sigmoid32(logits.value / np.float32(bank.temperature))
                M = s * support
                M_der = s * (1 - s) / np.float32(bank.temperature) * support
            elif b == 0 and epoch == 1:
                M = realize_masks(bank).reshape(bank.n_masks, -1)
            draw = draw_noise(rng, B, bank.n_masks, noise)
            tout = None
            if use_teacher:
                if teacher is not None:
                    gT = teacher.gaze[idx].copy()
                    if flips is not None:
                        gT[flips, 0] *= -1
                    tout = TeacherOutput(teacher.h[idx], gT)
                else:
                    tout = mock_teacher(X.reshape(B, PATCH_SIZE, PATCH_SIZE), g_gt, t.seed, t.width)
            res, d_logits = batch_gradients(dec, ckpt.stats, X, M, g_gt, v, w, tout, draw,
                                            M_der if learned else None)
            if not math.isfinite(res.loss):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", last_good)
            losses.append(res.loss)
            params = list(dec)
            if learned:
                logits.grad += d_logits
            try:
                adam_step(params, adam_dec, lr)
                if learned:
                    adam_step([logits], adam_mask, t.mask_learning_rate * lr / t.learning_rate)
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), last_good) from exc
            step += 1

        if epoch == 1:
            ckpt.stats = fit_normalization(measurements(data, bank, hard=False,
                                                        limit=STATS_FIT_LIMIT))
        if learned:
            bit_dist.append(mean_bit_distance(bank))
        mae = float("nan")
        if val_data is not None and len(val_data):
            mae = evaluate(_deployable(ckpt), val_data).mean_angular_error
        row = CurveRow(epoch, float(np.mean(losses)), mae)
        curve.append(row)
        log.info("epoch %d loss %.4f val_mae %.2f", epoch, row.train_loss, mae)
        if progress:
            progress(row)
        last_good = ckpt.copy()

    ckpt.adam = adam_dec
    return TrainResult(_deployable(ckpt), curve, bit_dist)


def _deployable(ckpt: Checkpoint) -> Checkpoint:
    out = ckpt.copy()
    out.adam = ckpt.adam
    out.bank.mode = "hard"
    out.bank.frozen = True
    return out


def _hash_line(fh, config_hash: str) -> None:
    if config_hash:
        fh.write(f"# config_hash={config_hash}\n")


def write_curve(curve: list[CurveRow], path, config_hash: str = "") -> Path:
    with open(path, "w", newline="") as fh:
        _hash_line(fh, config_hash)
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "train_loss", "val_mae_deg"])
        for r in curve:
            wr.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_mae_deg:.6f}"])
    return Path(path)


# -- evaluation -----------------------------------------------------------------------

@dataclass
class EvalReport:
    mean_angular_error: float
    validity_accuracy: float
    per_sample_errors: np.ndarray
    n_valid: int
    valid_gt: np.ndarray
    valid_pred: np.ndarray
    predictions: np.ndarray = field(repr=False, default=None)


def cosine_lr(base: float, step: int, total: int, floor: float) -> float:
    """Cosine decay from ``base`` to ``floor * base`` over ``total`` steps."""
    frac = step / max(total - 1, 1)
    return base * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


def angular_errors(pred_unit: np.ndarray, gt: np.ndarray) -> np.ndarray:
    gt = gt / np.linalg.norm(gt, axis=-1, keepdims=True)
    dots = np.clip((pred_unit.astype(np.float64) * gt).sum(axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dots))


def report_from_predictions(pred_unit, valid_pred, gt_vec, valid_gt) -> EvalReport:
    valid_gt = np.asarray(valid_gt).astype(np.int8)
    valid_pred = np.asarray(valid_pred).astype(np.int8)
    errs = angular_errors(np.asarray(pred_unit), np.asarray(gt_vec, dtype=np.float64))
    sel = valid_gt == 1
    mae = float(errs[sel].mean()) if sel.any() else float("nan")
    acc = float((valid_gt == valid_pred).mean()) if len(valid_gt) else float("nan")
    return EvalReport(mae, acc, errs[sel], int(sel.sum()), valid_gt, valid_pred, pred_unit)


def predict(ckpt: Checkpoint, Y: np.ndarray):
    return forward(ckpt.stats.apply(Y), ckpt.decoder)


def evaluate(ckpt: Checkpoint, data: EyeArrays, Y: np.ndarray | None = None) -> EvalReport:
    """Noise-free evaluation with hard masks; MAE over ground-truth-valid samples."""
    if Y is None:
        Y = measurements(data, ckpt.bank)
    out = predict(ckpt, Y)
    return report_from_predictions(out.gaze_unit, out.valid, data.vectors, data.valid)


def write_eval(report: EvalReport, path, config_hash: str = "") -> Path:
    with open(path, "w", newline="") as fh:
        _hash_line(fh, config_hash)
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["sample_id", "error_deg", "valid_gt", "valid_pred"])
        k = 0
        for i, (vg, vp) in enumerate(zip(report.valid_gt, report.valid_pred)):
            if vg == 1:
                e = f"{report.per_sample_errors[k]:.6f}"
                k += 1
            else:
                e = ""
            wr.writerow([i, e, int(vg), int(vp)])
    return Path(path)


# -- calibration ----------------------------------------------------------------------

def select_calibration_points(pitch, yaw, valid, K: int) -> np.ndarray:
    """Farthest-point sampling in (pitch, yaw) over valid samples.

    The first point is the valid sample nearest the valid-gaze centroid; ties
    go to the lower index, so the result is deterministic and nested in K.
    """
    pitch = np.asarray(pitch, dtype=np.float64)
    yaw = np.asarray(yaw, dtype=np.float64)
    cand = np.flatnonzero(np.asarray(valid) == 1)
    if K <= 0:
        raise ContractError("K must be at least 1")
    if K > len(cand):
        raise ContractError(f"K = {K} exceeds the {len(cand)} valid samples")
    P = np.stack([pitch[cand], yaw[cand]], axis=1)
    centroid = P.mean(axis=0)
    first = int(np.argmin(((P - centroid) ** 2).sum(axis=1)))
    chosen = [first]
    dist = np.sqrt(((P - P[first]) ** 2).sum(axis=1))
    for _ in range(K - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sqrt(((P - P[nxt]) ** 2).sum(axis=1)))
    return cand[np.array(chosen)]


def calibrate(ckpt: Checkpoint, subject_data: EyeArrays, K: int, cfg: RunConfig,
              Y: np.ndarray | None = None):
    """Fine-tune the decoder on K spread-out samples of one subject.

    Masks and normalization stats are frozen.  Only the supervised and validity
    terms are used.  Returns ``(checkpoint, calibration_indices)``.
    """
    idx = select_calibration_points(subject_data.pitch, subject_data.yaw, subject_data.valid, K)
    out = ckpt.copy()
    out.adam = ckpt.adam
    steps = cfg.calibration.steps
    if steps == 0:
        return out, idx
    if Y is None:
        Y = measurements(subject_data.take(idx), ckpt.bank)
    else:
        Y = Y[idx]
    Yn = ckpt.stats.apply(Y)
    g = _labels(subject_data, idx)
    v = subject_data.valid[idx].astype(np.float32)
    w = LossWeights(cfg.loss.lambda_sup, cfg.loss.lambda_cls, 0.0, 0.0)
    adam = AdamState(cfg.train.learning_rate * cfg.calibration.lr_scale)
    dec = out.decoder
    for _ in range(steps):
        o, cache = forward(Yn, dec, keep_cache=True)
        res = total_loss(o.gaze, o.h, o.valid_logit, g, v, None, w)
        backward(cache, dec, None, res.d_gaze, res.d_logit)
        adam_step(dec, adam)
    out.adam = adam
    return out, idx


@dataclass
class CalibrationRow:
    subject_id: int
    K: int
    mae_uncalibrated: float
    mae_calibrated: float


def calibration_study(ckpt: Checkpoint, data: EyeArrays, ks, cfg: RunConfig) -> list[CalibrationRow]:
    """Per-subject calibration for each K; both MAEs exclude the K points."""
    rows = []
    for sid in np.unique(data.subject_id):
        sub = data.take(np.flatnonzero(data.subject_id == sid))
        Y = measurements(sub, ckpt.bank)
        base = predict(ckpt, Y)
        for K in ks:
            cal, idx = calibrate(ckpt, sub, K, cfg, Y)
            keep = np.setdiff1d(np.arange(len(sub)), idx)
            held = sub.take(keep)
            before = report_from_predictions(base.gaze_unit[keep], base.valid[keep],
                                             held.vectors, held.valid)
            after = evaluate(cal, held, Y[keep])
            rows.append(CalibrationRow(int(sid), int(K), before.mean_angular_error,
                                       after.mean_angular_error))
    return rows


def write_calibration(rows: list[CalibrationRow], path, config_hash: str = "") -> Path:
    with open(path, "w", newline="") as fh:
        _hash_line(fh, config_hash)
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["subject_id", "K", "mae_uncalibrated_deg", "mae_calibrated_deg"])
        for r in rows:
            wr.writerow([r.subject_id, r.K, f"{r.mae_uncalibrated:.6f}", f"{r.mae_calibrated:.6f}"])
    return Path(path)
