"""Procedural eye patches, augmentation, and on-disk datasets.

The renderer is intentionally simple: a textured skin field, a parabolic
eye opening, a foreshortened iris/pupil ellipse that slides with gaze, an
eyelash line and a brow.  It exists to give the sensing pipeline a gaze
signal with realistic nuisance variation (identity, eyelids, misalignment),
not to look photographic.

Dataset layout on disk::

    <split>/manifest.csv       # '#' metadata lines, then
                               # image_path,pitch_deg,yaw_deg,valid,subject_id
    <split>/img/000000.pgm     # binary P5, 256x256, maxval 255
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from . import kernels
from .geometry import (CANVAS_SIZE, MASK_RADIUS, PATCH_SIZE, PITCH_RANGE,
                       YAW_RANGE, circle_mask)
from .pnm import PNMError, read_pgm, write_pgm

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_HEADER = ["image_path", "pitch_deg", "yaw_deg", "valid", "subject_id"]
BLINK_THRESHOLD = 0.3
INVALID_FRACTION = 0.08

# renderer constants, in units of patch width
EYEBALL_RADIUS = 0.26
OPENING_HALF_WIDTH = 0.60
UPPER_LID = 0.20
LOWER_LID = 0.13
LID_FOLLOW = 0.55
PUPIL_ALBEDO = 0.04
GRAIN_SIGMA = 0.012

# augmentation limits (pixels / ratio)
MAX_SHIFT = 16.0
SCALE_RANGE = (0.95, 1.05)


class GazeRangeError(ValueError):
    pass


class DatasetError(RuntimeError):
    pass


# -- gaze conventions ----------------------------------------------------------

def gaze_to_vector(pitch: float, yaw: float) -> np.ndarray:
    """Unit gaze vector for angles in degrees; (0, 0) looks along -z."""
    p = np.radians(pitch)
    y = np.radians(yaw)
    return np.stack([-np.cos(p) * np.sin(y), -np.sin(p), -np.cos(p) * np.cos(y)], axis=-1)


def vector_to_gaze(v) -> tuple:
    """Inverse of :func:`gaze_to_vector`; returns (pitch, yaw) in degrees."""
    v = np.asarray(v, dtype=np.float64)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    pitch = np.degrees(np.arcsin(np.clip(-v[..., 1], -1.0, 1.0)))
    yaw = np.degrees(np.arctan2(-v[..., 0], -v[..., 2]))
    return pitch, yaw


def in_gaze_range(pitch, yaw) -> bool:
    return (PITCH_RANGE[0] <= pitch <= PITCH_RANGE[1]
            and YAW_RANGE[0] <= yaw <= YAW_RANGE[1])


@dataclass(frozen=True)
class GazeLabel:
    pitch: float
    yaw: float
    valid: int = 1

    @property
    def vector(self) -> np.ndarray:
        return gaze_to_vector(self.pitch, self.yaw)

    def flipped(self) -> "GazeLabel":
        return replace(self, yaw=-self.yaw)


@dataclass(frozen=True)
class SubjectAppearance:
    iris_radius: float = 0.15
    pupil_ratio: float = 0.4
    iris_albedo: float = 0.2
    sclera_albedo: float = 0.85
    skin_albedo: float = 0.6
    eyelid_openness: float = 0.85
    eyeball_center_offset: tuple = (0.0, 0.0)
    texture_seed: int = 0

    def __post_init__(self):
        if not 0.10 <= self.iris_radius <= 0.22:
            raise ValueError(f"iris_radius {self.iris_radius} outside [0.10, 0.22]")
        if not 0.25 <= self.pupil_ratio <= 0.6:
            raise ValueError(f"pupil_ratio {self.pupil_ratio} outside [0.25, 0.6]")
        for name in ("iris_albedo", "sclera_albedo", "skin_albedo", "eyelid_openness"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} {val} outside [0, 1]")

    @classmethod
    def random(cls, rng: np.random.Generator) -> "SubjectAppearance":
        return cls(
            iris_radius=float(rng.uniform(0.15, 0.19)),
            pupil_ratio=float(rng.uniform(0.3, 0.5)),
            iris_albedo=float(rng.uniform(0.08, 0.28)),
            sclera_albedo=float(rng.uniform(0.72, 0.95)),
            skin_albedo=float(rng.uniform(0.55, 0.85)),
            eyelid_openness=float(rng.uniform(0.65, 1.0)),
            eyeball_center_offset=tuple(float(v) for v in rng.uniform(-0.03, 0.03, 2)),
            texture_seed=int(rng.integers(0, 2**31 - 1)),
        )


@dataclass
class Sample:
    patch: np.ndarray
    label: GazeLabel
    subject_id: int = 0
    canvas: np.ndarray | None = field(default=None, repr=False)


# -- rendering -----------------------------------------------------------------

class _Texture(NamedTuple):
    skin: np.ndarray
    brow_height: float
    brow_dark: float
    brow_thick: float
    iris_phase: float
    iris_spokes: int
    lash: float


@lru_cache(maxsize=128)
def _subject_texture(seed: int) -> _Texture:
    rng = np.random.default_rng([seed, 0x7E7])
    coarse = rng.normal(0.0, 1.0, (10, 10))
    skin = ndimage.zoom(coarse, CANVAS_SIZE / 10, order=3)[:CANVAS_SIZE, :CANVAS_SIZE]
    skin = (0.02 * skin / max(skin.std(), 1e-9)).astype(np.float32)
    skin.setflags(write=False)
    return _Texture(
        skin=skin,
        brow_height=float(rng.uniform(0.36, 0.46)),
        brow_dark=float(rng.uniform(0.15, 0.4)),
        brow_thick=float(rng.uniform(0.03, 0.06)),
        iris_phase=float(rng.uniform(0, 2 * np.pi)),
        iris_spokes=int(rng.integers(9, 17)),
        lash=float(rng.uniform(0.25, 0.5)),
    )


def _ellipse(xx, yy, cx, cy, axis, a, b):
    """Coverage in [0, 1] of an ellipse with semi-axis ``a`` along ``axis``."""
    dx, dy = axis
    u = (xx - cx) * dx + (yy - cy) * dy
    v = (yy - cy) * dx - (xx - cx) * dy
    U = u / a
    V = v / b
    rho = np.sqrt(U * U + V * V) + 1e-12
    grad = np.sqrt((U / a) ** 2 + (V / b) ** 2) / rho
    return np.clip(0.5 + (1.0 - rho) / grad, 0.0, 1.0), rho, np.arctan2(v, u)


def _box(lo_r, hi_r, lo_c, hi_c):
    """Clip a float bounding box to the canvas; returns slices and coordinate grids."""
    r0 = max(int(math.floor(lo_r)), 0)
    r1 = min(int(math.ceil(hi_r)) + 1, CANVAS_SIZE)
    c0 = max(int(math.floor(lo_c)), 0)
    c1 = min(int(math.ceil(hi_c)) + 1, CANVAS_SIZE)
    r1 = max(r1, r0)
    c1 = max(c1, c0)
    yy = np.arange(r0, r1, dtype=np.float32)[:, None]
    xx = np.arange(c0, c1, dtype=np.float32)[None, :]
    return (slice(r0, r1), slice(c0, c1)), yy, xx


def _render_canvas(pitch: float, yaw: float, app: SubjectAppearance,
                   rng_seed: int) -> np.ndarray:
    W = float(PATCH_SIZE)
    c = (CANVAS_SIZE - 1) / 2.0
    tex = _subject_texture(app.texture_seed)
    rng = np.random.default_rng([rng_seed, 0x5A])

    ex = c + app.eyeball_center_offset[0] * W
    ey = c + app.eyeball_center_offset[1] * W
    sp = math.sin(math.radians(pitch))
    sy = math.sin(math.radians(yaw))
    R = EYEBALL_RADIUS * W
    half = OPENING_HALF_WIDTH * W

    img = (app.skin_albedo * (1.0 + tex.skin)).astype(np.float32)

    # brow: arched dark band near the top of the patch
    top = ey - tex.brow_height * W
    sl, yy, xx = _box(top - tex.brow_thick * W, top + 0.06 * W * 1.44 + tex.brow_thick * W,
                      ex - 1.44 * half, ex + 1.44 * half)
    xb = (xx - ex) / (1.2 * half)
    y_brow = top + 0.06 * W * xb * xb
    brow = np.clip(0.5 + (0.5 * tex.brow_thick * W - np.abs(yy - y_brow)), 0.0, 1.0)
    brow *= np.clip(1.2 - np.abs(xb), 0.0, 1.0)
    img[sl] *= 1.0 - tex.brow_dark * brow

    # eye opening between two parabolic lids; the upper lid follows pitch
    k = app.eyelid_openness
    oy = ey - LID_FOLLOW * R * sp
    up = max(k * (UPPER_LID * W + 0.15 * R * sp), 0.0)
    lo = k * LOWER_LID * W
    sl, yy, xx = _box(oy - up - 8, oy + lo + 2, ex - half, ex + half)
    t = 1.0 - ((xx - ex) / half) ** 2
    tpos = np.clip(t, 0.0, None)
    y_up = oy - up * tpos
    y_lo = oy + lo * tpos
    opening = np.clip(0.5 + np.minimum(yy - y_up, y_lo - yy), 0.0, 1.0)
    opening *= np.clip((up + lo) * tpos, 0.0, 1.0)

    # eyeball content: sclera, foreshortened iris, pupil
    eye = app.sclera_albedo * (1.0 - 0.18 * ((xx - ex) / half) ** 2) + 0.0 * yy
    ix = ex + R * sy
    iy = ey - R * sp
    norm = math.hypot(sy, sp)
    axis = (sy / norm, -sp / norm) if norm > 1e-9 else (1.0, 0.0)
    ratio = max(math.cos(math.radians(pitch)) * math.cos(math.radians(yaw)), 0.05)
    r_i = app.iris_radius * W
    r0, c0 = sl[0].start, sl[1].start
    isl, iyy, ixx = _box(iy - r_i - 2, iy + r_i + 2, ix - r_i - 2, ix + r_i + 2)
    ir = slice(max(isl[0].start, r0) - r0, max(min(isl[0].stop, sl[0].stop) - r0, 0))
    ic = slice(max(isl[1].start, c0) - c0, max(min(isl[1].stop, sl[1].stop) - c0, 0))
    if ir.stop > ir.start and ic.stop > ic.start:
        yy_i = yy[ir]
        xx_i = xx[:, ic]
        iris_cov, rho, ang = _ellipse(xx_i, yy_i, ix, iy, axis, r_i * ratio, r_i)
        iris = app.iris_albedo * (1.0 + 0.12 * np.cos(tex.iris_spokes * ang + tex.iris_phase))
        iris = iris * (1.0 - 0.35 * np.clip(rho - 0.75, 0.0, 0.25) / 0.25)
        r_p = r_i * app.pupil_ratio
        pupil_cov, _, _ = _ellipse(xx_i, yy_i, ix, iy, axis, r_p * ratio, r_p)
        sub = eye[ir, ic]
        sub = sub + iris_cov * (iris - sub)
        eye[ir, ic] = sub + pupil_cov * (PUPIL_ALBEDO - sub)

    patch = img[sl]
    patch += opening * (eye - patch)

    # eyelash line hugging the upper lid
    lash = np.exp(-(((yy - y_up) / 2.5) ** 2)) * (t > 0) * np.clip(t * 4.0, 0.0, 1.0)
    patch *= 1.0 - tex.lash * lash

    gain = np.float32(rng.uniform(0.9, 1.1))
    img *= gain
    img += rng.standard_normal(img.shape, dtype=np.float32) * np.float32(GRAIN_SIGMA)
    return np.clip(img, 0.0, 1.0, out=img)


def _crop(canvas: np.ndarray) -> np.ndarray:
    off = (CANVAS_SIZE - PATCH_SIZE) // 2
    patch = canvas[off:off + PATCH_SIZE, off:off + PATCH_SIZE].astype(np.float32)
    patch[~circle_mask()] = 0.0
    return patch


def render_eye(gaze: GazeLabel, appearance: SubjectAppearance, rng_seed: int,
               subject_id: int = 0) -> Sample:
    """Render a circularly masked 256x256 eye patch for ``gaze``.

    The label's validity is overwritten by the blink rule.  The full 288x288
    canvas is kept on the returned sample so that :func:`augment` can crop
    from real pixels instead of padding.
    """
    if not in_gaze_range(gaze.pitch, gaze.yaw):
        raise GazeRangeError(f"gaze ({gaze.pitch}, {gaze.yaw}) outside the supported range")
    canvas = _render_canvas(gaze.pitch, gaze.yaw, appearance, rng_seed)
    valid = int(appearance.eyelid_openness >= BLINK_THRESHOLD)
    label = replace(gaze, valid=valid)
    return Sample(_crop(canvas), label, subject_id, canvas)


# -- augmentation --------------------------------------------------------------

class AugmentParams(NamedTuple):
    shift_y: float = 0.0
    shift_x: float = 0.0
    scale: float = 1.0
    flip: bool = False

    def as_row(self):
        return (self.shift_y, self.shift_x, self.scale, float(self.flip))


def draw_augmentation(rng: np.random.Generator, n: int | None = None,
                      max_shift: float = MAX_SHIFT, scale_range=SCALE_RANGE,
                      flip_prob: float = 0.5):
    """Random (shift_y, shift_x, scale, flip) rows; one tuple if ``n`` is None."""
    m = 1 if n is None else n
    out = np.empty((m, 4), dtype=np.float64)
    out[:, 0:2] = rng.uniform(-max_shift, max_shift, (m, 2))
    out[:, 2] = rng.uniform(*scale_range, m)
    out[:, 3] = rng.random(m) < flip_prob
    if n is None:
        return AugmentParams(out[0, 0], out[0, 1], out[0, 2], bool(out[0, 3]))
    return out


def apply_augmentation(sample: Sample, params: AugmentParams) -> Sample:
    src = sample.canvas if sample.canvas is not None else sample.patch
    out = kernels.warp_batch(src[None].astype(np.float32, copy=False),
                             np.array([params.as_row()]), 1.0)[0]
    label = sample.label.flipped() if params.flip else sample.label
    return Sample(out, label, sample.subject_id, None)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random shift (up to 16 px), scale in [0.95, 1.05] and a coin-flip mirror."""
    return apply_augmentation(sample, draw_augmentation(rng))


# -- datasets ------------------------------------------------------------------

@dataclass
class ManifestRow:
    image_path: str
    pitch: float
    yaw: float
    valid: int
    subject_id: int


@dataclass
class DatasetManifest:
    root: Path
    samples: list[ManifestRow]
    split: str = "train"
    global_seed: int = 0
    version: int = MANIFEST_VERSION
    config_hash: str = ""
    skipped: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    @property
    def subject_ids(self) -> set[int]:
        return {r.subject_id for r in self.samples}

    def subset(self, indices) -> "DatasetManifest":
        return replace(self, samples=[self.samples[i] for i in indices], skipped=[])

    def by_subject(self) -> dict[int, "DatasetManifest"]:
        groups: dict[int, list[int]] = {}
        for i, r in enumerate(self.samples):
            groups.setdefault(r.subject_id, []).append(i)
        return {sid: self.subset(idx) for sid, idx in sorted(groups.items())}

    def write(self, path: Path | None = None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.csv"
        with open(path, "w", newline="") as fh:
            fh.write(f"# latent-gaze manifest version={self.version} split={self.split} "
                     f"global_seed={self.global_seed} config={self.config_hash}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            for r in self.samples:
                w.writerow([r.image_path, f"{r.pitch:.6f}", f"{r.yaw:.6f}", r.valid, r.subject_id])
        return path


class DatasetSplits(NamedTuple):
    train: DatasetManifest
    test: DatasetManifest


@dataclass
class EyeArrays:
    """In-memory dataset: uint8 images plus label columns."""

    images: np.ndarray
    pitch: np.ndarray
    yaw: np.ndarray
    valid: np.ndarray
    subject_id: np.ndarray

    def __len__(self):
        return len(self.pitch)

    @property
    def vectors(self) -> np.ndarray:
        return gaze_to_vector(self.pitch, self.yaw).astype(np.float32)

    def take(self, idx) -> "EyeArrays":
        return EyeArrays(self.images[idx], self.pitch[idx], self.yaw[idx],
                         self.valid[idx], self.subject_id[idx])

    def patches(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return imgs.astype(np.float32) / np.float32(255.0)


def subject_appearance(global_seed: int, subject_id: int) -> SubjectAppearance:
    return SubjectAppearance.random(np.random.default_rng([global_seed, subject_id, 0xA99]))


def _draw_sample(global_seed: int, subject_id: int, index: int,
                 invalid_fraction: float):
    rng = np.random.default_rng([global_seed, subject_id, index])
    pitch = float(rng.uniform(*PITCH_RANGE))
    yaw = float(rng.uniform(*YAW_RANGE))
    blink = rng.random() < invalid_fraction
    openness_scale = rng.uniform(0.9, 1.05)
    blink_openness = rng.uniform(0.0, 0.25)
    render_seed = int(rng.integers(0, 2**31 - 1))
    return pitch, yaw, blink, openness_scale, blink_openness, render_seed


def render_dataset_sample(global_seed: int, subject_id: int, index: int,
                          invalid_fraction: float = INVALID_FRACTION) -> Sample:
    """Deterministic sample ``index`` of ``subject_id``; independent of generation order."""
    app = subject_appearance(global_seed, subject_id)
    pitch, yaw, blink, scale, blink_open, seed = _draw_sample(
        global_seed, subject_id, index, invalid_fraction)
    openness = blink_open if blink else min(app.eyelid_openness * scale, 1.0)
    return render_eye(GazeLabel(pitch, yaw), replace(app, eyelid_openness=openness), seed,
                      subject_id)


def _quantize(patch: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(patch, 0.0, 1.0) * 255.0).astype(np.uint8)


def _render_job(args):
    global_seed, subject_id, count, img_dir, first_index, invalid_fraction = args
    rows = []
    for j in range(count):
        s = render_dataset_sample(global_seed, subject_id, j, invalid_fraction)
        name = f"img/{first_index + j:06d}.pgm"
        write_pgm(Path(img_dir).parent / name, _quantize(s.patch))
        # labels are kept at the precision the manifest stores
        rows.append(ManifestRow(name, float(f"{s.label.pitch:.6f}"), float(f"{s.label.yaw:.6f}"),
                                s.label.valid, subject_id))
    return rows


def _worker_count(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("LGS_THREADS", "1") or 1)
    return max(1, workers)


def _generate_split(split, subject_ids, per_subject, global_seed, out_dir, workers,
                    invalid_fraction, config_hash) -> DatasetManifest:
    root = Path(out_dir) / split
    img_dir = root / "img"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {img_dir}: {exc}") from exc
    jobs = [(global_seed, sid, per_subject, str(img_dir), k * per_subject, invalid_fraction)
            for k, sid in enumerate(subject_ids)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(_render_job, jobs))
    else:
        chunks = [_render_job(j) for j in jobs]
    rows = [r for chunk in chunks for r in chunk]
    manifest = DatasetManifest(root, rows, split, global_seed, MANIFEST_VERSION, config_hash)
    manifest.write()
    return manifest


def generate_dataset(n_subjects_train: int, n_subjects_test: int, samples_per_subject: int,
                     global_seed: int, out_dir, test_samples_per_subject: int | None = None,
                     workers: int | None = None, invalid_fraction: float = INVALID_FRACTION,
                     config_hash: str = "") -> DatasetSplits:
    """Render a cross-subject train/test pair under ``out_dir/{train,test}``.

    Train subjects get ids ``0..n_train-1`` and test subjects follow, so the
    two splits never share an identity.
    """
    if min(n_subjects_train, n_subjects_test, samples_per_subject) < 1:
        raise ValueError("subject and sample counts must be >= 1")
    test_per = test_samples_per_subject or samples_per_subject
    workers = _worker_count(workers)
    train_ids = list(range(n_subjects_train))
    test_ids = list(range(n_subjects_train, n_subjects_train + n_subjects_test))
    train = _generate_split("train", train_ids, samples_per_subject, global_seed, out_dir,
                            workers, invalid_fraction, config_hash)
    test = _generate_split("test", test_ids, test_per, global_seed, out_dir,
                           workers, invalid_fraction, config_hash)
    return DatasetSplits(train, test)


def _parse_meta(line: str) -> dict:
    meta = {}
    for tok in line.lstrip("#").split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            meta[k] = v
    return meta


def _validate_row(root: Path, row: dict) -> ManifestRow:
    try:
        pitch = float(row["pitch_deg"])
        yaw = float(row["yaw_deg"])
        valid = int(row["valid"])
        sid = int(row["subject_id"])
        path = row["image_path"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed row: {exc}") from exc
    if valid not in (0, 1):
        raise DatasetError(f"valid must be 0 or 1, got {valid}")
    if not (math.isfinite(pitch) and math.isfinite(yaw)) or abs(pitch) > 90 or abs(yaw) > 180:
        raise DatasetError(f"gaze ({pitch}, {yaw}) is not a valid direction")
    vec = gaze_to_vector(pitch, yaw)
    p2, y2 = vector_to_gaze(vec)
    if abs(np.linalg.norm(vec) - 1.0) > 1e-6 or abs(p2 - pitch) > 1e-5:
        raise DatasetError("gaze label does not reconstruct a unit vector")
    full = root / path
    if not full.is_file():
        raise DatasetError(f"missing image {path}")
    try:
        img = read_pgm(full)
    except PNMError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    if img.shape != (PATCH_SIZE, PATCH_SIZE):
        raise DatasetError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, expected "
                           f"{PATCH_SIZE}x{PATCH_SIZE}")
    return ManifestRow(path, pitch, yaw, valid, sid)


def import_dataset(manifest_path, max_failure_fraction: float = 0.5) -> DatasetManifest:
    """Read and validate a manifest of pre-labeled eye patches.

    Rows that fail validation are skipped and counted; if more than half the
    rows fail the whole import is rejected.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    meta: dict = {}
    with open(manifest_path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            meta.update(_parse_meta(line))
        elif line.strip():
            body.append(line)
    if not body or body[0].split(",") != MANIFEST_HEADER:
        raise DatasetError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
    rows, skipped = [], []
    for lineno, row in enumerate(csv.DictReader(body), start=2):
        try:
            rows.append(_validate_row(root, row))
        except DatasetError as exc:
            skipped.append(f"row {lineno}: {exc}")
    total = len(rows) + len(skipped)
    if skipped:
        log.warning("import skipped %d of %d rows", len(skipped), total)
        for msg in skipped[:20]:
            log.warning("  %s", msg)
    if total == 0 or len(skipped) > max_failure_fraction * total:
        raise DatasetError(f"{len(skipped)} of {total} manifest rows failed validation")
    return DatasetManifest(
        root=root, samples=rows, split=meta.get("split", "train"),
        global_seed=int(meta.get("global_seed", 0)),
        version=int(meta.get("version", MANIFEST_VERSION)),
        config_hash=meta.get("config", ""), skipped=skipped)


def load_arrays(manifest: DatasetManifest) -> EyeArrays:
    """Load every image of ``manifest`` into memory, enforcing the circular mask."""
    n = len(manifest)
    images = np.empty((n, PATCH_SIZE, PATCH_SIZE), dtype=np.uint8)
    outside = ~circle_mask()
    for i, r in enumerate(manifest.samples):
        img = read_pgm(manifest.root / r.image_path)
        if img.shape != (PATCH_SIZE, PATCH_SIZE):
            raise DatasetError(f"{r.image_path}: wrong image size {img.shape}")
        img[outside] = 0
        images[i] = img
    col = lambda attr, dt: np.array([getattr(r, attr) for r in manifest.samples], dtype=dt)
    return EyeArrays(images, col("pitch", np.float64), col("yaw", np.float64),
                     col("valid", np.int8), col("subject_id", np.int32))


def arrays_from_samples(samples: Sequence[Sample]) -> EyeArrays:
    """Pack rendered samples into an :class:`EyeArrays` (quantized to 8 bit)."""
    images = np.stack([_quantize(s.patch) for s in samples]) if samples else \
        np.empty((0, PATCH_SIZE, PATCH_SIZE), np.uint8)
    return EyeArrays(
        images,
        np.array([s.label.pitch for s in samples], dtype=np.float64),
        np.array([s.label.yaw for s in samples], dtype=np.float64),
        np.array([s.label.valid for s in samples], dtype=np.int8),
        np.array([s.subject_id for s in samples], dtype=np.int32),
    )


def iris_centroid(patch: np.ndarray, fraction: float = 0.1) -> tuple[float, float]:
    """Intensity-weighted centroid (row, col) of the darkest in-circle pixels."""
    inside = circle_mask(patch.shape[0], patch.shape[0] / 2.0)
    vals = patch[inside]
    k = max(1, int(round(fraction * vals.size)))
    thresh = np.partition(vals, k - 1)[k - 1]
    rr, cc = np.nonzero(inside)
    sel = vals <= thresh
    w = (1.0 - vals[sel]).astype(np.float64) + 1e-9
    return float((rr[sel] * w).sum() / w.sum()), float((cc[sel] * w).sum() / w.sum())
