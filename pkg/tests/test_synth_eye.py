import filecmp
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_gaze import kernels
from latent_gaze.geometry import PITCH_RANGE, YAW_RANGE
from latent_gaze.pnm import read_pgm, write_pgm
from latent_gaze.synth_eye import (AugmentParams, DatasetError, GazeLabel, GazeRangeError,
                                   SubjectAppearance, apply_augmentation, augment,
                                   draw_augmentation, gaze_to_vector, generate_dataset,
                                   import_dataset, load_arrays, render_dataset_sample, render_eye,
                                   subject_appearance, vector_to_gaze)


def outside_circle():
    r = np.arange(256) - 127.5
    return r[:, None] ** 2 + r[None, :] ** 2 > 128 ** 2


def darkest_decile_centroid(patch):
    """Reference oracle: weighted centroid of the darkest 10% of in-circle pixels."""
    inside = ~outside_circle()
    vals = patch[inside].astype(np.float64)
    rows, cols = np.nonzero(inside)
    order = np.argsort(vals, kind="stable")[: int(round(0.1 * vals.size))]
    w = 1.0 - vals[order]
    return (rows[order] * w).sum() / w.sum(), (cols[order] * w).sum() / w.sum()


# -- gaze convention -------------------------------------------------------------------

def test_gaze_to_vector_examples():
    assert np.allclose(gaze_to_vector(0.0, 0.0), [0, 0, -1], atol=1e-12)
    assert np.allclose(gaze_to_vector(90.0, 0.0), [0, -1, 0], atol=1e-12)
    p, y = vector_to_gaze(gaze_to_vector(10.0, 25.0))
    assert abs(p - 10.0) < 1e-5 and abs(y - 25.0) < 1e-5


def test_gaze_roundtrip_grid():
    P, Y = np.meshgrid(np.linspace(*PITCH_RANGE, 100), np.linspace(*YAW_RANGE, 100))
    v = gaze_to_vector(P, Y)
    assert np.allclose(np.linalg.norm(v, axis=-1), 1.0, atol=1e-6)
    p2, y2 = vector_to_gaze(v)
    assert np.abs(p2 - P).max() < 1e-5
    assert np.abs(y2 - Y).max() < 1e-5


# -- renderer -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def app():
    return subject_appearance(11, 3)


def test_render_is_deterministic_and_masked(app):
    a = render_eye(GazeLabel(5.0, -12.0), app, 42)
    b = render_eye(GazeLabel(5.0, -12.0), app, 42)
    assert np.array_equal(a.patch, b.patch)
    assert a.patch.shape == (256, 256)
    assert np.all(a.patch[outside_circle()] == 0.0)
    assert a.patch.min() >= 0.0 and a.patch.max() <= 1.0
    assert a.label.valid == 1


def test_closed_eye_is_invalid_and_hides_iris(app):
    closed = render_eye(GazeLabel(0.0, 0.0), replace(app, eyelid_openness=0.0), 1)
    assert closed.label.valid == 0
    dark = replace(app, iris_albedo=0.0, eyelid_openness=0.0)
    s = render_eye(GazeLabel(0.0, 0.0), dark, 1)
    inside = ~outside_circle()
    # with the lid shut the patch is skin-toned everywhere: nothing as dark as an iris
    assert np.percentile(s.patch[inside], 1) > 0.25


def test_blink_threshold(app):
    assert render_eye(GazeLabel(0, 0), replace(app, eyelid_openness=0.29), 0).label.valid == 0
    assert render_eye(GazeLabel(0, 0), replace(app, eyelid_openness=0.30), 0).label.valid == 1


def test_out_of_range_gaze_rejected(app):
    with pytest.raises(GazeRangeError):
        render_eye(GazeLabel(30.0, 0.0), app, 0)
    with pytest.raises(GazeRangeError):
        render_eye(GazeLabel(0.0, 60.0), app, 0)


def test_appearance_ranges_enforced():
    with pytest.raises(ValueError):
        SubjectAppearance(iris_radius=0.3)
    with pytest.raises(ValueError):
        SubjectAppearance(pupil_ratio=0.1)


def test_centroid_shift_for_thirty_degrees_yaw(app):
    c0 = darkest_decile_centroid(render_eye(GazeLabel(0, 0), app, 9).patch)
    c30 = darkest_decile_centroid(render_eye(GazeLabel(0, 30), app, 9).patch)
    assert abs(c30[1] - c0[1]) > 10.0


@pytest.mark.parametrize("subject", range(6))
@pytest.mark.parametrize("pitch", [-40.0, -20.0, 0.0, 20.0])
def test_monotone_horizontal_cue(subject, pitch):
    a = subject_appearance(5, subject)
    cols = [darkest_decile_centroid(render_eye(GazeLabel(pitch, y), a, 2).patch)[1]
            for y in range(-40, 45, 5)]
    assert np.all(np.diff(cols) > 0)


# -- augmentation ---------------------------------------------------------------------

def test_identity_augmentation(app):
    s = render_eye(GazeLabel(3.0, 7.0), app, 4)
    out = apply_augmentation(s, AugmentParams())
    assert np.allclose(out.patch, s.patch, atol=1e-6)
    assert out.label == s.label


def test_flip_negates_yaw_and_x(app):
    s = render_eye(GazeLabel(-5.0, 20.0), app, 4)
    f = apply_augmentation(s, AugmentParams(flip=True))
    assert f.label.yaw == -20.0 and f.label.pitch == -5.0
    assert np.allclose(f.label.vector * [-1, 1, 1], s.label.vector)
    assert np.allclose(f.patch, s.patch[:, ::-1], atol=1e-6)
    ff = apply_augmentation(replace(f, canvas=s.canvas[:, ::-1]), AugmentParams(flip=True))
    assert ff.label == s.label


def test_random_augmentation_respects_bounds(app, rng):
    rows = draw_augmentation(rng, 500)
    assert np.all(np.abs(rows[:, :2]) <= 16.0)
    assert np.all((rows[:, 2] >= 0.95) & (rows[:, 2] <= 1.05))
    assert 0.4 < rows[:, 3].mean() < 0.6
    s = augment(render_eye(GazeLabel(0, 0), app, 4), rng)
    assert np.all(s.patch[outside_circle()] == 0.0)


def test_shift_moves_content(app):
    s = render_eye(GazeLabel(0.0, 0.0), app, 4)
    moved = apply_augmentation(s, AugmentParams(shift_y=0.0, shift_x=8.0))
    c0 = darkest_decile_centroid(s.patch)[1]
    c1 = darkest_decile_centroid(moved.patch)[1]
    assert abs(abs(c1 - c0) - 8.0) < 1.5


# -- datasets -------------------------------------------------------------------------

def _tree_equal(a: Path, b: Path) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    same, diff, err = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not diff and not err and all(_tree_equal(a / d, b / d) for d in cmp.common_dirs)


def test_generation_is_deterministic_and_worker_invariant(tmp_path):
    generate_dataset(2, 1, 10, 7, tmp_path / "a", workers=1)
    generate_dataset(2, 1, 10, 7, tmp_path / "b", workers=2)
    assert _tree_equal(tmp_path / "a", tmp_path / "b")


def test_dataset_protocol(tiny_dataset):
    _, splits = tiny_dataset
    assert len(splits.train) == 48 and len(splits.test) == 40
    assert splits.train.subject_ids.isdisjoint(splits.test.subject_ids)
    for r in splits.train.samples:
        assert PITCH_RANGE[0] <= r.pitch <= PITCH_RANGE[1]
        assert YAW_RANGE[0] <= r.yaw <= YAW_RANGE[1]


def test_sample_is_order_independent():
    a = render_dataset_sample(7, 3, 17)
    b = render_dataset_sample(7, 3, 17)
    assert np.array_equal(a.patch, b.patch) and a.label == b.label


def test_invalid_fraction_close_to_eight_percent():
    v = [render_dataset_sample(1, s, i).label.valid for s in range(4) for i in range(100)]
    frac = 1.0 - np.mean(v)
    assert 0.03 < frac < 0.14


def test_import_roundtrip(tiny_dataset):
    root, splits = tiny_dataset
    m = import_dataset(root / "train" / "manifest.csv")
    assert m.samples == splits.train.samples and not m.skipped
    arr = load_arrays(m)
    assert arr.images.shape == (48, 256, 256)
    assert np.all(arr.images[:, outside_circle()] == 0)


def _copy_split(tiny_dataset, dst):
    root, _ = tiny_dataset
    shutil.copytree(root / "train", dst)
    return dst / "manifest.csv"


def _rewrite(manifest: Path, fn):
    lines = manifest.read_text().splitlines()
    manifest.write_text("\n".join(fn(lines)) + "\n")


def test_import_skips_bad_rows(tiny_dataset, tmp_path, caplog):
    man = _copy_split(tiny_dataset, tmp_path / "d")

    def corrupt(lines):
        head = 2  # comment + header
        parts = lines[head].split(",")
        parts[1] = "200.0"
        lines[head] = ",".join(parts)
        lines[head + 1] = lines[head + 1].split(",")[0] + ",oops,1,1,0"
        return lines

    _rewrite(man, corrupt)
    big = tmp_path / "d" / "img" / "000002.pgm"
    write_pgm(big, np.zeros((300, 300), np.uint8))
    m = import_dataset(man)
    assert len(m.skipped) == 3 and len(m) == 45
    assert any("300x300" in s for s in m.skipped)


def test_import_rejects_mostly_broken(tiny_dataset, tmp_path):
    man = _copy_split(tiny_dataset, tmp_path / "d")
    for p in list((tmp_path / "d" / "img").glob("*.pgm"))[:30]:
        p.unlink()
    with pytest.raises(DatasetError):
        import_dataset(man)


def test_import_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        import_dataset(tmp_path / "nope.csv")


def test_import_enforces_circle(tiny_dataset, tmp_path):
    man = _copy_split(tiny_dataset, tmp_path / "d")
    p = tmp_path / "d" / "img" / "000000.pgm"
    img = read_pgm(p)
    img[0, 0] = 200
    write_pgm(p, img)
    arr = load_arrays(import_dataset(man))
    assert arr.images[0, 0, 0] == 0


@settings(max_examples=25, deadline=None)
@given(st.floats(*PITCH_RANGE), st.floats(*YAW_RANGE))
def test_label_vector_is_unit(p, y):
    assert abs(np.linalg.norm(GazeLabel(p, y).vector) - 1.0) < 1e-6


def test_warp_backends_agree(app, rng):
    if "compiled" not in kernels.available_backends():
        pytest.skip("compiled kernels not built")
    s = render_eye(GazeLabel(0, 10), app, 4)
    src = np.stack([s.canvas] * 6).astype(np.float32)
    params = draw_augmentation(rng, 6)
    a = kernels.warp_batch(src, params, backend="python")
    b = kernels.warp_batch(src, params, backend="compiled")
    assert np.abs(a - b).max() < 1e-5
