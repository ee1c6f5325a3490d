import logging

import numpy as np
import pytest

from latent_gaze.numerics import ContractError, finite_difference_gradient, relative_error
from latent_gaze.optics import (FULL_SCALE, NOISE_OFF, MaskBank, NoiseConfig, NormalizationStats,
                                draw_noise, export_masks, fit_normalization, hadamard_bank,
                                import_masks, learned_bank, make_bank, mask_derivative,
                                mean_bit_distance, measure, measure_backward, measure_flat,
                                random_bank, realize_masks)
from latent_gaze.pnm import read_pbm


def brute_force_in_circle():
    n = 0
    for r in range(256):
        for c in range(256):
            if (r - 127.5) ** 2 + (c - 127.5) ** 2 <= 128 ** 2:
                n += 1
    return n


IN_CIRCLE = 51468


def inside():
    r = np.arange(256) - 127.5
    return r[:, None] ** 2 + r[None, :] ** 2 <= 128 ** 2


def const_bank(value, mode="hard", temperature=1.0):
    return MaskBank(np.full((16, 256, 256), value, np.float32), temperature, mode)


def test_in_circle_constant_matches_brute_force():
    assert brute_force_in_circle() == IN_CIRCLE
    assert FULL_SCALE == IN_CIRCLE


def test_all_ones_measurement_is_pixel_count():
    ones = np.where(inside(), 1.0, 0.0)
    y = measure(ones, const_bank(10.0)).y
    assert np.all(y == IN_CIRCLE)


def test_zero_image_gives_zero():
    bank = random_bank(1)
    assert np.all(measure(np.zeros((256, 256)), bank).y == 0.0)


def test_complementary_masks_partition(rng):
    bank = random_bank(4)
    comp = MaskBank(-bank.logits, 1.0, "hard")
    img = rng.random((256, 256)).astype(np.float32) * inside()
    total = measure(img, const_bank(10.0)).y
    y = measure(img, bank).y + measure(img, comp).y
    assert np.allclose(y, total, rtol=1e-5)


def test_linearity(rng):
    bank = learned_bank(2)
    a, b = rng.random((2, 256, 256)).astype(np.float32) * inside()
    lhs = measure(2.0 * a - 0.5 * b, bank).y
    rhs = 2.0 * measure(a, bank).y - 0.5 * measure(b, bank).y
    assert np.allclose(lhs, rhs, rtol=1e-4, atol=1e-2)


def test_realize_examples():
    m = realize_masks(const_bank(10.0))
    assert np.all(m[:, inside()] == 1.0) and np.all(m[:, ~inside()] == 0.0)
    m = realize_masks(const_bank(0.0, "train"))
    assert np.all(m[:, inside()] == 0.5)
    lo = np.tile(np.where(np.arange(256) % 2, 1.0, -1.0).astype(np.float32), (16, 256, 1))
    d1 = np.abs(realize_masks(MaskBank(lo, 1.0, "train")) - 0.5).min()
    d01 = np.abs(realize_masks(MaskBank(lo, 0.1, "train"))[:, inside()] - 0.5).min()
    assert d01 > d1  # lower temperature is closer to {0, 1}


def test_train_mode_values_in_open_interval():
    m = realize_masks(learned_bank(0))[:, inside()]
    assert m.min() > 0.0 and m.max() < 1.0


def test_hard_mode_is_binary():
    m = realize_masks(learned_bank(0).hardened())
    assert set(np.unique(m)) <= {0.0, 1.0}


def test_block_init_is_piecewise_constant():
    bank = learned_bank(4, block=32)
    m = inside()
    for r in range(0, 256, 32):
        for c in range(0, 256, 32):
            cell = bank.logits[:, r:r + 32, c:c + 32][:, m[r:r + 32, c:c + 32]]
            if cell.size:
                assert np.all(cell == cell[:, :1])
    assert np.all(bank.logits[:, ~m] == -10.0)
    assert len(np.unique(bank.logits[:, m])) > 16
    assert np.array_equal(learned_bank(4, block=1).logits, learned_bank(4).logits)
    with pytest.raises(ContractError):
        learned_bank(0, block=3)


def test_bank_validation():
    with pytest.raises(ContractError):
        MaskBank(np.zeros((16, 256, 256)), 0.0)
    with pytest.raises(ContractError):
        MaskBank(np.zeros((16, 256, 256)), 1.0, "soft")
    with pytest.raises(ContractError):
        measure(np.zeros((100, 100)), random_bank(0))


# -- gradients -----------------------------------------------------------------------

def _small_problem(i):
    r = np.random.default_rng([77, i])
    X = r.random((3, 64)) * 0.5
    logits = r.normal(size=(4, 64))
    dy = r.normal(size=(3, 4))
    return X, logits, dy


@pytest.mark.parametrize("i", range(20))
def test_measure_gradient(i):
    X, logits, dy = _small_problem(i)
    T = 0.7
    sig = lambda L: 1.0 / (1.0 + np.exp(-L / T))
    M = sig(logits)
    noise = (np.random.default_rng(i).normal(0, 0.01, (3, 4)),
             np.random.default_rng(i + 1).normal(0, 1.0, (3, 4)))
    dX, dL = measure_backward(X, M, dy, noise, M * (1 - M) / T)
    f = lambda L: float((dy * measure_flat(X, sig(L), noise)).sum())
    assert relative_error(dL, finite_difference_gradient(f, logits, 1e-5)) < 1e-2
    f = lambda Z: float((dy * measure_flat(Z, M, noise)).sum())
    assert relative_error(dX, finite_difference_gradient(f, X, 1e-5)) < 1e-2


def test_straight_through_matches_train_mode_gradient():
    soft = learned_bank(5, temperature=0.3)
    hard = soft.hardened()
    assert np.array_equal(mask_derivative(soft), mask_derivative(hard))
    X = np.random.default_rng(0).random((2, 65536)).astype(np.float32)
    dy = np.ones((2, 16), np.float32)
    g_soft = measure_backward(X, realize_masks(soft).reshape(16, -1), dy, None,
                              mask_derivative(soft).reshape(16, -1))[1]
    g_hard = measure_backward(X, realize_masks(hard).reshape(16, -1), dy, None,
                              mask_derivative(hard).reshape(16, -1))[1]
    assert np.array_equal(g_soft, g_hard)


def test_annealing_reduces_bit_distance():
    bank = learned_bank(3)
    dists = []
    for T in (1.0, 0.5, 0.2, 0.05):
        bank.temperature = T
        dists.append(mean_bit_distance(bank))
    assert all(a > b for a, b in zip(dists, dists[1:]))


# -- noise ----------------------------------------------------------------------------

def test_noise_is_deterministic_and_scaled():
    bank = random_bank(0)
    img = np.where(inside(), 0.5, 0.0)
    noise = NoiseConfig(0.002, 0.01)
    a = measure(img, bank, noise, np.random.default_rng(3)).y
    b = measure(img, bank, noise, np.random.default_rng(3)).y
    assert np.array_equal(a, b)
    gain, read = draw_noise(np.random.default_rng(1), 20000, 16, noise)
    assert abs(read.std() / (0.002 * IN_CIRCLE) - 1) < 0.02
    assert abs(gain.std() / 0.01 - 1) < 0.02


def test_noise_needs_rng():
    with pytest.raises(ContractError):
        measure(np.zeros((256, 256)), random_bank(0), NoiseConfig())
    with pytest.raises(ContractError):
        NoiseConfig(-1.0, 0.0)
    assert draw_noise(np.random.default_rng(0), 2, 16, NOISE_OFF) is None


# -- normalization -------------------------------------------------------------------

def test_fit_normalization_examples():
    s = fit_normalization(np.array([[0.0] * 16, [2.0] * 16]))
    assert np.allclose(s.mean, 1.0) and np.allclose(s.std, 1.0)
    c = fit_normalization(np.array([[3.0] * 16, [3.0] * 16]))
    assert np.all(c.std == np.float32(1e-6))
    assert np.all(c.apply(np.full(16, 3.0)) == 0.0)
    with pytest.raises(ContractError):
        fit_normalization([])
    with pytest.raises(ContractError):
        fit_normalization(np.ones((1, 16)))


def test_normalization_self_consistency(rng):
    Y = rng.normal(5.0, 3.0, (1000, 16)) * rng.uniform(1, 100, 16)
    s = fit_normalization(Y)
    Z = s.apply(Y)
    assert np.abs(Z.mean(0)).max() < 1e-5
    assert np.abs(Z.std(0) - 1.0).max() < 1e-3


def test_identity_stats():
    s = NormalizationStats.identity()
    y = np.arange(16, dtype=np.float32)
    assert np.array_equal(s.apply(y), y)


# -- fixed banks ----------------------------------------------------------------------

def test_random_bank_density_and_determinism():
    b = random_bank(9, 0.5)
    m = realize_masks(b)[:, inside()]
    assert abs(m.mean() - 0.5) < 0.01
    assert np.array_equal(random_bank(9, 0.3).logits, random_bank(9, 0.3).logits)
    assert b.frozen and b.mode == "hard"
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(ContractError):
            random_bank(0, bad)


def test_hadamard_bank():
    b = hadamard_bank()
    m = realize_masks(b)
    assert np.all(m[0][inside()] == 1.0)
    assert np.array_equal(hadamard_bank().logits, b.logits)
    # one in-aperture pixel per 64x64 block (corner blocks are partly cropped)
    idx = np.array([63, 96, 160, 192])
    blocks = (b.logits[:, idx][:, :, idx] > 0).reshape(16, 16)
    H = np.array([[1]])
    for _ in range(4):
        H = np.block([[H, H], [H, -H]])
    assert np.array_equal(blocks, H > 0)
    for i in range(16):
        for j in range(i + 1, 16):
            assert (blocks[i] == blocks[j]).sum() == 8
    assert b.frozen


def test_make_bank_dispatch():
    assert make_bank("random", 0).frozen
    assert not make_bank("learned", 0).frozen
    with pytest.raises(ContractError):
        make_bank("hadamard", 0, n_masks=8)
    with pytest.raises(ContractError):
        make_bank("dct", 0)


# -- export ---------------------------------------------------------------------------

def test_export_roundtrip(tmp_path):
    bank = learned_bank(1).hardened()
    paths = export_masks(bank, tmp_path)
    assert len(paths) == 16
    back = import_masks(tmp_path)
    assert np.array_equal(realize_masks(back), realize_masks(bank))
    assert read_pbm(paths[0]).shape == (256, 256)


def test_export_all_ones_fill_factor(tmp_path):
    export_masks(const_bank(10.0), tmp_path)
    lines = (tmp_path / "masks_summary.txt").read_text().splitlines()
    rows = [l.split() for l in lines if l[:2].isdigit()]
    assert len(rows) == 16
    for r in rows:
        assert float(r[1]) == pytest.approx(IN_CIRCLE / 65536, abs=1e-6)
        assert float(r[2]) == pytest.approx(1.0)


def test_export_requires_hard_mode(tmp_path):
    with pytest.raises(ContractError):
        export_masks(learned_bank(0), tmp_path)


def test_export_overwrite_warns(tmp_path, caplog):
    export_masks(random_bank(0), tmp_path)
    with caplog.at_level(logging.WARNING):
        export_masks(random_bank(1), tmp_path)
    assert "overwriting" in caplog.text
    assert np.array_equal(realize_masks(import_masks(tmp_path)), realize_masks(random_bank(1)))


def test_export_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        export_masks(random_bank(0), blocker / "sub")
