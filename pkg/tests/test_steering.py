import numpy as np
import pytest

from latent_gaze.checkpoint import Checkpoint
from latent_gaze.decoder import DecoderConfig, init_params
from latent_gaze.numerics import ContractError, finite_difference_gradient, relative_error
from latent_gaze.optics import NormalizationStats, learned_bank
from latent_gaze.steering import (SteeringController, SteeringError, controller_from_checkpoint,
                                  controller_to_checkpoint, random_targets, roundtrip_eval, steer,
                                  steering_loss, train_controller, write_steering)
from latent_gaze.synth_eye import vector_to_gaze
from latent_gaze.geometry import PITCH_RANGE, YAW_RANGE


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_zero_controller_identity():
    c = SteeringController.init(0)
    h = np.random.default_rng(0).normal(size=256)
    g = _unit(np.array([0.2, -0.1, -1.0]))
    assert np.array_equal(steer(h, g, g, c), h)
    t = _unit(np.array([0.5, 0.1, -1.0]))
    assert np.array_equal(steer(h, g, t, c), h)


def test_steer_is_affine_in_h():
    r = np.random.default_rng(1)
    c = SteeringController.init(2)
    c.params["fc2.W"].value = r.normal(size=(256, 128))
    h1, h2 = r.normal(size=256), r.normal(size=256)
    s, t = _unit(r.normal(size=3)), _unit(r.normal(size=3))
    assert np.allclose(steer(h1, s, t, c) - steer(h2, s, t, c), h1 - h2, atol=1e-10)


def test_steer_contracts():
    c = SteeringController.init(0)
    h = np.zeros(256)
    g = np.array([0.0, 0.0, -1.0])
    with pytest.raises(ContractError):
        steer(h, g * 1.01, g, c)
    with pytest.raises(ContractError):
        steer(h, g, np.array([0.0, 0.0, np.nan]), c)
    steer(h, g * (1 + 5e-4), g, c)


def test_random_targets_in_range(rng):
    p, y = vector_to_gaze(random_targets(rng, 2000).astype(np.float64))
    assert p.min() >= PITCH_RANGE[0] - 1e-3 and p.max() <= PITCH_RANGE[1] + 1e-3
    assert y.min() >= YAW_RANGE[0] - 1e-3 and y.max() <= YAW_RANGE[1] + 1e-3


def _small(i):
    r = np.random.default_rng([61, i])
    dec = init_params(i, DecoderConfig(n_in=4, width=8)).astype(np.float64)
    for q in dec:
        q.value += r.normal(0, 0.3, q.value.shape)
    ckpt = Checkpoint(dec, learned_bank(0, n_masks=4), NormalizationStats.identity(4))
    c = SteeringController.init(i, hidden=5, width=8)
    for q in c.params.values():
        q.value = q.value.astype(np.float64) + r.normal(0, 0.3, q.value.shape)
    h = r.normal(size=(3, 8))
    return ckpt, c, h, _unit(r.normal(size=(3, 3))), _unit(r.normal(size=(3, 3)))


@pytest.mark.parametrize("i", range(20))
def test_steering_loss_gradient(i):
    ckpt, c, h, gs, gt = _small(i)
    steering_loss(c, ckpt, h, gs, gt, 0.1)
    for name, q in c.params.items():
        def f(v, q=q):
            old = q.value
            q.value = v
            try:
                return steering_loss(c, ckpt, h, gs, gt, 0.1, backward=False)
            finally:
                q.value = old

        num = finite_difference_gradient(f, q.value.copy(), 1e-6)
        assert relative_error(q.grad, num) < 1e-2, name


def test_zero_controller_report_matches_decoder(tiny_ckpt, tiny_arrays):
    rep = roundtrip_eval(SteeringController.init(0), tiny_ckpt, tiny_arrays[1])
    assert rep.identity_error == pytest.approx(rep.decoder_reprediction_error, abs=1e-4)
    assert rep.latent_roundtrip_rmse == 0.0 and rep.delta_rms == 0.0
    assert rep.n > 0 and rep.forward_error >= 0


def test_refuses_untrained_decoder(tiny_ckpt, tiny_arrays, quick_cfg):
    cfg = quick_cfg.with_overrides(steering={"max_decoder_mae": 0.01})
    with pytest.raises(SteeringError, match="MAE"):
        train_controller(tiny_ckpt, tiny_arrays[0], cfg)


def test_trained_controller_beats_zero(tiny_ckpt, tiny_arrays, quick_cfg, tmp_path):
    before = tiny_ckpt.to_entries()
    cfg = quick_cfg.with_overrides(steering={"steps": 400, "batch_size": 32})
    res = train_controller(tiny_ckpt, tiny_arrays[0], cfg, tiny_arrays[1])
    after = tiny_ckpt.to_entries()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    trained = roundtrip_eval(res.controller, tiny_ckpt, tiny_arrays[1])
    zero = roundtrip_eval(SteeringController.init(0), tiny_ckpt, tiny_arrays[1])
    assert trained.forward_error < zero.forward_error
    assert trained.backward_error >= 0 and trained.latent_roundtrip_rmse >= 0
    # the cycle term starts at exactly zero, so the check is a fall after the peak
    curve = np.convolve(res.cycle_rmse, np.ones(3) / 3, mode="valid")
    peak = int(np.argmax(curve))
    assert curve[-1] <= curve[peak]
    assert len(res.losses) == 400 and np.mean(res.losses[-50:]) < np.mean(res.losses[:50])

    ck = controller_to_checkpoint(tiny_ckpt, res.controller)
    ck.save(tmp_path / "s.lgs")
    back = controller_from_checkpoint(Checkpoint.load(tmp_path / "s.lgs"))
    assert all(np.array_equal(back[k], res.controller[k]) for k in res.controller.params)
    write_steering(trained, tmp_path / "steer.csv", "abc")
    lines = (tmp_path / "steer.csv").read_text().splitlines()
    assert lines[:2] == ["# config_hash=abc", "metric,value"]


def test_checkpoint_without_controller(tiny_ckpt):
    with pytest.raises(SteeringError):
        controller_from_checkpoint(tiny_ckpt)
