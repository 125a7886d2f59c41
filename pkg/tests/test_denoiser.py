import numpy as np
import pytest

from jointfuse import (
    DiffusionSchedule,
    FusionConfig,
    JointState,
    SeededRng,
    init_params,
    load_params,
    make_schedule,
    oracle_predict,
    save_params,
    tiny_forward,
    zero_params,
)
from jointfuse.denoiser import PARAMS_MAGIC
from jointfuse.sampler import ddim_step

from conftest import random_plane


def joint(rng, dims):
    return JointState(*(random_plane(rng, dims) for _ in range(3)))


# --- oracle -------------------------------------------------------------------


def test_oracle_zero_noise_when_already_clean(rng):
    sched = make_schedule(FusionConfig(steps=3))
    clean = joint(rng, (6, 6))
    out = oracle_predict(clean, 2, sched, clean, 0.5)
    for plane in out.eps.planes():
        assert np.max(np.abs(plane)) == 0.0
    np.testing.assert_array_equal(out.weight1, np.full((6, 6), 0.5))


def test_oracle_scalar_inversion():
    sched = DiffusionSchedule(1, np.array([1.0, 0.25]))
    x_t = JointState(*(np.full((1, 1), 1.0) for _ in range(3)))
    clean = JointState(*(np.full((1, 1), 1.0 - np.sqrt(0.75) * 0.5) for _ in range(3)))
    out = oracle_predict(x_t, 1, sched, clean, 0.5)
    assert out.eps.src1[0, 0] == pytest.approx(0.5)


def test_oracle_round_trips_through_ddim_step(rng):
    sched = make_schedule(FusionConfig(steps=3))
    clean = joint(rng, (5, 7))
    x_t = joint(rng, (5, 7))
    for t in (1, 2, 3):
        out = oracle_predict(x_t, t, sched, clean, 0.3)
        x0_hat, _ = ddim_step(x_t, out.eps, t, sched)
        for a, b in zip(x0_hat.planes(), clean.planes()):
            assert np.max(np.abs(a - b)) <= 1e-12


def test_oracle_rejects_degenerate_alpha_bar(rng):
    sched = make_schedule(FusionConfig(steps=2))
    state = joint(rng, (4, 4))
    with pytest.raises(ValueError):
        oracle_predict(state, 0, sched, state, 0.5)
    with pytest.raises(ValueError):
        oracle_predict(state, 1, sched, state, 1.0)


# --- tiny net ------------------------------------------------------------------


def test_zero_params_give_bias_only_outputs(rng):
    state = joint(rng, (6, 6))
    out = tiny_forward(zero_params(), state, 1, 3)
    for plane in out.eps.planes():
        assert np.max(np.abs(plane)) == 0.0
    np.testing.assert_allclose(out.weight1, 0.5, atol=1e-15)


def test_output_dims_match_input(rng):
    params = init_params(SeededRng(4))
    for dims in ((3, 3), (5, 9), (16, 16)):
        out = tiny_forward(params, joint(rng, dims), 2, 3)
        assert out.weight1.shape == dims
        for plane in out.eps.planes():
            assert plane.shape == dims


def test_weight_map_strictly_inside_unit_interval(rng):
    params = init_params(SeededRng(5), scale=3.0)
    out = tiny_forward(params, joint(rng, (8, 8)), 1, 3)
    assert out.weight1.min() > 0.0
    assert out.weight1.max() < 1.0


def test_translation_covariance_away_from_borders():
    # shifting the input by (1, 1) shifts interior outputs by (1, 1); the
    # receptive field is 5 pixels, so compare with a 4-pixel margin
    rng = SeededRng(6)
    params = init_params(rng)
    base = joint(rng, (16, 16))
    shifted = JointState(*(np.roll(p, (1, 1), axis=(0, 1)) for p in base.planes()))
    out_base = tiny_forward(params, base, 2, 3)
    out_shift = tiny_forward(params, shifted, 2, 3)
    inner = slice(4, 12)
    np.testing.assert_allclose(
        out_shift.eps.src1[5:13, 5:13], out_base.eps.src1[inner, inner], atol=1e-10)
    np.testing.assert_allclose(
        out_shift.weight1[5:13, 5:13], out_base.weight1[inner, inner], atol=1e-10)


def test_forward_deterministic(rng):
    params = init_params(SeededRng(7))
    state = joint(rng, (8, 8))
    a = tiny_forward(params, state, 1, 3)
    b = tiny_forward(params, state, 1, 3)
    np.testing.assert_array_equal(a.weight1, b.weight1)
    np.testing.assert_array_equal(a.eps.fused, b.eps.fused)


# --- parameter serialization -----------------------------------------------------


def test_params_round_trip_bit_exact(tmp_path):
    params = init_params(SeededRng(8))
    path = tmp_path / "params.bin"
    save_params(params, path)
    back = load_params(path)
    for (name, a), (_, b) in zip(params.arrays(), back.arrays()):
        assert np.array_equal(a, b), name


def test_params_file_magic(tmp_path):
    path = tmp_path / "params.bin"
    save_params(zero_params(), path)
    assert path.read_bytes()[:4] == PARAMS_MAGIC


def test_params_reject_wrong_magic(tmp_path):
    path = tmp_path / "bogus.bin"
    path.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(ValueError, match="TNP1"):
        load_params(path)


def test_params_reject_wrong_shape(tmp_path):
    params = init_params(SeededRng(9))
    path = tmp_path / "params.bin"
    save_params(params, path)
    data = bytearray(path.read_bytes())
    data[8:12] = (99).to_bytes(4, "little")  # corrupt first field's shape
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="shape"):
        load_params(path)
