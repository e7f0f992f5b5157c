import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sandwich_dit.diffusion import (
    CacheFormatError,
    DiffusionTuple,
    KdCacheWriter,
    build_kd_cache,
    distill,
    euler_flow_sample,
    expert_for,
    fm_loss,
    forward_noise,
    kd_loss,
    kd_loss_two_expert,
    r_penalties,
    read_kd_cache,
    rpgan_losses,
    sample_timesteps,
    velocity_fn,
)
from sandwich_dit.numerics import NonFiniteError, Tensor, ops
from sandwich_dit.numerics.rng import Rng
from sandwich_dit.sandwich import ModelConfig, build_sandwich, build_teacher

# values on a 0.01 grid so squared differences never underflow to zero
grid_floats = st.integers(-1000, 1000).map(lambda i: i / 100)
vec = arrays(np.float64, st.integers(1, 12), elements=grid_floats)


# -- interpolant and losses ----------------------------------------------------------

def test_forward_noise_endpoints():
    x0, eps = Rng(0).normal((3, 4)), Rng(1).normal((3, 4))
    assert np.array_equal(forward_noise(x0, 0.0, eps), x0)
    assert np.array_equal(forward_noise(x0, 1.0, eps), eps)
    assert forward_noise(np.zeros(1), 0.5, np.full(1, 2.0))[0] == 1.0
    with pytest.raises(ValueError):
        forward_noise(x0, 1.5, eps)


def test_fm_loss_examples():
    rng = Rng(2)
    x0, eps = rng.normal((4, 3)), rng.normal((4, 3))
    assert fm_loss(Tensor(eps - x0), x0, eps).item() == 0.0
    assert fm_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), np.ones((2, 2))).item() == 1.0
    pred = rng.normal((4, 3))
    assert fm_loss(Tensor(pred), x0, eps).item() == pytest.approx(np.mean(((eps - x0) - pred) ** 2), rel=1e-12)
    with pytest.raises(ValueError):
        fm_loss(Tensor(pred), x0[:2], eps)


def test_kd_loss_examples():
    rng = Rng(3)
    a = rng.normal((5, 2))
    assert kd_loss(Tensor(a), Tensor(a)).item() == 0.0
    assert kd_loss(Tensor(a + 2.0), Tensor(a)).item() == pytest.approx(4.0, rel=1e-12)
    b = rng.normal((5, 2))
    assert kd_loss(Tensor(a), Tensor(b)).item() == pytest.approx(np.mean((a - b) ** 2), rel=1e-12)
    with pytest.raises(ValueError):
        kd_loss(Tensor(a), Tensor(b.T))


@given(vec, st.data())
def test_losses_nonnegative_and_zero_iff_equal(a, data):
    b = data.draw(arrays(np.float64, a.shape, elements=grid_floats))
    loss = kd_loss(Tensor(a), Tensor(b)).item()
    assert loss >= 0
    assert (loss == 0) == bool(np.array_equal(a, b))


# -- two-expert KD -----------------------------------------------------------------------

def _tuples(rng, n, tag, offset):
    out = []
    for _ in range(n):
        x = rng.normal((2, 3))
        out.append(DiffusionTuple(0.7 if tag == "high" else 0.2, x, x, x + offset, rng.normal(2), tag))
    return out


def identity_student(x_t, t, c):
    return Tensor(x_t)


def test_two_expert_default_weights():
    rng = Rng(4)
    recs = _tuples(rng, 3, "low", 1.0) + _tuples(rng, 2, "high", -1.0)
    assert kd_loss_two_expert(recs, identity_student).item() == pytest.approx(1.0, rel=1e-12)


def test_two_expert_weights_and_oracle():
    rng = Rng(5)
    low = _tuples(rng, 3, "low", rng.normal((2, 3)))
    high = _tuples(rng, 4, "high", rng.normal((2, 3)))
    low_term = np.mean([np.mean((r.x_t - r.v) ** 2) for r in low])
    high_term = np.mean([np.mean((r.x_t - r.v) ** 2) for r in high])
    assert kd_loss_two_expert(low + high, identity_student, w_h=0.0).item() == pytest.approx(0.5 * low_term)
    got = kd_loss_two_expert(high + low, identity_student, w_l=0.3, w_h=0.9).item()
    assert got == pytest.approx(0.3 * low_term + 0.9 * high_term, rel=1e-12)
    with pytest.raises(ValueError):
        kd_loss_two_expert(low, identity_student)


def test_expert_boundary():
    assert expert_for(0.5) == "high" and expert_for(0.4999) == "low"
    assert expert_for(0.3, boundary=0.2) == "high"


# -- adversarial ------------------------------------------------------------------------------

def test_rpgan_parity_and_saturation():
    d = np.array([0.3, -1.2, 2.0])
    l_d, l_g = rpgan_losses(d, d)
    assert l_d.item() == pytest.approx(math.log(2), abs=1e-12)
    assert l_g.item() == pytest.approx(math.log(2), abs=1e-12)
    l_d, l_g = rpgan_losses(np.array([20.0]), np.array([0.0]))
    assert l_d.item() < 1e-8
    assert l_g.item() == pytest.approx(20.0, rel=1e-8)
    with pytest.raises(ValueError):
        rpgan_losses(np.ones(2), np.ones(3))


@given(vec, st.data())
def test_rpgan_antisymmetry_and_oracle(a, data):
    b = data.draw(arrays(np.float64, a.shape, elements=grid_floats))
    l_d, l_g = rpgan_losses(a, b)
    l_d2, l_g2 = rpgan_losses(b, a)
    assert l_d.item() == pytest.approx(l_g2.item(), rel=1e-12, abs=1e-15)
    assert l_d.item() == pytest.approx(np.mean(np.logaddexp(0, -(a - b))), rel=1e-12, abs=1e-15)
    assert l_g.item() == pytest.approx(np.mean(np.logaddexp(0, a - b)), rel=1e-12, abs=1e-15)


def test_r_penalties_cases():
    rng = Rng(6)
    x_real, x_fake = rng.normal((4, 5)), rng.normal((4, 5))
    const = lambda x: ops.scale(ops.sum(x, axis=1), 0.0)
    r1, r2 = r_penalties(const, x_real, x_fake, 0.1, 3.0, rng)
    assert r1.item() == 0.0 and r2.item() == 0.0
    w = rng.normal(5)
    linear = lambda x: ops.reshape(ops.matmul(x, Tensor(w[:, None])), (x.shape[0],))
    unit = np.tile(w / np.linalg.norm(w), (4, 1))
    r1, r2 = r_penalties(linear, x_real, x_fake, 1e-3, 2.0, rng, directions={"real": unit, "fake": unit})
    assert r1.item() == pytest.approx(np.linalg.norm(w), rel=1e-9)
    assert r2.item() == pytest.approx(np.linalg.norm(w), rel=1e-9)
    r1, r2 = r_penalties(linear, x_real, x_fake, 0.1, 0.0, rng)
    assert r1.item() == 0.0 and r2.item() == 0.0
    with pytest.raises(ValueError):
        r_penalties(linear, x_real, x_fake, 0.0, 1.0, rng)


# -- sampler ----------------------------------------------------------------------------------

@pytest.mark.parametrize("steps", [1, 4, 7])
def test_euler_recovers_x0_on_exact_velocity(steps):
    rng = Rng(7)
    x0, eps = rng.normal((3, 2)), rng.normal((3, 2))
    out = euler_flow_sample(lambda x, t, c: eps - x0, eps, steps)
    np.testing.assert_allclose(out, x0, atol=1e-6 if steps > 1 else 0)


def test_euler_zero_velocity_and_errors():
    x = Rng(8).normal(4)
    assert np.array_equal(euler_flow_sample(lambda x_, t, c: np.zeros_like(x_), x, 3), x)
    with pytest.raises(ValueError):
        euler_flow_sample(lambda x_, t, c: x_, x, 0)
    with pytest.raises(NonFiniteError):
        euler_flow_sample(lambda x_, t, c: np.full_like(x_, np.inf), x, 2)


def test_timestep_samplers():
    rng = Rng(9)
    u = sample_timesteps(rng, 1000)
    ln = sample_timesteps(rng, 1000, "logit_normal")
    for t in (u, ln):
        assert t.min() >= 0 and t.max() <= 1
    assert abs(np.median(ln) - 0.5) < 0.05
    with pytest.raises(ValueError):
        sample_timesteps(rng, 3, "cosine")


# -- KD cache ------------------------------------------------------------------------------------

def _data(n, seed=10, shape=(2, 2, 2, 3)):
    rng = Rng(seed)
    return [(rng.normal(shape), rng.normal(4)) for _ in range(n)]


def fake_teacher(x_t, t, c):
    return np.tanh(x_t) * (1 + t) + c[0]


def test_cache_round_trip_and_interpolant(tmp_path):
    recs = build_kd_cache(fake_teacher, _data(6), Rng(11), tmp_path / "kd.s2kd")
    assert all(r.check_interpolant() for r in recs)
    back = read_kd_cache(tmp_path / "kd.s2kd")
    assert len(back) == 6
    for a, b in zip(recs, back):
        assert a.t == b.t and a.tag == b.tag
        for name in ("eps", "x_t", "v", "c_text"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_cache_header_layout(tmp_path):
    build_kd_cache(fake_teacher, _data(3), Rng(12), tmp_path / "kd.s2kd")
    raw = (tmp_path / "kd.s2kd").read_bytes()
    magic, version, count = struct.unpack("<4sBQ", raw[:13])
    assert (magic, version, count) == (b"S2KD", 1, 3)
    tag, t = struct.unpack("<Bd", raw[13:22])
    assert tag == 0 and 0 <= t <= 1
    assert raw[22:26] == b"S2TN"


def test_cache_is_deterministic(tmp_path):
    build_kd_cache(fake_teacher, _data(5), Rng(13), tmp_path / "a.s2kd")
    build_kd_cache(fake_teacher, _data(5), Rng(13), tmp_path / "b.s2kd")
    assert (tmp_path / "a.s2kd").read_bytes() == (tmp_path / "b.s2kd").read_bytes()


def test_two_expert_cache_tags(tmp_path):
    teachers = {"high": lambda x, t, c: x * 0 + 1.0, "low": lambda x, t, c: x * 0 - 1.0}
    recs = build_kd_cache(teachers, _data(40), Rng(14), tmp_path / "kd.s2kd")
    for r in read_kd_cache(tmp_path / "kd.s2kd"):
        assert r.tag == expert_for(r.t)
        assert np.all(r.v == (1.0 if r.tag == "high" else -1.0))
    assert {r.tag for r in recs} == {"high", "low"}


def test_cache_rejects_non_finite_and_corruption(tmp_path):
    with pytest.raises(NonFiniteError):
        build_kd_cache(lambda x, t, c: x * np.inf, _data(1), Rng(15), tmp_path / "bad.s2kd")
    path = tmp_path / "kd.s2kd"
    build_kd_cache(fake_teacher, _data(3), Rng(16), path)
    raw = path.read_bytes()
    (tmp_path / "trunc.s2kd").write_bytes(raw[:-20])
    with pytest.raises(Exception):
        read_kd_cache(tmp_path / "trunc.s2kd")
    (tmp_path / "magic.s2kd").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CacheFormatError):
        read_kd_cache(tmp_path / "magic.s2kd")


def test_cache_writer_appends(tmp_path):
    path = tmp_path / "kd.s2kd"
    x = np.ones((1, 2))
    with KdCacheWriter(path) as w:
        w.append(DiffusionTuple(0.1, x, x, x, np.ones(2)))
    with KdCacheWriter(path, overwrite=False) as w:
        w.append(DiffusionTuple(0.9, x, x, x, np.ones(2), "high"))
    assert [r.tag for r in read_kd_cache(path)] == ["single", "high"]


# -- toy distillation -------------------------------------------------------------------------------

def test_distill_zero_lr_flat_and_teacher_student_zero(tmp_path):
    cfg = ModelConfig(groups=2, group_size=1)
    teacher = build_teacher(cfg, 0)
    data = _data(6, shape=(2, 4, 4, cfg.in_channels))
    data = [(x, np.resize(c, cfg.text_dim)) for x, c in data]
    recs = build_kd_cache(velocity_fn(teacher), data, Rng(17), tmp_path / "kd.s2kd")
    copy = build_teacher(cfg, 0)
    res = distill(copy, velocity_fn(copy, grad=True), recs, steps=3, batch_size=2, lr=1e-3, rng=Rng(0))
    assert max(res.curve) < 1e-20 and res.eval_before < 1e-20
    student = build_sandwich(cfg, 3, mask=(1, 1))
    before = student.state_dict()
    res = distill(student, velocity_fn(student, grad=True), recs[:1], steps=4, batch_size=2, lr=0.0, rng=Rng(0))
    assert res.eval_after == res.eval_before
    assert len(set(res.curve)) == 1 and res.curve[0] == pytest.approx(res.eval_before, rel=1e-12)
    assert all(np.array_equal(before[k], v) for k, v in student.state_dict().items())
