import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aussm.errors import ContractError, NonFiniteError
from aussm.gradcheck import gradcheck_kernel
from aussm.kernels import (
    AussmParams, S6Params, aussm_angles, aussm_backward, aussm_forward, aussm_recurrent_backward,
    aussm_recurrent_reference, rel_err, s6_backward, s6_forward, s6_recurrent_backward,
    s6_recurrent_reference, softplus,
)
from aussm.scan import ChunkPlan

EPS = 2.0 ** -53


def counter_params(d=1):
    """Binary mod-2 counter: token 1 rotates by pi, token 0 keeps the phase, no drive."""
    return AussmParams(
        R_B=np.zeros(1), theta_B=np.zeros(1), R_C=np.ones(1), theta_C=np.zeros(1),
        chi=np.full((d, 1, d), math.pi), chi_bias=np.zeros((d, 1)),
        chi_delta=np.zeros((d, d)), chi_delta_bias=np.ones(d), D=np.zeros(d),
    )


def loop_aussm(p, u):
    """Independent scalar loop over every (b, i, j) lane."""
    b, d, L = u.shape
    y = np.zeros_like(u)
    for bb in range(b):
        for i in range(d):
            x = np.zeros(p.n, complex)
            for t in range(L):
                delta = p.chi_delta[i] @ u[bb, :, t] + p.chi_delta_bias[i]
                for j in range(p.n):
                    th = delta * (p.chi[i, j] @ u[bb, :, t] + p.chi_bias[i, j])
                    x[j] = complex(math.cos(th), math.sin(th)) * x[j] + delta * p.B[j] * u[bb, i, t]
                y[bb, i, t] = sum((p.C[j] * x[j]).real for j in range(p.n)) + p.D[i] * u[bb, i, t]
    return y


# ---------------------------------------------------------------------------
# AUSSM forward

def test_counter_phases_follow_parity():
    p = counter_params()
    u = np.array([[[1.0, 1.0, 0.0, 1.0]]])
    _, _, x = aussm_forward(p, u, x0=1.0, return_states=True)
    np.testing.assert_allclose(x[0, 0, 0].real, [-1, 1, 1, -1], atol=1e-15)
    _, xr = aussm_recurrent_reference(p, u, x0=1.0, return_states=True)
    np.testing.assert_allclose(xr[0, 0, 0].real, [-1, 1, 1, -1], atol=1e-15)


def test_zero_step_size_gives_skip_only():
    rng = np.random.default_rng(0)
    p = AussmParams.init(3, 2, rng)
    p.chi[:] = 0
    p.chi_bias[:] = 0
    p.chi_delta[:] = 0
    p.chi_delta_bias[:] = 0
    u = rng.normal(size=(2, 3, 9))
    y, _ = aussm_forward(p, u)
    np.testing.assert_array_equal(y, p.D[:, None] * u)


def test_seeded_instance_matches_scalar_loop():
    rng = np.random.default_rng(1)
    p = AussmParams.init(2, 2, rng)
    u = rng.normal(size=(2, 2, 8))
    y, _ = aussm_forward(p, u)
    assert rel_err(y, loop_aussm(p, u)) <= 1e-12
    assert rel_err(aussm_recurrent_reference(p, u), loop_aussm(p, u)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 3), st.integers(1, 3), st.integers(1, 16), st.integers(0, 2 ** 31))
def test_aussm_separable_equals_recurrent(L, d, n, chunk, seed):
    rng = np.random.default_rng(seed)
    p = AussmParams.init(d, n, rng)
    u = rng.normal(size=(2, d, L))
    y, _ = aussm_forward(p, u, plan=ChunkPlan(chunk))
    assert rel_err(y, aussm_recurrent_reference(p, u)) <= 1e-10


def test_delta_override_is_used():
    rng = np.random.default_rng(2)
    p = AussmParams.init(2, 2, rng)
    u = rng.normal(size=(1, 2, 6))
    delta = rng.uniform(0.1, 2.0, size=u.shape)
    y, _ = aussm_forward(p, u, delta_override=delta)
    assert rel_err(y, aussm_recurrent_reference(p, u, delta_override=delta)) <= 1e-12
    assert rel_err(y, aussm_forward(p, u)[0]) > 1e-3


def test_forward_rejects_bad_input():
    rng = np.random.default_rng(3)
    p = AussmParams.init(2, 2, rng)
    with pytest.raises(ContractError):
        aussm_forward(p, np.zeros((1, 3, 4)))
    u = np.zeros((1, 2, 4))
    u[0, 0, 1] = np.nan
    with pytest.raises(NonFiniteError):
        aussm_forward(p, u)
    bad = AussmParams.init(2, 2, rng)
    bad.R_B[0] = -1.0
    with pytest.raises(ContractError):
        aussm_forward(bad, np.zeros((1, 2, 4)))
    bad = AussmParams.init(2, 2, rng)
    bad.chi = bad.chi[:, :1]
    with pytest.raises(ContractError):
        aussm_forward(bad, np.zeros((1, 2, 4)))


# ---------------------------------------------------------------------------
# AUSSM backward

def test_zero_cotangent_gives_zero_gradients():
    rng = np.random.default_rng(4)
    p = AussmParams.init(2, 2, rng)
    u = rng.normal(size=(1, 2, 10))
    _, cache = aussm_forward(p, u)
    grads, du = aussm_backward(cache, np.zeros_like(u))
    assert all(np.all(g == 0) for g in grads.arrays().values())
    assert np.all(du == 0)


def test_skip_gradient_is_dy_dot_u():
    rng = np.random.default_rng(5)
    p = AussmParams.init(3, 2, rng)
    u = rng.normal(size=(2, 3, 10))
    dy = rng.normal(size=u.shape)
    _, cache = aussm_forward(p, u)
    grads, _ = aussm_backward(cache, dy)
    np.testing.assert_allclose(grads.D, (dy * u).sum(axis=(0, 2)), rtol=1e-13)


def test_aussm_gradcheck():
    errs = gradcheck_kernel("aussm", L=16, d=2, n=2)
    assert max(errs.values()) < 1e-5, errs


def test_aussm_gradcheck_multi_chunk():
    errs = gradcheck_kernel("aussm", L=16, d=2, n=2, batch=2, seed=3, plan=ChunkPlan(5))
    assert max(errs.values()) < 1e-5, errs


def test_separable_backward_equals_bptt():
    rng = np.random.default_rng(6)
    p = AussmParams.init(3, 4, rng)
    u = rng.normal(size=(2, 3, 50))
    dy = rng.normal(size=u.shape)
    _, cache = aussm_forward(p, u, plan=ChunkPlan(16))
    g1, du1 = aussm_backward(cache, dy)
    g2, du2 = aussm_recurrent_backward(p, u, dy)
    for name in g1.arrays():
        assert rel_err(getattr(g1, name), getattr(g2, name)) < 1e-10, name
    assert rel_err(du1, du2) < 1e-10


def test_stale_cache_is_rejected():
    rng = np.random.default_rng(7)
    p = AussmParams.init(2, 2, rng)
    u = rng.normal(size=(1, 2, 5))
    _, cache = aussm_forward(p, u)
    with pytest.raises(ContractError):
        aussm_backward(cache, np.zeros((1, 2, 6)))
    p.chi[0, 0, 0] += 1.0
    with pytest.raises(ContractError):
        aussm_backward(cache, np.zeros_like(u))
    q = S6Params.init(2, 2, rng)
    _, s6cache = s6_forward(q, u)
    with pytest.raises(ContractError):
        aussm_backward(s6cache, np.zeros_like(u))


# ---------------------------------------------------------------------------
# AUSSM invariants

def test_norm_preserved_without_drive():
    rng = np.random.default_rng(8)
    p = AussmParams.init(2, 4, rng)
    p.R_B[:] = 0
    u = rng.normal(size=(1, 2, 10 ** 4))
    x0 = rng.normal(size=(1, 2, 4)) + 1j * rng.normal(size=(1, 2, 4))
    _, _, x = aussm_forward(p, u, x0=x0, return_states=True)
    norms = np.linalg.norm(x, axis=2)
    assert np.max(np.abs(norms - np.linalg.norm(x0, axis=2)[..., None])) < 1e-9


def test_eigenvalues_on_unit_circle():
    rng = np.random.default_rng(9)
    p = AussmParams.init(3, 4, rng)
    u = rng.normal(scale=5.0, size=(2, 3, 500))
    lam = np.exp(1j * aussm_angles(p, u))
    assert np.max(np.abs(np.abs(lam) - 1.0)) <= 4 * EPS


def test_angle_map_is_affine_in_input():
    rng = np.random.default_rng(10)
    p = AussmParams.init(3, 2, rng)
    u = rng.normal(size=(1, 3, 7))
    delta = rng.uniform(0.5, 1.5, size=u.shape)
    base = aussm_angles(p, u, delta)
    for r in range(3):
        v = u.copy()
        step = 0.37
        v[0, r, 4] += step
        diff = aussm_angles(p, v, delta) - base
        expected = delta[0, :, None, 4] * p.chi[:, :, r] * step
        np.testing.assert_allclose(diff[0, :, :, 4], expected, atol=1e-13)
        mask = np.ones(7, bool)
        mask[4] = False
        assert np.all(diff[..., mask] == 0)


def test_multi_timescale_increments_not_proportional():
    rng = np.random.default_rng(11)
    # one channel, two states: each state reads its own input coordinate
    p = AussmParams.init(2, 2, rng)
    p.chi[:] = 0
    p.chi[0, 0, 0] = 1.0
    p.chi[0, 1, 1] = 1.0
    p.chi_bias[:] = 0.1
    u = rng.normal(size=(1, 2, 200))
    th = aussm_angles(p, u)[0, 0]
    ratio = th[0] / th[1]
    assert np.std(ratio) > 1e-2
    # a fixed-A selective model scales every state by the same step size
    A = np.array([-1.0, -3.0])
    delta = softplus(rng.normal(size=200))
    fixed = delta[None, :] * A[:, None]
    np.testing.assert_allclose(fixed[0] / fixed[1], A[0] / A[1], rtol=1e-15)


# ---------------------------------------------------------------------------
# S6

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 3), st.integers(1, 3), st.integers(1, 16), st.integers(0, 2 ** 31))
def test_s6_separable_equals_recurrent(L, d, n, chunk, seed):
    rng = np.random.default_rng(seed)
    p = S6Params.init(d, n, rng)
    u = rng.normal(size=(2, d, L))
    y, _ = s6_forward(p, u, plan=ChunkPlan(chunk))
    assert rel_err(y, s6_recurrent_reference(p, u)) <= 1e-8


def test_s6_zero_step_size():
    rng = np.random.default_rng(12)
    p = S6Params.init(2, 3, rng)
    p.W_delta[:] = 0
    p.b_delta[:] = -800.0
    u = rng.normal(size=(1, 2, 12))
    y, _ = s6_forward(p, u)
    np.testing.assert_allclose(y, p.D[:, None] * u, atol=1e-300)


def test_s6_instant_forgetting():
    rng = np.random.default_rng(13)
    p = S6Params.init(2, 3, rng)
    p.A[:] = -1e3
    p.b_delta[:] = 1.0
    u = rng.normal(size=(1, 2, 12))
    y, _ = s6_forward(p, u)
    delta = softplus(p.W_delta @ u[0] + p.b_delta[:, None])
    Bt, Ct = p.W_B @ u[0], p.W_C @ u[0]
    want = (Ct * Bt).sum(0)[None] * delta * u[0] + p.D[:, None] * u[0]
    np.testing.assert_allclose(y[0], want, atol=1e-6)


def test_s6_gradcheck():
    errs = gradcheck_kernel("s6", L=16, d=2, n=2)
    assert max(errs.values()) < 1e-5, errs


def test_s6_backward_equals_bptt():
    rng = np.random.default_rng(14)
    p = S6Params.init(3, 4, rng)
    u = rng.normal(size=(2, 3, 50))
    dy = rng.normal(size=u.shape)
    _, cache = s6_forward(p, u, plan=ChunkPlan(16))
    g1, du1 = s6_backward(cache, dy)
    g2, du2 = s6_recurrent_backward(p, u, dy)
    for name in g1.arrays():
        assert rel_err(getattr(g1, name), getattr(g2, name)) < 1e-10, name
    assert rel_err(du1, du2) < 1e-10


def test_s6_rejects_nonnegative_A():
    rng = np.random.default_rng(15)
    p = S6Params.init(2, 2, rng)
    p.A[0, 0] = 0.0
    with pytest.raises(ContractError):
        s6_forward(p, np.zeros((1, 2, 3)))


def test_s6_long_sequence_chunk_rebasing():
    rng = np.random.default_rng(16)
    p = S6Params.init(2, 4, rng)
    p.b_delta[:] = 3.0  # large steps: cumulative decay overflows without re-basing
    u = rng.normal(size=(1, 2, 3000))
    y, _ = s6_forward(p, u)
    assert np.all(np.isfinite(y))
    assert rel_err(y, s6_recurrent_reference(p, u)) <= 1e-8
