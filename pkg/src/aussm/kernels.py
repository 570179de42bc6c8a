"""AUSSM and S6 kernels: parameters, recurrent references, separable passes, adjoints.

Shapes follow the (batch, channel, state, time) convention: inputs ``u`` are
``(b, d, L)``, per-lane quantities are ``(b, d, n, L)``.

AUSSM lane (b, i, j)::

    delta[b,i,l] = chi_delta[i] . u[b,:,l] + chi_delta_bias[i]
    theta[b,i,j,l] = delta[b,i,l] * (chi[i,j] . u[b,:,l] + chi_bias[i,j])
    x[t] = exp(1j * theta[t]) x[t-1] + delta[t] * B[j] * u[b,i,t]
    y[b,i,t] = Re(sum_j C[j] x[t]) + D[i] u[b,i,t]

with B = R_B exp(1j theta_B), C = R_C exp(1j theta_C) shared across channels.

S6 lane (b, i, j)::

    delta = softplus(W_delta u + b_delta),  B_t = W_B u_t,  C_t = W_C u_t
    x[t] = exp(delta[t] A[i,j]) x[t-1] + delta[t] B_t[j] u[b,i,t]
    y[b,i,t] = sum_j C_t[j] x[t] + D[i] u[b,i,t]

The separable passes run chunk by chunk (see :class:`aussm.scan.ChunkPlan`)
and keep only the chunk-boundary states; the backward pass recomputes each
chunk from its boundary state and runs the adjoint sweep in reverse.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from . import scan
from .errors import ContractError, NonFiniteError
from .scan import ChunkPlan


def softplus(x):
    return np.logaddexp(0.0, x)


def rel_err(a, b) -> float:
    """max |a - b| / max(|a|, |b|), the error measure used across the package."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


class _ParamsMixin:
    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_arrays(cls, arrays):
        return cls(**{f.name: np.asarray(arrays[f.name], dtype=float) for f in dataclasses.fields(cls)})

    def zeros_like(self):
        return type(self)(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def fingerprint(self) -> tuple:
        return tuple(hash(np.ascontiguousarray(v).tobytes()) for v in self.arrays().values())

    def _check_finite(self):
        for name, v in self.arrays().items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"parameter {name} has non-finite entries")


@dataclass
class AussmParams(_ParamsMixin):
    """Polar-form AUSSM parameters for one layer with d channels and n states."""

    R_B: np.ndarray
    theta_B: np.ndarray
    R_C: np.ndarray
    theta_C: np.ndarray
    chi: np.ndarray
    chi_bias: np.ndarray
    chi_delta: np.ndarray
    chi_delta_bias: np.ndarray
    D: np.ndarray

    @property
    def d(self) -> int:
        return self.chi.shape[0]

    @property
    def n(self) -> int:
        return self.chi.shape[1]

    @classmethod
    def init(cls, d: int, n: int, rng: np.random.Generator) -> "AussmParams":
        return cls(
            R_B=rng.uniform(0.5, 1.0, n),
            theta_B=rng.uniform(-np.pi, np.pi, n),
            R_C=rng.uniform(0.5, 1.0, n),
            theta_C=rng.uniform(-np.pi, np.pi, n),
            chi=rng.normal(0.0, 1.0 / np.sqrt(d), (d, n, d)),
            chi_bias=rng.uniform(-np.pi, np.pi, (d, n)),
            chi_delta=rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
            chi_delta_bias=np.ones(d),
            D=np.ones(d),
        )

    def validate(self) -> None:
        d, n = self.d, self.n
        expected = {
            "R_B": (n,), "theta_B": (n,), "R_C": (n,), "theta_C": (n,),
            "chi": (d, n, d), "chi_bias": (d, n), "chi_delta": (d, d),
            "chi_delta_bias": (d,), "D": (d,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ContractError(f"AussmParams.{name} has shape {getattr(self, name).shape}, expected {shape}")
        self._check_finite()
        if np.any(self.R_B < 0) or np.any(self.R_C < 0):
            raise ContractError("R_B and R_C must be nonnegative")

    @property
    def B(self) -> np.ndarray:
        return self.R_B * np.exp(1j * self.theta_B)

    @property
    def C(self) -> np.ndarray:
        return self.R_C * np.exp(1j * self.theta_C)


@dataclass
class S6Params(_ParamsMixin):
    """Selective (Mamba S6) parameters for d channels and n states."""

    A: np.ndarray
    W_B: np.ndarray
    W_C: np.ndarray
    W_delta: np.ndarray
    b_delta: np.ndarray
    D: np.ndarray

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @classmethod
    def init(cls, d: int, n: int, rng: np.random.Generator,
             dt_min: float = 1e-3, dt_max: float = 1e-1) -> "S6Params":
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d))
        return cls(
            A=-np.tile(np.arange(1, n + 1, dtype=float), (d, 1)),
            W_B=rng.normal(0.0, 1.0 / np.sqrt(d), (n, d)),
            W_C=rng.normal(0.0, 1.0 / np.sqrt(d), (n, d)),
            W_delta=rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)) * 0.1,
            b_delta=dt + np.log(-np.expm1(-dt)),  # softplus^-1(dt)
            D=np.ones(d),
        )

    def validate(self) -> None:
        d, n = self.d, self.n
        expected = {"A": (d, n), "W_B": (n, d), "W_C": (n, d), "W_delta": (d, d), "b_delta": (d,), "D": (d,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ContractError(f"S6Params.{name} has shape {getattr(self, name).shape}, expected {shape}")
        self._check_finite()
        if np.any(self.A >= 0):
            raise ContractError("S6 A must be strictly negative")


@dataclass
class KernelCache:
    """What the backward pass needs: inputs, the chunk plan and chunk-start states."""

    kind: str
    params: AussmParams | S6Params
    u: np.ndarray
    plan: ChunkPlan
    carries: list
    delta: np.ndarray | None = None
    fingerprint: tuple = ()


def _check_input(p, u, delta=None) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim != 3 or u.shape[1] != p.d:
        raise ContractError(f"input must have shape (batch, {p.d}, L), got {u.shape}")
    if not np.all(np.isfinite(u)):
        raise NonFiniteError("kernel input has non-finite entries")
    if delta is not None and np.shape(delta) != u.shape:
        raise ContractError(f"delta override shape {np.shape(delta)} != input shape {u.shape}")
    return u


def _matvec(W, u):
    """(k, d) weights applied to (b, d, L) input -> (b, k, L)."""
    return np.matmul(W, u)


# ---------------------------------------------------------------------------
# AUSSM

class _AussmTerms(NamedTuple):
    delta: np.ndarray   # (b, d, L)
    phi: np.ndarray     # (b, d, n, L) angular rate before the step-size scale
    theta: np.ndarray   # (b, d, n, L)
    drive: np.ndarray   # (b, d, L) = delta * u, real
    w: np.ndarray       # (b, d, n, L) complex


def _aussm_terms(p: AussmParams, u, delta=None) -> _AussmTerms:
    b, d, length = u.shape
    n = p.n
    if delta is None:
        delta = _matvec(p.chi_delta, u) + p.chi_delta_bias[:, None]
    phi = _matvec(p.chi.reshape(d * n, d), u).reshape(b, d, n, length) + p.chi_bias[..., None]
    theta = delta[:, :, None, :] * phi
    drive = delta * u
    w = drive[:, :, None, :] * p.B[None, None, :, None]
    return _AussmTerms(delta, phi, theta, drive, w)


def aussm_angles(p: AussmParams, u, delta=None) -> np.ndarray:
    """Per-step transition angles theta[b, i, j, l]."""
    u = _check_input(p, u, delta)
    return _aussm_terms(p, u, delta).theta


def _aussm_readout(p: AussmParams, x, u):
    return np.real(np.einsum("bijl,j->bil", x, p.C)) + p.D[:, None] * u


def aussm_forward(p: AussmParams, u, delta_override=None, plan: ChunkPlan | None = None,
                  x0=None, return_states: bool = False):
    """Separable AUSSM forward. Returns ``(y, cache)`` or ``(y, cache, states)``."""
    p.validate()
    u = _check_input(p, u, delta_override)
    plan = plan or ChunkPlan()
    b, d, length = u.shape
    y = np.empty_like(u)
    states = np.empty((b, d, p.n, length), dtype=complex) if return_states else None
    carry = np.zeros((b, d, p.n), dtype=complex)
    if x0 is not None:
        carry = carry + x0
    carries = []
    for s, e in plan.bounds(length):
        t = _aussm_terms(p, u[..., s:e], None if delta_override is None else delta_override[..., s:e])
        carries.append(carry)
        x = scan.segment_recurrence(t.w, carry, angle=t.theta)
        y[..., s:e] = _aussm_readout(p, x, u[..., s:e])
        if states is not None:
            states[..., s:e] = x
        carry = x[..., -1]
    cache = KernelCache("aussm", p, u, plan, carries, delta_override, p.fingerprint())
    if return_states:
        return y, cache, states
    return y, cache


def aussm_recurrent_reference(p: AussmParams, u, delta_override=None, x0=None, return_states: bool = False):
    """Step-by-step AUSSM evaluation, the ground truth for the separable pass."""
    p.validate()
    u = _check_input(p, u, delta_override)
    x, _ = _aussm_recurrent_states(p, u, delta_override, x0)
    y = _aussm_readout(p, x, u)
    return (y, x) if return_states else y


def _aussm_recurrent_states(p, u, delta, x0):
    t = _aussm_terms(p, u, delta)
    a = np.moveaxis(np.exp(1j * t.theta), -1, 0).copy()
    w = np.moveaxis(t.w, -1, 0).copy()
    xs = np.empty_like(w)
    scan.note_alloc("states", xs)
    x = np.zeros(w.shape[1:], dtype=complex)
    if x0 is not None:
        x = x + x0
    for step in range(w.shape[0]):
        x = a[step] * x + w[step]
        xs[step] = x
    return np.moveaxis(xs, 0, -1), t


def _aussm_accumulate(p: AussmParams, u, t: _AussmTerms, x, xbar, dy, grads: AussmParams, du, has_override):
    """Turn state adjoints of one chunk into parameter and input gradients."""
    b, d, length = u.shape
    n = p.n
    B, C = p.B, p.C
    # theta_bar = -Im(conj(xbar) * a * x_prev) with a * x_prev = x - w
    thbar = -np.imag(np.conj(xbar) * (x - t.w))
    sbar = np.real(np.einsum("bijl,j->bil", np.conj(xbar), B))
    Bbar = np.einsum("bil,bijl->j", t.drive, xbar)
    Cbar = np.einsum("bil,bijl->j", dy, np.conj(x))
    grads.R_B += np.real(np.conj(Bbar) * np.exp(1j * p.theta_B))
    grads.theta_B += np.real(np.conj(Bbar) * 1j * B)
    grads.R_C += np.real(np.conj(Cbar) * np.exp(1j * p.theta_C))
    grads.theta_C += np.real(np.conj(Cbar) * 1j * C)

    delta_bar = sbar * u + np.einsum("bijl,bijl->bil", thbar, t.phi)
    du += sbar * t.delta
    phibar = (thbar * t.delta[:, :, None, :]).reshape(b, d * n, length)
    grads.chi += np.einsum("bkl,brl->kr", phibar, u).reshape(d, n, d)
    grads.chi_bias += phibar.sum(axis=(0, 2)).reshape(d, n)
    du += np.matmul(p.chi.reshape(d * n, d).T, phibar)
    if not has_override:
        grads.chi_delta += np.einsum("bil,brl->ir", delta_bar, u)
        grads.chi_delta_bias += delta_bar.sum(axis=(0, 2))
        du += np.matmul(p.chi_delta.T, delta_bar)
    grads.D += np.einsum("bil,bil->i", dy, u)
    du += p.D[:, None] * dy


def _check_cache(cache: KernelCache, kind: str, dy):
    if not isinstance(cache, KernelCache) or cache.kind != kind:
        raise ContractError(f"expected a {kind} kernel cache")
    if np.shape(dy) != cache.u.shape:
        raise ContractError(f"dy shape {np.shape(dy)} does not match forward output {cache.u.shape}")
    if cache.params.fingerprint() != cache.fingerprint:
        raise ContractError("stale cache: parameters changed since the forward pass")
    return np.asarray(dy, dtype=float)


def aussm_backward(cache: KernelCache, dy):
    """Adjoint of :func:`aussm_forward`. Returns ``(grads, du)``.

    ``grads`` is an :class:`AussmParams` holding d loss / d field.
    """
    dy = _check_cache(cache, "aussm", dy)
    p, u, plan = cache.params, cache.u, cache.plan
    grads = p.zeros_like()
    du = np.zeros_like(u)
    b, d, length = u.shape
    carry_in = np.zeros((b, d, p.n), dtype=complex)
    conjC = np.conj(p.C)[None, None, :, None]
    bounds = plan.bounds(length)
    for k in reversed(range(len(bounds))):
        s, e = bounds[k]
        delta = None if cache.delta is None else cache.delta[..., s:e]
        t = _aussm_terms(p, u[..., s:e], delta)
        x = scan.segment_recurrence(t.w, cache.carries[k], angle=t.theta)
        xbar = scan.reverse_segment_recurrence(conjC * dy[:, :, None, s:e], carry_in, angle=t.theta)
        du_chunk = du[..., s:e]
        _aussm_accumulate(p, u[..., s:e], t, x, xbar, dy[..., s:e], grads, du_chunk, cache.delta is not None)
        carry_in = np.exp(-1j * t.theta[..., 0]) * xbar[..., 0]
    return grads, du


def aussm_recurrent_backward(p: AussmParams, u, dy, delta_override=None):
    """Backpropagation through time of the recurrent reference (stored states)."""
    p.validate()
    u = _check_input(p, u, delta_override)
    dy = np.asarray(dy, dtype=float)
    x, t = _aussm_recurrent_states(p, u, delta_override, None)
    a_conj = np.moveaxis(np.exp(-1j * t.theta), -1, 0)
    c = np.moveaxis(np.conj(p.C)[None, None, :, None] * dy[:, :, None, :], -1, 0)
    xbar = np.empty_like(c)
    z = np.zeros(c.shape[1:], dtype=complex)
    for step in reversed(range(c.shape[0])):
        z = c[step] + z
        xbar[step] = z
        z = a_conj[step] * z
    xbar = np.moveaxis(xbar, 0, -1)
    grads = p.zeros_like()
    du = np.zeros_like(u)
    _aussm_accumulate(p, u, t, x, xbar, dy, grads, du, delta_override is not None)
    return grads, du


# ---------------------------------------------------------------------------
# S6

class _S6Terms(NamedTuple):
    z: np.ndarray          # (b, d, L) pre-softplus step size
    delta: np.ndarray      # (b, d, L)
    Bt: np.ndarray         # (b, n, L)
    Ct: np.ndarray         # (b, n, L)
    log_decay: np.ndarray  # (b, d, n, L)
    drive: np.ndarray      # (b, d, L)
    w: np.ndarray          # (b, d, n, L)


def _s6_terms(p: S6Params, u) -> _S6Terms:
    z = _matvec(p.W_delta, u) + p.b_delta[:, None]
    delta = softplus(z)
    Bt = _matvec(p.W_B, u)
    Ct = _matvec(p.W_C, u)
    log_decay = delta[:, :, None, :] * p.A[None, :, :, None]
    drive = delta * u
    w = drive[:, :, None, :] * Bt[:, None, :, :]
    return _S6Terms(z, delta, Bt, Ct, log_decay, drive, w)


def _s6_readout(p: S6Params, t: _S6Terms, x, u):
    return np.einsum("bjl,bijl->bil", t.Ct, x) + p.D[:, None] * u


def s6_forward(p: S6Params, u, plan: ChunkPlan | None = None):
    """Separable S6 forward with per-chunk re-basing. Returns ``(y, cache)``."""
    p.validate()
    u = _check_input(p, u)
    plan = plan or ChunkPlan()
    b, d, length = u.shape
    y = np.empty_like(u)
    carry = np.zeros((b, d, p.n))
    carries = []
    for s, e in plan.bounds(length):
        t = _s6_terms(p, u[..., s:e])
        carries.append(carry)
        x = scan.segment_recurrence(t.w, carry, log_decay=t.log_decay, log_span=plan.log_span)
        y[..., s:e] = _s6_readout(p, t, x, u[..., s:e])
        carry = x[..., -1]
    return y, KernelCache("s6", p, u, plan, carries, None, p.fingerprint())


def _s6_recurrent_states(p, u):
    t = _s6_terms(p, u)
    a = np.moveaxis(np.exp(t.log_decay), -1, 0).copy()
    w = np.moveaxis(t.w, -1, 0).copy()
    xs = np.empty_like(w)
    scan.note_alloc("states", xs)
    x = np.zeros(w.shape[1:])
    for step in range(w.shape[0]):
        x = a[step] * x + w[step]
        xs[step] = x
    return np.moveaxis(xs, 0, -1), t


def s6_recurrent_reference(p: S6Params, u, return_states: bool = False):
    p.validate()
    u = _check_input(p, u)
    x, t = _s6_recurrent_states(p, u)
    y = _s6_readout(p, t, x, u)
    return (y, x) if return_states else y


def _s6_accumulate(p: S6Params, u, t: _S6Terms, x, xbar, dy, grads: S6Params, du):
    ldbar = xbar * (x - t.w)
    grads.A += np.einsum("bijl,bil->ij", ldbar, t.delta)
    sbar = np.einsum("bijl,bjl->bil", xbar, t.Bt)
    Btbar = np.einsum("bijl,bil->bjl", xbar, t.drive)
    Ctbar = np.einsum("bil,bijl->bjl", dy, x)
    delta_bar = np.einsum("bijl,ij->bil", ldbar, p.A) + sbar * u
    du += sbar * t.delta
    grads.W_B += np.einsum("bjl,brl->jr", Btbar, u)
    grads.W_C += np.einsum("bjl,brl->jr", Ctbar, u)
    du += np.matmul(p.W_B.T, Btbar) + np.matmul(p.W_C.T, Ctbar)
    zbar = delta_bar * expit(t.z)
    grads.W_delta += np.einsum("bil,brl->ir", zbar, u)
    grads.b_delta += zbar.sum(axis=(0, 2))
    du += np.matmul(p.W_delta.T, zbar)
    grads.D += np.einsum("bil,bil->i", dy, u)
    du += p.D[:, None] * dy


def s6_backward(cache: KernelCache, dy):
    """Adjoint of :func:`s6_forward`. Returns ``(grads, du)``."""
    dy = _check_cache(cache, "s6", dy)
    p, u, plan = cache.params, cache.u, cache.plan
    grads = p.zeros_like()
    du = np.zeros_like(u)
    b, d, length = u.shape
    carry_in = np.zeros((b, d, p.n))
    bounds = plan.bounds(length)
    for k in reversed(range(len(bounds))):
        s, e = bounds[k]
        t = _s6_terms(p, u[..., s:e])
        x = scan.segment_recurrence(t.w, cache.carries[k], log_decay=t.log_decay, log_span=plan.log_span)
        c = t.Ct[:, None, :, :] * dy[:, :, None, s:e]
        xbar = scan.reverse_segment_recurrence(c, carry_in, log_decay=t.log_decay, log_span=plan.log_span)
        _s6_accumulate(p, u[..., s:e], t, x, xbar, dy[..., s:e], grads, du[..., s:e])
        carry_in = np.exp(t.log_decay[..., 0]) * xbar[..., 0]
    return grads, du


def s6_recurrent_backward(p: S6Params, u, dy):
    p.validate()
    u = _check_input(p, u)
    dy = np.asarray(dy, dtype=float)
    x, t = _s6_recurrent_states(p, u)
    a = np.moveaxis(np.exp(t.log_decay), -1, 0)
    c = np.moveaxis(t.Ct[:, None, :, :] * dy[:, :, None, :], -1, 0)
    xbar = np.empty_like(c)
    z = np.zeros(c.shape[1:])
    for step in reversed(range(c.shape[0])):
        z = c[step] + z
        xbar[step] = z
        z = a[step] * z
    xbar = np.moveaxis(xbar, 0, -1)
    grads = p.zeros_like()
    du = np.zeros_like(u)
    _s6_accumulate(p, u, t, x, xbar, dy, grads, du)
    return grads, du


# ---------------------------------------------------------------------------
# dispatch by kind

def kernel_forward(p, u, plan: ChunkPlan | None = None):
    if isinstance(p, AussmParams):
        return aussm_forward(p, u, plan=plan)
    return s6_forward(p, u, plan=plan)


def kernel_backward(cache: KernelCache, dy):
    if cache.kind == "aussm":
        return aussm_backward(cache, dy)
    return s6_backward(cache, dy)
