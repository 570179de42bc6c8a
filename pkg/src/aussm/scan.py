"""Prefix-scan engine and separable-convolution evaluator.

Everything here works on the last axis of an array; all leading axes are
independent lanes (batch x channel x state) and are processed together.

The central routine is :func:`segment_recurrence`, which evaluates the
diagonal linear recurrence

    x[t] = exp(log_decay[t] + 1j * angle[t]) * x[t-1] + w[t]

through its separable convolution form

    x[t] = f[t] * (exp(a[s]) * x[s-1] + sum_{s <= k <= t} g[k]),
    f[t] = exp(P[t]),  g[k] = exp(-P[k]) * w[k],  P[t] = sum_{s < l <= t} a[l]

so the O(L^2) kernel K(t, k) = f(t) g(k) is never materialised.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, ContractError

TWO_PI = 2.0 * math.pi

# Partial sums inside one wrapped block stay below pi + WRAP_BLOCK * pi.
WRAP_BLOCK = 64


@dataclass(frozen=True)
class ChunkPlan:
    """How a lane of length L is cut into sequentially processed chunks.

    ``log_span`` bounds the accumulated real log-decay inside one separable
    segment, which keeps ``exp(-P)`` finite for decaying (S6) recurrences.
    Purely rotational recurrences never need the extra split.
    """

    chunk_len: int = 2048
    log_span: float = 300.0

    def __post_init__(self):
        if int(self.chunk_len) != self.chunk_len or self.chunk_len < 1:
            raise ConfigError(f"chunk_len must be a positive integer, got {self.chunk_len!r}")
        if not self.log_span > 0:
            raise ConfigError(f"log_span must be positive, got {self.log_span!r}")

    def num_chunks(self, length: int) -> int:
        return -(-length // self.chunk_len)

    def bounds(self, length: int) -> list[tuple[int, int]]:
        return [(s, min(s + self.chunk_len, length)) for s in range(0, length, self.chunk_len)]


# ---------------------------------------------------------------------------
# buffer accounting

@dataclass
class BufferTracker:
    """Byte accounting of the working buffers allocated by the scans."""

    live: int = 0
    peak: int = 0
    totals: dict = field(default_factory=lambda: defaultdict(int))

    def alloc(self, tag: str, nbytes: int) -> None:
        self.totals[tag] += nbytes
        self.live += nbytes
        self.peak = max(self.peak, self.live)

    def free(self, nbytes: int) -> None:
        self.live -= nbytes


_tracker: contextvars.ContextVar[BufferTracker | None] = contextvars.ContextVar(
    "aussm_buffer_tracker", default=None
)


@contextlib.contextmanager
def track_buffers() -> Iterator[BufferTracker]:
    """Collect buffer statistics for every scan run inside the block."""
    tracker = BufferTracker()
    token = _tracker.set(tracker)
    try:
        yield tracker
    finally:
        _tracker.reset(token)


def note_alloc(tag: str, *arrays: np.ndarray) -> int:
    tracker = _tracker.get()
    nbytes = sum(a.nbytes for a in arrays)
    if tracker is not None:
        tracker.alloc(tag, nbytes)
    return nbytes


def note_free(nbytes: int) -> None:
    tracker = _tracker.get()
    if tracker is not None:
        tracker.free(nbytes)


# ---------------------------------------------------------------------------
# plain scans

def tree_scan(x, combine=np.add) -> tuple[np.ndarray, int]:
    """Inclusive scan by the work-efficient up-sweep / down-sweep tree.

    Returns the scanned array and the number of ``combine`` applications
    per lane, which is at most ``2L - 2``. Each tree level is one vectorised
    step, so the span is O(log L).
    """
    out = np.array(x, copy=True)
    n = out.shape[-1]
    ops = 0
    d = 1
    while d < n:
        idx = np.arange(2 * d - 1, n, 2 * d)
        out[..., idx] = combine(out[..., idx - d], out[..., idx])
        ops += idx.size
        d *= 2
    d //= 2
    while d >= 1:
        idx = np.arange(3 * d - 1, n, 2 * d)
        out[..., idx] = combine(out[..., idx - d], out[..., idx])
        ops += idx.size
        d //= 2
    return out, ops


def inclusive_prefix_sum(x, method: str = "sequential") -> np.ndarray:
    """out[i] = sum(x[:i + 1]) along the last axis."""
    x = np.asarray(x)
    if method == "sequential":
        return np.cumsum(x, axis=-1)
    if method == "tree":
        return tree_scan(x, np.add)[0]
    raise ConfigError(f"unknown prefix-sum method {method!r}")


def wrap_angle(x):
    """Reduce angles into (-pi, pi]; -pi itself maps to +pi."""
    out = math.pi - np.mod(math.pi - np.asarray(x, dtype=float), TWO_PI)
    return np.where(out <= -math.pi, out + TWO_PI, out)


def _reduce(x):
    """Cheap reduction into [-pi, pi]; only the exponentiated value matters here."""
    return x - TWO_PI * np.round(x * (1.0 / TWO_PI))


def _phase_prefix(dtheta) -> np.ndarray:
    """Block-wise reduced running angle; exp(1j * out) equals exp(1j * cumsum)."""
    n = dtheta.shape[-1]
    if n <= WRAP_BLOCK:
        return np.cumsum(_reduce(dtheta), axis=-1)
    out = np.empty_like(dtheta)
    c = np.zeros(dtheta.shape[:-1])
    for s in range(0, n, WRAP_BLOCK):
        block = np.cumsum(_reduce(dtheta[..., s:s + WRAP_BLOCK]), axis=-1)
        block += c[..., None]
        out[..., s:s + WRAP_BLOCK] = block
        c = _reduce(block[..., -1])
    return out


def angle_prefix(dtheta, wrap: bool = False, carry=0.0) -> np.ndarray:
    """Running angle sum along the last axis, optionally wrapped.

    With ``wrap`` the sum is carried in blocks of ``WRAP_BLOCK`` and reduced
    after every block, so the magnitude of every partial sum stays small and
    ``exp(1j * out)`` keeps full precision over arbitrarily long lanes.
    """
    dtheta = np.asarray(dtheta, dtype=float)
    if not wrap:
        return np.cumsum(dtheta, axis=-1) + carry
    n = dtheta.shape[-1]
    out = np.empty_like(dtheta)
    c = wrap_angle(np.broadcast_to(carry, dtheta.shape[:-1]))
    step = wrap_angle(dtheta)
    for s in range(0, n, WRAP_BLOCK):
        e = min(s + WRAP_BLOCK, n)
        block = wrap_angle(np.cumsum(step[..., s:e], axis=-1) + c[..., None])
        out[..., s:e] = block
        c = block[..., -1]
    return out


def separable_convolve(f, g, u) -> np.ndarray:
    """out[t] = Re(f[t] * sum_{k <= t} g[k] * u[k]) along the last axis."""
    f, g, u = np.asarray(f), np.asarray(g), np.asarray(u)
    if not (f.shape[-1] == g.shape[-1] == u.shape[-1]):
        raise ContractError(
            f"separable_convolve needs equal lengths, got {f.shape[-1]}, {g.shape[-1]}, {u.shape[-1]}"
        )
    nbytes = note_alloc("fg", f, g)
    acc = np.cumsum(g * u, axis=-1)
    out = np.real(f * acc)
    note_free(nbytes)
    return out


def chunked_scan(x, plan: ChunkPlan, combine=np.add) -> np.ndarray:
    """Inclusive scan processed chunk by chunk with a carried accumulator.

    ``combine`` must be an associative numpy ufunc (``np.add``,
    ``np.multiply``, ``np.maximum``, ...). Only one chunk is worked on at a
    time; the result is the same as the direct scan.
    """
    if not isinstance(plan, ChunkPlan):
        raise ConfigError("chunked_scan needs a ChunkPlan")
    if not isinstance(combine, np.ufunc) or combine.nin != 2:
        raise ContractError("combine must be a binary numpy ufunc")
    x = np.asarray(x)
    out = np.empty_like(x)
    carry = None
    if combine.identity is not None:
        carry = np.full(x.shape[:-1], combine.identity, dtype=x.dtype)
    for s, e in plan.bounds(x.shape[-1]):
        block = combine.accumulate(x[..., s:e], axis=-1)
        if carry is not None:
            block = combine(carry[..., None], block)
        out[..., s:e] = block
        carry = block[..., -1]
    return out


# ---------------------------------------------------------------------------
# separable evaluation of diagonal linear recurrences

def _segments(rate: np.ndarray | None, length: int, log_span: float) -> list[tuple[int, int]]:
    """Cut [0, length) so that sum(rate[s + 1:e]) <= log_span for each piece."""
    if rate is None or length == 0:
        return [(0, length)] if length else []
    cum = np.cumsum(rate)
    out = []
    s = 0
    while s < length:
        e = int(np.searchsorted(cum, cum[s] + log_span, side="right"))
        e = min(max(e, s + 1), length)
        out.append((s, e))
        s = e
    return out


def _log_multiplier(angle, log_decay):
    if angle is None:
        return log_decay
    if log_decay is None:
        return 1j * angle
    return log_decay + 1j * angle


def segment_recurrence(w, x0, angle=None, log_decay=None, log_span: float = 300.0) -> np.ndarray:
    """All states of x[t] = exp(log_decay[t] + i angle[t]) x[t-1] + w[t].

    ``w`` and the multiplier terms share a shape ``(..., L)``; ``x0`` has the
    lane shape ``(...)``. Evaluation follows the separable form: per segment
    one prefix scan for the exponent, one for the drive, two elementwise
    products. Returns x with the same shape as ``w``.
    """
    w = np.asarray(w)
    shape = w.shape
    length = shape[-1]
    complex_state = angle is not None or np.iscomplexobj(w) or np.iscomplexobj(x0)
    dtype = np.complex128 if complex_state else np.float64
    x = np.empty(shape, dtype=dtype)
    carry = np.broadcast_to(np.asarray(x0, dtype=dtype), shape[:-1])
    rate = None
    if log_decay is not None:
        rate = np.abs(log_decay).reshape(-1, length).max(axis=0) if length else None
    for s, e in _segments(rate, length, log_span):
        ang = None if angle is None else angle[..., s:e]
        dec = None if log_decay is None else log_decay[..., s:e]
        p_ang = None
        if ang is not None:
            p_ang = np.zeros(ang.shape)
            p_ang[..., 1:] = _phase_prefix(ang[..., 1:])
        p_dec = None
        if dec is not None:
            p_dec = np.zeros(dec.shape)
            p_dec[..., 1:] = np.cumsum(dec[..., 1:], axis=-1)
        if p_dec is None:
            f = np.empty(p_ang.shape, dtype=np.complex128)
            np.cos(p_ang, out=f.real)
            np.sin(p_ang, out=f.imag)
            g = f.conj()
            g *= w[..., s:e]
        else:
            mag = np.exp(p_dec)
            if p_ang is None:
                f, g = mag, np.exp(-p_dec) * w[..., s:e]
            else:
                rot = np.exp(1j * p_ang)
                f, g = mag * rot, rot.conj() * np.exp(-p_dec) * w[..., s:e]
        nbytes = note_alloc("fg", f, g)
        first = np.exp(_log_multiplier(
            None if ang is None else ang[..., 0], None if dec is None else dec[..., 0]
        ))
        acc = np.cumsum(g, axis=-1)
        acc += (first * carry)[..., None]
        x[..., s:e] = f * acc
        note_free(nbytes)
        carry = x[..., e - 1]
    return x


def reverse_segment_recurrence(c, carry_in, angle=None, log_decay=None, log_span: float = 300.0) -> np.ndarray:
    """Adjoint sweep: z[t] = conj(a[t + 1]) z[t + 1] + c[t] for t = L-1 .. 0.

    ``carry_in`` is the already propagated contribution ``conj(a[L]) z[L]``
    from the segment that follows (zero at the end of the sequence).
    """
    flip = lambda a: None if a is None else np.concatenate(  # noqa: E731
        [np.zeros(a.shape[:-1] + (1,)), a[..., :0:-1]], axis=-1
    )
    rev_angle = None if angle is None else -flip(angle)
    rev_decay = flip(log_decay)
    z = segment_recurrence(c[..., ::-1], carry_in, rev_angle, rev_decay, log_span)
    return z[..., ::-1]


def linear_recurrence(w, x0=0.0, angle=None, log_decay=None, plan: ChunkPlan | None = None) -> np.ndarray:
    """Chunked separable evaluation over a full lane (see :func:`segment_recurrence`)."""
    plan = plan or ChunkPlan()
    w = np.asarray(w)
    length = w.shape[-1]
    x = None
    carry = x0
    for s, e in plan.bounds(length):
        xs = segment_recurrence(
            w[..., s:e], carry,
            None if angle is None else angle[..., s:e],
            None if log_decay is None else log_decay[..., s:e],
            plan.log_span,
        )
        if x is None:
            x = np.empty(w.shape, dtype=xs.dtype)
        x[..., s:e] = xs
        carry = xs[..., -1]
    if x is None:
        x = np.empty(w.shape, dtype=np.complex128 if angle is not None else w.dtype)
    return x
