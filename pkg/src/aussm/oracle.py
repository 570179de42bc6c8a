"""Exact automata and the mod-k counter construction for AUSSM.

Automata are plain transition tables. The counter synthesis emits AUSSM
parameters whose unit-circle state walks the k-th roots of unity; decoding the
state phase to the nearest root recovers the automaton state.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from itertools import product
from typing import Hashable, Sequence

import mpmath
import numpy as np

from .errors import ContractError
from .kernels import AussmParams, aussm_recurrent_reference

EPS64 = 2.0 ** -53


@dataclass(frozen=True)
class Fsa:
    """Deterministic automaton; ``delta[q, s]`` is the successor of state q on symbol s."""

    alphabet: tuple
    delta: np.ndarray
    start: int = 0
    states: tuple | None = None  # optional state labels, e.g. pairs for cascades

    def __post_init__(self):
        if len(self.alphabet) == 0:
            raise ContractError("alphabet must not be empty")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ContractError("alphabet symbols must be distinct")
        delta = np.asarray(self.delta, dtype=np.int64)
        object.__setattr__(self, "delta", delta)
        if delta.ndim != 2 or delta.shape[1] != len(self.alphabet) or delta.shape[0] < 1:
            raise ContractError(f"delta must have shape (|Q|, {len(self.alphabet)}), got {delta.shape}")
        if delta.min() < 0 or delta.max() >= delta.shape[0]:
            raise ContractError("delta must map into the state set")
        if not 0 <= self.start < delta.shape[0]:
            raise ContractError(f"start state {self.start} out of range")

    @property
    def num_states(self) -> int:
        return self.delta.shape[0]

    def symbol_index(self, word: Sequence[Hashable]) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.alphabet)}
        try:
            return np.array([index[s] for s in word], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"symbol {exc.args[0]!r} is not in the alphabet") from None


def run_fsa(fsa: Fsa, word: Sequence[Hashable]) -> list[int]:
    """States q_1 .. q_T after each symbol; the start state is not included."""
    q = fsa.start
    out = []
    for s in fsa.symbol_index(word):
        q = int(fsa.delta[q, s])
        out.append(q)
    return out


def _check_cyclic(k: int, power_map: dict) -> None:
    if k < 2:
        raise ContractError("k must be >= 2")
    if not power_map:
        raise ContractError("alphabet must not be empty")
    if not any(math.gcd(int(n) % k, k) == 1 for n in power_map.values()):
        raise ContractError(f"no symbol generates the full {k}-cycle (need a power coprime with k)")


def cyclic_perm_automaton(k: int, power_map: dict) -> Fsa:
    """Symbol s acts as q -> q + power_map[s] (mod k)."""
    _check_cyclic(k, power_map)
    alphabet = tuple(power_map)
    q = np.arange(k)[:, None]
    powers = np.array([int(power_map[s]) % k for s in alphabet])[None, :]
    return Fsa(alphabet, (q + powers) % k)


def set_reset_automaton(targets: dict, num_states: int = 2) -> Fsa:
    """Symbol s resets every state to ``targets[s]``; a target of ``None`` leaves the state unchanged."""
    if not targets:
        raise ContractError("alphabet must not be empty")
    alphabet = tuple(targets)
    delta = np.empty((num_states, len(alphabet)), dtype=np.int64)
    for j, s in enumerate(alphabet):
        t = targets[s]
        delta[:, j] = np.arange(num_states) if t is None else t
    return Fsa(alphabet, delta)


def cascade_alphabet(a1: Fsa) -> tuple:
    """The alphabet Q_1 x Sigma_1 that the second automaton of a cascade must read."""
    return tuple(product(range(a1.num_states), a1.alphabet))


def cascade_product(a1: Fsa, a2: Fsa, corrected: bool = False) -> Fsa:
    """Cascade of ``a1`` feeding ``a2``; states are pairs (q1, q2) in row-major order.

    corrected=False (literal rule):  (q1, q2), s -> (delta2(q1, (q2, s)), delta1(q1, s))
    corrected=True (standard rule):  (q1, q2), s -> (delta1(q1, s), delta2(q2, (q1, s)))

    The literal rule feeds a Q_1 state into delta2 and a Q_2 state in the
    position of a Q_1 letter, so it is only defined when |Q_1| = |Q_2|.
    """
    expected = cascade_alphabet(a1)
    if set(a2.alphabet) != set(expected) or len(a2.alphabet) != len(expected):
        raise ContractError("second automaton must read the alphabet Q1 x Sigma1")
    n1, n2 = a1.num_states, a2.num_states
    if not corrected and n1 != n2:
        raise ContractError(f"literal cascade rule needs |Q1| == |Q2|, got {n1} and {n2}")
    col = {sym: j for j, sym in enumerate(a2.alphabet)}
    pairs = tuple(product(range(n1), range(n2)))
    delta = np.empty((len(pairs), len(a1.alphabet)), dtype=np.int64)
    for i, (q1, q2) in enumerate(pairs):
        for j, s in enumerate(a1.alphabet):
            if corrected:
                new = (int(a1.delta[q1, j]), int(a2.delta[q2, col[(q1, s)]]))
            else:
                new = (int(a2.delta[q1, col[(q2, s)]]), int(a1.delta[q1, j]))
            delta[i, j] = new[0] * n2 + new[1]
    return Fsa(a1.alphabet, delta, a1.start * n2 + a2.start, pairs)


# ---------------------------------------------------------------------------
# mod-k counter synthesis

def precision_horizon(k: int, eps: float = EPS64) -> int:
    """Token count after which worst-case phase drift may blur adjacent k-th roots.

    floor(pi / (sqrt(5) * eps * k)): half the root spacing, about pi / k, divided
    by the per-multiplication error bound sqrt(5) * eps.
    """
    if k < 2 or not eps > 0:
        raise ContractError("need k >= 2 and eps > 0")
    return math.floor(math.pi / (math.sqrt(5.0) * eps * k))


@dataclass(frozen=True)
class CounterSynthesis:
    k: int
    power_map: dict
    params: AussmParams
    symbols: tuple
    x0: complex = 1.0

    def root_angle(self, residue) -> np.ndarray:
        """Phase 2 pi n / k of the root that encodes residue n."""
        return 2.0 * math.pi * (np.asarray(residue) % self.k) / self.k

    def encode(self, words) -> np.ndarray:
        """One-hot inputs of shape (batch, |alphabet|, L)."""
        words = np.atleast_2d(np.asarray(words))
        index = {s: i for i, s in enumerate(self.symbols)}
        ids = np.vectorize(index.__getitem__, otypes=[np.int64])(words) if words.size else words.astype(np.int64)
        u = np.zeros((ids.shape[0], len(self.symbols), ids.shape[1]))
        np.put_along_axis(u, ids[:, None, :], 1.0, axis=1)
        return u

    def states(self, words) -> np.ndarray:
        """Complex counter states, shape (batch, L), from the recurrent reference."""
        u = self.encode(words)
        _, x = aussm_recurrent_reference(self.params, u, x0=np.full(u.shape[:2] + (1,), self.x0, dtype=complex),
                                         return_states=True)
        return x[:, 0, 0, :]

    def residues(self, states) -> np.ndarray:
        """Nearest-root decoding of the state phase."""
        step = 2.0 * math.pi / self.k
        return np.rint(np.angle(states) / step).astype(np.int64) % self.k


def synthesize_mod_counter(k: int, power_map: dict, length: int | None = None) -> CounterSynthesis:
    """AUSSM parameters (n = 1, zero drive) counting symbol powers modulo k.

    Inputs are one-hot over the alphabet, one channel per symbol; every channel
    carries the same counter and channel 0 is read out. Symbol s rotates the
    state by exactly 2 pi power_map[s] / k; the step size is fixed to 1.
    """
    _check_cyclic(k, power_map)
    if length is not None and length > precision_horizon(k):
        warnings.warn(f"length {length} exceeds the f64 precision horizon {precision_horizon(k)} for k={k}",
                      RuntimeWarning, stacklevel=2)
    symbols = tuple(power_map)
    d = len(symbols)
    angles = np.array([2.0 * math.pi * (int(power_map[s]) % k) / k for s in symbols])
    chi = np.broadcast_to(angles, (d, 1, d)).copy()
    params = AussmParams(
        R_B=np.zeros(1), theta_B=np.zeros(1), R_C=np.ones(1), theta_C=np.zeros(1),
        chi=chi, chi_bias=np.zeros((d, 1)), chi_delta=np.zeros((d, d)), chi_delta_bias=np.ones(d),
        D=np.zeros(d),
    )
    return CounterSynthesis(k, dict(power_map), params, symbols)


@dataclass
class SoundnessReport:
    k: int
    length: int
    words: int
    mismatches: int
    max_drift: float
    drift_bound: float  # sqrt(5) eps N at N = length
    max_drift_ratio: float  # max over t of drift_t / (sqrt(5) eps t)
    seconds: float

    @property
    def passed(self) -> bool:
        return self.mismatches == 0


def _checkpoints(length: int, rng: np.random.Generator, extra: int = 8) -> np.ndarray:
    geo = np.unique(np.geomspace(1, length, 24).astype(np.int64))
    return np.unique(np.concatenate([geo, rng.integers(1, length + 1, extra), [length]]))


def counter_soundness(k: int, length: int, words: int, seed: int = 0, power_map: dict | None = None,
                      group: int = 10) -> SoundnessReport:
    """Compare decoded residues with the automaton on seeded random words.

    Drift is |x_t - exp(i S_t)| where S_t is the exact sum of the emitted
    float64 angles, formed from per-symbol counts in 200-bit arithmetic, at
    geometric and random checkpoints t of every word.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    if power_map is None:
        power_map = {0: 0, 1: 1, 2: int(rng.integers(2, k)) if k > 2 else 1}
    syn = synthesize_mod_counter(k, power_map, length)
    fsa = cyclic_perm_automaton(k, power_map)
    symbols = np.array(syn.symbols)
    mismatches = 0
    max_drift = 0.0
    max_ratio = 0.0
    with mpmath.workprec(200):
        step_angle = [mpmath.mpf(float(a)) for a in syn.params.chi[0, 0, :]]
        for g0 in range(0, words, group):
            ids = rng.integers(0, len(symbols), (min(group, words - g0), length))
            x = syn.states(symbols[ids])
            got = syn.residues(x)
            counts = np.cumsum(ids[..., None] == np.arange(len(symbols)), axis=1)
            for b in range(ids.shape[0]):
                want = np.asarray(run_fsa(fsa, symbols[ids[b]].tolist()))
                mismatches += int((got[b] != want).sum())
                for t in _checkpoints(length, rng):
                    phase = mpmath.fsum(int(c) * a for c, a in zip(counts[b, t - 1], step_angle))
                    drift = float(abs(mpmath.mpc(complex(x[b, t - 1])) - mpmath.expj(phase)))
                    max_drift = max(max_drift, drift)
                    max_ratio = max(max_ratio, drift / (math.sqrt(5.0) * EPS64 * t))
    return SoundnessReport(k, length, words, mismatches, max_drift, math.sqrt(5.0) * EPS64 * length,
                           max_ratio, time.perf_counter() - start)
