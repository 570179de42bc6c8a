"""Central finite-difference checks of the analytic backward passes.

For a fixed cotangent W the directional derivative of <W, f(theta)> is
estimated as <W, f(theta + h e) - f(theta - h e)> / 2h. Taking the output
difference elementwise before contracting keeps rounding noise proportional
to the change in f rather than to its size.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .blocks import BlockConfig, block_backward, _block_fwd, init_block
from .kernels import AussmParams, S6Params, kernel_backward, kernel_forward, rel_err
from .scan import ChunkPlan


def numeric_grad(fn: Callable[[], np.ndarray], arr: np.ndarray, cot: np.ndarray, h: float = 1e-6,
                 indices=None) -> np.ndarray:
    """Finite-difference gradient of <cot, fn()> with respect to ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    for idx in (np.ndindex(arr.shape) if indices is None else indices):
        old = arr[idx]
        arr[idx] = old + h
        plus = fn()
        arr[idx] = old - h
        minus = fn()
        arr[idx] = old
        out[idx] = np.sum(cot * (plus - minus)) / (2 * h)
    return out


def gradcheck_kernel(kind: str = "aussm", L: int = 16, d: int = 2, n: int = 2, batch: int = 1,
                     seed: int = 0, h: float = 1e-6, plan: ChunkPlan | None = None) -> dict[str, float]:
    """Relative error per parameter tensor (and ``u``) of the kernel backward."""
    rng = np.random.default_rng(seed)
    p = (AussmParams if kind == "aussm" else S6Params).init(d, n, rng)
    u = rng.normal(size=(batch, d, L))
    dy = rng.normal(size=(batch, d, L))
    _, cache = kernel_forward(p, u, plan)
    grads, du = kernel_backward(cache, dy)
    fwd = lambda: kernel_forward(p, u, plan)[0]  # noqa: E731
    errs = {name: rel_err(numeric_grad(fwd, arr, dy, h), getattr(grads, name))
            for name, arr in p.arrays().items()}
    errs["u"] = rel_err(numeric_grad(fwd, u, dy, h), du)
    return errs


def gradcheck_block(kind: str = "aussm", L: int = 16, d_model: int = 2, n: int = 2, expand: int = 1,
                    conv_width: int = 4, batch: int = 1, seed: int = 0, h: float = 1e-6) -> dict[str, float]:
    """Relative error per block parameter tensor (and the block input)."""
    rng = np.random.default_rng(seed)
    cfg = BlockConfig(kind, d_model, n, expand, conv_width)
    params = init_block(cfg, rng)
    u = rng.normal(size=(batch, L, d_model))
    cot = rng.normal(size=u.shape)
    _, cache = _block_fwd(cfg, params, u, None)
    grads, du = block_backward(cfg, params, cache, cot)
    fwd = lambda: _block_fwd(cfg, params, u, None)[0]  # noqa: E731
    errs = {name: rel_err(numeric_grad(fwd, arr, cot, h), grads[name]) for name, arr in params.items()}
    errs["u"] = rel_err(numeric_grad(fwd, u, cot, h), du)
    return errs
