"""Mamba-style blocks around the AUSSM / S6 kernels and the stacked model.

Block (pre-norm, residual)::

    h = rmsnorm(u)
    a = silu(causal_depthwise_conv(h @ W_x.T))
    out = u + (kernel(a) * silu(h @ W_z.T)) @ W_out.T

Model: embedding -> one block per pattern character ('a' = AUSSM,
'm' = Mamba/S6) -> final rmsnorm -> linear head over the task's classes.

Parameters are flat ``dict[str, ndarray]``; block entries are prefixed with
``blocks.<k>.`` and kernel entries with ``ssm.``. Mamba blocks store the S6
decay as ``ssm.A_log`` with ``A = -exp(A_log)``, so any optimizer update keeps
``A`` strictly negative. AUSSM blocks read ``B = R_B exp(i theta_B)`` for any
real ``R_B`` (same for C): a negative magnitude reaches the kernel as
``|R_B|`` at ``theta_B + pi``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .errors import ContractError
from .kernels import AussmParams, S6Params, kernel_backward, kernel_forward
from .scan import ChunkPlan

RMS_EPS = 1e-8
KINDS = {"a": "aussm", "m": "mamba"}


@dataclass(frozen=True)
class BlockConfig:
    kind: str
    d_model: int
    n_state: int
    expand: int = 2
    conv_width: int = 4

    def __post_init__(self):
        if self.kind not in ("aussm", "mamba"):
            raise ContractError(f"unknown block kind {self.kind!r}")
        if min(self.d_model, self.n_state, self.expand) < 1 or self.conv_width < 0:
            raise ContractError(f"invalid block dimensions in {self}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


@dataclass(frozen=True)
class ModelConfig:
    pattern: str
    vocab_size: int
    num_classes: int
    d_model: int = 16
    n_state: int = 8
    expand: int = 2
    conv_width: int = 4
    tie_embeddings: bool = False

    def __post_init__(self):
        if not self.pattern or set(self.pattern) - set(KINDS):
            raise ContractError(f"pattern must be a non-empty string over 'a'/'m', got {self.pattern!r}")
        if self.num_classes > self.vocab_size and self.tie_embeddings:
            raise ContractError("tied head needs num_classes <= vocab_size")

    def block_configs(self) -> list[BlockConfig]:
        return [BlockConfig(KINDS[c], self.d_model, self.n_state, self.expand, self.conv_width)
                for c in self.pattern]

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# primitives

def silu(x):
    return x * expit(x)


def _silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def rmsnorm(x, g, eps: float = RMS_EPS):
    """g * x / sqrt(mean(x**2) + eps) over the last axis."""
    x = np.asarray(x, dtype=float)
    return g * x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def _rmsnorm_fwd(x, g):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    xh = x / r
    return g * xh, (xh, r)


def _rmsnorm_bwd(g, cache, dout):
    xh, r = cache
    dxh = dout * g
    dx = (dxh - xh * np.mean(dxh * xh, axis=-1, keepdims=True)) / r
    dg = (dout * xh).reshape(-1, xh.shape[-1]).sum(axis=0)
    return dx, dg


def causal_conv(x, w, bias):
    """Depthwise causal convolution; x is (b, L, D), w is (D, K)."""
    k = w.shape[1]
    xp = np.pad(x, ((0, 0), (k - 1, 0), (0, 0)))
    length = x.shape[1]
    out = np.broadcast_to(bias, x.shape).copy()
    for m in range(k):
        out += w[:, m] * xp[:, m:m + length]
    return out


def _causal_conv_bwd(x, w, dout):
    k = w.shape[1]
    length = x.shape[1]
    xp = np.pad(x, ((0, 0), (k - 1, 0), (0, 0)))
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for m in range(k):
        dxp[:, m:m + length] += w[:, m] * dout
        dw[:, m] = np.einsum("bld,bld->d", dout, xp[:, m:m + length])
    db = dout.sum(axis=(0, 1))
    return dxp[:, k - 1:], dw, db


# ---------------------------------------------------------------------------
# parameters

_POLAR = (("R_B", "theta_B"), ("R_C", "theta_C"))


def _kernel_params(cfg: BlockConfig, params: dict):
    arrays = {k[4:]: v for k, v in params.items() if k.startswith("ssm.")}
    if cfg.kind == "aussm":
        for r, th in _POLAR:
            arrays[th] = arrays[th] + np.pi * (arrays[r] < 0)
            arrays[r] = np.abs(arrays[r])
        return AussmParams.from_arrays(arrays)
    arrays["A"] = -np.exp(arrays.pop("A_log"))
    return S6Params.from_arrays(arrays)


def _block_ssm_entries(cfg: BlockConfig, kp) -> dict[str, np.ndarray]:
    """Kernel parameters (or their gradients w.r.t. A) as block ``ssm.*`` entries."""
    out = dict(kp.arrays())
    if cfg.kind == "mamba":
        out["A_log"] = np.log(-out.pop("A"))
    return {f"ssm.{k}": v for k, v in out.items()}


def init_block(cfg: BlockConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    di, dm = cfg.d_inner, cfg.d_model
    params = {
        "norm": np.ones(dm),
        "W_x": rng.normal(0.0, 1.0 / np.sqrt(dm), (di, dm)),
        "W_z": rng.normal(0.0, 1.0 / np.sqrt(dm), (di, dm)),
        "W_out": rng.normal(0.0, 1.0 / np.sqrt(di), (dm, di)),
    }
    if cfg.conv_width:
        bound = 1.0 / np.sqrt(cfg.conv_width)
        params["conv_w"] = rng.uniform(-bound, bound, (di, cfg.conv_width))
        params["conv_b"] = rng.uniform(-bound, bound, di)
    kp = (AussmParams if cfg.kind == "aussm" else S6Params).init(di, cfg.n_state, rng)
    params.update(_block_ssm_entries(cfg, kp))
    return params


def init_model(mcfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {"embed": rng.normal(0.0, 1.0, (mcfg.vocab_size, mcfg.d_model))}
    for k, cfg in enumerate(mcfg.block_configs()):
        params.update({f"blocks.{k}.{name}": v for name, v in init_block(cfg, rng).items()})
    params["norm_f"] = np.ones(mcfg.d_model)
    if not mcfg.tie_embeddings:
        params["head"] = rng.normal(0.0, 0.02, (mcfg.num_classes, mcfg.d_model))
    params["head_b"] = np.zeros(mcfg.num_classes)
    return params


def block_params(params: dict, k: int) -> dict[str, np.ndarray]:
    prefix = f"blocks.{k}."
    return {name[len(prefix):]: v for name, v in params.items() if name.startswith(prefix)}


# ---------------------------------------------------------------------------
# block

def _block_fwd(cfg: BlockConfig, params: dict, u, plan: ChunkPlan | None):
    u = np.asarray(u, dtype=float)
    if u.ndim != 3 or u.shape[-1] != cfg.d_model:
        raise ContractError(f"block input must be (batch, L, {cfg.d_model}), got {u.shape}")
    h, ncache = _rmsnorm_fwd(u, params["norm"])
    xin = h @ params["W_x"].T
    z = h @ params["W_z"].T
    c = causal_conv(xin, params["conv_w"], params["conv_b"]) if cfg.conv_width else xin
    a = silu(c)
    kp = _kernel_params(cfg, params)
    if u.shape[1] == 0:
        yk, kcache = np.zeros_like(a), None
    else:
        yk_t, kcache = kernel_forward(kp, a.transpose(0, 2, 1), plan)
        yk = yk_t.transpose(0, 2, 1)
    sz = silu(z)
    gated = yk * sz
    out = u + gated @ params["W_out"].T
    cache = (ncache, h, xin, z, c, a, kcache, yk, sz, gated)
    return out, cache


def block_forward(cfg: BlockConfig, params: dict, u_seq, plan: ChunkPlan | None = None):
    """Apply one block to ``u_seq`` of shape (batch, L, d_model)."""
    return _block_fwd(cfg, params, u_seq, plan)[0]


def block_backward(cfg: BlockConfig, params: dict, cache, dout):
    """Gradients of one block. Returns ``(grads, du)`` with ``grads`` keyed like ``params``."""
    ncache, h, xin, z, c, a, kcache, yk, sz, gated = cache
    grads = {}
    grads["W_out"] = np.einsum("bld,ble->de", dout, gated)
    dgated = dout @ params["W_out"]
    dyk = dgated * sz
    dz = dgated * yk * _silu_grad(z)
    if kcache is None:
        da = np.zeros_like(a)
        kgrads = _kernel_params(cfg, params).zeros_like()
    else:
        kgrads, da_t = kernel_backward(kcache, dyk.transpose(0, 2, 1))
        da = da_t.transpose(0, 2, 1)
    kg = {f"ssm.{k}": v for k, v in kgrads.arrays().items()}
    if cfg.kind == "mamba":
        # dL/dA_log = dL/dA * dA/dA_log = dL/dA * A
        kg["ssm.A_log"] = kg.pop("ssm.A") * -np.exp(params["ssm.A_log"])
    else:
        for r, _ in _POLAR:
            kg[f"ssm.{r}"] = kg[f"ssm.{r}"] * np.where(params[f"ssm.{r}"] < 0, -1.0, 1.0)
    grads.update(kg)
    dc = da * _silu_grad(c)
    if cfg.conv_width:
        dxin, grads["conv_w"], grads["conv_b"] = _causal_conv_bwd(xin, params["conv_w"], dc)
    else:
        dxin = dc
    grads["W_x"] = np.einsum("ble,bld->ed", dxin, h)
    grads["W_z"] = np.einsum("ble,bld->ed", dz, h)
    dh = dxin @ params["W_x"] + dz @ params["W_z"]
    dnorm_in, grads["norm"] = _rmsnorm_bwd(params["norm"], ncache, dh)
    return grads, dout + dnorm_in


# ---------------------------------------------------------------------------
# model

def _check_tokens(mcfg: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
        raise ContractError("tokens must be an integer array of shape (batch, L)")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= mcfg.vocab_size):
        raise ContractError(f"token ids must lie in [0, {mcfg.vocab_size})")
    return tokens


def _head(mcfg: ModelConfig, params):
    return params["embed"][: mcfg.num_classes] if mcfg.tie_embeddings else params["head"]


def model_forward(mcfg: ModelConfig, params: dict, tokens, plan: ChunkPlan | None = None, _keep: bool = False):
    """Logits of shape (batch, L, num_classes) for integer ``tokens`` (batch, L)."""
    tokens = _check_tokens(mcfg, tokens)
    x = params["embed"][tokens]
    caches = []
    for k, cfg in enumerate(mcfg.block_configs()):
        x, cache = _block_fwd(cfg, block_params(params, k), x, plan)
        caches.append(cache)
    hf, ncache = _rmsnorm_fwd(x, params["norm_f"])
    logits = hf @ _head(mcfg, params).T + params["head_b"]
    if _keep:
        return logits, (tokens, caches, hf, ncache)
    return logits


def model_backward(mcfg: ModelConfig, params: dict, cache, dlogits) -> dict[str, np.ndarray]:
    tokens, caches, hf, ncache = cache
    grads = {}
    head = _head(mcfg, params)
    grads["head_b"] = dlogits.reshape(-1, dlogits.shape[-1]).sum(axis=0)
    dhead = np.einsum("blc,bld->cd", dlogits, hf)
    dhf = dlogits @ head
    dx, grads["norm_f"] = _rmsnorm_bwd(params["norm_f"], ncache, dhf)
    for k in reversed(range(len(caches))):
        cfg = mcfg.block_configs()[k]
        bgrads, dx = block_backward(cfg, block_params(params, k), caches[k], dx)
        grads.update({f"blocks.{k}.{name}": v for name, v in bgrads.items()})
    dembed = np.zeros_like(params["embed"])
    np.add.at(dembed, tokens.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    if mcfg.tie_embeddings:
        dembed[: mcfg.num_classes] += dhead
    else:
        grads["head"] = dhead
    grads["embed"] = dembed
    return grads
