"""Capsule primitives: squash, prediction vectors and dynamic routing.

Two routing normalisations are provided. ``softmax`` is the original
per-child competition across parents (logits start at 0). ``sigmoid`` treats
every child/parent edge independently (logits start at 1), so one child can
feed several parents that are not mutually exclusive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndtensor import Tensor, conv2d, custom_op, reshape, transpose

SQUASH_EPS = 1e-12


@dataclass(frozen=True)
class RoutingConfig:
    mode: str = "sigmoid"
    iterations: int = 3
    prior_init: float | None = None

    def __post_init__(self):
        if self.mode not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown routing mode {self.mode!r}")
        if self.iterations < 1:
            raise ValueError("routing needs at least one iteration")
        expected = 1.0 if self.mode == "sigmoid" else 0.0
        if self.prior_init is None:
            object.__setattr__(self, "prior_init", expected)
        elif self.prior_init != expected:
            raise ValueError(f"{self.mode} routing requires prior_init={expected}")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "iterations": self.iterations, "prior_init": self.prior_init}


@dataclass
class CapsuleTensor:
    """Capsule vectors laid out as ``[types, *grid, dim]`` (optionally batched in front)."""

    data: Tensor
    types: int
    grid: tuple[int, ...]
    dim: int
    coefficients: np.ndarray | None = None

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.data.data, axis=-1)


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """v = (|s|^2 / (1 + |s|^2)) * s / |s| along ``axis``."""
    x = s.data
    n2 = (x * x).sum(axis=axis, keepdims=True)
    n = np.sqrt(n2)
    safe = np.maximum(n, SQUASH_EPS)
    f = n / (1.0 + n2)  # |v| / |s|, finite at zero
    v = f * x

    def _back(g):
        # d f / d n divided by n; f = n/(1+n^2), f' = (1-n^2)/(1+n^2)^2
        fprime_over_n = np.where(n > SQUASH_EPS, (1.0 - n2) / (1.0 + n2) ** 2 / safe, 0.0)
        return (f * g + fprime_over_n * (x * g).sum(axis=axis, keepdims=True) * x,)

    return custom_op(v.astype(x.dtype, copy=False), (s,), _back, "squash")


def squash_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    n2 = (x * x).sum(axis=axis, keepdims=True)
    return np.sqrt(n2) / (1.0 + n2) * x


def routing_sigmoid(b: np.ndarray) -> np.ndarray:
    """Per-entry logistic exp(b) / (exp(b) + 1)."""
    b = np.asarray(b)
    out = np.empty_like(b, dtype=np.result_type(b, np.float32))
    pos = b >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-b[pos]))
    e = np.exp(b[~pos])
    out[~pos] = e / (e + 1.0)
    return out


def routing_softmax(b: np.ndarray) -> np.ndarray:
    """Normalise each child's logits across parents (last axis)."""
    b = np.asarray(b)
    z = np.exp(b - b.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def route_coefficients(b: np.ndarray, mode: str) -> np.ndarray:
    return routing_sigmoid(b) if mode == "sigmoid" else routing_softmax(b)


def weighted_parent_sum(u_hat: Tensor, r: np.ndarray) -> Tensor:
    """s[..., j, :] = sum_i r[..., i, j] * u_hat[..., i, j, :], with r held constant."""
    rr = r[..., None].astype(u_hat.dtype, copy=False)
    s = (rr * u_hat.data).sum(axis=-3)

    def _back(g):
        return (rr * np.expand_dims(g, -3),)

    return custom_op(s, (u_hat,), _back, "route_sum")


def dynamic_routing(u_hat: Tensor, cfg: RoutingConfig, return_coefficients: bool = False,
                    fixed_coefficients: np.ndarray | None = None):
    """Routing by agreement over prediction vectors ``[..., children, parents, dim]``.

    Coefficients are recomputed each round from the agreement logits and are
    treated as constants by the gradient; only the final weighted sum is
    differentiated, through ``u_hat``. ``fixed_coefficients`` skips the loop
    and uses the given final-round coefficients (for finite-difference checks).
    """
    if cfg.iterations < 1:
        raise ValueError("routing needs at least one iteration")
    if u_hat.data.ndim < 3:
        raise ValueError("prediction vectors must be [..., children, parents, dim]")
    if fixed_coefficients is not None:
        v = squash(weighted_parent_sum(u_hat, fixed_coefficients))
        return (v, [fixed_coefficients]) if return_coefficients else v
    uh = u_hat.data
    b = np.full(uh.shape[:-1], cfg.prior_init, dtype=uh.dtype)
    history = []
    v = None
    for it in range(cfg.iterations):
        r = route_coefficients(b, cfg.mode)
        history.append(r)
        if it == cfg.iterations - 1:
            v = squash(weighted_parent_sum(u_hat, r))
        else:
            s = (r[..., None] * uh).sum(axis=-3)
            v_arr = squash_array(s)
            b = b + (uh * np.expand_dims(v_arr, -3)).sum(axis=-1)
    if return_coefficients:
        return v, history
    return v


def predict_vectors(u: Tensor, W: Tensor) -> Tensor:
    """u_hat[b, i, j, :] = W[i, j] @ u[b, i] for children ``u`` of shape [B, I, in_dim]."""
    batched = u.data.ndim == 3
    ud = u.data if batched else u.data[None]
    n_child, n_par, out_dim, in_dim = W.shape
    if ud.shape[1:] != (n_child, in_dim):
        raise ValueError(f"transform {W.shape} does not fit children {u.shape}")
    Wr = W.data.reshape(n_child, n_par * out_dim, in_dim)
    ut = ud.transpose(1, 2, 0)  # [I, in, B]
    prod = np.matmul(Wr, ut)  # [I, J*out, B]
    bsz = ud.shape[0]
    out = prod.transpose(2, 0, 1).reshape(bsz, n_child, n_par, out_dim)
    if not batched:
        out = out[0]

    def _back(g):
        gb = g if batched else g[None]
        gt = gb.reshape(bsz, n_child, n_par * out_dim).transpose(1, 2, 0)  # [I, J*out, B]
        dW = np.matmul(gt, ut.transpose(0, 2, 1)).reshape(W.shape)
        du = np.matmul(Wr.transpose(0, 2, 1), gt).transpose(2, 0, 1)
        return (du if batched else du[0], dW)

    return custom_op(np.ascontiguousarray(out), (u, W), _back, "caps_transform")


def primary_caps_layer(features: Tensor, kernels: Tensor, bias: Tensor | None,
                       types: int, dim: int, stride: int = 2) -> CapsuleTensor:
    """Convolution to ``types * dim`` channels, regrouped into squashed capsule vectors."""
    out_ch = kernels.shape[0]
    if out_ch != types * dim:
        raise ValueError(f"capsule conv has {out_ch} channels, need {types}x{dim}")
    conv = conv2d(features, kernels, stride=stride, bias=bias)
    batched = conv.data.ndim == 4
    if not batched:
        conv = reshape(conv, (1,) + conv.shape)
    bsz, _, gh, gw = conv.shape
    caps = reshape(conv, (bsz, types, dim, gh, gw))
    caps = transpose(caps, (0, 1, 3, 4, 2))
    caps = squash(caps)
    if not batched:
        caps = reshape(caps, caps.shape[1:])
    return CapsuleTensor(caps, types, (gh, gw), dim)


def fc_caps_layer(children: CapsuleTensor, W: Tensor, cfg: RoutingConfig,
                  fixed_coefficients: np.ndarray | None = None) -> CapsuleTensor:
    """Fully-connected capsule layer: every child position has its own transform per parent."""
    data = children.data
    batched = data.data.ndim == len(children.grid) + 3
    n_child = children.types * int(np.prod(children.grid, dtype=int))
    if W.shape[0] != n_child or W.shape[3] != children.dim:
        raise ValueError(f"transform {W.shape} does not match {n_child} children of dim {children.dim}")
    lead = (data.shape[0],) if batched else ()
    u = reshape(data, lead + (n_child, children.dim))
    u_hat = predict_vectors(u, W)
    v, history = dynamic_routing(u_hat, cfg, True, fixed_coefficients)
    return CapsuleTensor(v, W.shape[1], (1,), W.shape[2], history[-1])
