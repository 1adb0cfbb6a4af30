"""Central finite-difference checks for every differentiable primitive, the
three losses and the end-to-end toy network."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ndtensor as nt
from .capsule import RoutingConfig, predict_vectors, squash, weighted_parent_sum
from .losses import (attribute_loss, fit_target_distribution, malignancy_kl_loss,
                     malignancy_regression_loss, reconstruction_loss)
from .model import XCapsConfig, XCapsModel

H = 1e-5
PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(diff / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_function(fn: Callable[..., nt.Tensor], arrays: list[np.ndarray], rng: np.random.Generator,
                   wrt: list[int] | None = None) -> float:
    """Max relative error between backward and FD for a random projection of ``fn``'s output."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = list(range(len(arrays))) if wrt is None else wrt
    probe = fn(*[nt.Tensor(a) for a in arrays])
    proj = rng.standard_normal(probe.shape)

    def scalar(out: nt.Tensor) -> nt.Tensor:
        return nt.tsum(nt.mul(nt.Tensor(proj), out)) if out.data.ndim else nt.scale(out, 1.0)

    inputs = [nt.Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    scalar(fn(*inputs)).backward()
    worst = 0.0
    for i in wrt:
        num = numeric_grad(lambda: scalar(fn(*[nt.Tensor(a) for a in arrays])).item(), arrays[i])
        ana = inputs[i].grad if inputs[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_err(ana, num))
    return worst


def _away_from_zero(rng, shape, low=0.1):
    x = rng.uniform(low, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def primitive_cases():
    """name -> (function, input generator, indices to differentiate)."""
    def conv_inputs(stride):
        return lambda rng: [rng.standard_normal((2, 7, 7)), rng.standard_normal((3, 2, 3, 3)),
                            rng.standard_normal(3)]

    def targets(rng, shape):
        return fit_target_distribution(rng.uniform(1, 5), rng.uniform(0.3, 2.0), shape)

    return {
        "add": (nt.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))], None),
        "add_scalar": (nt.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal(())], None),
        "sub": (nt.sub, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))], None),
        "mul": (nt.mul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))], None),
        "mul_scalar": (nt.mul, lambda r: [r.standard_normal(()), r.standard_normal((3, 4))], None),
        "neg": (nt.neg, lambda r: [r.standard_normal((5,))], None),
        "scale": (lambda a: nt.scale(a, 2.5), lambda r: [r.standard_normal((5,))], None),
        "exp": (nt.exp, lambda r: [r.standard_normal((3, 4))], None),
        "log": (nt.log, lambda r: [r.uniform(0.2, 3.0, (3, 4))], None),
        "sigmoid": (nt.sigmoid, lambda r: [3 * r.standard_normal((3, 4))], None),
        "relu": (nt.relu, lambda r: [_away_from_zero(r, (3, 4))], None),
        "abs": (nt.absolute, lambda r: [_away_from_zero(r, (3, 4))], None),
        "matmul": (nt.matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))], None),
        "add_bias": (nt.add_bias, lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)], None),
        "conv2d": (lambda x, k, b: nt.conv2d(x, k, 1, b), conv_inputs(1), None),
        "conv2d_stride2": (lambda x, k, b: nt.conv2d(x, k, 2, b), conv_inputs(2), None),
        "conv2d_batched": (lambda x, k: nt.conv2d(x, k, 2),
                           lambda r: [r.standard_normal((2, 2, 6, 6)), r.standard_normal((2, 2, 3, 3))], None),
        "sum": (lambda a: nt.tsum(a, 1), lambda r: [r.standard_normal((3, 4))], None),
        "mean": (lambda a: nt.mean(a, 0), lambda r: [r.standard_normal((3, 4))], None),
        "max": (lambda a: nt.tmax(a, 1), lambda r: [r.standard_normal((3, 4))], None),
        "softmax": (lambda a: nt.softmax(a, -1), lambda r: [r.standard_normal((3, 5))], None),
        "log_softmax": (lambda a: nt.log_softmax(a, -1), lambda r: [r.standard_normal((3, 5))], None),
        "l2_norm": (lambda a: nt.l2_norm(a, -1), lambda r: [r.standard_normal((3, 16))], None),
        "reshape": (lambda a: nt.reshape(a, (4, 3)), lambda r: [r.standard_normal((3, 4))], None),
        "transpose": (lambda a: nt.transpose(a, (1, 2, 0)), lambda r: [r.standard_normal((2, 3, 4))], None),
        "squash": (squash, lambda r: [r.standard_normal((4, 8))], None),
        "route_sum": (lambda u: weighted_parent_sum(u, np.linspace(0.1, 0.9, 6).reshape(3, 2)),
                      lambda r: [r.standard_normal((3, 2, 4))], None),
        "caps_transform": (predict_vectors,
                           lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((3, 2, 5, 4))], None),
        "reconstruction_loss": (
            lambda o, img, m: reconstruction_loss(o, img.data, m.data, 0.512),
            lambda r: [r.uniform(0, 1, (2, 4, 4)), r.uniform(0, 1, (2, 4, 4)), (r.uniform(0, 1, (2, 4, 4)) > 0.5) * 1.0],
            [0]),
        "attribute_loss": (lambda o, a: attribute_loss(o, a.data, [1.0, 0.5, 2.0]),
                           lambda r: [r.uniform(0, 1, (2, 3)), r.uniform(0, 1, (2, 3))], [0]),
        "malignancy_kl_loss": (lambda z, g: malignancy_kl_loss(z, g.data, 1.0),
                               lambda r: [r.standard_normal((2, 5)), np.stack([targets(r, 5), targets(r, 5)])], [0]),
        "malignancy_regression_loss": (lambda z, m: malignancy_regression_loss(z, m.data, 1.0),
                                       lambda r: [r.standard_normal((2, 5)), r.uniform(1, 5, 2)], [0]),
    }


def run_primitive_checks(trials: int = 20, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, gen, wrt) in primitive_cases().items():
        t0 = time.perf_counter()
        worst = max(check_function(fn, gen(rng), rng, wrt) for _ in range(trials))
        results.append(CheckResult(name, worst, PRIMITIVE_TOL, time.perf_counter() - t0))
    return results


def toy_config(routing_mode: str = "sigmoid", iterations: int = 3) -> XCapsConfig:
    return XCapsConfig(conv_filters=4, conv_kernel=3, primary_types=4, primary_dim=4, primary_kernel=3,
                       primary_stride=2, attr_count=2, attr_dim=4, malignancy_classes=5,
                       routing=RoutingConfig(routing_mode, iterations), decoder_widths=(8, 16), image_size=8)


def toy_batch(seed: int = 0, batch: int = 2):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, (batch, 8, 8))
    masks = (rng.uniform(0, 1, (batch, 8, 8)) > 0.5).astype(np.float64)
    attr = rng.uniform(0, 1, (batch, 2))
    mal = np.stack([fit_target_distribution(rng.uniform(1, 5), rng.uniform(0.3, 1.5)) for _ in range(batch)])
    return images, masks, attr, mal


def model_loss(model: XCapsModel, images, masks, attr, mal, fixed_routing=None):
    out = model.forward(images, fixed_routing)
    loss = (malignancy_kl_loss(out.malignancy_logits, mal) + attribute_loss(out.attr_scores, attr, [1.0, 1.0])
            + reconstruction_loss(out.reconstruction, images, masks, 0.512))
    return loss, out


def check_model(routing_mode: str = "sigmoid", seed: int = 0) -> CheckResult:
    """Whole-network gradient vs FD with routing coefficients held at their forward values."""
    t0 = time.perf_counter()
    model = XCapsModel.build(toy_config(routing_mode), seed=seed, dtype=np.float64)
    # scale the capsule transforms up so attribute capsules are well away from zero
    model.params["caps_w"].data *= 20.0
    batch = toy_batch(seed)
    loss, out = model_loss(model, *batch)
    loss.backward()
    frozen = out.routing
    worst = 0.0
    for name, p in model.params.items():
        num = numeric_grad(lambda: model_loss(model, *batch, fixed_routing=frozen)[0].item(), p.data)
        worst = max(worst, rel_err(p.grad, num))
    return CheckResult(f"model[{routing_mode}]", worst, MODEL_TOL, time.perf_counter() - t0)


def run_all(trials: int = 20, seed: int = 0) -> list[CheckResult]:
    return run_primitive_checks(trials, seed) + [check_model("sigmoid", seed), check_model("softmax", seed)]
