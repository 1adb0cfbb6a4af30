"""The explainable capsule network: encoder, attribute capsules, heads, checkpoints.

Layer chain: conv + relu -> primary capsules -> fully-connected attribute
capsules (dynamic routing) -> (a) affine malignancy head over the flattened
attribute vectors, (b) three-layer decoder producing the masked reconstruction.
The malignancy head sees nothing but the attribute capsule vectors.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndtensor as nt
from .capsule import CapsuleTensor, RoutingConfig, fc_caps_layer, primary_caps_layer
from .ndtensor import Tensor

CHECKPOINT_MAGIC = b"XCAP"
CHECKPOINT_VERSION = 1
DEFAULT_DELTAS = tuple(round(-0.25 + 0.05 * i, 2) for i in range(11))


@dataclass
class XCapsConfig:
    conv_filters: int = 256
    conv_kernel: int = 9
    primary_types: int = 32
    primary_dim: int = 8
    primary_kernel: int = 9
    primary_stride: int = 2
    attr_count: int = 6
    attr_dim: int = 16
    malignancy_classes: int = 5
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    decoder_widths: tuple[int, ...] = (512, 1024)
    image_size: int = 32

    def __post_init__(self):
        if isinstance(self.routing, dict):
            self.routing = RoutingConfig(**self.routing)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        for name in ("conv_filters", "conv_kernel", "primary_types", "primary_dim", "primary_kernel",
                     "primary_stride", "attr_count", "attr_dim", "malignancy_classes", "image_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.malignancy_classes < 2:
            raise ValueError("need at least two malignancy classes")
        if self.grid_size < 1:
            raise ValueError("image too small for the conv and primary capsule kernels")

    @property
    def conv_out(self) -> int:
        return self.image_size - self.conv_kernel + 1

    @property
    def grid_size(self) -> int:
        if self.conv_out < self.primary_kernel:
            return 0
        return (self.conv_out - self.primary_kernel) // self.primary_stride + 1

    @property
    def n_children(self) -> int:
        return self.primary_types * self.grid_size ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["routing"] = self.routing.to_dict()
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "XCapsConfig":
        d = dict(d)
        d["routing"] = RoutingConfig(**d["routing"])
        return cls(**d)


@dataclass
class ForwardOutput:
    attr_vectors: Tensor          # [B, N, attr_dim]
    attr_scores: Tensor           # [B, N]
    malignancy_logits: Tensor     # [B, K]
    reconstruction: Tensor        # [B, H, W]
    routing: np.ndarray | None = None  # final-round coefficients [B, children, N]


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class XCapsModel:
    def __init__(self, config: XCapsConfig, params: dict[str, np.ndarray], seed: int = 0,
                 dtype=np.float64):
        self.config = config
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {
            name: Tensor(np.asarray(v, dtype=self.dtype), requires_grad=True) for name, v in params.items()}
        self._check_shapes()

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, config: XCapsConfig | None = None, seed: int = 0, dtype=np.float64) -> "XCapsModel":
        config = config or XCapsConfig()
        rng = np.random.default_rng(seed)
        shapes = cls.param_shapes(config)
        params = {}
        for name, (shape, fan_in, fan_out) in shapes.items():
            if name.endswith("_b"):
                params[name] = np.zeros(shape)
            else:
                params[name] = _glorot(rng, shape, fan_in, fan_out)
        return cls(config, params, seed, dtype)

    @staticmethod
    def param_shapes(c: XCapsConfig) -> dict[str, tuple[tuple[int, ...], int, int]]:
        """Parameter name -> (shape, fan_in, fan_out) in a fixed order."""
        k1, k2 = c.conv_kernel, c.primary_kernel
        caps_ch = c.primary_types * c.primary_dim
        flat = c.attr_count * c.attr_dim
        shapes = {
            "conv_w": ((c.conv_filters, 1, k1, k1), k1 * k1, c.conv_filters * k1 * k1),
            "conv_b": ((c.conv_filters,), 0, 0),
            "primary_w": ((caps_ch, c.conv_filters, k2, k2), c.conv_filters * k2 * k2, caps_ch * k2 * k2),
            "primary_b": ((caps_ch,), 0, 0),
            # treated as one dense map from all child components to all parent components
            "caps_w": ((c.n_children, c.attr_count, c.attr_dim, c.primary_dim),
                       c.n_children * c.primary_dim, c.attr_count * c.attr_dim),
            "head_w": ((flat, c.malignancy_classes), flat, c.malignancy_classes),
            "head_b": ((c.malignancy_classes,), 0, 0),
        }
        widths = [flat, *c.decoder_widths, c.image_size * c.image_size]
        for i in range(len(widths) - 1):
            shapes[f"dec{i}_w"] = ((widths[i], widths[i + 1]), widths[i], widths[i + 1])
            shapes[f"dec{i}_b"] = ((widths[i + 1],), 0, 0)
        return shapes

    def _check_shapes(self) -> None:
        expected = self.param_shapes(self.config)
        if list(expected) != list(self.params):
            raise ValueError(f"parameter names {list(self.params)} do not match {list(expected)}")
        for name, (shape, _, _) in expected.items():
            if self.params[name].shape != tuple(shape):
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")

    def decoder_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("dec")]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
            p._consumed = False

    # -- forward -----------------------------------------------------------

    def encode(self, images, fixed_routing: np.ndarray | None = None) -> CapsuleTensor:
        x = np.asarray(images, dtype=self.dtype)
        size = self.config.image_size
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (size, size):
            raise ValueError(f"expected images of shape [B, {size}, {size}], got {np.shape(images)}")
        p = self.params
        feats = nt.relu(nt.conv2d(Tensor(x[:, None]), p["conv_w"], 1, p["conv_b"]))
        primary = primary_caps_layer(feats, p["primary_w"], p["primary_b"], self.config.primary_types,
                                     self.config.primary_dim, self.config.primary_stride)
        return fc_caps_layer(primary, p["caps_w"], self.config.routing, fixed_routing)

    def head(self, attr_vectors: Tensor) -> Tensor:
        flat = nt.reshape(attr_vectors, (attr_vectors.shape[0], -1))
        return nt.add_bias(nt.matmul(flat, self.params["head_w"]), self.params["head_b"])

    def decode(self, attr_vectors: Tensor) -> Tensor:
        h = nt.reshape(attr_vectors, (attr_vectors.shape[0], -1))
        n_layers = len(self.config.decoder_widths) + 1
        for i in range(n_layers):
            h = nt.add_bias(nt.matmul(h, self.params[f"dec{i}_w"]), self.params[f"dec{i}_b"])
            h = nt.relu(h) if i < n_layers - 1 else nt.sigmoid(h)
        size = self.config.image_size
        return nt.reshape(h, (h.shape[0], size, size))

    def forward(self, images, fixed_routing: np.ndarray | None = None) -> ForwardOutput:
        caps = self.encode(images, fixed_routing)
        v = caps.data
        return ForwardOutput(attr_vectors=v, attr_scores=nt.l2_norm(v, axis=-1),
                             malignancy_logits=self.head(v), reconstruction=self.decode(v),
                             routing=caps.coefficients)

    __call__ = forward

    # -- explanation -------------------------------------------------------

    def contribution_report(self, attr_vectors) -> np.ndarray:
        """[N, K] logit contribution of each attribute capsule; rows + bias == logits."""
        v = np.asarray(nt.no_grad_value(attr_vectors), dtype=np.float64)
        n, d = self.config.attr_count, self.config.attr_dim
        w = self.params["head_w"].data.astype(np.float64).reshape(n, d, -1)
        return np.einsum("nd,ndk->nk", v.reshape(n, d), w)

    def perturb_and_decode(self, attr_vectors, attr_idx: int, dim_idx: int,
                           deltas=DEFAULT_DELTAS) -> list[np.ndarray]:
        v = np.array(nt.no_grad_value(attr_vectors), dtype=self.dtype).reshape(
            self.config.attr_count, self.config.attr_dim)
        if not 0 <= attr_idx < self.config.attr_count or not 0 <= dim_idx < self.config.attr_dim:
            raise IndexError(f"capsule ({attr_idx}, {dim_idx}) out of range")
        batch = np.repeat(v[None], len(deltas), axis=0)
        batch[:, attr_idx, dim_idx] += np.asarray(deltas, dtype=self.dtype)
        recon = self.decode(Tensor(batch)).data
        return [recon[i] for i in range(len(deltas))]

    # -- persistence -------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.asarray(v, dtype=self.dtype).copy()

    def astype(self, dtype) -> "XCapsModel":
        return XCapsModel(self.config, self.state_dict(), self.seed, dtype)

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path, dtype=np.float64) -> "XCapsModel":
        return load_checkpoint(path, dtype)


def attribute_scores_to_scale(attr_scores) -> np.ndarray:
    """Capsule magnitude in [0, 1) to rater scale [1, 5)."""
    return 1.0 + 4.0 * np.asarray(nt.no_grad_value(attr_scores), dtype=np.float64)


def save_checkpoint(model: XCapsModel, path) -> None:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
             struct.pack("<QI", model.seed & 0xFFFFFFFFFFFFFFFF, len(model.params))]
    for name, t in model.params.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, dtype=np.float64) -> XCapsModel:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an X-Caps checkpoint")
    pos = 4
    version, cfg_len = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config = XCapsConfig.from_dict(json.loads(buf[pos:pos + cfg_len]))
    pos += cfg_len
    seed, count = struct.unpack_from("<QI", buf, pos)
    pos += 12
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return XCapsModel(config, params, seed, dtype)
