"""Few-shot classifier architectures as pure functions of a ParamSet."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import INIT, stream

KINDS = ("conv4", "conv_small", "mlp")
CKPT_MAGIC = b"UMTCKPT1"
BN_EPS = 1e-5

_DEFAULT_FILTERS = {"conv4": (64, 64, 64, 64), "conv_small": (8, 8), "mlp": ()}


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "conv_small"
    input_shape: tuple[int, int, int] = (1, 14, 14)
    n_classes: int = 5
    filters: tuple[int, ...] | None = None
    hidden: tuple[int, ...] = (64,)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        if self.filters is None:
            object.__setattr__(self, "filters", _DEFAULT_FILTERS.get(self.kind, ()))
        else:
            object.__setattr__(self, "filters", tuple(int(v) for v in self.filters))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be C x H x W, got {self.input_shape}")
        if self.kind != "mlp":
            if not self.filters:
                raise ValueError(f"{self.kind} needs at least one conv block")
            need = 2 ** len(self.filters)
            _, h, w = self.input_shape
            if h < need or w < need:
                raise ValueError(
                    f"input {h}x{w} too small for {len(self.filters)} pooling stages (need >= {need})"
                )

    @property
    def feature_dim(self) -> int:
        c, h, w = self.input_shape
        if self.kind == "mlp":
            return self.hidden[-1] if self.hidden else c * h * w
        for _ in self.filters:
            h, w = (h + 1) // 2, (w + 1) // 2
        return self.filters[-1] * h * w

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(**d)


class ParamSet:
    """Ordered, named trainable tensors for one classifier."""

    def __init__(self, items, spec: ModelSpec | None = None):
        self._params: dict[str, Tensor] = {}
        for name, t in items:
            if name in self._params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._params[name] = t
        self.spec = spec

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def replace(self, tensors) -> "ParamSet":
        if isinstance(tensors, Mapping):
            tensors = [tensors[n] for n in self._params]
        return ParamSet(zip(self._params, tensors), self.spec)

    def clone(self, requires_grad: bool = True) -> "ParamSet":
        """Independent copy with fresh leaf tensors."""
        return ParamSet(
            ((n, Tensor(t.data.copy(), requires_grad=requires_grad, name=n)) for n, t in self.items()),
            self.spec,
        )

    def leaves(self) -> "ParamSet":
        """Graph-free leaves sharing storage, ready to be differentiated against."""
        out = []
        for n, t in self.items():
            leaf = t.detach(requires_grad=True)
            leaf.name = n
            out.append((n, leaf))
        return ParamSet(out, self.spec)

    def equals(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[n].data, other[n].data) for n in self
        )

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors, {self.count()} scalars)"


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    c, h, w = spec.input_shape
    if spec.kind == "mlp":
        width = c * h * w
        for i, hdim in enumerate(spec.hidden):
            shapes += [(f"fc{i}.weight", (hdim, width)), (f"fc{i}.bias", (hdim,))]
            width = hdim
    else:
        for i, f in enumerate(spec.filters):
            shapes += [
                (f"conv{i}.weight", (f, c, 3, 3)),
                (f"conv{i}.bias", (f,)),
                (f"bn{i}.gamma", (f,)),
                (f"bn{i}.beta", (f,)),
            ]
            c = f
    shapes += [("head.weight", (spec.n_classes, spec.feature_dim)), ("head.bias", (spec.n_classes,))]
    return shapes


def init_params(spec: ModelSpec, seed: int) -> ParamSet:
    """He-style truncated-normal weights; zero biases and shifts, unit gains."""
    rng = stream(seed, 0, INIT)
    items = []
    for name, shape in param_shapes(spec):
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            data = _truncated_normal(rng, shape, np.sqrt(2.0 / fan_in))
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        items.append((name, Tensor(data, requires_grad=True, name=name)))
    return ParamSet(items, spec)


def forward(params: ParamSet, batch) -> Tensor:
    """Logits (B x N) for a B x C x H x W batch."""
    spec = params.spec
    x = ad.as_tensor(batch)
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ValueError(f"batch shape {x.shape} does not match model input {spec.input_shape}")
    b = x.shape[0]
    if spec.kind == "mlp":
        h = ad.reshape(x, (b, int(np.prod(spec.input_shape))))
        for i in range(len(spec.hidden)):
            h = ad.relu(_dense(h, params[f"fc{i}.weight"], params[f"fc{i}.bias"]))
    else:
        h = x
        for i in range(len(spec.filters)):
            h = ad.conv2d(h, params[f"conv{i}.weight"])
            bias = params[f"conv{i}.bias"]
            h = ad.add(h, ad.broadcast_to(ad.reshape(bias, (1, bias.size, 1, 1)), h.shape))
            h = ad.batch_stat_norm(h, params[f"bn{i}.gamma"], params[f"bn{i}.beta"], BN_EPS)
            h = ad.maxpool2(ad.relu(h))
        h = ad.reshape(h, (b, spec.feature_dim))
    return _dense(h, params["head.weight"], params["head.bias"])


def _dense(h: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    out = ad.matmul(h, ad.transpose(weight))
    return ad.add(out, ad.broadcast_to(ad.reshape(bias, (1, bias.size)), out.shape))


def save_checkpoint(params: ParamSet, path) -> None:
    spec_json = params.spec.to_json().encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<I", len(spec_json)), spec_json, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw, ad.tensor_to_bytes(t)]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> ParamSet:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<I", buf, 8)
    spec = ModelSpec.from_dict(json.loads(buf[12 : 12 + n].decode("utf-8")))
    off = 12 + n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    items = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4 : off + 4 + ln].decode("utf-8")
        t, off = ad.tensor_from_bytes(buf, off + 4 + ln)
        t.requires_grad = True
        t.name = name
        items.append((name, t))
    params = ParamSet(items, spec)
    expected = dict(param_shapes(spec))
    got = {k: t.shape for k, t in params.items()}
    if got != expected:
        raise ValueError(f"{path}: tensors do not match the embedded model spec")
    return params
