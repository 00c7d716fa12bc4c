"""Network specifications, builders and checkpoint persistence.

Networks are declarative: a :class:`NetworkSpec` lists layer descriptors
(plain dicts) and a :class:`Network` pairs a spec with a parameter map.
Layouts are NCHW; a feature "4x4x32" in HWC notation is ``(32, 4, 4)`` here.

Layer kinds:

``conv``      ``{"kind": "conv", "cout", "k", "stride", "pad"}``
``res``       residual block ``x -> shortcut(x) + conv(relu(x))``; one ReLU
``relu``      elementwise max(0, x)
``flatten``   collapse to a vector
``affine``    ``{"kind": "affine", "dout"}``
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fcx import container
from fcx.core.tensor import (
    Tensor,
    affine,
    conv2d,
    conv_out_extent,
    flatten,
    relu,
    shortcut,
)
from fcx.errors import (
    CorruptCheckpoint,
    FrozenNetworkError,
    InvalidDepth,
    InvalidGeometry,
    InvalidWidth,
    ShapeMismatch,
    ValidationError,
)
from fcx.utils import derive_seed

Shape = tuple[int, ...]

DESK_BASE_WIDTHS = (16, 32, 64)
FULL_SCALE_BASE_WIDTHS = (128, 256, 512)
EVAL_CHUNK = 256


def conv(cout: int, k: int = 3, stride: int = 1, pad=None) -> dict:
    return {"kind": "conv", "cout": int(cout), "k": int(k), "stride": int(stride),
            "pad": (k // 2) if pad is None else pad}


def res(cout: int, stride: int = 1, pad=1) -> dict:
    return {"kind": "res", "cout": int(cout), "k": 3, "stride": int(stride), "pad": pad}


RELU = {"kind": "relu"}
FLATTEN = {"kind": "flatten"}


def same_pad(size: int, k: int, stride: int):
    """Padding giving ``ceil(size / stride)`` outputs; asymmetric when needed."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    lo, hi = total // 2, total - total // 2
    return lo if lo == hi else [lo, hi]


def _norm_layer(layer: dict) -> dict:
    layer = dict(layer)
    if isinstance(layer.get("pad"), tuple):
        layer["pad"] = list(layer["pad"])
    return layer


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[dict, ...]
    input_shape: Shape
    tap: int | None = None
    loss: str | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(_norm_layer(l) for l in self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.shapes()

    @property
    def relu_count(self) -> int:
        return sum(1 for l in self.layers if l["kind"] in ("relu", "res"))

    @property
    def conv_count(self) -> int:
        return sum(1 for l in self.layers if l["kind"] in ("conv", "res"))

    @property
    def tap_index(self) -> int:
        return len(self.layers) if self.tap is None else self.tap

    def shapes(self) -> list[Shape]:
        """Per-sample shapes: entry 0 is the input, entry i+1 follows layer i."""
        cur = self.input_shape
        out = [cur]
        for i, layer in enumerate(self.layers):
            kind = layer["kind"]
            if kind in ("conv", "res"):
                if len(cur) != 3:
                    raise ShapeMismatch(f"layer {i} ({kind}) needs CHW input, got {cur}")
                k, s, p = layer["k"], layer["stride"], layer["pad"]
                h = conv_out_extent(cur[1], k, s, p)
                w = conv_out_extent(cur[2], k, s, p)
                if kind == "res":
                    if layer["cout"] < cur[0]:
                        raise InvalidWidth(f"residual block {i} cannot shrink channels")
                    if (h, w) != (-(-cur[1] // s), -(-cur[2] // s)):
                        raise InvalidGeometry(f"residual block {i}: shortcut/conv mismatch")
                cur = (layer["cout"], h, w)
            elif kind == "affine":
                if len(cur) != 1:
                    raise ShapeMismatch(f"layer {i} (affine) needs a vector, got {cur}")
                cur = (layer["dout"],)
            elif kind == "flatten":
                cur = (int(np.prod(cur)),)
            elif kind != "relu":
                raise ValidationError(f"unknown layer kind {kind!r}")
            out.append(cur)
        return out

    @property
    def output_shape(self) -> Shape:
        return self.shapes()[-1]

    @property
    def feature_shape(self) -> Shape:
        return self.shapes()[self.tap_index]

    def param_shapes(self) -> dict[str, Shape]:
        shapes = self.shapes()
        out = {}
        for i, layer in enumerate(self.layers):
            cin = shapes[i][0]
            if layer["kind"] in ("conv", "res"):
                out[f"{i}.weight"] = (layer["cout"], cin, layer["k"], layer["k"])
                out[f"{i}.bias"] = (layer["cout"],)
            elif layer["kind"] == "affine":
                out[f"{i}.weight"] = (cin, layer["dout"])
                out[f"{i}.bias"] = (layer["dout"],)
        return out

    def to_dict(self) -> dict:
        return {"layers": [dict(l) for l in self.layers],
                "input_shape": list(self.input_shape), "tap": self.tap,
                "loss": self.loss, "name": self.name}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(layers=tuple(d["layers"]), input_shape=tuple(d["input_shape"]),
                   tap=d.get("tap"), loss=d.get("loss"), name=d.get("name", ""))


def init_params(spec: NetworkSpec, seed: int) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases.

    Residual-branch convs are additionally scaled by ``1/sqrt(#blocks)`` so
    the residual stream keeps unit scale at any depth.
    """
    n_res = sum(1 for l in spec.layers if l["kind"] == "res")
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            std = math.sqrt(2.0 / fan_in)
            if spec.layers[int(name.split(".")[0])]["kind"] == "res":
                std /= math.sqrt(n_res)
            rng = np.random.default_rng(derive_seed(seed, name))
            params[name] = rng.normal(0.0, std, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def run_layers(layers: Sequence[dict], params: dict[str, Tensor], x: Tensor,
               start: int = 0, trace: list | None = None) -> Tensor:
    """Apply ``layers`` (indexed from ``start``) to ``x``.

    When ``trace`` is a list, every ReLU input array is appended to it.
    """
    for offset, layer in enumerate(layers):
        i = start + offset
        kind = layer["kind"]
        if kind == "conv":
            x = conv2d(x, params[f"{i}.weight"], params[f"{i}.bias"],
                       layer["stride"], layer["pad"])
        elif kind == "res":
            if trace is not None:
                trace.append(x.data)
            branch = conv2d(relu(x), params[f"{i}.weight"], params[f"{i}.bias"],
                            layer["stride"], layer["pad"])
            x = shortcut(x, layer["stride"], layer["cout"]) + branch
        elif kind == "relu":
            if trace is not None:
                trace.append(x.data)
            x = relu(x)
        elif kind == "flatten":
            x = flatten(x)
        elif kind == "affine":
            x = affine(x, params[f"{i}.weight"], params[f"{i}.bias"])
    return x


@dataclass
class Network:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    seed: int = 0
    frozen: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if set(expected) != set(self.params):
            raise ShapeMismatch(f"parameter names {sorted(self.params)} != {sorted(expected)}")
        for k, shape in expected.items():
            if tuple(self.params[k].shape) != tuple(shape):
                raise ShapeMismatch(f"{k}: {self.params[k].shape} != {shape}")
        if self.frozen:
            self.freeze()

    @classmethod
    def create(cls, spec: NetworkSpec, seed: int = 0, **kw) -> "Network":
        return cls(spec, init_params(spec, seed), seed=seed, **kw)

    def freeze(self) -> "Network":
        for v in self.params.values():
            v.flags.writeable = False
        self.frozen = True
        return self

    def set_params(self, new: dict[str, np.ndarray]) -> None:
        if self.frozen:
            raise FrozenNetworkError("frozen networks reject parameter mutation")
        for k, v in new.items():
            if k not in self.params or np.shape(v) != self.params[k].shape:
                raise ShapeMismatch(f"cannot assign {k} with shape {np.shape(v)}")
            self.params[k] = np.array(v, dtype=np.float64)

    def copy(self, frozen: bool | None = None) -> "Network":
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()},
                       seed=self.seed, frozen=self.frozen if frozen is None else frozen,
                       meta=dict(self.meta))

    def trainable(self) -> dict[str, Tensor]:
        if self.frozen:
            raise FrozenNetworkError("cannot train a frozen network")
        return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def apply(self, x, params: dict[str, Tensor] | None = None, start: int = 0,
              stop: int | None = None, trace: list | None = None) -> Tensor:
        """Graph-building forward over layers ``[start, stop)``."""
        stop = len(self.spec.layers) if stop is None else stop
        x = x if isinstance(x, Tensor) else Tensor(x)
        expected = self.spec.shapes()[start]
        if tuple(x.shape[1:]) != tuple(expected):
            raise ShapeMismatch(f"input {x.shape[1:]} != expected {expected}")
        return run_layers(self.spec.layers[start:stop], params or self.constants(), x,
                          start=start, trace=trace)

    def _eval(self, x: np.ndarray, start: int, stop: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        consts = self.constants()
        expected = self.spec.shapes()[start]
        if tuple(x.shape[1:]) != tuple(expected):
            raise ShapeMismatch(f"input {x.shape[1:]} != expected {expected}")
        outs = [run_layers(self.spec.layers[start:stop], consts, Tensor(x[i:i + EVAL_CHUNK]),
                           start=start).data for i in range(0, len(x), EVAL_CHUNK)]
        return np.concatenate(outs, axis=0)

    def feature(self, x) -> np.ndarray:
        return self._eval(x, 0, self.spec.tap_index)

    def head(self, feature) -> np.ndarray:
        return self._eval(feature, self.spec.tap_index, len(self.spec.layers))

    def __call__(self, x) -> np.ndarray:
        return self.head(self.feature(x))


def forward_to_feature(net: Network, x) -> np.ndarray:
    return net.feature(x)


def head_forward(net: Network, feature) -> np.ndarray:
    return net.head(feature)


# --- builders -------------------------------------------------------------

def _downsample_count(in_shape: Shape, out_shape: Shape) -> int:
    (_, hi, wi), (_, ho, wo) = in_shape, out_shape
    if hi % ho or wi % wo or hi // ho != wi // wo:
        raise InvalidGeometry(f"cannot map spatial {hi}x{wi} onto {ho}x{wo}")
    factor = hi // ho
    steps = int(round(math.log2(factor)))
    if 2 ** steps != factor:
        raise InvalidGeometry(f"downsampling factor {factor} is not a power of two")
    return steps


def build_disentangler(m: int, r: float = 1.0, in_shape: Shape = (1, 16, 16),
                       out_shape: Shape = (32, 4, 4),
                       base_widths: Sequence[int] = DESK_BASE_WIDTHS,
                       seed: int = 0, name: str | None = None) -> Network:
    """Residual disentangler with ``3m + 2`` convs and ``3m + 1`` ReLUs.

    Input conv, three stages of ``m`` blocks (``relu -> conv`` plus shortcut)
    at widths ``round(base_widths * r)``, then ``relu -> conv`` to the output
    shape. Stride-2 downsampling goes to the earliest available of: input
    conv, first block of stage 2, first block of stage 3.
    """
    if not isinstance(m, (int, np.integer)) or m < 1:
        raise InvalidDepth(f"m must be >= 1, got {m}")
    if r <= 0:
        raise InvalidWidth(f"width factor must be positive, got {r}")
    widths = [int(round(b * r)) for b in base_widths]
    if len(widths) != 3 or min(widths) < 1:
        raise InvalidWidth(f"rounded widths {widths} contain a zero")
    steps = _downsample_count(tuple(in_shape), tuple(out_shape))
    if steps > 3:
        raise InvalidGeometry("at most three stride-2 stages are available")
    strides = [2 if i < steps else 1 for i in range(3)]

    layers = []
    h = in_shape[1]
    layers.append(conv(widths[0], 3, strides[0], same_pad(h, 3, strides[0])))
    h = -(-h // strides[0])
    for stage, width in enumerate(widths):
        for b in range(m):
            s = strides[stage] if (b == 0 and stage > 0) else 1
            layers.append(res(width, s, same_pad(h, 3, s)))
            h = -(-h // s)
    layers.append(RELU)
    layers.append(conv(out_shape[0], 3, 1, 1))
    spec = NetworkSpec(tuple(layers), tuple(in_shape), loss="mse",
                       name=name or f"disentangler-l{3 * m + 1}")
    net = Network.create(spec, seed=seed, meta={"m": int(m), "r": float(r),
                                                 "base_widths": list(base_widths)})
    if tuple(spec.output_shape) != tuple(out_shape):
        raise InvalidGeometry(f"built output {spec.output_shape} != {tuple(out_shape)}")
    return net


def depth_to_m(depth: int) -> int:
    if depth < 4 or (depth - 1) % 3:
        raise InvalidDepth(f"depth {depth} is not of the form 3m+1")
    return (depth - 1) // 3


def build_task_net(n: int, seed: int, in_shape: Shape = (1, 16, 16),
                   out_shape: Shape = (8, 4, 4), width: int = 16) -> Network:
    """Frozen random conv stack with exactly ``n`` ReLU layers."""
    if n < 0:
        raise InvalidDepth(f"n must be >= 0, got {n}")
    steps = _downsample_count(tuple(in_shape), tuple(out_shape))
    n_convs = n + 2
    if steps > n_convs:
        raise InvalidGeometry("not enough conv layers to reach the output size")
    # strided convs: first, last, then from the second onwards
    order = [0, n_convs - 1] + list(range(1, n_convs - 1))
    strided = set(order[:steps])
    layers = []
    h = in_shape[1]
    for i in range(n_convs):
        s = 2 if i in strided else 1
        cout = out_shape[0] if i == n_convs - 1 else width
        layers.append(conv(cout, 3, s, same_pad(h, 3, s)))
        h = -(-h // s)
        if 0 < i + 1 < n_convs and i < n:
            layers.append(RELU)
    spec = NetworkSpec(tuple(layers), tuple(in_shape), loss="mse", name=f"task-{n}")
    assert spec.relu_count == n
    return Network.create(spec, seed=seed, frozen=True, meta={"task_n": int(n)})


def build_teacher(arch: str = "small-resnet", blocks: int = 1,
                  in_shape: Shape = (1, 16, 16), num_classes: int | None = 10,
                  regression_shape: Shape | None = None,
                  widths: Sequence[int] = (8, 16, 32), seed: int = 0) -> Network:
    """Trainable teacher whose tap is the last residual stage output.

    The head ``g`` is ``relu -> flatten -> affine``. Pass ``regression_shape``
    instead of ``num_classes`` for an MSE head of that many outputs.
    """
    if (num_classes is None) == (regression_shape is None):
        raise ValidationError("give exactly one of num_classes / regression_shape")
    layers = []
    h = in_shape[1]
    if arch == "small-resnet":
        if blocks < 1:
            raise InvalidDepth("blocks per stage must be >= 1")
        layers.append(conv(widths[0], 3, 1, 1))
        for stage, width in enumerate(widths):
            for b in range(blocks):
                s = 2 if (b == 0 and stage > 0 and h % 2 == 0 and h > 4) else 1
                layers.append(res(width, s, same_pad(h, 3, s)))
                h = -(-h // s)
    elif arch == "small-conv":
        for i, width in enumerate(widths):
            s = 2 if (i < len(widths) - 1 and h % 2 == 0 and h > 4) else 1
            if i:
                layers.append(RELU)
            layers.append(conv(width, 3, s, same_pad(h, 3, s)))
            h = -(-h // s)
    else:
        raise ValidationError(f"unknown teacher architecture {arch!r}")
    tap = len(layers)
    dout = num_classes if num_classes is not None else int(np.prod(regression_shape))
    layers += [RELU, FLATTEN, {"kind": "affine", "dout": int(dout)}]
    spec = NetworkSpec(tuple(layers), tuple(in_shape), tap=tap,
                       loss="ce" if num_classes is not None else "mse",
                       name=f"{arch}-{blocks}")
    return Network.create(spec, seed=seed, meta={"arch": arch, "blocks": int(blocks)})


def compose(front: Network, back: Network, tap_from: int | None = None,
            name: str = "") -> Network:
    """Stack ``front`` layers then ``back`` layers ``[tap_from:]``; tap at the seam."""
    start = back.spec.tap_index if tap_from is None else tap_from
    layers = list(front.spec.layers) + list(back.spec.layers[start:])
    spec = NetworkSpec(tuple(layers), front.spec.input_shape, tap=len(front.spec.layers),
                       loss=back.spec.loss, name=name)
    params = dict(front.params)
    shift = len(front.spec.layers) - start
    for k, v in back.params.items():
        idx, leaf = k.split(".")
        if int(idx) >= start:
            params[f"{int(idx) + shift}.{leaf}"] = v
    return Network(spec, {k: np.array(v) for k, v in params.items()}, seed=front.seed)


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(net: Network, path):
    meta = {"kind": "network", "spec": net.spec.to_dict(), "seed": int(net.seed),
            "frozen": bool(net.frozen), "meta": net.meta}
    return container.write(path, meta, net.params)


def load_checkpoint(path) -> Network:
    header, arrays = container.read(path)
    if header.get("kind") != "network":
        raise CorruptCheckpoint(f"not a network checkpoint: kind={header.get('kind')!r}")
    spec = NetworkSpec.from_dict(header["spec"])
    return Network(spec, arrays, seed=header["seed"], frozen=header["frozen"],
                   meta=header.get("meta", {}))
