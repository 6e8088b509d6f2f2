"""DispFulNet (stage 1), DispResNet (stage 2) and the two-stage cascade.

Both networks are described declaratively as ordered lists of
:class:`LayerSpec` and executed by the generic :class:`Network` runner, so the
DispResNet table can be compared cell by cell against its reference layout.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .stereo_ops import (
    DisparityMap,
    bilinear_downsample,
    bilinear_upsample,
    correlation1d,
    error_map,
    warp,
)
from .tensor import ConvSpec, DimensionError, Tensor

LEAKY_SLOPE = 0.1
LAYER_KINDS = ("conv", "upconv", "prediction", "downsample", "sum", "correlation")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    kernel: int | None
    stride: int | None
    in_channels: int
    out_channels: int
    inputs: tuple[str, ...]
    in_factor: int
    out_factor: int
    activation: bool = True
    shared_with: str | None = None
    max_disp: int | None = None

    def conv_spec(self) -> ConvSpec:
        if self.kind == "upconv":
            pad = (self.kernel - self.stride) // 2
            return ConvSpec(self.kernel, self.stride, pad, self.in_channels, self.out_channels)
        return ConvSpec.same(self.kernel, self.stride, self.in_channels, self.out_channels)

    @classmethod
    def from_dict(cls, d: dict) -> LayerSpec:
        d = dict(d)
        d["inputs"] = tuple(d["inputs"])
        return cls(**d)


@dataclass
class DispResNetSpec:
    layers: list[LayerSpec]
    width: float = 1.0
    data_inputs: dict[str, int] = field(
        default_factory=lambda: {"left": 3, "right": 3, "left_s": 3, "err": 3, "pr_s1": 1}
    )
    predictions: dict[int, str] = field(
        default_factory=lambda: {0: "pr_s2", 1: "pr_s2_2", 2: "pr_s2_4", 3: "pr_s2_8", 4: "pr_s2_16"}
    )
    residuals: dict[int, str] = field(
        default_factory=lambda: {0: "res_1", 1: "res_2", 2: "res_4", 3: "res_8", 4: "res_16"}
    )

    def layer(self, name: str) -> LayerSpec:
        return next(l for l in self.layers if l.name == name)


@dataclass
class DispFulNetSpec:
    layers: list[LayerSpec]
    width: float = 1.0
    max_disp: int = 40
    num_scales: int = 7
    data_inputs: dict[str, int] = field(default_factory=lambda: {"left": 3, "right": 3})
    predictions: dict[int, str] = field(
        default_factory=lambda: {0: "pr0", 1: "pr1", 2: "pr2", 3: "pr3", 4: "pr4", 5: "pr5", 6: "pr6"}
    )
    residuals: dict[int, str] = field(default_factory=dict)

    def layer(self, name: str) -> LayerSpec:
        return next(l for l in self.layers if l.name == name)


def scaled(c: int, w: float) -> int:
    return max(1, math.ceil(c * w - 1e-9))


def _conv(name, k, s, cin, cout, inputs, i, o, kind="conv"):
    return LayerSpec(name, kind, k, s, cin, cout, tuple(inputs), i, o, activation=kind != "prediction")


def dispresnet_spec(w: float = 1.0) -> DispResNetSpec:
    """The DispResNet layer table with internal channel counts scaled by ``w``.

    conv3 reads from conv2_1 (the table's "conv_3_1" entry cannot be
    evaluated before conv3 exists).
    """
    if not 0 < w <= 1:
        raise ValueError(f"width multiplier must lie in (0, 1], got {w}")
    c = {n: scaled(n, w) for n in (64, 128, 256, 512, 1024)}
    L = [
        _conv("conv1", 5, 1, 13, c[64], ["left", "right", "left_s", "err", "pr_s1"], 1, 1),
        _conv("conv2", 5, 2, c[64], c[128], ["conv1"], 1, 2),
        _conv("conv2_1", 3, 1, c[128], c[128], ["conv2"], 2, 2),
        _conv("conv3", 3, 2, c[128], c[256], ["conv2_1"], 2, 4),
        _conv("conv3_1", 3, 1, c[256], c[256], ["conv3"], 4, 4),
        _conv("conv4", 3, 2, c[256], c[512], ["conv3_1"], 4, 8),
        _conv("conv4_1", 3, 1, c[512], c[512], ["conv4"], 8, 8),
        _conv("conv5", 3, 2, c[512], c[1024], ["conv4_1"], 8, 16),
        _conv("conv5_1", 3, 1, c[1024], c[1024], ["conv5"], 16, 16),
    ]
    prev, top = "conv5_1", c[1024]
    for f, skip, cskip, cup in ((16, "conv4_1", c[512], c[512]),
                                (8, "conv3_1", c[256], c[256]),
                                (4, "conv2_1", c[128], c[128]),
                                (2, "conv1", c[64], c[64])):
        src_ch = top
        L += [
            _conv(f"res_{f}", 3, 1, src_ch, 1, [prev], f, f, kind="prediction"),
            LayerSpec(f"pr_s1_{f}", "downsample", None, None, 1, 1, ("pr_s1",), 1, f),
            LayerSpec(f"pr_s2_{f}", "sum", None, None, 1, 1, (f"pr_s1_{f}", f"res_{f}"), f, f),
            _conv(f"upconv{int(math.log2(f))}", 4, 2, src_ch, cup, [prev], f, f // 2, kind="upconv"),
        ]
        up = L[-1].name
        if f > 2:
            L.append(_conv(f"iconv{int(math.log2(f))}", 3, 1, cup + cskip + 1, cup,
                           [up, skip, f"pr_s2_{f}"], f // 2, f // 2))
            prev, top = L[-1].name, cup
        else:
            L += [
                _conv("res_1", 5, 1, cup + cskip + 1, 1, [up, skip, "pr_s2_2"], 1, 1, kind="prediction"),
                LayerSpec("pr_s2", "sum", None, None, 1, 1, ("pr_s1", "res_1"), 1, 1),
            ]
    return DispResNetSpec(L, w)


def dispfulnet_spec(w: float = 1.0, max_disp: int = 40) -> DispFulNetSpec:
    """DispNetC-style hour-glass extended to a full-resolution prediction.

    Shared-weight conv1/conv2 towers, 1-D correlation at quarter resolution,
    encoder down to 1/64 and a decoder predicting at 1/64 ... 1/2.  Two extra
    up-convolutions lift iconv1 (1/2) and iconv2 (1/4) to full resolution;
    their outputs are concatenated with the left image and a one-channel conv
    yields the full-resolution disparity.
    """
    if not 0 < w <= 1:
        raise ValueError(f"width multiplier must lie in (0, 1], got {w}")
    c = {n: scaled(n, w) for n in (16, 32, 64, 128, 256, 512, 1024)}
    L = [
        _conv("conv1", 7, 2, 3, c[64], ["left"], 1, 2),
        LayerSpec("conv1_r", "conv", 7, 2, 3, c[64], ("right",), 1, 2, shared_with="conv1"),
        _conv("conv2", 5, 2, c[64], c[128], ["conv1"], 2, 4),
        LayerSpec("conv2_r", "conv", 5, 2, c[64], c[128], ("conv1_r",), 2, 4, shared_with="conv2"),
        LayerSpec("corr", "correlation", None, None, c[128], max_disp + 1, ("conv2", "conv2_r"), 4, 4,
                  activation=False, max_disp=max_disp),
        _conv("conv_redir", 1, 1, c[128], c[64], ["conv2"], 4, 4),
        _conv("conv3", 5, 2, max_disp + 1 + c[64], c[256], ["corr", "conv_redir"], 4, 8),
        _conv("conv3_1", 3, 1, c[256], c[256], ["conv3"], 8, 8),
        _conv("conv4", 3, 2, c[256], c[512], ["conv3_1"], 8, 16),
        _conv("conv4_1", 3, 1, c[512], c[512], ["conv4"], 16, 16),
        _conv("conv5", 3, 2, c[512], c[512], ["conv4_1"], 16, 32),
        _conv("conv5_1", 3, 1, c[512], c[512], ["conv5"], 32, 32),
        _conv("conv6", 3, 2, c[512], c[1024], ["conv5_1"], 32, 64),
        _conv("conv6_1", 3, 1, c[1024], c[1024], ["conv6"], 64, 64),
        _conv("pr6", 3, 1, c[1024], 1, ["conv6_1"], 64, 64, kind="prediction"),
    ]
    prev, top = "conv6_1", c[1024]
    decoder = ((5, "conv5_1", c[512], c[512]), (4, "conv4_1", c[512], c[256]),
               (3, "conv3_1", c[256], c[128]), (2, "conv2", c[128], c[64]),
               (1, "conv1", c[64], c[32]))
    for lvl, skip, cskip, cout in decoder:
        f = 2 ** lvl
        L += [
            _conv(f"upconv{lvl}", 4, 2, top, cout, [prev], 2 * f, f, kind="upconv"),
            _conv(f"iconv{lvl}", 3, 1, cout + cskip + 1, cout,
                  [f"upconv{lvl}", skip, f"pr{lvl + 1}"], f, f),
            _conv(f"pr{lvl}", 3, 1, cout, 1, [f"iconv{lvl}"], f, f, kind="prediction"),
        ]
        prev, top = f"iconv{lvl}", cout
    L += [
        _conv("upconv0_a", 4, 2, c[32], c[16], ["iconv1"], 2, 1, kind="upconv"),
        _conv("upconv0_b", 8, 4, c[64], c[16], ["iconv2"], 4, 1, kind="upconv"),
        _conv("pr0", 5, 1, 2 * c[16] + 3, 1, ["upconv0_a", "upconv0_b", "left"], 1, 1, kind="prediction"),
    ]
    return DispFulNetSpec(L, w, max_disp)


def spec_to_dict(spec) -> dict:
    kind = "dispresnet" if isinstance(spec, DispResNetSpec) else "dispfulnet"
    d = {"type": kind, "width": spec.width, "layers": [asdict(l) for l in spec.layers]}
    if isinstance(spec, DispFulNetSpec):
        d["max_disp"] = spec.max_disp
    return d


def spec_from_dict(d: dict):
    layers = [LayerSpec.from_dict(l) for l in d["layers"]]
    if d["type"] == "dispresnet":
        return DispResNetSpec(layers, d["width"])
    if d["type"] == "dispfulnet":
        return DispFulNetSpec(layers, d["width"], d["max_disp"])
    raise ValueError(f"unknown network type {d['type']!r}")


class MultiscalePrediction(dict):
    """Mapping scale s -> DisparityMap; ``residuals`` holds r^(s) for stage 2."""

    def __init__(self, *args, residuals: dict[int, Tensor] | None = None, **kw):
        super().__init__(*args, **kw)
        self.residuals = residuals or {}


class Network:
    """Executes a layer table.  Parameters live in ``params`` as leaf tensors."""

    def __init__(self, spec, seed: int = 0, dtype=np.float32, scale_values: bool = True):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.scale_values = scale_values
        self.params: dict[str, Tensor] = {}
        self._validate()
        rng = np.random.default_rng(seed)
        for l in spec.layers:
            if l.kind not in ("conv", "upconv", "prediction") or l.shared_with:
                continue
            k = l.kernel
            if l.kind == "upconv":
                shape = (l.in_channels, l.out_channels, k, k)
                fan_in = l.in_channels * k * k / (l.stride ** 2)
            else:
                shape = (l.out_channels, l.in_channels, k, k)
                fan_in = l.in_channels * k * k
            gain = 6.0 / (1 + LEAKY_SLOPE ** 2) if l.activation else 1.0
            bound = math.sqrt(gain / fan_in)
            self.params[f"{l.name}.weight"] = Tensor(rng.uniform(-bound, bound, shape).astype(self.dtype), requires_grad=True)
            self.params[f"{l.name}.bias"] = Tensor(np.zeros(l.out_channels, dtype=self.dtype), requires_grad=True)

    def _validate(self) -> None:
        factors = {name: (ch, 1) for name, ch in self.spec.data_inputs.items()}
        for l in self.spec.layers:
            if l.kind not in LAYER_KINDS:
                raise ValueError(f"{l.name}: unknown layer kind {l.kind!r}")
            for src in l.inputs:
                if src not in factors:
                    raise ValueError(f"{l.name}: input {src!r} is not defined before use")
            if l.kind in ("conv", "upconv", "prediction"):
                total = sum(factors[s][0] for s in l.inputs)
                if total != l.in_channels:
                    raise ValueError(f"{l.name}: inputs carry {total} channels, spec says {l.in_channels}")
            factors[l.name] = (l.out_channels, l.out_factor)

    @property
    def multiple(self) -> int:
        return max(l.out_factor for l in self.spec.layers)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def _weights(self, l: LayerSpec):
        owner = l.shared_with or l.name
        return self.params[f"{owner}.weight"], self.params[f"{owner}.bias"]

    def _gather(self, l: LayerSpec, outs: dict[str, Tensor], factor_of: dict[str, int]) -> list[Tensor]:
        got = []
        for src in l.inputs:
            t = outs[src]
            f = factor_of[src]
            if f != l.in_factor:
                if f < l.in_factor or t.shape[1] != 1:
                    raise DimensionError(f"{l.name}: cannot align {src} at 1/{f} to 1/{l.in_factor}")
                ratio = f // l.in_factor
                t = bilinear_upsample(t, ratio, float(ratio) if self.scale_values else 1.0)
            got.append(t)
        return got

    def forward(self, sources: dict[str, Tensor], overrides: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
        """Run every layer; returns all named activations.

        ``overrides`` replaces the output of the named layers (used to force
        residual outputs to zero).
        """
        overrides = overrides or {}
        ref = next(iter(sources.values()))
        h, w = ref.shape[2], ref.shape[3]
        m = self.multiple
        if h % m or w % m:
            raise DimensionError(f"input size {h}x{w} must be divisible by {m}")
        outs = dict(sources)
        factor_of = {name: 1 for name in sources}
        for l in self.spec.layers:
            factor_of[l.name] = l.out_factor
            if l.name in overrides:
                outs[l.name] = overrides[l.name]
                continue
            xs = self._gather(l, outs, factor_of)
            if l.kind in ("conv", "prediction"):
                x = xs[0] if len(xs) == 1 else T.concat_channels(xs)
                wt, b = self._weights(l)
                y = T.conv2d(x, wt, b, l.conv_spec())
            elif l.kind == "upconv":
                x = xs[0] if len(xs) == 1 else T.concat_channels(xs)
                wt, b = self._weights(l)
                y = T.transposed_conv2d(x, wt, b, l.conv_spec())
            elif l.kind == "downsample":
                f = l.out_factor // l.in_factor
                y = bilinear_downsample(xs[0], f, 1.0 / f if self.scale_values else 1.0)
            elif l.kind == "sum":
                y = T.add(xs[0], xs[1])
            else:
                y = correlation1d(xs[0], xs[1], l.max_disp).data
            if l.activation and l.kind in ("conv", "upconv"):
                y = T.leaky_relu(y, LEAKY_SLOPE)
            outs[l.name] = y
        return outs


def build_dispresnet(w: float = 1.0, seed: int = 0, dtype=np.float32, scale_values: bool = True) -> Network:
    return Network(dispresnet_spec(w), seed=seed, dtype=dtype, scale_values=scale_values)


def build_dispfulnet(w: float = 1.0, max_disp: int = 40, seed: int = 0, dtype=np.float32,
                     scale_values: bool = True) -> Network:
    return Network(dispfulnet_spec(w, max_disp), seed=seed, dtype=dtype, scale_values=scale_values)


def zero_residuals(net: Network) -> None:
    """Set every res_* weight and bias to zero so each residual output is exactly 0."""
    for name in net.spec.residuals.values():
        for suffix in ("weight", "bias"):
            p = net.params[f"{name}.{suffix}"]
            p.data = np.zeros_like(p.data)


# ---------------------------------------------------------------- stage glue


# Images arrive in [0, 1]; the networks see them centred on zero.  Without
# this the correlation of early features is dominated by mean brightness.
IMAGE_OFFSET = 0.5
_IMAGE_SOURCES = ("left", "right", "left_s")


def forward_stage1(net: Network, left: Tensor, right: Tensor) -> MultiscalePrediction:
    outs = net.forward({"left": T.shift(left, -IMAGE_OFFSET), "right": T.shift(right, -IMAGE_OFFSET)})
    return MultiscalePrediction({s: DisparityMap(outs[name], s) for s, name in net.spec.predictions.items()})


def assemble_stage2_input(left: Tensor, right: Tensor, d1, sign: int = -1) -> Tensor:
    """Concatenate [left, right, warped right, |left - warped|, d1] (13 channels)."""
    if left.shape != right.shape:
        raise DimensionError(f"stereo pair shapes differ: {left.shape} vs {right.shape}")
    d = d1.data if isinstance(d1, DisparityMap) else d1
    if not isinstance(d, Tensor):
        d = Tensor(np.asarray(d))
    warped = warp(right, d, sign)
    return T.concat_channels([left, right, warped, error_map(left, warped), d])


def forward_stage2(net: Network, input13: Tensor, d1, zero_residual: bool = False) -> MultiscalePrediction:
    """d2^(s) = downsample(d1, 2^s) + r2^(s) for s = 0..4."""
    if input13.shape[1] != 13:
        raise DimensionError(f"stage-2 input must have 13 channels, got {input13.shape[1]}")
    d = d1.data if isinstance(d1, DisparityMap) else d1
    if not isinstance(d, Tensor):
        d = Tensor(np.asarray(d))
    sources = {}
    start = 0
    for name, ch in net.spec.data_inputs.items():
        src = T.slice_channels(input13, start, start + ch)
        sources[name] = T.shift(src, -IMAGE_OFFSET) if name in _IMAGE_SOURCES else src
        start += ch
    sources["pr_s1"] = d
    overrides = None
    if zero_residual:
        n, _, h, w = d.shape
        overrides = {
            name: Tensor(np.zeros((n, 1, h >> s, w >> s), dtype=d.dtype))
            for s, name in net.spec.residuals.items()
        }
    outs = net.forward(sources, overrides)
    preds = MultiscalePrediction(
        {s: DisparityMap(outs[name], s) for s, name in net.spec.predictions.items()},
        residuals={s: outs[name] for s, name in net.spec.residuals.items()},
    )
    return preds


@dataclass
class CRLConfig:
    width1: float = 0.25
    width2: float = 0.25
    max_disp: int = 6
    warp_sign: int = -1
    scale_values: bool = True

    @staticmethod
    def corr_disp_for(max_scene_disp: float) -> int:
        return math.ceil(max_scene_disp / 4) + 2


@dataclass
class CRLModel:
    stage1: Network
    stage2: Network
    config: CRLConfig

    @classmethod
    def build(cls, config: CRLConfig | None = None, seed: int = 0, dtype=np.float32) -> CRLModel:
        config = config or CRLConfig()
        s1 = build_dispfulnet(config.width1, config.max_disp, seed=seed, dtype=dtype, scale_values=config.scale_values)
        s2 = build_dispresnet(config.width2, seed=seed + 1, dtype=dtype, scale_values=config.scale_values)
        return cls(s1, s2, config)

    def parameters(self) -> list[Tensor]:
        return self.stage1.parameters() + self.stage2.parameters()


def forward_crl(model: CRLModel, left: Tensor, right: Tensor, zero_residual: bool = False):
    """Run both stages; returns (d1 multiscale, d2 multiscale).  Final output is d2[0]."""
    d1 = forward_stage1(model.stage1, left, right)
    x13 = assemble_stage2_input(left, right, d1[0], model.config.warp_sign)
    d2 = forward_stage2(model.stage2, x13, d1[0], zero_residual=zero_residual)
    return d1, d2


def predict(model: CRLModel, left: np.ndarray, right: np.ndarray, stage: int = 2):
    """Inference on numpy images (3, H, W) or (N, 3, H, W) of any size.

    Inputs are edge-padded up to a multiple of 64 and outputs cropped back.
    Returns (disparity, residual_or_None) as float arrays of shape (H, W)
    (or (N, H, W) for batched input).
    """
    single = left.ndim == 3
    if single:
        left, right = left[None], right[None]
    n, _, h, w = left.shape
    m = max(model.stage1.multiple, model.stage2.multiple)
    ph, pw = (-h) % m, (-w) % m
    pad = ((0, 0), (0, 0), (0, ph), (0, pw))
    dt = model.stage1.dtype
    L = Tensor(np.pad(left, pad, mode="edge").astype(dt))
    R = Tensor(np.pad(right, pad, mode="edge").astype(dt))
    with T.no_grad():
        d1 = forward_stage1(model.stage1, L, R)
        if stage == 1:
            disp, res = d1[0].numpy(), None
        else:
            x13 = assemble_stage2_input(L, R, d1[0], model.config.warp_sign)
            d2 = forward_stage2(model.stage2, x13, d1[0])
            disp, res = d2[0].numpy(), d2.residuals[0].data
    disp = disp[:, 0, :h, :w]
    res = res[:, 0, :h, :w] if res is not None else None
    if single:
        disp = disp[0]
        res = res[0] if res is not None else None
    return disp, res


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"CRLCKPT\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: CRLModel, meta: dict | None = None) -> None:
    """Write the layer tables plus every parameter as little-endian float32.

    Layout: magic (8 bytes) | u32 version | u32 header length | UTF-8 JSON
    header | u32 tensor count | per tensor: u16 name length, name, u8 ndim,
    ndim x u32 dims, float32 payload.
    """
    header = {
        "config": asdict(model.config),
        "stage1": spec_to_dict(model.stage1.spec),
        "stage2": spec_to_dict(model.stage2.spec),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = [(f"stage1.{k}", v) for k, v in sorted(model.stage1.params.items())]
    tensors += [(f"stage2.{k}", v) for k, v in sorted(model.stage2.params.items())]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[CRLModel, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    try:
        version, hlen = struct.unpack_from("<II", buf, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 16
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 4
            if pos + size > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    config = CRLConfig(**header["config"])
    s1 = Network(spec_from_dict(header["stage1"]), scale_values=config.scale_values)
    s2 = Network(spec_from_dict(header["stage2"]), scale_values=config.scale_values)
    for prefix, net in (("stage1", s1), ("stage2", s2)):
        for k, p in net.params.items():
            key = f"{prefix}.{k}"
            if key not in arrays:
                raise CheckpointError(f"{path}: missing parameter {key}")
            if arrays[key].shape != p.shape:
                raise CheckpointError(f"{path}: {key} has shape {arrays[key].shape}, spec expects {p.shape}")
            p.data = arrays.pop(key).astype(np.float32)
    if arrays:
        raise CheckpointError(f"{path}: unexpected parameters {sorted(arrays)}")
    return CRLModel(s1, s2, config), header.get("meta", {})
