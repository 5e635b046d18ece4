"""The MultiMix network: shared 5-block encoder, classification head, 4-block decoder.

Layer names follow ``enc.block{k}.conv{j}.weight``, ``head.fc.{weight,bias}``,
``dec.block{k}.conv{j}.weight`` and ``dec.final.{weight,bias}``. Convolutions
that feed an instance norm carry no bias: the norm subtracts the per-channel
mean, so such a bias would receive an exactly-zero gradient.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DROPOUT_RATE = 0.25
N_CLASSES = 2
ENC_BLOCKS = 5
DEC_BLOCKS = 4
BRIDGE_CHANNELS = 2

CHECKPOINT_MAGIC = b"MMIX"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor; the defaults give the 256x256, width-16 reference network."""

    input_size: int = 256
    base_width: int = 16
    n_classes: int = N_CLASSES
    bridge_enabled: bool = True
    ssl_classification_enabled: bool = True
    ssl_segmentation_enabled: bool = True

    @classmethod
    def scaled(cls, input_size: int, width_multiplier: float, **toggles) -> ArchSpec:
        return cls(input_size=input_size, base_width=max(1, int(round(16 * width_multiplier))), **toggles)

    def validate(self) -> None:
        if self.base_width < 1:
            raise ValueError("base width must be >= 1")
        if self.input_size < 32 or self.input_size % 32:
            raise ValueError(f"input extent must be a positive multiple of 32, got {self.input_size}")
        if self.n_classes != N_CLASSES:
            raise ValueError("only binary classification is supported")

    @property
    def enc_channels(self) -> list[int]:
        return [self.base_width * 2**k for k in range(ENC_BLOCKS)]

    def dec_channels(self) -> list[tuple[int, int]]:
        """(input channels, output channels) of the first conv of each decoder block."""
        enc = self.enc_channels
        pairs = []
        prev = enc[-1]
        for k in range(DEC_BLOCKS):
            skip = enc[-2 - k]
            cin = prev + skip + (BRIDGE_CHANNELS if k == 0 and self.bridge_enabled else 0)
            pairs.append((cin, skip))
            prev = skip
        return pairs


VARIANTS = {
    "UMTL": dict(bridge_enabled=False, ssl_classification_enabled=False, ssl_segmentation_enabled=False),
    "UMTL-S": dict(bridge_enabled=True, ssl_classification_enabled=False, ssl_segmentation_enabled=False),
    "UMTL-SSL": dict(bridge_enabled=False, ssl_classification_enabled=True, ssl_segmentation_enabled=False),
    "UMTL-SSL-S": dict(bridge_enabled=True, ssl_classification_enabled=True, ssl_segmentation_enabled=False),
    "MultiMix": dict(bridge_enabled=True, ssl_classification_enabled=True, ssl_segmentation_enabled=True),
}


@dataclass
class ModelParams:
    arch: ArchSpec
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def detached(self) -> ModelParams:
        """Same values, no gradient tracking (shares storage)."""
        return ModelParams(self.arch, {k: Tensor(v.data) for k, v in self.tensors.items()})

    def copy(self) -> ModelParams:
        return ModelParams(self.arch, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()})

    def astype(self, dtype) -> ModelParams:
        return ModelParams(self.arch, {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.tensors.items()})

    def with_arch(self, **changes) -> ModelParams:
        return ModelParams(replace(self.arch, **changes), self.tensors)


def param_shapes(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 1
    for k, c in enumerate(arch.enc_channels, start=1):
        shapes[f"enc.block{k}.conv1.weight"] = (c, cin, 3, 3)
        shapes[f"enc.block{k}.conv2.weight"] = (c, c, 3, 3)
        cin = c
    shapes["head.fc.weight"] = (arch.n_classes, cin)
    shapes["head.fc.bias"] = (arch.n_classes,)
    for k, (cin, cout) in enumerate(arch.dec_channels(), start=1):
        shapes[f"dec.block{k}.conv1.weight"] = (cout, cin, 3, 3)
        shapes[f"dec.block{k}.conv2.weight"] = (cout, cout, 3, 3)
    shapes["dec.final.weight"] = (1, arch.base_width, 1, 1)
    shapes["dec.final.bias"] = (1,)
    return shapes


def init_params(seed: int, arch: ArchSpec | None = None, dtype=np.float32) -> ModelParams:
    """Kaiming-uniform fan-in init with leaky-ReLU(0.2) gain; zero biases."""
    arch = arch or ArchSpec()
    arch.validate()
    rng = np.random.default_rng(seed)
    gain = math.sqrt(2.0 / (1.0 + ad.LEAKY_SLOPE**2))
    tensors = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = gain * math.sqrt(3.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return ModelParams(arch, tensors)


# --------------------------------------------------------------------------
# Forward pass
# --------------------------------------------------------------------------


@dataclass
class ForwardCache:
    skips: list[Tensor]
    bottleneck: Tensor
    pooled: Tensor
    trace: list[tuple[str, tuple, tuple]] | None = field(default=None, repr=False)


class _Tracer:
    def __init__(self, trace):
        self.trace = trace

    def __call__(self, name: str, x: Tensor, out: Tensor) -> Tensor:
        if self.trace is not None:
            self.trace.append((name, tuple(x.shape), tuple(out.shape)))
        return out


def _double_conv(params, prefix, x, rec, tag, counter, training, rng):
    for j in (1, 2):
        n = counter[0]
        y = rec(f"{tag}Conv-{n}", x, ad.conv2d(x, params[f"{prefix}.conv{j}.weight"]))
        z = rec(f"{tag}InstanceNorm-{n}", y, ad.instance_norm(y))
        x = rec(f"{tag}LReLU-{n}", z, ad.leaky_relu(z))
        counter[0] += 1
    return x


def encode(params: ModelParams, x: Tensor, training: bool = False, rng=None, trace: list | None = None) -> ForwardCache:
    """Run the shared encoder.

    Skips are the pre-pool outputs of blocks 1-4; the bottleneck is the
    pre-pool block-5 output and ``pooled`` feeds the classification head.
    """
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"encoder expects (m, 1, S, S) input, got {x.shape}")
    s = x.shape[2]
    if x.shape[3] != s or s % 32:
        raise ValueError(f"input extent must be square and divisible by 32, got {x.shape[2:]}")
    rec = _Tracer(trace)
    counter = [1]
    skips = []
    h = x
    for k in range(1, ENC_BLOCKS + 1):
        h = _double_conv(params, f"enc.block{k}", h, rec, "enc.", counter, training, rng)
        h = rec(f"enc.Dropout-{k}", h, ad.dropout(h, DROPOUT_RATE, training, rng))
        if k < ENC_BLOCKS:
            skips.append(h)
            h = rec(f"enc.Maxpool-{k}", h, ad.maxpool2(h))
        else:
            bottleneck = h
    pooled = rec(f"enc.Maxpool-{ENC_BLOCKS}", bottleneck, ad.maxpool2(bottleneck))
    return ForwardCache(skips=skips, bottleneck=bottleneck, pooled=pooled, trace=trace)


def classify(params: ModelParams, cache: ForwardCache) -> Tensor:
    rec = _Tracer(cache.trace)
    m, c = cache.pooled.shape[:2]
    a = rec("enc.Avgpool", cache.pooled, ad.reshape(ad.avgpool_global(cache.pooled), (m, c, 1, 1)))
    g = rec("enc.GAP", a, ad.reshape(a, (m, c)))
    return rec("enc.FullyConnected", g, ad.linear(g, params["head.fc.weight"], params["head.fc.bias"]))


def decode(
    params: ModelParams,
    cache: ForwardCache,
    bridge: Tensor | None = None,
    training: bool = False,
    rng=None,
) -> Tensor:
    """Decoder with skip connections; returns mask probabilities in (0, 1)."""
    if (bridge is not None) != params.arch.bridge_enabled:
        raise ValueError("bridge tensor must be supplied exactly when the bridge is enabled")
    rec = _Tracer(cache.trace)
    counter = [1]
    h = cache.bottleneck
    for k in range(1, DEC_BLOCKS + 1):
        up = rec(f"dec.Upsample-{k}", h, ad.upsample_nearest2(h))
        skip = cache.skips[-k]
        parts = [up, skip]
        if k == 1 and bridge is not None:
            if bridge.shape[2:] != up.shape[2:] or bridge.shape[1] != BRIDGE_CHANNELS:
                raise ValueError(f"bridge {bridge.shape} does not match decoder stage {up.shape}")
            parts.append(bridge)
        h = ad.concat_channels(parts)
        h = _double_conv(params, f"dec.block{k}", h, rec, "dec.", counter, training, rng)
        h = rec(f"dec.Dropout-{k}", h, ad.dropout(h, DROPOUT_RATE, training, rng))
    logits = rec("dec.FinalConv", h, ad.conv2d_1x1(h, params["dec.final.weight"], params["dec.final.bias"]))
    return ad.sigmoid(logits)


@dataclass
class JointOutputs:
    c_l: Tensor | None = None
    c_w: Tensor | None = None
    c_g: Tensor | None = None
    c_sl: Tensor | None = None
    c_su: Tensor | None = None
    s_l: Tensor | None = None
    s_u: Tensor | None = None
    saliency: Tensor | None = None


def forward_joint(params: ModelParams, batch, training: bool = True, rng=None) -> JointOutputs:
    """All predictions one training iteration needs.

    ``batch`` exposes ``x_cl``, ``x_cw``, ``x_cg``, ``x_sl`` and ``x_su`` arrays;
    an unlabeled view may be ``None`` (ablations or empty streams). Weak-view
    class probabilities are detached, since pseudo-labels carry no gradient.
    """
    from .saliency import bridge_for

    out = JointOutputs()
    cls_parts = [a for a in (batch.x_cl, batch.x_cg) if a is not None]
    if cls_parts:
        x = Tensor(np.concatenate(cls_parts, axis=0))
        logits = classify(params, encode(params, x, training, rng))
        n_l = 0 if batch.x_cl is None else len(batch.x_cl)
        if batch.x_cl is not None:
            out.c_l = ad.take_rows(logits, 0, n_l)
        if batch.x_cg is not None:
            out.c_g = ad.take_rows(logits, n_l, logits.shape[0])
    if batch.x_cw is not None:
        with ad.no_grad():
            weak = classify(params, encode(params, Tensor(batch.x_cw), training, rng))
            out.c_w = ad.stop_gradient(ad.softmax(weak))

    seg_parts = [a for a in (batch.x_sl, batch.x_su) if a is not None]
    if seg_parts:
        xs = np.concatenate(seg_parts, axis=0)
        cache = encode(params, Tensor(xs), training, rng)
        c_s = classify(params, cache)
        bridge = None
        if params.arch.bridge_enabled:
            out.saliency, bridge = bridge_for(params, xs)
        s_hat = decode(params, cache, bridge, training, rng)
        n_l = 0 if batch.x_sl is None else len(batch.x_sl)
        if batch.x_sl is not None:
            out.s_l = ad.take_rows(s_hat, 0, n_l)
            out.c_sl = ad.take_rows(c_s, 0, n_l)
        if batch.x_su is not None:
            out.s_u = ad.take_rows(s_hat, n_l, s_hat.shape[0])
            out.c_su = ad.take_rows(c_s, n_l, c_s.shape[0])
    return out


def predict(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode class probabilities and mask probabilities for a batch of images."""
    from .saliency import bridge_for

    with ad.no_grad():
        cache = encode(params, Tensor(x))
        probs = ad.softmax(classify(params, cache)).data
        bridge = bridge_for(params, x)[1] if params.arch.bridge_enabled else None
        masks = decode(params, cache, bridge).data
    return probs, masks


# --------------------------------------------------------------------------
# Checkpoint format
# --------------------------------------------------------------------------


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Little-endian: magic, u32 version, u32 count, then (u16 name len, name, u8 rank, u32 extents, f32 data)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        out[name] = data
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after {count} tensors")
    return out


def arch_from_tensors(tensors: Mapping[str, np.ndarray], input_size: int = 256) -> ArchSpec:
    try:
        width = tensors["enc.block1.conv1.weight"].shape[0]
        cin = tensors["dec.block1.conv1.weight"].shape[1]
    except KeyError as exc:
        raise CheckpointError(f"missing parameter {exc}") from None
    bridge = cin == 8 * width + 16 * width + BRIDGE_CHANNELS
    return ArchSpec(input_size=input_size, base_width=width, bridge_enabled=bridge)


def params_from_tensors(tensors: Mapping[str, np.ndarray], arch: ArchSpec | None = None) -> ModelParams:
    arch = arch or arch_from_tensors(tensors)
    expected = param_shapes(arch)
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape} != {shape}")
    return ModelParams(arch, {n: Tensor(np.array(tensors[n], dtype=np.float32), requires_grad=True, name=n) for n in expected})
