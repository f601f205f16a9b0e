"""The three architectures as parameter containers with forward semantics.

  baseline   point-wise MLP: widths input -> 2*input -> 64 -> 32 -> 256
             -> 1024 -> 256 -> 64 -> 1, ReLU hidden, 50% dropout after
             the first hidden layer, linear scalar output.
  multitask  the same trunk (ending at 64) with two heads: a 3-way
             softmax region classifier and a 3-wide regression head (one
             flux output per region); the reported flux is the head
             selected by the predicted class.
  conv       a dense trunk ending in a reshape to a coarse square grid,
             two strided transposed convolutions (x2 then x4), dropout,
             a periodic pad of the MLT axis (plus zero pad in latitude),
             and a final valid convolution that restores the exact grid
             size. Takes no spatial inputs; predicts the whole grid.

Checkpoints are self-describing binary files (magic AURN) holding the
architecture descriptor, a JSON metadata blob, float32 parameter blocks,
and a trailing CRC32.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, DataError
from .ingest import SPATIAL_NAMES


@dataclass(frozen=True)
class BaselineArch:
    input_width: int
    hidden: tuple[int, ...] = ()
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.input_width < 1:
            raise ValueError("input_width must be >= 1")
        if not self.hidden:
            object.__setattr__(self, "hidden", default_hidden(self.input_width))
        if any(w < 1 for w in self.hidden):
            raise ValueError("all layer widths must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_width, *self.hidden, 1)


def default_hidden(input_width: int) -> tuple[int, ...]:
    return (2 * input_width, 64, 32, 256, 1024, 256, 64)


@dataclass(frozen=True)
class MultiTaskArch:
    input_width: int
    trunk: tuple[int, ...] = ()
    n_regions: int = 3
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.input_width < 1:
            raise ValueError("input_width must be >= 1")
        if not self.trunk:
            object.__setattr__(self, "trunk", default_hidden(self.input_width))
        if any(w < 1 for w in self.trunk):
            raise ValueError("all layer widths must be >= 1")
        if self.n_regions < 2:
            raise ValueError("need at least two regions")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class ConvDecoderArch:
    """Dense trunk to a coarse grid, upsampled by two transposed convs.

    The reshape side is n_mlt / (stride1 * stride2); the final valid
    convolution needs kernel = 2 * overlap + 1 so the padded width comes
    back to exactly n_mlt (and likewise for the zero-padded latitude axis).
    """

    input_width: int
    trunk: tuple[int, ...] = (256, 64, 32)
    n_lat: int = 128
    n_mlt: int = 128
    filters: tuple[int, int] = (4, 4)
    kernels: tuple[int, int] = (9, 5)
    strides: tuple[int, int] = (2, 4)
    final_kernel: int = 7
    overlap: int = 3
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.input_width < 1:
            raise ValueError("input_width must be >= 1")
        if self.n_lat != self.n_mlt:
            raise ValueError("decoder currently requires a square grid")
        s = self.strides[0] * self.strides[1]
        if self.n_mlt % s != 0:
            raise ValueError(f"grid size {self.n_mlt} not divisible by stride product {s}")
        if self.kernels[0] < self.strides[0] or self.kernels[1] < self.strides[1]:
            raise ValueError("kernel must be at least as large as its stride")
        if self.final_kernel != 2 * self.overlap + 1:
            raise ValueError("final kernel must equal 2*overlap + 1 to restore grid size")
        if any(w < 1 for w in self.trunk):
            raise ValueError("all trunk widths must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def side(self) -> int:
        return self.n_mlt // (self.strides[0] * self.strides[1])


Arch = BaselineArch | MultiTaskArch | ConvDecoderArch

_VARIANT_OF = {BaselineArch: "baseline", MultiTaskArch: "multitask", ConvDecoderArch: "conv"}


@dataclass
class Model:
    """Architecture + parameter tensors + training metadata."""

    arch: Arch
    params: dict[str, Tensor]
    meta: dict = field(default_factory=dict)

    @property
    def variant(self) -> str:
        return _VARIANT_OF[type(self.arch)]

    def param_items(self):
        return sorted(self.params.items())

    def clone_param_data(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_param_data(self, blobs: dict[str, np.ndarray]):
        for k, v in blobs.items():
            self.params[k].data = v.copy()


# ── Initialization ────────────────────────────────────────────────────

def param_shapes(arch: Arch) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if isinstance(arch, BaselineArch):
        widths = arch.widths
        for i in range(len(widths) - 2):
            shapes[f"dense{i}.w"] = (widths[i], widths[i + 1])
            shapes[f"dense{i}.b"] = (widths[i + 1],)
        shapes["out.w"] = (widths[-2], 1)
        shapes["out.b"] = (1,)
    elif isinstance(arch, MultiTaskArch):
        widths = (arch.input_width, *arch.trunk)
        for i in range(len(widths) - 1):
            shapes[f"dense{i}.w"] = (widths[i], widths[i + 1])
            shapes[f"dense{i}.b"] = (widths[i + 1],)
        shapes["head_class.w"] = (widths[-1], arch.n_regions)
        shapes["head_class.b"] = (arch.n_regions,)
        shapes["head_flux.w"] = (widths[-1], arch.n_regions)
        shapes["head_flux.b"] = (arch.n_regions,)
    elif isinstance(arch, ConvDecoderArch):
        widths = (arch.input_width, *arch.trunk)
        for i in range(len(widths) - 1):
            shapes[f"dense{i}.w"] = (widths[i], widths[i + 1])
            shapes[f"dense{i}.b"] = (widths[i + 1],)
        shapes["to_grid.w"] = (widths[-1], arch.side * arch.side)
        shapes["to_grid.b"] = (arch.side * arch.side,)
        f1, f2 = arch.filters
        k1, k2 = arch.kernels
        shapes["deconv1.k"] = (1, f1, k1, k1)
        shapes["deconv1.b"] = (f1,)
        shapes["deconv2.k"] = (f1, f2, k2, k2)
        shapes["deconv2.b"] = (f2,)
        shapes["final.k"] = (1, f2, arch.final_kernel, arch.final_kernel)
        shapes["final.b"] = (1,)
    else:
        raise TypeError(f"unknown architecture type {type(arch)!r}")
    return shapes


def init_params(arch: Arch, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """He-style init for ReLU-fed weights, smaller scale for linear outputs."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif name.endswith(".k"):
            # transposed-conv kernels store c_in first, the plain conv kernel c_out
            c_in = shape[0] if name.startswith("deconv") else shape[1]
            fan_in = c_in * shape[2] * shape[3]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            fan_in = shape[0]
            gain = 1.0 if name.startswith(("out", "head", "to_grid")) else 2.0
            data = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


def build_model(arch: Arch, seed: int = 0, dtype=np.float32, meta: dict | None = None) -> Model:
    return Model(arch=arch, params=init_params(arch, seed, dtype), meta=meta or {})


def warm_start_output(model: Model, base_level: float):
    """Set the regression output bias to a base level (typically the mean
    training target) so optimization starts at the right scale."""
    name = {
        "baseline": "out.b",
        "multitask": "head_flux.b",
        "conv": "final.b",
    }[model.variant]
    tensor = model.params[name]
    tensor.data[:] = np.asarray(base_level, dtype=tensor.data.dtype)


# ── Forward passes ────────────────────────────────────────────────────

def _as_input(x, params: dict[str, Tensor]) -> Tensor:
    dtype = next(iter(params.values())).data.dtype
    if isinstance(x, Tensor):
        if x.data.dtype != dtype:
            return Tensor(x.data.astype(dtype))
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_width(x: Tensor, width: int):
    if x.data.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"expected input [n, {width}], got {x.shape}")


def _mlp_trunk(widths_count, params, h, arch_dropout, tape, training, dropout_rng):
    for i in range(widths_count):
        h = ad.dense(h, params[f"dense{i}.w"], params[f"dense{i}.b"], tape)
        h = ad.relu(h, tape)
        if i == 0 and arch_dropout > 0:
            h = ad.dropout(h, arch_dropout, training, dropout_rng, tape)
    return h


def forward_baseline(
    arch: BaselineArch,
    params: dict[str, Tensor],
    x,
    tape: Tape | None = None,
    training: bool = False,
    dropout_rng=None,
) -> Tensor:
    """Point-wise flux regression: returns a [n] tensor of log10 flux."""
    h = _as_input(x, params)
    _check_width(h, arch.input_width)
    n = h.shape[0]
    h = _mlp_trunk(len(arch.hidden), params, h, arch.dropout_rate, tape, training, dropout_rng)
    y = ad.dense(h, params["out.w"], params["out.b"], tape)
    return ad.reshape(y, (n,), tape)


def forward_multitask(
    arch: MultiTaskArch,
    params: dict[str, Tensor],
    x,
    tape: Tape | None = None,
    training: bool = False,
    dropout_rng=None,
) -> tuple[Tensor, Tensor, np.ndarray]:
    """Returns (class_probs [n,3], region_flux [n,3], selected_flux [n]).

    selected_flux picks, per row, the regression head at the argmax class
    probability; ties break to the lowest class index.
    """
    h = _as_input(x, params)
    _check_width(h, arch.input_width)
    h = _mlp_trunk(len(arch.trunk), params, h, arch.dropout_rate, tape, training, dropout_rng)
    logits = ad.dense(h, params["head_class.w"], params["head_class.b"], tape)
    probs = ad.softmax(logits, tape)
    flux = ad.dense(h, params["head_flux.w"], params["head_flux.b"], tape)
    sel = np.argmax(probs.data, axis=1)
    selected = flux.data[np.arange(flux.shape[0]), sel]
    return probs, flux, selected


def forward_convdecoder(
    arch: ConvDecoderArch,
    params: dict[str, Tensor],
    x,
    tape: Tape | None = None,
    training: bool = False,
    dropout_rng=None,
) -> Tensor:
    """One full [n_lat, n_mlt] grid per input row of global features."""
    h = _as_input(x, params)
    _check_width(h, arch.input_width)
    n = h.shape[0]
    h = _mlp_trunk(len(arch.trunk), params, h, arch.dropout_rate, tape, training, dropout_rng)
    h = ad.dense(h, params["to_grid.w"], params["to_grid.b"], tape)
    h = ad.reshape(h, (n, 1, arch.side, arch.side), tape)
    h = ad.conv2d_transpose(h, params["deconv1.k"], arch.strides[0], tape)
    h = ad.add_channel_bias(h, params["deconv1.b"], tape)
    h = ad.relu(h, tape)
    h = ad.conv2d_transpose(h, params["deconv2.k"], arch.strides[1], tape)
    h = ad.add_channel_bias(h, params["deconv2.b"], tape)
    h = ad.relu(h, tape)
    h = ad.dropout(h, arch.dropout_rate, training, dropout_rng, tape)
    h = ad.pad_periodic_mlt(h, arch.overlap, tape)
    h = ad.pad_zero_lat(h, arch.overlap, tape)
    h = ad.conv2d(h, params["final.k"], tape)
    h = ad.add_channel_bias(h, params["final.b"], tape)
    return ad.reshape(h, (n, arch.n_lat, arch.n_mlt), tape)


def assert_global_only(feature_names):
    """The conv decoder must not see spatial inputs; reject schemas that do."""
    bad = [n for n in feature_names if n in SPATIAL_NAMES]
    if bad:
        raise ConfigError(
            f"conv decoder takes no spatial inputs, found {', '.join(bad)} in schema"
        )


def predict_point(model: Model, rows: np.ndarray) -> np.ndarray:
    """Flux prediction [n] for normalized feature rows (baseline or multitask)."""
    if isinstance(model.arch, BaselineArch):
        return forward_baseline(model.arch, model.params, rows).data.astype(np.float64)
    if isinstance(model.arch, MultiTaskArch):
        _, _, selected = forward_multitask(model.arch, model.params, rows)
        return selected.astype(np.float64)
    raise ValueError("predict_point requires a point model")


# ── Checkpoint serialization (magic AURN) ─────────────────────────────

_MAGIC = b"AURN"
_VERSION = 1
_VARIANT_TAGS = {"baseline": 0, "multitask": 1, "conv": 2}
_TAG_VARIANTS = {v: k for k, v in _VARIANT_TAGS.items()}


def _w_widths(buf: bytearray, widths):
    buf += struct.pack("<H", len(widths))
    for w in widths:
        buf += struct.pack("<I", w)


def _r_widths(view, off):
    (n,) = struct.unpack_from("<H", view, off)
    off += 2
    widths = struct.unpack_from(f"<{n}I", view, off)
    return tuple(widths), off + 4 * n


def _pack_arch(arch: Arch) -> bytes:
    buf = bytearray()
    if isinstance(arch, BaselineArch):
        buf += struct.pack("<I", arch.input_width)
        _w_widths(buf, arch.hidden)
        buf += struct.pack("<f", arch.dropout_rate)
    elif isinstance(arch, MultiTaskArch):
        buf += struct.pack("<I", arch.input_width)
        _w_widths(buf, arch.trunk)
        buf += struct.pack("<Bf", arch.n_regions, arch.dropout_rate)
    elif isinstance(arch, ConvDecoderArch):
        buf += struct.pack("<I", arch.input_width)
        _w_widths(buf, arch.trunk)
        buf += struct.pack(
            "<IIBBBBBBBBf",
            arch.n_lat,
            arch.n_mlt,
            arch.filters[0],
            arch.filters[1],
            arch.kernels[0],
            arch.kernels[1],
            arch.strides[0],
            arch.strides[1],
            arch.final_kernel,
            arch.overlap,
            arch.dropout_rate,
        )
    return bytes(buf)


def _unpack_arch(tag: int, view, off):
    variant = _TAG_VARIANTS.get(tag)
    if variant is None:
        raise DataError(f"unknown architecture tag {tag}")
    (input_width,) = struct.unpack_from("<I", view, off)
    off += 4
    widths, off = _r_widths(view, off)
    if variant == "baseline":
        (rate,) = struct.unpack_from("<f", view, off)
        off += 4
        return BaselineArch(input_width, widths, float(np.float32(rate))), off
    if variant == "multitask":
        n_regions, rate = struct.unpack_from("<Bf", view, off)
        off += 5
        return MultiTaskArch(input_width, widths, n_regions, float(np.float32(rate))), off
    n_lat, n_mlt, f1, f2, k1, k2, s1, s2, fk, ov, rate = struct.unpack_from("<IIBBBBBBBBf", view, off)
    off += 8 + 8 + 4
    arch = ConvDecoderArch(
        input_width=input_width,
        trunk=widths,
        n_lat=n_lat,
        n_mlt=n_mlt,
        filters=(f1, f2),
        kernels=(k1, k2),
        strides=(s1, s2),
        final_kernel=fk,
        overlap=ov,
        dropout_rate=float(np.float32(rate)),
    )
    return arch, off


def save_checkpoint(model: Model, path):
    """Write arch descriptor, canonical-JSON metadata, f32 params, CRC32."""
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<HB", _VERSION, _VARIANT_TAGS[model.variant])
    buf += _pack_arch(model.arch)
    meta_raw = json.dumps(model.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf += struct.pack("<I", len(meta_raw)) + meta_raw
    items = model.param_items()
    buf += struct.pack("<H", len(items))
    for name, tensor in items:
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        arr = tensor.data
        buf += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            buf += struct.pack("<I", d)
        buf += arr.astype("<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise DataError(f"{path}: truncated checkpoint")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise DataError(f"{path}: checkpoint CRC mismatch")
    view = memoryview(payload)
    if bytes(view[:4]) != _MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    try:
        version, tag = struct.unpack_from("<HB", view, 4)
        if version != _VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        arch, off = _unpack_arch(tag, view, 7)
        (meta_len,) = struct.unpack_from("<I", view, off)
        off += 4
        meta = json.loads(bytes(view[off : off + meta_len]).decode("utf-8"))
        off += meta_len
        (n_params,) = struct.unpack_from("<H", view, off)
        off += 2
        params: dict[str, Tensor] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off : off + name_len]).decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", view, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", view, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(view, dtype="<f4", count=count, offset=off)
            off += 4 * count
            params[name] = Tensor(
                data.reshape(shape).astype(np.float32), requires_grad=True
            )
    except (struct.error, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(payload):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    expected = param_shapes(arch)
    if set(expected) != set(params):
        raise DataError(f"{path}: parameter names do not match declared architecture")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise DataError(
                f"{path}: declared-shape mismatch for {name}: "
                f"{params[name].shape} vs {shape}"
            )
    return Model(arch=arch, params=params, meta=meta)


ARCH_CONFIG_KEYS = {
    "arch": str,
    "arch.hidden": str,
    "arch.dropout": float,
    "arch.grid": int,
    "arch.filters": str,
    "arch.kernels": str,
    "arch.strides": str,
    "arch.overlap": int,
}


def arch_from_config(cfg, input_width: int) -> Arch:
    """Construct the configured architecture for a given feature width."""
    kind = cfg.get("arch", "baseline")
    dropout = float(cfg.get("arch.dropout", 0.5))

    def int_tuple(key):
        return tuple(int(v) for v in cfg[key].split(",") if v.strip())

    try:
        if kind == "baseline":
            hidden = int_tuple("arch.hidden") if "arch.hidden" in cfg else ()
            return BaselineArch(input_width, hidden, dropout)
        if kind == "multitask":
            hidden = int_tuple("arch.hidden") if "arch.hidden" in cfg else ()
            return MultiTaskArch(input_width, hidden, 3, dropout)
        if kind == "conv":
            kwargs: dict = {"input_width": input_width, "dropout_rate": dropout}
            if "arch.hidden" in cfg:
                kwargs["trunk"] = int_tuple("arch.hidden")
            if "arch.grid" in cfg:
                kwargs["n_lat"] = kwargs["n_mlt"] = int(cfg["arch.grid"])
            if "arch.filters" in cfg:
                kwargs["filters"] = int_tuple("arch.filters")
            if "arch.kernels" in cfg:
                kwargs["kernels"] = int_tuple("arch.kernels")
            if "arch.strides" in cfg:
                kwargs["strides"] = int_tuple("arch.strides")
            if "arch.overlap" in cfg:
                ov = int(cfg["arch.overlap"])
                kwargs["overlap"] = ov
                kwargs["final_kernel"] = 2 * ov + 1
            return ConvDecoderArch(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown arch {kind!r}")
