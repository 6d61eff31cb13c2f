"""Parameter storage, initialisation, quantisation and the TNW1 container."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

KIND_CODES = {"spiking_conv": 0, "conv": 1, "conv_transpose": 2, "depthwise": 3}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
TENSOR_FIELDS = ("weight", "bias", "gamma", "beta", "mean", "var")
ALLOWED_BITS = (8, 16, 24, 32)
TNW1_MAGIC = b"TNW1"


class WeightFormatError(ValueError):
    """A weight container is malformed or does not fit the network spec."""


@dataclass
class ParamUnit:
    name: str
    kind: str
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None
    quant_bits: int = 0  # 0 = unquantised
    quant_scale: float = 0.0

    @property
    def has_batchnorm(self):
        return self.gamma is not None

    def tensors(self):
        return {f: getattr(self, f) for f in TENSOR_FIELDS}


class WeightStore:
    """Ordered collection of :class:`ParamUnit`, addressable by unit name."""

    def __init__(self, units):
        self.units = list(units)
        self._index = {u.name: i for i, u in enumerate(self.units)}

    def __getitem__(self, name):
        return self.units[self._index[name]]

    def __contains__(self, name):
        return name in self._index

    def __iter__(self):
        return iter(self.units)

    def __len__(self):
        return len(self.units)

    def copy(self):
        return WeightStore(
            replace(u, **{f: None if t is None else t.copy() for f, t in u.tensors().items()})
            for u in self.units
        )

    def validate(self, spec):
        """Check unit count, order, kinds and tensor shapes against ``spec``."""
        expected = spec.units()
        if len(expected) != len(self.units):
            missing = expected[len(self.units)].name if len(expected) > len(self.units) else None
            raise WeightFormatError(
                f"store has {len(self.units)} layers, spec expects {len(expected)}"
                + (f" (first missing: {missing})" if missing else "")
            )
        for i, (eu, u) in enumerate(zip(expected, self.units)):
            if KIND_CODES[eu.kind] != KIND_CODES[u.kind]:
                raise WeightFormatError(f"layer {i} ({eu.name}): kind {u.kind} != {eu.kind}")
            if tuple(u.weight.shape) != eu.weight_shape:
                raise WeightFormatError(
                    f"layer {i} ({eu.name}): weight shape {u.weight.shape} != {eu.weight_shape}"
                )
            n_out = eu.weight_shape[1] if eu.kind == "conv_transpose" else eu.weight_shape[0]
            for f in ("bias", "gamma", "beta", "mean", "var"):
                t = getattr(u, f)
                if t is not None and t.shape != (n_out,):
                    raise WeightFormatError(f"layer {i} ({eu.name}): {f} shape {t.shape} != {(n_out,)}")
        return self

    def renamed(self, spec):
        """Attach unit names from a NetworkSpec (loaded stores carry positional names)."""
        self.validate(spec)
        units = [replace(u, name=eu.name) for eu, u in zip(spec.units(), self.units)]
        return WeightStore(units)


def init_weights(spec, random_state=None, encoder_gain=2.0):
    """Random parameters for ``spec``; batchnorm starts as the identity."""
    rng = np.random.default_rng(random_state)
    units = []
    for u in spec.units():
        shape = u.weight_shape
        if u.kind == "conv_transpose":
            fan_in = shape[0] * shape[2] * shape[3]
        else:
            fan_in = shape[1] * shape[2] * shape[3]
        gain = encoder_gain if u.spiking else np.sqrt(2.0)
        w = rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)
        n_out = shape[1] if u.kind == "conv_transpose" else shape[0]
        bn = {}
        if u.batchnorm:
            bn = dict(gamma=np.ones(n_out), beta=np.zeros(n_out), mean=np.zeros(n_out),
                      var=np.ones(n_out))
        units.append(ParamUnit(u.name, u.kind, w, np.zeros(n_out), **bn))
    return WeightStore(units)


def zero_weights(spec):
    store = init_weights(spec, 0)
    for u in store:
        for f, t in u.tensors().items():
            if t is not None and f not in ("gamma", "var"):
                t[...] = 0
    return store


def quantize_array(w, bits):
    if bits not in ALLOWED_BITS:
        raise ValueError(f"bits must be one of {ALLOWED_BITS}, got {bits}")
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    if peak == 0.0:
        return w.copy(), 0.0
    levels = 2 ** (bits - 1) - 1
    # normalise by the peak first so a subnormal peak cannot underflow the step
    return np.round(w / peak * levels) / levels * peak, peak / levels


def quantize_weights(store, bits=32):
    """Symmetric uniform per-layer quantisation of every weight tensor."""
    out = store.copy()
    for u in out:
        u.weight, u.quant_scale = quantize_array(u.weight, bits)
        u.quant_bits = bits
    return out


def fold_batchnorm(store, eps=1e-5):
    """Fuse inference-mode batchnorm into the preceding convolution."""
    out = store.copy()
    for u in out:
        if not u.has_batchnorm:
            continue
        if u.mean is None or u.var is None or u.beta is None:
            raise ValueError(f"{u.name}: incomplete batchnorm statistics")
        if (u.var <= 0).any():
            raise ValueError(f"{u.name}: batchnorm variance must be > 0")
        scale = u.gamma / np.sqrt(u.var + eps)
        if u.kind == "conv_transpose":
            u.weight = u.weight * scale[None, :, None, None]
        else:
            u.weight = u.weight * scale[:, None, None, None]
        bias = np.zeros_like(scale) if u.bias is None else u.bias
        u.bias = (bias - u.mean) * scale + u.beta
        u.gamma = u.beta = u.mean = u.var = None
    return out


# -- TNW1 container -----------------------------------------------------------


def encode_weights(store):
    parts = [TNW1_MAGIC, struct.pack("<H", len(store))]
    for u in store:
        parts.append(struct.pack("<BB", KIND_CODES[u.kind], u.quant_bits))
        for f in TENSOR_FIELDS:
            t = getattr(u, f)
            if t is None:
                parts.append(b"\x00")
                continue
            parts.append(b"\x01" + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
            parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(buf):
    mv = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(mv):
            raise WeightFormatError(f"truncated weight container at byte {pos}")
        chunk = mv[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != TNW1_MAGIC:
        raise WeightFormatError("bad magic, not a TNW1 weight container")
    (count,) = struct.unpack("<H", take(2))
    units = []
    for i in range(count):
        kind, bits = struct.unpack("<BB", take(2))
        if kind not in KIND_NAMES:
            raise WeightFormatError(f"layer {i}: unknown kind code {kind}")
        tensors = {}
        for f in TENSOR_FIELDS:
            flag = take(1)[0]
            if flag == 0:
                tensors[f] = None
                continue
            if flag != 1:
                raise WeightFormatError(f"layer {i}: bad presence flag {flag} for {f}")
            (ndim,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
            n = int(np.prod(dims, dtype=np.int64))
            data = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
            tensors[f] = data.astype(np.float64)
        if tensors["weight"] is None:
            raise WeightFormatError(f"layer {i}: weight tensor missing")
        units.append(ParamUnit(f"layer{i}", KIND_NAMES[kind], quant_bits=bits, **tensors))
    if pos != len(mv):
        raise WeightFormatError(f"{len(mv) - pos} trailing bytes after last layer")
    return WeightStore(units)


def save_weights(store, path):
    with open(path, "wb") as fh:
        fh.write(encode_weights(store))


def load_weights(path, spec=None):
    """Read a TNW1 file; with ``spec`` the store is validated and renamed."""
    with open(path, "rb") as fh:
        store = decode_weights(fh.read())
    return store.renamed(spec) if spec is not None else store
