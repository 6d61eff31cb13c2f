"""Spiking encoder / convolutional multihead decoder.

The topology lives in :class:`NetworkSpec` (serialisable as an INI-style text
config so ablation variants are file driven); parameters live in a
:class:`~spikepose.weights.WeightStore`. Arrays are batched as
``(B, T, C, H, W)`` in the encoder and ``(B, C, H, W)`` in the decoder.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import conv
from .neurons import CubaParams, PlifParams, cuba_charge, plif_charge

SPIKING_CONV = "spiking_conv"
CONV = "conv"
CONV_TRANSPOSE = "conv_transpose"
RES_BLOCK = "res_block"
SEPCONV_BLOCK = "sepconv_block"
LAYER_KINDS = (SPIKING_CONV, CONV, CONV_TRANSPOSE, RES_BLOCK, SEPCONV_BLOCK)

CUBA = "cuba"
PLIF = "plif"
ANN = "ann"

MULTIHEAD = "multi"
HEATMAPS_ONLY = "heatmaps"
HEAD_CHANNELS = {"heatmap": 13, "center": 1, "regression": 26, "offset": 26}
NUM_JOINTS = 13


class RepresentationError(ValueError):
    """Non-binary spikes reached an encoder layer past the first."""


@dataclass
class LayerSpec:
    kind: str
    kernel: int
    out_channels: int
    stride: int = 1
    dilation: int = 1
    neuron: Optional[str] = None
    batchnorm: bool = False
    upsample: int = 1
    per_head: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if self.kind == SPIKING_CONV and self.neuron not in (CUBA, PLIF, ANN):
            raise ValueError(f"spiking layer needs a neuron model, got {self.neuron!r}")

    @property
    def padding(self):
        return self.dilation * (self.kernel // 2)

    def neuron_params(self):
        if self.neuron == CUBA:
            return CubaParams(**self.params)
        if self.neuron == PLIF:
            return PlifParams(**self.params)
        return None


@dataclass
class ConvUnit:
    """One parameterised convolution with its resolved geometry."""

    name: str
    kind: str  # "spiking_conv", "conv", "conv_transpose" or "depthwise"
    c_in: int
    c_out: int
    kernel: int
    stride: int
    padding: int
    dilation: int
    h_in: int
    w_in: int
    h_out: int
    w_out: int
    bias: bool
    batchnorm: bool
    stage: int
    head: Optional[str] = None

    @property
    def groups(self):
        return self.c_in if self.kind == "depthwise" else 1

    @property
    def weight_shape(self):
        if self.kind == "conv_transpose":
            return (self.c_in, self.c_out, self.kernel, self.kernel)
        if self.kind == "depthwise":
            return (self.c_in, 1, self.kernel, self.kernel)
        return (self.c_out, self.c_in, self.kernel, self.kernel)

    @property
    def spiking(self):
        return self.kind == "spiking_conv"


@dataclass
class NetworkSpec:
    encoder: list
    decoder: list
    input_height: int = 160
    input_width: int = 160
    in_channels: int = 2
    heads: str = MULTIHEAD

    def __post_init__(self):
        if self.heads not in (MULTIHEAD, HEATMAPS_ONLY):
            raise ValueError(f"heads must be {MULTIHEAD!r} or {HEATMAPS_ONLY!r}")
        if not self.encoder:
            raise ValueError("encoder needs at least one layer")
        for i, layer in enumerate(self.encoder):
            if layer.kind != SPIKING_CONV:
                raise ValueError(f"encoder layer {i} must be {SPIKING_CONV!r}")

    @property
    def head_names(self):
        if self.heads == HEATMAPS_ONLY:
            return ("heatmap",)
        return tuple(HEAD_CHANNELS)

    @property
    def neuron(self):
        return self.encoder[0].neuron

    @property
    def latent_shape(self):
        units = self.encoder_units()
        last = units[-1]
        return (last.c_out, last.h_out, last.w_out)

    def with_neuron(self, neuron, params=None):
        """Copy with every encoder layer switched to ``neuron``."""
        enc = [
            LayerSpec(**{**asdict(l), "neuron": neuron, "params": dict(params or {})})
            for l in self.encoder
        ]
        return NetworkSpec(enc, list(self.decoder), self.input_height, self.input_width,
                           self.in_channels, self.heads)

    def with_heads(self, heads):
        return NetworkSpec(list(self.encoder), list(self.decoder), self.input_height,
                           self.input_width, self.in_channels, heads)

    # -- geometry ---------------------------------------------------------

    def encoder_units(self):
        units = []
        c, h, w = self.in_channels, self.input_height, self.input_width
        for i, l in enumerate(self.encoder):
            ho = conv.conv_output_size(h, l.kernel, l.stride, l.padding, l.dilation)
            wo = conv.conv_output_size(w, l.kernel, l.stride, l.padding, l.dilation)
            units.append(ConvUnit(f"enc{i}", "spiking_conv", c, l.out_channels, l.kernel,
                                  l.stride, l.padding, l.dilation, h, w, ho, wo,
                                  bias=True, batchnorm=False, stage=i))
            c, h, w = l.out_channels, ho, wo
        return units

    def decoder_units(self):
        """Resolve decoder stages into parameterised convolutions.

        Returns ``(units, stage_sizes)`` where ``stage_sizes`` holds the spatial
        output size of every decoder stage.
        """
        c, h, w = self.latent_shape
        units, sizes = [], []
        if not self.decoder:
            # encoder-only spec (latent probes, ops accounting)
            return units, sizes
        trunk = [l for l in self.decoder if not l.per_head]
        heads = [l for l in self.decoder if l.per_head]
        for i, l in enumerate(trunk):
            if l.kind == CONV_TRANSPOSE:
                op = l.stride - 1
                ho = conv.conv_transpose_output_size(h, l.kernel, l.stride, l.padding, op)
                wo = conv.conv_transpose_output_size(w, l.kernel, l.stride, l.padding, op)
                units.append(ConvUnit(f"dec{i}", "conv_transpose", c, l.out_channels, l.kernel,
                                      l.stride, l.padding, 1, h, w, ho, wo, True, l.batchnorm, i))
            elif l.kind == RES_BLOCK:
                if l.out_channels != c:
                    raise ValueError(f"residual block {i} must preserve {c} channels")
                hu, wu = h * l.upsample, w * l.upsample
                for sub in "ab":
                    units.append(ConvUnit(f"dec{i}.{sub}", "conv", c, c, l.kernel, 1,
                                          l.padding, l.dilation, hu, wu, hu, wu, True,
                                          l.batchnorm, i))
                ho, wo = hu, wu
            elif l.kind == CONV:
                ho = conv.conv_output_size(h, l.kernel, l.stride, l.padding, l.dilation)
                wo = conv.conv_output_size(w, l.kernel, l.stride, l.padding, l.dilation)
                units.append(ConvUnit(f"dec{i}", "conv", c, l.out_channels, l.kernel, l.stride,
                                      l.padding, l.dilation, h, w, ho, wo, True, l.batchnorm, i))
            else:
                raise ValueError(f"layer kind {l.kind!r} not allowed in the decoder trunk")
            c, h, w = l.out_channels, ho, wo
            sizes.append(ho)
        if len(heads) != 2 or heads[0].kind != SEPCONV_BLOCK or heads[1].kind != CONV:
            raise ValueError("decoder must end with a per-head separable block and a per-head conv")
        sep, out = heads
        n_trunk = len(trunk)
        for name in self.head_names:
            units.append(ConvUnit(f"head.{name}.dw", "depthwise", c, c, sep.kernel, 1,
                                  sep.padding, sep.dilation, h, w, h, w, True, False,
                                  n_trunk, name))
            units.append(ConvUnit(f"head.{name}.pw", "conv", c, sep.out_channels, 1, 1, 0, 1,
                                  h, w, h, w, True, sep.batchnorm, n_trunk, name))
            units.append(ConvUnit(f"head.{name}.out", "conv", sep.out_channels,
                                  HEAD_CHANNELS[name], out.kernel, 1, out.padding, 1,
                                  h, w, h, w, True, False, n_trunk + 1, name))
        sizes += [h, h]
        return units, sizes

    def units(self):
        return self.encoder_units() + self.decoder_units()[0]

    def layer_output_sizes(self):
        """Spatial output size per encoder layer and per decoder stage."""
        return [u.h_out for u in self.encoder_units()], self.decoder_units()[1]

    # -- text config ------------------------------------------------------

    def to_text(self):
        cp = configparser.ConfigParser()
        cp["network"] = {
            "input_height": str(self.input_height),
            "input_width": str(self.input_width),
            "in_channels": str(self.in_channels),
            "heads": self.heads,
        }
        for prefix, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, l in enumerate(layers):
                sec = {
                    "kind": l.kind,
                    "kernel": str(l.kernel),
                    "out_channels": str(l.out_channels),
                    "stride": str(l.stride),
                    "dilation": str(l.dilation),
                    "neuron": l.neuron or "none",
                    "batchnorm": str(l.batchnorm).lower(),
                    "upsample": str(l.upsample),
                    "per_head": str(l.per_head).lower(),
                }
                for k, v in l.params.items():
                    sec[f"param.{k}"] = repr(float(v))
                cp[f"{prefix}.{i}"] = sec
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text):
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if "network" not in cp:
            raise ValueError("network spec lacks a [network] section")
        net = cp["network"]

        def layers(prefix):
            out = []
            names = sorted((s for s in cp.sections() if s.startswith(prefix + ".")),
                           key=lambda s: int(s.split(".")[1]))
            for s in names:
                sec = cp[s]
                params = {k[len("param."):]: float(v) for k, v in sec.items() if k.startswith("param.")}
                neuron = sec.get("neuron", "none")
                out.append(LayerSpec(
                    kind=sec["kind"],
                    kernel=sec.getint("kernel"),
                    out_channels=sec.getint("out_channels"),
                    stride=sec.getint("stride", 1),
                    dilation=sec.getint("dilation", 1),
                    neuron=None if neuron == "none" else neuron,
                    batchnorm=sec.getboolean("batchnorm", False),
                    upsample=sec.getint("upsample", 1),
                    per_head=sec.getboolean("per_head", False),
                    params=params,
                ))
            return out

        return cls(layers("encoder"), layers("decoder"), net.getint("input_height"),
                   net.getint("input_width"), net.getint("in_channels", 2),
                   net.get("heads", MULTIHEAD))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


ENCODER_KERNELS = (5, 5, 5, 5, 3, 5, 3, 3)
ENCODER_CHANNELS = (16, 32, 32, 64, 64, 128, 128, 128)
ENCODER_SIZES = (80, 40, 20, 20, 20, 10, 10, 10)
DECODER_SIZES = (10, 20, 40, 40, 40, 40, 40)

DEFAULT_NEURON_PARAMS = {
    CUBA: {"alpha_u": 0.25, "alpha_v": 0.03, "theta": 1.0},
    PLIF: {"tau": 2.0, "theta": 1.0, "v_reset": 0.0},
    ANN: {},
}


def strides_from_sizes(input_size, sizes):
    strides, prev = [], input_size
    for s in sizes:
        if prev % s:
            raise ValueError(f"size {prev} -> {s} is not an integer downsampling")
        strides.append(prev // s)
        prev = s
    return strides


def table1_spec(neuron=PLIF, heads=MULTIHEAD, input_size=160, neuron_params=None):
    """The published encoder/decoder topology."""
    params = DEFAULT_NEURON_PARAMS[neuron] if neuron_params is None else neuron_params
    strides = strides_from_sizes(input_size, [s * input_size // 160 for s in ENCODER_SIZES])
    encoder = [
        LayerSpec(SPIKING_CONV, k, c, stride=s, neuron=neuron, params=dict(params))
        for k, c, s in zip(ENCODER_KERNELS, ENCODER_CHANNELS, strides)
    ]
    decoder = [
        LayerSpec(CONV_TRANSPOSE, 5, 64, stride=1, batchnorm=True),
        LayerSpec(RES_BLOCK, 3, 64, dilation=2, batchnorm=True, upsample=2),
        LayerSpec(CONV_TRANSPOSE, 5, 32, stride=2, batchnorm=True),
        LayerSpec(RES_BLOCK, 3, 32, dilation=2, batchnorm=True),
        LayerSpec(CONV, 3, 24, batchnorm=True),
        LayerSpec(SEPCONV_BLOCK, 3, 96, batchnorm=True, per_head=True),
        LayerSpec(CONV, 1, HEAD_CHANNELS["heatmap"], per_head=True),
    ]
    return NetworkSpec(encoder, decoder, input_size, input_size, 2, heads)


# -- head maps --------------------------------------------------------------


@dataclass
class HeadMaps:
    """Decoder outputs; arrays are ``(C, H, W)`` or batched ``(B, C, H, W)``."""

    heatmap: np.ndarray
    center: Optional[np.ndarray] = None
    regression: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None

    @property
    def batched(self):
        return self.heatmap.ndim == 4

    @property
    def map_size(self):
        return self.heatmap.shape[-2:]

    def __len__(self):
        return self.heatmap.shape[0] if self.batched else 1

    def sample(self, i):
        pick = lambda a: None if a is None else a[i]
        return HeadMaps(self.heatmap[i], pick(self.center), pick(self.regression), pick(self.offset))

    def as_dict(self):
        return {k: v for k, v in (("heatmap", self.heatmap), ("center", self.center),
                                  ("regression", self.regression), ("offset", self.offset))
                if v is not None}


# -- forward passes ---------------------------------------------------------


@dataclass
class SpikeLog:
    """Spike activity entering each encoder layer, summed over samples.

    ``input_spikes[l]`` counts active (non-zero) input sites over all time
    steps; ``exact_acs[l]`` counts the synaptic accumulations they trigger
    given the layer's padding and stride.
    """

    input_spikes: np.ndarray
    exact_acs: np.ndarray
    num_bins: int
    n_samples: int = 0
    encoder_mode: str = "snn"

    @classmethod
    def empty(cls, n_layers, num_bins, encoder_mode="snn"):
        return cls(np.zeros(n_layers), np.zeros(n_layers), num_bins, 0, encoder_mode)

    def merge(self, other):
        if other.num_bins != self.num_bins or len(other.input_spikes) != len(self.input_spikes):
            raise ValueError("cannot merge spike logs of different networks")
        return SpikeLog(self.input_spikes + other.input_spikes, self.exact_acs + other.exact_acs,
                        self.num_bins, self.n_samples + other.n_samples, self.encoder_mode)


def _as_batch(spikes):
    data = spikes if isinstance(spikes, np.ndarray) else getattr(spikes, "data", spikes)
    data = np.asarray(data)
    if data.ndim == 4:
        return data[None], False
    if data.ndim == 5:
        return data, True
    raise ValueError(f"expected (T, 2, H, W) or (B, T, 2, H, W) spikes, got shape {data.shape}")


def _fanout_grid(unit):
    fy = conv.receptive_fanout(unit.h_in, unit.kernel, unit.stride, unit.padding, unit.dilation)
    fx = conv.receptive_fanout(unit.w_in, unit.kernel, unit.stride, unit.padding, unit.dilation)
    return np.outer(fy, fx)


def _exact_ac_count(active, unit):
    """Accumulations triggered by ``active`` (..., C, H, W) boolean input sites."""
    per_site = active.sum(axis=tuple(range(active.ndim - 2)))
    return float((per_site * _fanout_grid(unit)).sum() * unit.c_out)


def _exact_ac_from_sites(ys, xs, unit):
    """:func:`_exact_ac_count` given the row/column of every active site."""
    return float(_fanout_grid(unit)[ys, xs].sum() * unit.c_out)


SPARSE_DENSITY = 0.01


def _spiking_conv(x, w, b, unit, impl, nz):
    """Convolve spikes, choosing the event-driven path for sparse input."""
    density = len(nz[0]) / max(x.size, 1)
    if impl == "sparse" or (impl == "auto" and density < SPARSE_DENSITY):
        return conv.sparse_conv2d(x, w, b, unit.stride, unit.padding, unit.dilation, nz)
    return conv.conv2d(x.astype(w.dtype, copy=False), w, b, unit.stride, unit.padding, unit.dilation)


def encoder_forward(spikes, spec, store, dtype=np.float64, conv_impl="auto"):
    """Run all time bins through the spiking encoder.

    Parameters
    ----------
    spikes : SpikeTensor or ndarray
        ``(T, 2, H, W)`` or batched ``(B, T, 2, H, W)`` input spikes; graded
        values are allowed for the first layer only.
    spec : NetworkSpec
    store : WeightStore
    dtype : numpy dtype
        ``float64`` for the reference path, ``float32`` for the fast path.
    conv_impl : {"auto", "dense", "sparse"}
        ``"auto"`` propagates only active sites when input density is low.

    Returns
    -------
    latent : ndarray
        Pre-reset membrane potential of the last layer after the final bin,
        ``(C, H, W)`` or ``(B, C, H, W)``.
    log : SpikeLog
    """
    x, batched = _as_batch(spikes)
    B, T, C, H, W = x.shape
    if (C, H, W) != (spec.in_channels, spec.input_height, spec.input_width):
        raise ValueError(
            f"input spikes {(C, H, W)} do not match network input "
            f"{(spec.in_channels, spec.input_height, spec.input_width)}"
        )
    units = spec.encoder_units()
    ann = spec.neuron == ANN
    log = SpikeLog.empty(len(units), T, "ann" if ann else "snn")
    log.n_samples = B
    x = x.astype(dtype)
    if ann:
        x = x.sum(axis=1)
    for li, (layer, unit) in enumerate(zip(spec.encoder, units)):
        p = store[unit.name]
        w = p.weight.astype(dtype)
        b = None if p.bias is None else p.bias.astype(dtype)
        last = li == len(units) - 1
        if ann:
            active = x != 0
            log.input_spikes[li] += np.count_nonzero(active)
            log.exact_acs[li] += _exact_ac_count(active, unit)
            y = conv.conv2d(x, w, b, unit.stride, unit.padding, unit.dilation)
            x = y if last else np.maximum(y, 0)
            continue
        flat = x.reshape(B * T, C, H, W)
        nz = np.nonzero(flat if flat.dtype == bool else flat != 0)
        if len(nz[0]):
            if li > 0 and flat.dtype != bool and (flat[nz] != 1).any():
                raise RepresentationError(f"layer {li} received non-binary spikes")
            log.input_spikes[li] += len(nz[0])
            log.exact_acs[li] += _exact_ac_from_sites(nz[2], nz[3], unit)
            cur = _spiking_conv(flat, w, b, unit, conv_impl, nz)
            cur = cur.reshape(B, T, unit.c_out, unit.h_out, unit.w_out)
        else:
            # silent input: the current is the bias alone
            cur = np.zeros((B, T, unit.c_out, unit.h_out, unit.w_out), dtype)
            if b is not None:
                cur += b[:, None, None]
        x, v_pre = _neuron_scan(cur, layer, dtype, keep_spikes=not last)
        C, H, W = unit.c_out, unit.h_out, unit.w_out
    latent = v_pre if not ann else x
    return (latent if batched else latent[0]), log


def _neuron_scan(cur, layer, dtype, keep_spikes=True):
    """Step neurons over the time axis of ``cur`` (B, T, C, H, W).

    Returns the spike train (or ``None``) and the final pre-reset potential.
    """
    p = layer.neuron_params()
    B, T = cur.shape[:2]
    out = np.empty(cur.shape, dtype=bool) if keep_spikes else None
    if layer.neuron == CUBA:
        u = np.zeros(cur.shape[:1] + cur.shape[2:], dtype)
        v = np.zeros_like(u)
        for t in range(T):
            u, v_pre = cuba_charge(u, v, cur[:, t], p)
            s = v_pre >= p.theta
            v = np.where(s, 0, v_pre)
            if keep_spikes:
                out[:, t] = s
    else:
        v = np.full(cur.shape[:1] + cur.shape[2:], p.v_reset, dtype)
        for t in range(T):
            v_pre = plif_charge(v, cur[:, t], p)
            s = v_pre - p.theta >= 0
            v = np.where(s, p.v_reset, v_pre)
            if keep_spikes:
                out[:, t] = s
    return out, v_pre


def _apply_bn(x, p):
    if p.gamma is None:
        return x
    return conv.batchnorm(x, p.gamma, p.beta, p.mean, p.var)


def decoder_forward(latent, spec, store, dtype=np.float64):
    """Decode a latent ``(C, H, W)`` or ``(B, C, H, W)`` into :class:`HeadMaps`."""
    x = np.asarray(latent, dtype=dtype)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if x.shape[1:] != spec.latent_shape:
        raise ValueError(f"latent shape {x.shape[1:]} does not match {spec.latent_shape}")
    units, _ = spec.decoder_units()
    by_stage = {}
    for u in units:
        by_stage.setdefault((u.stage, u.head), []).append(u)

    def get(u):
        p = store[u.name]
        return p, p.weight.astype(dtype), None if p.bias is None else p.bias.astype(dtype)

    trunk = [l for l in spec.decoder if not l.per_head]
    for i, layer in enumerate(trunk):
        stage = by_stage[(i, None)]
        if layer.kind == CONV_TRANSPOSE:
            (u,) = stage
            p, w, b = get(u)
            x = conv.conv_transpose2d(x, w, b, u.stride, u.padding, u.stride - 1)
            x = np.maximum(_apply_bn(x, p), 0)
        elif layer.kind == RES_BLOCK:
            x = conv.upsample_nearest(x, layer.upsample)
            ua, ub = stage
            pa, wa, ba = get(ua)
            pb, wb, bb = get(ub)
            y = conv.conv2d(x, wa, ba, 1, ua.padding, ua.dilation)
            y = np.maximum(_apply_bn(y, pa), 0)
            y = conv.conv2d(y, wb, bb, 1, ub.padding, ub.dilation)
            x = np.maximum(_apply_bn(y, pb) + x, 0)
        else:
            (u,) = stage
            p, w, b = get(u)
            x = conv.conv2d(x, w, b, u.stride, u.padding, u.dilation)
            x = np.maximum(_apply_bn(x, p), 0)
    outputs = {}
    for name in spec.head_names:
        dw, pw = by_stage[(len(trunk), name)]
        (fin,) = by_stage[(len(trunk) + 1, name)]
        p, w, b = get(dw)
        y = conv.depthwise_conv2d(x, w, b, 1, dw.padding, dw.dilation)
        p, w, b = get(pw)
        y = np.maximum(_apply_bn(conv.conv2d(y, w, b), p), 0)
        p, w, b = get(fin)
        y = conv.conv2d(y, w, b, 1, fin.padding)
        if name in ("heatmap", "center"):
            y = sigmoid(y)
        outputs[name] = y if batched else y[0]
    return HeadMaps(**outputs)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward(spikes, spec, store, dtype=np.float64, conv_impl="auto"):
    latent, log = encoder_forward(spikes, spec, store, dtype, conv_impl)
    return decoder_forward(latent, spec, store, dtype), log
