"""Multihead losses and surrogate-gradient BPTT for toy-scale spiking networks.

Gradients are derived by hand. The spike nonlinearity is a Heaviside step in
the forward pass and is replaced by a surrogate derivative in the backward
pass. For gradient checking, ``spike_fn="smooth"`` swaps the forward step
for the surrogate's antiderivative so that finite differences see exactly
the function being differentiated.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import conv
from .network import CUBA, HEAD_CHANNELS, HEATMAPS_ONLY, MULTIHEAD, NUM_JOINTS, PLIF, HeadMaps, sigmoid
from .neurons import CubaParams, PlifParams
from .events import BinningConfig, bin_events, rescale_events
from .posedecode import DecodeConfig, EncodeConfig, Pose, decode_pose, encode_ground_truth
from .synthetic import SyntheticSceneConfig, generate_synthetic
from .weights import ParamUnit, WeightStore, quantize_array

logger = logging.getLogger(__name__)

RECTANGULAR = "rectangular"
FAST_SIGMOID = "fast_sigmoid"
HEAD_ORDER = ("heatmap", "center", "regression", "offset")


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


class ToyScaleError(ValueError):
    """A network exceeds the configured toy-scale limits."""


# -- surrogate spike ---------------------------------------------------------


@dataclass(frozen=True)
class SurrogateConfig:
    kind: str = FAST_SIGMOID
    param: float = 10.0  # window width (rectangular) or steepness (fast sigmoid)

    def __post_init__(self):
        if self.kind not in (RECTANGULAR, FAST_SIGMOID):
            raise ValueError(f"unknown surrogate {self.kind!r}")
        if not self.param > 0:
            raise ValueError("surrogate parameter must be > 0")


def spike_surrogate_grad(v, theta, cfg=None):
    """Stand-in derivative of the spike step at membrane value ``v``."""
    cfg = cfg or SurrogateConfig()
    d = np.asarray(v, dtype=np.float64) - theta
    if cfg.kind == RECTANGULAR:
        w = cfg.param
        return np.where(np.abs(d) < w / 2, 1.0 / w, 0.0)
    k = cfg.param
    return k / (1.0 + k * np.abs(d)) ** 2


def smooth_spike(v, theta, cfg=None):
    """Antiderivative of :func:`spike_surrogate_grad` (zero at -inf)."""
    cfg = cfg or SurrogateConfig()
    d = np.asarray(v, dtype=np.float64) - theta
    if cfg.kind == RECTANGULAR:
        w = cfg.param
        return np.clip((d + w / 2) / w, 0.0, 1.0)
    k = cfg.param
    return np.where(d < 0, 1.0 / (1.0 + k * np.abs(d)), 2.0 - 1.0 / (1.0 + k * np.abs(d)))


# -- losses ------------------------------------------------------------------


@dataclass
class LossConfig:
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    head_weights: tuple = (1.0, 1.0, 1.0, 1.0)  # heatmap, center, regression, offset
    curriculum_epochs: int = 1
    center_lambda: float = 10.0
    eps: float = 1e-6

    def __post_init__(self):
        if len(self.head_weights) != 4 or min(self.head_weights) < 0:
            raise ValueError("head_weights must be four non-negative numbers")
        if self.curriculum_epochs < 0:
            raise ValueError("curriculum_epochs must be >= 0")


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def focal_loss(pred, gt, alpha=2.0, beta=4.0, eps=1e-6, return_grad=False):
    """Penalty-reduced focal loss over probability maps.

    Sites with ``gt == 1`` are positives; every other site is a negative
    whose penalty is damped by ``(1 - gt)**beta``. The sum is normalised by
    the number of positives (at least one).
    """
    _check_shapes(pred, gt)
    p = np.clip(pred, eps, 1.0 - eps)
    pos = gt == 1.0
    neg_w = (1.0 - gt) ** beta
    n_pos = max(int(pos.sum()), 1)
    pos_terms = -((1.0 - p) ** alpha) * np.log(p)
    neg_terms = -neg_w * p**alpha * np.log1p(-p)
    loss = float(np.where(pos, pos_terms, neg_terms).sum() / n_pos)
    if not return_grad:
        return loss
    d_pos = alpha * (1.0 - p) ** (alpha - 1) * np.log(p) - (1.0 - p) ** alpha / p
    d_neg = -neg_w * (alpha * p ** (alpha - 1) * np.log1p(-p) - p**alpha / (1.0 - p))
    inside = (pred > eps) & (pred < 1.0 - eps)
    grad = np.where(pos, d_pos, d_neg) * inside / n_pos
    return loss, grad


def center_loss(pred, gt, lam=10.0, return_grad=False):
    """Mean squared error weighted by ``1 + lam * gt``."""
    _check_shapes(pred, gt)
    w = 1.0 + lam * gt
    r = pred - gt
    loss = float((w * r**2).mean())
    if not return_grad:
        return loss
    return loss, 2.0 * w * r / r.size


def masked_mse(pred, gt, cy, cx, return_grad=False):
    """Mean squared error over channels at the single site ``(cy, cx)``."""
    _check_shapes(pred, gt)
    r = pred[:, cy, cx] - gt[:, cy, cx]
    loss = float((r**2).mean())
    if not return_grad:
        return loss
    grad = np.zeros_like(pred)
    grad[:, cy, cx] = 2.0 * r / r.size
    return loss, grad


def center_site(targets):
    m_w = targets.center.shape[-1]
    return divmod(int(np.argmax(targets.center[0])), m_w)


def multihead_loss(maps, targets, cfg=None, epoch=0, return_grad=False):
    """Weighted sum of per-head losses.

    Returns ``(total, breakdown)`` or, with ``return_grad``, also a dict of
    gradients w.r.t. each head map. Regression and offset terms are zero for
    epochs before ``cfg.curriculum_epochs``.
    """
    cfg = cfg or LossConfig()
    wh, wc, wr, wo = cfg.head_weights
    warm = epoch < cfg.curriculum_epochs
    breakdown, grads = {}, {}
    _check_shapes(maps.heatmap, targets.heatmap)
    l, g = focal_loss(maps.heatmap, targets.heatmap, cfg.focal_alpha, cfg.focal_beta, cfg.eps,
                      return_grad=True)
    breakdown["heatmap"], grads["heatmap"] = wh * l, wh * g
    if maps.center is not None:
        l, g = center_loss(maps.center, targets.center, cfg.center_lambda, return_grad=True)
        breakdown["center"], grads["center"] = wc * l, wc * g
        cy, cx = center_site(targets)
        for name, w in (("regression", wr), ("offset", wo)):
            pred, tgt = getattr(maps, name), getattr(targets, name)
            l, g = masked_mse(pred, tgt, cy, cx, return_grad=True)
            if warm:
                breakdown[name], grads[name] = 0.0, np.zeros_like(g)
            else:
                breakdown[name], grads[name] = w * l, w * g
    total = float(sum(breakdown.values()))
    if return_grad:
        return total, breakdown, grads
    return total, breakdown


# -- toy network -------------------------------------------------------------


@dataclass
class ToyNetConfig:
    """A spiking encoder of one or two conv layers plus one multihead conv.

    The encoder's last layer is read out as its pre-reset membrane potential
    after the final time bin.
    """

    input_size: int = 16
    num_bins: int = 8
    enc_channels: tuple = (8, 16)
    enc_kernels: tuple = (3, 3)
    enc_strides: tuple = (2, 1)
    head_kernel: int = 3
    neuron: str = PLIF
    neuron_params: dict = field(default_factory=dict)
    heads: str = MULTIHEAD
    max_layers: int = 3
    max_size: int = 16
    max_bins: int = 8

    def __post_init__(self):
        self.enc_channels = tuple(self.enc_channels)
        self.enc_kernels = tuple(self.enc_kernels)
        self.enc_strides = tuple(self.enc_strides)
        if not len(self.enc_channels) == len(self.enc_kernels) == len(self.enc_strides):
            raise ValueError("encoder channel, kernel and stride lists differ in length")
        if self.neuron not in (CUBA, PLIF):
            raise ValueError(f"toy networks use {CUBA!r} or {PLIF!r} neurons")
        if len(self.enc_channels) + 1 > self.max_layers:
            raise ToyScaleError(f"toy network limited to {self.max_layers} layers")
        if self.input_size > self.max_size:
            raise ToyScaleError(f"toy maps limited to {self.max_size}x{self.max_size}")
        if self.num_bins > self.max_bins:
            raise ToyScaleError(f"toy windows limited to {self.max_bins} time steps")
        if self.input_size % self.downsample_factor:
            raise ValueError("input size must be divisible by the total encoder stride")

    @property
    def downsample_factor(self):
        return int(np.prod(self.enc_strides))

    @property
    def map_size(self):
        return self.input_size // self.downsample_factor

    @property
    def head_names(self):
        return ("heatmap",) if self.heads == HEATMAPS_ONLY else HEAD_ORDER

    @property
    def head_channels(self):
        return sum(HEAD_CHANNELS[h] for h in self.head_names)

    def base_params(self):
        defaults = {CUBA: {"alpha_u": 0.25, "alpha_v": 0.03, "theta": 1.0},
                    PLIF: {"theta": 1.0, "v_reset": 0.0}}[self.neuron]
        return {**defaults, **{k: v for k, v in self.neuron_params.items() if k != "tau"}}

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def tau_from_raw(raw):
    """Membrane time constant ``1 / sigmoid(raw)``, always > 1."""
    with np.errstate(over="ignore"):
        return 1.0 + np.exp(-raw)


def init_toy_params(cfg, random_state=None, gain=3.0):
    rng = np.random.default_rng(random_state)
    params = {}
    c_in = 2
    tau0 = cfg.neuron_params.get("tau", 2.0)
    for i, (c, k) in enumerate(zip(cfg.enc_channels, cfg.enc_kernels)):
        params[f"enc{i}.w"] = rng.normal(0, gain / np.sqrt(c_in * k * k), (c, c_in, k, k))
        params[f"enc{i}.b"] = np.zeros(c)
        if cfg.neuron == PLIF:
            params[f"enc{i}.tau_raw"] = np.array(-np.log(tau0 - 1.0))
        c_in = c
    k = cfg.head_kernel
    params["head.w"] = rng.normal(0, 1.0 / np.sqrt(c_in * k * k), (cfg.head_channels, c_in, k, k))
    params["head.b"] = np.zeros(cfg.head_channels)
    return params


def _split_heads(out, cfg):
    maps, pos = {}, 0
    for name in cfg.head_names:
        n = HEAD_CHANNELS[name]
        maps[name] = out[pos : pos + n]
        pos += n
    return maps


def _fire(d, spike_fn, surrogate):
    if spike_fn == "smooth":
        return smooth_spike(d, 0.0, surrogate)
    return (d >= 0).astype(np.float64)


def toy_forward(params, cfg, spikes, surrogate=None, spike_fn="heaviside"):
    """Forward pass; returns ``(HeadMaps, cache)``."""
    x = np.asarray(getattr(spikes, "data", spikes), dtype=np.float64)
    if x.shape != (cfg.num_bins, 2, cfg.input_size, cfg.input_size):
        raise ValueError(f"toy input must be {(cfg.num_bins, 2, cfg.input_size, cfg.input_size)}, got {x.shape}")
    base = cfg.base_params()
    layers = []
    n_enc = len(cfg.enc_channels)
    for i in range(n_enc):
        w, b = params[f"enc{i}.w"], params[f"enc{i}.b"]
        k, s = cfg.enc_kernels[i], cfg.enc_strides[i]
        cur = conv.conv2d(x, w, b, s, k // 2)
        T = cur.shape[0]
        rec = {"input": x, "cur": cur}
        if cfg.neuron == CUBA:
            p = CubaParams(**base)
            u = np.zeros(cur.shape[1:])
            v = np.zeros_like(u)
            us, vpre, ss, vprev = [], [], [], []
            for t in range(T):
                vprev.append(v)
                u = (1 - p.alpha_u) * u + cur[t]
                vp = (1 - p.alpha_v) * v + u
                s_ = _fire(vp - p.theta, spike_fn, surrogate)
                v = vp * (1 - s_)
                us.append(u), vpre.append(vp), ss.append(s_)
            rec.update(params=p, pre=np.array(vpre), spikes=np.array(ss))
        else:
            tau = float(tau_from_raw(params[f"enc{i}.tau_raw"]))
            p = PlifParams(tau=tau, **base)
            v = np.full(cur.shape[1:], p.v_reset)
            hs, ss, vprev = [], [], []
            for t in range(T):
                vprev.append(v)
                h = v + (cur[t] - (v - p.v_reset)) / tau
                s_ = _fire(h - p.theta, spike_fn, surrogate)
                v = h * (1 - s_) + p.v_reset * s_
                hs.append(h), ss.append(s_)
            rec.update(params=p, pre=np.array(hs), spikes=np.array(ss), vprev=np.array(vprev))
        layers.append(rec)
        x = rec["spikes"]
    latent = layers[-1]["pre"][-1]
    k = cfg.head_kernel
    out = conv.conv2d(latent[None], params["head.w"], params["head.b"], 1, k // 2)[0]
    heads = _split_heads(out, cfg)
    for name in ("heatmap", "center"):
        if name in heads:
            heads[name] = sigmoid(heads[name])
    cache = {"layers": layers, "latent": latent, "heads": heads}
    return HeadMaps(**heads), cache


def neuron_scan_backward(rec, neuron, g_spikes, g_pre, surrogate=None):
    """Reverse-time pass through one neuron layer.

    ``g_spikes`` and ``g_pre`` are upstream gradients w.r.t. the emitted
    spikes and the pre-reset potentials, both (T, ...). Returns the gradient
    w.r.t. the layer's input current (T, ...) and, for PLIF, w.r.t. tau.
    """
    p = rec["params"]
    pre, s = rec["pre"], rec["spikes"]
    T = pre.shape[0]
    g_cur = np.zeros_like(pre)
    g_tau = 0.0
    if neuron == CUBA:
        gu_next = np.zeros_like(pre[0])
        gv_next = np.zeros_like(pre[0])
        for t in range(T - 1, -1, -1):
            g_s = g_spikes[t] - gv_next * pre[t]
            g_vp = g_pre[t] + gv_next * (1 - s[t]) + g_s * spike_surrogate_grad(pre[t], p.theta, surrogate)
            g_u = g_vp + gu_next
            g_cur[t] = g_u
            gu_next = g_u * (1 - p.alpha_u)
            gv_next = g_vp * (1 - p.alpha_v)
        return g_cur, None
    tau = p.tau
    gv_next = np.zeros_like(pre[0])
    for t in range(T - 1, -1, -1):
        g_s = g_spikes[t] + gv_next * (p.v_reset - pre[t])
        g_h = g_pre[t] + gv_next * (1 - s[t]) + g_s * spike_surrogate_grad(pre[t], p.theta, surrogate)
        g_cur[t] = g_h / tau
        drive = rec["cur"][t] - (rec["vprev"][t] - p.v_reset)
        g_tau += float((g_h * (-drive / tau**2)).sum())
        gv_next = g_h * (1 - 1 / tau)
    return g_cur, g_tau


def backward_bptt(params, cfg, spikes, targets, loss_cfg=None, epoch=0, surrogate=None,
                  spike_fn="heaviside"):
    """Loss and gradients w.r.t. every parameter, unrolled over all time bins.

    Returns ``(total, breakdown, grads)``.
    """
    maps, cache = toy_forward(params, cfg, spikes, surrogate, spike_fn)
    total, breakdown, gmaps = multihead_loss(maps, targets, loss_cfg, epoch, return_grad=True)
    grads = {}
    g_out = []
    for name in cfg.head_names:
        g = gmaps[name]
        if name in ("heatmap", "center"):
            pm = cache["heads"][name]
            g = g * pm * (1 - pm)
        g_out.append(g)
    g_out = np.concatenate(g_out)[None]
    k = cfg.head_kernel
    g_lat, grads["head.w"], grads["head.b"] = conv.conv2d_backward(
        cache["latent"][None], params["head.w"], g_out, 1, k // 2)
    layers = cache["layers"]
    n_enc = len(layers)
    g_spk = np.zeros_like(layers[-1]["spikes"])
    g_pre = np.zeros_like(layers[-1]["pre"])
    g_pre[-1] = g_lat[0]
    for i in range(n_enc - 1, -1, -1):
        rec = layers[i]
        g_cur, g_tau = neuron_scan_backward(rec, cfg.neuron, g_spk, g_pre, surrogate)
        if cfg.neuron == PLIF:
            raw = params[f"enc{i}.tau_raw"]
            # d tau / d raw = -exp(-raw)
            grads[f"enc{i}.tau_raw"] = np.array(g_tau * -np.exp(-raw))
        kk, s = cfg.enc_kernels[i], cfg.enc_strides[i]
        g_in, grads[f"enc{i}.w"], grads[f"enc{i}.b"] = conv.conv2d_backward(
            rec["input"], params[f"enc{i}.w"], g_cur, s, kk // 2)
        if i > 0:
            g_spk = g_in
            g_pre = np.zeros_like(layers[i - 1]["pre"])
    return total, breakdown, grads


def toy_loss(params, cfg, spikes, targets, loss_cfg=None, epoch=0, surrogate=None,
             spike_fn="heaviside"):
    maps, _ = toy_forward(params, cfg, spikes, surrogate, spike_fn)
    return multihead_loss(maps, targets, loss_cfg, epoch)[0]


# -- training loop -----------------------------------------------------------


def make_toy_dataset(net_cfg, scene=None, n_windows=1, start_us=200_000, sigma=1.0):
    """Bin synthetic windows to toy resolution and encode their poses as targets.

    Each target is the ground-truth pose at the end of its window, scaled to
    the toy input resolution. Returns ``[(spikes, targets, pose), ...]``.
    """
    if scene is None:
        scene = SyntheticSceneConfig(width=64, height=64, duration_us=start_us + 10_000 * n_windows,
                                     noise_rate=0.0)
    stream, gt_t, gt_xy = generate_synthetic(scene)
    size = net_cfg.input_size
    bcfg = BinningConfig(num_bins=net_cfg.num_bins, model_width=size, model_height=size,
                         sensor_width=scene.width, sensor_height=scene.height)
    stream = rescale_events(stream, bcfg)
    ecfg = EncodeConfig(sigma, net_cfg.map_size, net_cfg.downsample_factor)
    scale = np.array([size / scene.width, size / scene.height])
    data = []
    for k in range(n_windows):
        w0 = start_us + k * bcfg.window_us
        spikes = bin_events(stream.time_slice(w0, w0 + bcfg.window_us), w0, bcfg)
        t_end = w0 + bcfg.window_us
        xy = gt_xy[int(np.searchsorted(gt_t, t_end))] * scale
        pose = Pose(xy, timestamp_us=t_end)
        targets = encode_ground_truth(pose, ecfg, net_cfg.head_names)
        data.append((spikes.data, targets, pose))
    return data


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.2
    loss: LossConfig = field(default_factory=LossConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    quantize_bits: int = 0  # 0 disables per-epoch weight quantisation
    seed: int = 0


@dataclass
class ToyTrainResult:
    params: dict
    config: ToyNetConfig
    losses: list
    breakdowns: list

    def loss_table(self, sep=","):
        cols = ("epoch", "total") + HEAD_ORDER
        rows = [sep.join(cols)]
        for e, (tot, br) in enumerate(zip(self.losses, self.breakdowns)):
            rows.append(sep.join([str(e), repr(tot)] + [repr(br.get(h, 0.0)) for h in HEAD_ORDER]))
        return "\n".join(rows) + "\n"

    def to_weight_store(self):
        return toy_weight_store(self.params, self.config)


def toy_weight_store(params, cfg):
    units = [ParamUnit(f"enc{i}", "spiking_conv", params[f"enc{i}.w"], params[f"enc{i}.b"])
             for i in range(len(cfg.enc_channels))]
    units.append(ParamUnit("head", "conv", params["head.w"], params["head.b"]))
    return WeightStore(units)


def toy_params_from_store(store, cfg, taus=None):
    params = {}
    for i in range(len(cfg.enc_channels)):
        u = store.units[i]
        params[f"enc{i}.w"], params[f"enc{i}.b"] = u.weight, u.bias
        if cfg.neuron == PLIF:
            tau = (taus or {}).get(i, cfg.neuron_params.get("tau", 2.0))
            params[f"enc{i}.tau_raw"] = np.array(-np.log(tau - 1.0))
    params["head.w"], params["head.b"] = store.units[-1].weight, store.units[-1].bias
    return params


def sgd_step(params, grads, lr):
    return {k: v - lr * grads[k] for k, v in params.items()}


def _check_params(params, epoch):
    for k, v in params.items():
        if not np.isfinite(v).all():
            raise TrainingDivergedError(f"parameter {k} became non-finite at epoch {epoch}")
        # tau = 1 + exp(-raw) rounds to exactly 1 once raw is large
        if k.endswith("tau_raw") and not tau_from_raw(v) > 1.0:
            raise TrainingDivergedError(f"{k} drove tau to 1 at epoch {epoch}")


def train_toy(dataset, net_cfg, train_cfg=None, params=None):
    """Plain per-sample SGD over ``dataset`` = [(spikes, targets), ...].

    Returns a :class:`ToyTrainResult` with one mean loss per epoch.
    """
    train_cfg = train_cfg or TrainConfig()
    if params is None:
        params = init_toy_params(net_cfg, train_cfg.seed)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    rng = np.random.default_rng(train_cfg.seed)
    losses, breakdowns = [], []
    for epoch in range(train_cfg.epochs):
        tot, br = 0.0, {}
        for idx in rng.permutation(len(dataset)):
            spikes, targets = dataset[idx][:2]
            loss, b, grads = backward_bptt(params, net_cfg, spikes, targets, train_cfg.loss,
                                           epoch, train_cfg.surrogate)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDivergedError(f"non-finite loss or gradient at epoch {epoch}")
            tot += loss
            for k, v in b.items():
                br[k] = br.get(k, 0.0) + v
            params = sgd_step(params, grads, train_cfg.learning_rate)
            _check_params(params, epoch)
        if train_cfg.quantize_bits:
            for k in params:
                if k.endswith(".w"):
                    params[k] = quantize_array(params[k], train_cfg.quantize_bits)[0]
        n = len(dataset)
        losses.append(tot / n)
        breakdowns.append({k: v / n for k, v in br.items()})
        logger.debug("epoch %d loss %.6g %s", epoch, losses[-1], breakdowns[-1])
    return ToyTrainResult(params, net_cfg, losses, breakdowns)


def toy_predict(params, cfg, spikes, decode_cfg=None):
    maps, _ = toy_forward(params, cfg, spikes)
    return decode_pose(maps, decode_cfg or DecodeConfig(0.1, cfg.downsample_factor))
