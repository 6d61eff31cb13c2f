"""Scikit-learn style wrappers around binning, inference, toy training and tracking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .events import BinningConfig, EventStream, iter_windows
from .metrics import mean_mpjpe
from .network import MULTIHEAD, PLIF, HeadMaps, SpikeLog, decoder_forward, encoder_forward, table1_spec
from .posedecode import DecodeConfig, EncodeConfig, Pose, decode_pose, encode_ground_truth
from .tracking import KalmanConfig, track
from .training import (LossConfig, SurrogateConfig, ToyNetConfig, TrainConfig, init_toy_params,
                       toy_forward, train_toy)
from .weights import init_weights


def _check_spikes(X, shape=None):
    X = np.asarray(X)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5 or X.shape[2] != 2:
        raise ValueError(f"expected spikes of shape (n, T, 2, H, W), got {X.shape}")
    if shape is not None and X.shape[1:] != tuple(shape):
        raise ValueError(f"expected spike windows of shape {tuple(shape)}, got {X.shape[1:]}")
    if not np.isfinite(X).all() or (X < 0).any():
        raise ValueError("spike counts must be finite and non-negative")
    return X


def _check_poses(y, n):
    y = np.asarray([p.xy if isinstance(p, Pose) else p for p in y], dtype=np.float64)
    if y.shape != (n, 13, 2):
        raise ValueError(f"expected {n} poses of shape (13, 2), got {y.shape}")
    return y


class EventBinner(TransformerMixin, BaseEstimator):
    """Cut an event stream into consecutive windows of spike tensors.

    ``transform`` returns ``(n_windows, num_bins, 2, H, W)``; the start time
    of every window is kept in ``window_starts_``.
    """

    def __init__(self, window_us=10_000, num_bins=8, mode="graded", model_size=160):
        self.window_us = window_us
        self.num_bins = num_bins
        self.mode = mode
        self.model_size = model_size

    def fit(self, X, y=None):
        if not isinstance(X, EventStream):
            raise TypeError("EventBinner expects an EventStream")
        self.config_ = BinningConfig(self.window_us, self.num_bins, self.mode, self.model_size,
                                     self.model_size, X.width, X.height)
        return self

    def transform(self, X, start_us=0, stop_us=None):
        check_is_fitted(self, "config_")
        starts, tensors = [], []
        for w0, st in iter_windows(X, self.config_, start_us, stop_us):
            starts.append(w0)
            tensors.append(st.data)
        self.window_starts_ = np.array(starts, dtype=np.int64)
        if not tensors:
            c = self.config_
            return np.zeros((0, c.num_bins, 2, c.model_height, c.model_width), np.int32)
        return np.stack(tensors)


@dataclass
class InferenceResult:
    timestamps: np.ndarray
    poses: list
    activity: np.ndarray  # (n, 13) heatmap peaks
    log: SpikeLog
    maps: list = None


def run_inference(windows, spec, store, timestamps, decode_cfg=None, dtype=np.float32,
                  batch_size=16, keep_maps=False):
    """Decode poses for a stack of spike windows in fixed-size batches."""
    windows = _check_spikes(windows)
    decode_cfg = decode_cfg or DecodeConfig()
    poses, activity, kept = [], [], []
    log = SpikeLog.empty(len(spec.encoder), windows.shape[1])
    for lo in range(0, len(windows), batch_size):
        latent, lg = encoder_forward(windows[lo : lo + batch_size], spec, store, dtype)
        log = lg if log.n_samples == 0 else log.merge(lg)
        maps = decoder_forward(latent, spec, store, dtype)
        for i in range(len(maps)):
            m = maps.sample(i)
            m = HeadMaps(**{k: v.astype(np.float64) for k, v in m.as_dict().items()})
            poses.append(decode_pose(m, decode_cfg, int(timestamps[lo + i])))
            activity.append(m.heatmap.reshape(m.heatmap.shape[0], -1).max(axis=1))
            if keep_maps:
                kept.append(m)
    return InferenceResult(np.asarray(timestamps), poses, np.array(activity).reshape(-1, 13), log,
                           kept if keep_maps else None)


class SpikingPoseNet(BaseEstimator):
    """Full-size spiking encoder plus multihead decoder.

    ``fit`` only materialises weights (random, or ``weights`` if given): the
    full network is not trained here.
    """

    def __init__(self, neuron=PLIF, heads=MULTIHEAD, input_size=160, weights=None,
                 random_state=0, dtype="float32", batch_size=16, tau=0.1):
        self.neuron = neuron
        self.heads = heads
        self.input_size = input_size
        self.weights = weights
        self.random_state = random_state
        self.dtype = dtype
        self.batch_size = batch_size
        self.tau = tau

    def fit(self, X=None, y=None):
        self.spec_ = table1_spec(self.neuron, self.heads, self.input_size)
        if self.weights is None:
            self.store_ = init_weights(self.spec_, self.random_state)
        else:
            self.store_ = self.weights
            self.store_.validate(self.spec_)
        return self

    def predict_result(self, X, timestamps=None, keep_maps=False):
        check_is_fitted(self, "store_")
        X = _check_spikes(X)
        ts = np.zeros(len(X), np.int64) if timestamps is None else np.asarray(timestamps)
        return run_inference(X, self.spec_, self.store_, ts, DecodeConfig(self.tau),
                             np.dtype(self.dtype), self.batch_size, keep_maps)

    def predict(self, X, timestamps=None):
        return self.predict_result(X, timestamps).poses


class ToyPoseEstimator(BaseEstimator):
    """Toy-scale spiking pose network trained with surrogate-gradient BPTT.

    ``X`` holds spike windows ``(n, T, 2, S, S)``; ``y`` the matching poses in
    input-resolution pixels ``(n, 13, 2)``.
    """

    def __init__(self, input_size=16, num_bins=8, enc_channels=(8, 16), enc_strides=(2, 1),
                 neuron=PLIF, heads=MULTIHEAD, epochs=200, learning_rate=0.2,
                 curriculum_epochs=1, gaussian_sigma=1.0, tau=0.1, random_state=0):
        self.input_size = input_size
        self.num_bins = num_bins
        self.enc_channels = enc_channels
        self.enc_strides = enc_strides
        self.neuron = neuron
        self.heads = heads
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.curriculum_epochs = curriculum_epochs
        self.gaussian_sigma = gaussian_sigma
        self.tau = tau
        self.random_state = random_state

    def _net_config(self):
        n = len(self.enc_channels)
        return ToyNetConfig(self.input_size, self.num_bins, tuple(self.enc_channels), (3,) * n,
                            tuple(self.enc_strides), neuron=self.neuron, heads=self.heads)

    def fit(self, X, y):
        cfg = self._net_config()
        X = _check_spikes(X, (cfg.num_bins, 2, cfg.input_size, cfg.input_size))
        y = _check_poses(y, len(X))
        ecfg = EncodeConfig(self.gaussian_sigma, cfg.map_size, cfg.downsample_factor)
        data = [(x, encode_ground_truth(Pose(p), ecfg, cfg.head_names)) for x, p in zip(X, y)]
        tcfg = TrainConfig(self.epochs, self.learning_rate,
                           LossConfig(curriculum_epochs=self.curriculum_epochs),
                           SurrogateConfig(), seed=self.random_state)
        res = train_toy(data, cfg, tcfg, init_toy_params(cfg, self.random_state))
        self.net_config_ = cfg
        self.params_ = res.params
        self.loss_curve_ = np.array(res.losses)
        self.result_ = res
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        cfg = self.net_config_
        X = _check_spikes(X, (cfg.num_bins, 2, cfg.input_size, cfg.input_size))
        dcfg = DecodeConfig(self.tau, cfg.downsample_factor)
        return np.stack([decode_pose(toy_forward(self.params_, cfg, x)[0], dcfg).xy for x in X])

    def score(self, X, y):
        """Negative mean per-joint position error (higher is better)."""
        pred = self.predict(X)
        return -mean_mpjpe(list(pred), list(_check_poses(y, len(pred))))


class KalmanPoseSmoother(TransformerMixin, BaseEstimator):
    """Per-joint constant-velocity Kalman smoothing of a time-ordered pose list."""

    def __init__(self, process_noise_pos=1.0, process_noise_vel=10.0, measurement_noise=4.0,
                 dt_us=10_000):
        self.process_noise_pos = process_noise_pos
        self.process_noise_vel = process_noise_vel
        self.measurement_noise = measurement_noise
        self.dt_us = dt_us

    def fit(self, X=None, y=None):
        self.config_ = KalmanConfig(self.process_noise_pos, self.process_noise_vel,
                                    self.measurement_noise, self.dt_us)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        return track(list(X), self.config_)
