"""Spiking-network human pose estimation from event-camera streams."""

from .events import BinningConfig, EventStream, SpikeTensor, bin_events, iter_windows, to_binary
from .estimators import EventBinner, KalmanPoseSmoother, SpikingPoseNet, ToyPoseEstimator
from .metrics import OpsReport, mpjpe, ops_report
from .network import HeadMaps, NetworkSpec, decoder_forward, encoder_forward, forward, table1_spec
from .posedecode import DecodeConfig, EncodeConfig, Pose, decode_pose, encode_ground_truth
from .synthetic import SyntheticSceneConfig, generate_synthetic
from .tracking import KalmanConfig, PoseTracker, track
from .weights import WeightStore, init_weights, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "BinningConfig", "EventStream", "SpikeTensor", "bin_events", "iter_windows", "to_binary",
    "EventBinner", "KalmanPoseSmoother", "SpikingPoseNet", "ToyPoseEstimator",
    "OpsReport", "mpjpe", "ops_report",
    "HeadMaps", "NetworkSpec", "decoder_forward", "encoder_forward", "forward", "table1_spec",
    "DecodeConfig", "EncodeConfig", "Pose", "decode_pose", "encode_ground_truth",
    "SyntheticSceneConfig", "generate_synthetic",
    "KalmanConfig", "PoseTracker", "track",
    "WeightStore", "init_weights", "load_weights", "save_weights",
]
