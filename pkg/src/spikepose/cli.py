"""Command-line entry point: ``spikepose <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 runtime divergence.
"""

from __future__ import annotations

import argparse
import collections
import logging
import sys
import threading
import time
from pathlib import Path

import numpy as np

from . import formats
from .estimators import run_inference
from .events import ALLOWED_BINS, BINARY, GRADED, BinningConfig, bin_events, iter_windows, rescale_events
from .metrics import EXACT, FORMULA, mpjpe, ops_report
from .network import CUBA, HEATMAPS_ONLY, MULTIHEAD, PLIF, NetworkSpec, encoder_forward, table1_spec
from .posedecode import JOINT_LABELS, DecodeConfig, Pose
from .render import render_overlay
from .synthetic import SyntheticSceneConfig, generate_synthetic
from .tracking import KalmanConfig, PoseTracker
from .training import (LossConfig, ToyNetConfig, TrainConfig, TrainingDivergedError, make_toy_dataset,
                       toy_predict, train_toy)
from .udp import ActivityEmitter, PoseEmitter
from .weights import init_weights, load_weights, save_weights

logger = logging.getLogger("spikepose")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- shared setup ------------------------------------------------------------


def _network(args):
    """Network spec and weights from ``--spec`` / ``--weights`` / ``--neuron`` / ``--heads``."""
    spec = NetworkSpec.load(args.spec) if args.spec else table1_spec()
    if args.neuron:
        spec = spec.with_neuron(args.neuron)
    if args.heads:
        spec = spec.with_heads(args.heads)
    if args.weights:
        store = load_weights(args.weights, spec)
    else:
        store = init_weights(spec, args.seed)
    return spec, store


def _binning(args, stream, spec):
    return BinningConfig(num_bins=args.bins, mode=args.mode, model_width=spec.input_width,
                         model_height=spec.input_height, sensor_width=stream.width,
                         sensor_height=stream.height)


def _window_batches(stream, bcfg, batch, max_windows=None):
    """Yield ``(starts, spikes)`` in batches so long recordings never sit in memory whole."""
    starts, data, n = [], [], 0
    for w0, st in iter_windows(stream, bcfg):
        starts.append(w0)
        data.append(st.data)
        n += 1
        if len(data) == batch:
            yield np.array(starts, dtype=np.int64), np.stack(data)
            starts, data = [], []
        if max_windows and n >= max_windows:
            break
    if data:
        yield np.array(starts, dtype=np.int64), np.stack(data)
    if not n:
        raise ValueError("event stream holds no events")


def _to_sensor(pose, spec, stream):
    scale = np.array([stream.width / spec.input_width, stream.height / spec.input_height])
    upper = np.array([np.nextafter(stream.width, 0), np.nextafter(stream.height, 0)])
    xy = np.clip(pose.xy * scale, 0.0, upper)
    return Pose(xy, pose.confidence, pose.visible, pose.timestamp_us)


def _emitters(args):
    pose_em = PoseEmitter(args.udp_pose) if args.udp_pose else None
    act_em = ActivityEmitter(args.udp_activity) if args.udp_activity else None
    return pose_em, act_em


# -- commands ----------------------------------------------------------------


def cmd_synth(args):
    scene = SyntheticSceneConfig(width=args.width, height=args.height,
                                 duration_us=int(round(args.duration * 1e6)), seed=args.seed,
                                 edge_event_rate=args.edge_rate, noise_rate=args.noise_rate)
    stream, gt_t, gt_xy = generate_synthetic(scene)
    formats.write_events(stream, args.events)
    formats.write_gt(args.gt, gt_t, gt_xy)
    print(f"events: {len(stream)}")
    print(f"ground_truth_samples: {len(gt_t)}")
    return EXIT_OK


def cmd_infer(args):
    stream = formats.read_events(args.events)
    spec, store = _network(args)
    bcfg = _binning(args, stream, spec)
    dtype = np.float64 if args.precision == "double" else np.float32
    poses, activity, elapsed = [], [], 0.0
    for starts, windows in _window_batches(stream, bcfg, args.batch, args.max_windows):
        t0 = time.perf_counter()
        res = run_inference(windows, spec, store, starts + bcfg.window_us, DecodeConfig(args.tau),
                            dtype, args.batch)
        elapsed += time.perf_counter() - t0
        poses += res.poses
        activity += list(res.activity)
    if not all(np.isfinite(p.xy).all() for p in poses):
        raise TrainingDivergedError("inference produced non-finite joint coordinates")
    if args.kalman == "on":
        poses = _smooth(poses)
    poses = [_to_sensor(p, spec, stream) for p in poses]
    pose_em, act_em = _emitters(args)
    for p, a in zip(poses, activity):
        if pose_em:
            pose_em.emit(p)
        if act_em:
            act_em.emit_peaks(a, p.timestamp_us)
    formats.write_pose_stream(args.out, poses)
    print(f"windows: {len(poses)}")
    print(f"seconds_per_window: {elapsed / len(poses):.6f}")
    return EXIT_OK


def _smooth(poses):
    tracker = PoseTracker(KalmanConfig())
    return [tracker.step(p) for p in poses]


def _match_gt(pred_t, gt_t, gt_xy):
    """Ground truth at each predicted timestamp (exact sample or linear interpolation)."""
    idx = np.searchsorted(gt_t, pred_t)
    out, keep = [], []
    for k, (t, i) in enumerate(zip(pred_t, idx)):
        if i < len(gt_t) and gt_t[i] == t:
            out.append(gt_xy[i])
        elif 0 < i < len(gt_t):
            a = (t - gt_t[i - 1]) / (gt_t[i] - gt_t[i - 1])
            out.append((1 - a) * gt_xy[i - 1] + a * gt_xy[i])
        else:
            continue
        keep.append(k)
    return keep, out


def cmd_eval(args):
    pred = formats.read_pose_stream(args.pred)
    gt_t, gt_xy, _ = formats.read_gt(args.gt)
    keep, gts = _match_gt(np.array([p.timestamp_us for p in pred]), gt_t, gt_xy)
    if not keep:
        raise ValueError("no predicted timestamps fall inside the ground-truth range")
    errs = np.array([np.linalg.norm(pred[k].xy - g, axis=1) for k, g in zip(keep, gts)])
    lines = [f"windows: {len(keep)}", f"MPJPE: {float(errs.mean())!r}"]
    lines += [f"mpjpe.{lab}: {float(v)!r}" for lab, v in zip(JOINT_LABELS, errs.mean(axis=0))]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_bench_ops(args):
    stream = formats.read_events(args.events)
    spec, store = _network(args)
    bcfg = _binning(args, stream, spec)
    log, n = None, 0
    for _, windows in _window_batches(stream, bcfg, args.batch, args.max_windows):
        _, lg = encoder_forward(windows, spec, store, np.float32)
        log = lg if log is None else log.merge(lg)
        n += len(windows)
    report = ops_report(spec, log, args.counting)
    report.extra["windows"] = n
    print(report.to_text(), end="")
    if args.out:
        Path(args.out).write_text(report.to_text())
    if args.table:
        Path(args.table).write_text(report.to_table())
    return EXIT_OK


def cmd_train_toy(args):
    neuron = args.neuron or PLIF
    heads = args.heads or MULTIHEAD
    net_cfg = ToyNetConfig(num_bins=min(args.bins, 8), neuron=neuron, heads=heads)
    scene = SyntheticSceneConfig(width=64, height=64, duration_us=200_000 + 10_000 * args.windows,
                                 seed=args.seed, noise_rate=0.0)
    data = make_toy_dataset(net_cfg, scene, args.windows)
    tcfg = TrainConfig(args.epochs, args.lr, LossConfig(curriculum_epochs=args.curriculum), seed=args.seed)
    res = train_toy(data, net_cfg, tcfg)
    save_weights(res.to_weight_store(), args.out_weights)
    Path(args.out_loss).write_text(res.loss_table())
    err = np.mean([mpjpe(toy_predict(res.params, net_cfg, s), p) for s, _, p in data])
    print(f"initial_loss: {res.losses[0]!r}")
    print(f"final_loss: {res.losses[-1]!r}")
    print(f"train_mpjpe_cells: {err / net_cfg.downsample_factor!r}")
    return EXIT_OK


def cmd_render(args):
    stream = formats.read_events(args.events)
    spec, store = _network(args)
    bcfg = _binning(args, stream, spec)
    model = rescale_events(stream, bcfg)
    if args.at_us is None:
        # window holding the most events
        t = model.events["t"].astype(np.int64)
        if not len(t):
            w0 = 0
        else:
            counts = np.bincount(t // bcfg.window_us)
            w0 = int(np.argmax(counts)) * bcfg.window_us
    else:
        w0 = int(args.at_us)
    spikes = bin_events(model.time_slice(w0, w0 + bcfg.window_us), w0, bcfg)
    res = run_inference(spikes.data[None], spec, store, [w0 + bcfg.window_us], DecodeConfig(args.tau),
                        keep_maps=True)
    render_overlay(res.maps[0], res.poses[0], spikes, args.out, args.scale)
    print(f"window_start_us: {w0}")
    print(f"image: {args.out}")
    return EXIT_OK


class DropOldestQueue:
    """Bounded hand-off queue that discards its oldest item when full."""

    def __init__(self, maxsize):
        self.items = collections.deque()
        self.maxsize = maxsize
        self.dropped = 0
        self.cond = threading.Condition()

    def put(self, item):
        with self.cond:
            if len(self.items) >= self.maxsize:
                self.items.popleft()
                self.dropped += 1
            self.items.append(item)
            self.cond.notify()

    def get(self):
        with self.cond:
            while not self.items:
                self.cond.wait()
            return self.items.popleft()


_END = object()


def cmd_stream(args):
    stream = formats.read_events(args.events)
    spec, store = _network(args)
    bcfg = _binning(args, stream, spec)
    dcfg = DecodeConfig(args.tau)
    q_windows, q_results = DropOldestQueue(args.queue), DropOldestQueue(args.queue)
    pose_em, act_em = _emitters(args)
    tracker = PoseTracker(KalmanConfig()) if args.kalman != "off" else None
    emitted, stats = [], {"assembled": 0, "inferred": 0}
    errors = []

    def assemble():
        try:
            start = time.perf_counter()
            for w0, st in iter_windows(stream, bcfg, stop_us=args.max_windows and args.max_windows * bcfg.window_us):
                if args.speed > 0:
                    due = start + (w0 + bcfg.window_us) * 1e-6 / args.speed
                    time.sleep(max(0.0, due - time.perf_counter()))
                q_windows.put((w0 + bcfg.window_us, st.data))
                stats["assembled"] += 1
        except Exception as exc:  # surfaced after join
            errors.append(exc)
        finally:
            q_windows.put(_END)

    def infer():
        try:
            while (item := q_windows.get()) is not _END:
                t_end, data = item
                res = run_inference(data[None], spec, store, [t_end], dcfg, keep_maps=True)
                q_results.put((res.poses[0], res.maps[0]))
                stats["inferred"] += 1
        except Exception as exc:
            errors.append(exc)
        finally:
            q_results.put(_END)

    def emit():
        while (item := q_results.get()) is not _END:
            pose, maps = item
            if tracker is not None:
                pose = tracker.step(pose)
            pose = _to_sensor(pose, spec, stream)
            if pose_em:
                pose_em.emit(pose)
            if act_em:
                act_em.emit(maps, pose.timestamp_us)
            emitted.append(pose)

    threads = [threading.Thread(target=f, name=f.__name__, daemon=True) for f in (assemble, infer, emit)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    if args.out:
        formats.write_pose_stream(args.out, emitted)
    print(f"windows_assembled: {stats['assembled']}")
    print(f"windows_inferred: {stats['inferred']}")
    print(f"windows_dropped: {q_windows.dropped + q_results.dropped}")
    print(f"poses_emitted: {len(emitted)}")
    for name, em in (("pose", pose_em), ("activity", act_em)):
        if em:
            print(f"udp_{name}_sent: {em.sent}")
            print(f"udp_{name}_failures: {em.failures}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _common(net=True):
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--bins", type=int, choices=ALLOWED_BINS, default=8, help="time bins per window")
    p.add_argument("--mode", choices=(GRADED, BINARY), default=GRADED, help="first-layer spike encoding")
    p.add_argument("--neuron", choices=(CUBA, PLIF), default=None, help="encoder neuron model")
    p.add_argument("--heads", choices=(MULTIHEAD, HEATMAPS_ONLY), default=None, help="decoder heads")
    if net:
        p.add_argument("--weights", help="TNW1 weight file (default: random initialisation)")
        p.add_argument("--spec", help="network spec text file (default: the reference architecture)")
        p.add_argument("--tau", type=float, default=0.1, help="heatmap candidate threshold")
        p.add_argument("--batch", type=int, default=16, help="windows per forward pass")
        p.add_argument("--max-windows", type=int, default=None, help="process at most this many windows")
    return p


def _udp(p, kalman_default):
    p.add_argument("--kalman", choices=("on", "off"), default=kalman_default, help="Kalman smoothing")
    p.add_argument("--udp-pose", metavar="HOST:PORT", help="send pose datagrams here")
    p.add_argument("--udp-activity", metavar="HOST:PORT", help="send joint-activity datagrams here")


def build_parser():
    parser = _Parser(prog="spikepose", description="Event-camera spiking pose estimation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    net = _common()
    plain = _common(net=False)

    p = sub.add_parser("synth", parents=[plain], help="generate a synthetic scene")
    p.add_argument("--events", required=True, help="output EVT-BIN (or .csv for EVT-CSV)")
    p.add_argument("--gt", required=True, help="output GT-CSV")
    p.add_argument("--duration", type=float, default=5.0, help="seconds (default 5)")
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=160)
    p.add_argument("--edge-rate", type=float, default=1.5, help="events per swept pixel")
    p.add_argument("--noise-rate", type=float, default=2000.0, help="noise events per second")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("infer", parents=[net], help="events file to pose stream")
    p.add_argument("events")
    p.add_argument("--out", required=True, help="output pose stream")
    p.add_argument("--precision", choices=("single", "double"), default="single")
    _udp(p, "off")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="MPJPE of a pose stream against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-ops", parents=[net], help="operation and energy report")
    p.add_argument("events")
    p.add_argument("--counting", choices=(FORMULA, EXACT), default=FORMULA)
    p.add_argument("--out", help="write the report here")
    p.add_argument("--table", help="write the per-layer CSV table here")
    p.set_defaults(func=cmd_bench_ops)

    p = sub.add_parser("train-toy", parents=[plain], help="train a toy network on synthetic data")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--windows", type=int, default=1, help="training windows")
    p.add_argument("--curriculum", type=int, default=1, help="epochs with heatmap and center losses only")
    p.add_argument("--out-weights", required=True)
    p.add_argument("--out-loss", required=True, help="per-epoch loss table (CSV)")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("stream", parents=[net], help="live windowed inference with UDP output")
    p.add_argument("events")
    p.add_argument("--speed", type=float, default=1.0, help="replay speed, 0 for as fast as possible")
    p.add_argument("--queue", type=int, default=4, help="hand-off queue capacity")
    p.add_argument("--out", help="also record emitted poses here")
    _udp(p, "on")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("render", parents=[net], help="overlay image of one window")
    p.add_argument("events")
    p.add_argument("--out", required=True, help="output PPM image")
    p.add_argument("--at-us", type=int, default=None, help="window start (default: busiest window)")
    p.add_argument("--scale", type=int, default=2, help="integer magnification")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"spikepose: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError, KeyError) as exc:
        print(f"spikepose: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
