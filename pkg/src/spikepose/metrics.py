"""Pose accuracy and operation / energy accounting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conv import receptive_fanout
from .network import NUM_JOINTS
from .posedecode import Pose

# per-operation energy on a 7 nm CMOS process, in picojoules
AC_ENERGY_PJ = 0.38
MAC_ENERGY_PJ = 1.69

FORMULA = "formula"
EXACT = "exact"


def _joints(p):
    xy = p.xy if isinstance(p, Pose) else np.asarray(p, dtype=np.float64)
    if xy.shape != (NUM_JOINTS, 2):
        raise ValueError(f"expected {NUM_JOINTS} joints, got shape {xy.shape}")
    return xy


def mpjpe(pred, gt):
    """Mean Euclidean joint error in pixels."""
    return float(np.linalg.norm(_joints(pred) - _joints(gt), axis=1).mean())


def mean_mpjpe(preds, gts):
    if len(preds) != len(gts) or not len(preds):
        raise ValueError("need equally many (and at least one) predicted and true poses")
    return float(np.mean([mpjpe(p, g) for p, g in zip(preds, gts)]))


def count_encoder_ops(layer, avg_input_spikes):
    """Average accumulations of a spiking layer: spikes * C_out * K^2 / stride."""
    if not layer.spiking:
        raise ValueError(f"{layer.name} is not a spiking layer")
    if avg_input_spikes < 0:
        raise ValueError("average input spike count must be >= 0")
    return avg_input_spikes * layer.c_out * layer.kernel**2 / layer.stride


def count_decoder_ops(layer):
    """Multiply-accumulates of a dense layer: C_in * H_out * W_out * C_out * K^2.

    For depthwise kernels ``C_in`` is taken per group (one input channel).
    """
    if layer.spiking:
        raise ValueError(f"{layer.name} is a spiking layer")
    c_in = layer.c_in // layer.groups
    return float(c_in * layer.h_out * layer.w_out * layer.c_out * layer.kernel**2)


def energy_estimate(ac, mac, ac_pj=AC_ENERGY_PJ, mac_pj=MAC_ENERGY_PJ):
    if ac < 0 or mac < 0:
        raise ValueError("operation counts must be >= 0")
    return ac_pj * ac + mac_pj * mac


@dataclass
class OpsReport:
    layer_names: list
    layer_acs: list
    layer_macs: list
    dense_equivalent_macs: float
    n_samples: int
    counting: str = FORMULA
    ac_pj: float = AC_ENERGY_PJ
    mac_pj: float = MAC_ENERGY_PJ
    extra: dict = field(default_factory=dict)

    @property
    def total_acs(self):
        return float(sum(self.layer_acs))

    @property
    def total_macs(self):
        return float(sum(self.layer_macs))

    @property
    def sparsity_factor(self):
        return self.dense_equivalent_macs / max(self.total_acs, 1.0)

    @property
    def energy_pj(self):
        return energy_estimate(self.total_acs, self.total_macs, self.ac_pj, self.mac_pj)

    def to_text(self):
        lines = [
            f"samples: {self.n_samples}",
            f"counting: {self.counting}",
            f"total_acs: {self.total_acs!r}",
            f"total_macs: {self.total_macs!r}",
            f"dense_equivalent_macs: {float(self.dense_equivalent_macs)!r}",
            f"sparsity_factor: {self.sparsity_factor!r}",
            f"energy_pj: {self.energy_pj!r}",
            f"ac_energy_pj: {self.ac_pj!r}",
            f"mac_energy_pj: {self.mac_pj!r}",
        ]
        lines += [f"{k}: {v!r}" for k, v in self.extra.items()]
        for n, a, m in zip(self.layer_names, self.layer_acs, self.layer_macs):
            lines.append(f"layer.{n}.acs: {float(a)!r}")
            lines.append(f"layer.{n}.macs: {float(m)!r}")
        return "\n".join(lines) + "\n"

    def to_table(self, sep=","):
        rows = [sep.join(("layer", "acs", "macs"))]
        rows += [sep.join((n, repr(float(a)), repr(float(m))))
                 for n, a, m in zip(self.layer_names, self.layer_acs, self.layer_macs)]
        rows.append(sep.join(("total", repr(self.total_acs), repr(self.total_macs))))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split(": ", 1) for line in text.strip().splitlines())
        names = [k[len("layer."):-len(".acs")] for k in kv if k.startswith("layer.") and k.endswith(".acs")]
        return cls(
            names,
            [float(kv[f"layer.{n}.acs"]) for n in names],
            [float(kv[f"layer.{n}.macs"]) for n in names],
            float(kv["dense_equivalent_macs"]),
            int(kv["samples"]),
            kv["counting"],
            float(kv["ac_energy_pj"]),
            float(kv["mac_energy_pj"]),
        )


def ops_report(spec, spike_log, counting=FORMULA, ac_pj=AC_ENERGY_PJ, mac_pj=MAC_ENERGY_PJ,
               include_decoder=True):
    """Average per-forward-pass operation counts.

    ``counting="formula"`` applies spikes * C_out * K^2 / s per spiking layer;
    ``counting="exact"`` uses the logged per-site fan-out, which accounts for
    padding borders and stride exactly. The dense equivalent treats every
    encoder input site as active at every time step.
    """
    if spike_log.n_samples < 1:
        raise ValueError("spike log is empty")
    if counting not in (FORMULA, EXACT):
        raise ValueError(f"counting must be {FORMULA!r} or {EXACT!r}")
    n = spike_log.n_samples
    names, acs, macs = [], [], []
    dense = 0.0
    enc = spec.encoder_units()
    ann = spike_log.encoder_mode == "ann"
    for i, u in enumerate(enc):
        names.append(u.name)
        sites_per_step = u.c_in * u.h_in * u.w_in
        if ann:
            acs.append(0.0)
            macs.append(u.c_in * u.h_out * u.w_out * u.c_out * u.kernel**2)
            dense += macs[-1]
            continue
        if counting == FORMULA:
            acs.append(count_encoder_ops(u, spike_log.input_spikes[i] / n))
            dense += count_encoder_ops(u, spike_log.num_bins * sites_per_step)
        else:
            acs.append(spike_log.exact_acs[i] / n)
            fy = _fanout(u.h_in, u)
            fx = _fanout(u.w_in, u)
            dense += spike_log.num_bins * u.c_in * u.c_out * float(fy.sum() * fx.sum())
        macs.append(0.0)
    if include_decoder:
        for u in spec.decoder_units()[0]:
            names.append(u.name)
            acs.append(0.0)
            macs.append(count_decoder_ops(u))
    return OpsReport(names, [float(a) for a in acs], macs, float(dense), n, counting, ac_pj, mac_pj)


def _fanout(size, u):
    return receptive_fanout(size, u.kernel, u.stride, u.padding, u.dilation)
