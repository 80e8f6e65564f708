"""Spike-count based operation and energy accounting.

Spiking layers are charged accumulate (AC) operations in proportion to how
often they fire: ``#OP = M * C * F * T`` for ``M`` neurons with ``C``
synapses each and mean spiking rate ``F`` over ``T`` steps.  Layers that
handle real values (the input layer reading CVGR-I, the potential-assisted
output layer) are charged dense multiply-accumulates.  Energy uses 45 nm
CMOS figures for 32-bit floats.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .encoding import ConfigurationError
from .unet import ForwardRecord

__all__ = [
    "MAC_ENERGY",
    "AC_ENERGY",
    "IncompleteProfileError",
    "LayerTrace",
    "EnergyReport",
    "mean_spiking_rate",
    "energy_report",
    "count_ops",
    "profile_inference",
    "merge_traces",
    "report_csv",
    "rate_table",
]

MAC_ENERGY = 4.6e-12  # J per 32-bit multiply-accumulate
AC_ENERGY = 0.9e-12  # J per 32-bit accumulate

ROLES = ("input", "spiking", "output")


class IncompleteProfileError(ValueError):
    pass


@dataclass
class LayerTrace:
    layer: str
    neurons: int
    synapses: int
    spike_counts: list[int]
    role: str = "spiking"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if self.synapses <= 0:
            raise ValueError("synapses per neuron must be positive")
        self.spike_counts = [int(s) for s in self.spike_counts]
        if any(s < 0 or s > self.neurons for s in self.spike_counts):
            raise ValueError(f"{self.layer}: spike count outside [0, {self.neurons}]")

    @property
    def timesteps(self) -> int:
        return len(self.spike_counts)


@dataclass(frozen=True)
class EnergyReport:
    op_mac: float
    op_ac: float
    energy_joules: float
    reference_joules: float | None = None
    benefit: float | None = None
    notes: tuple[str, ...] = field(default_factory=tuple)


def mean_spiking_rate(trace: LayerTrace) -> float:
    """Average over timesteps of the fraction of neurons that fired."""
    if trace.neurons < 1 or trace.timesteps < 1:
        raise ConfigurationError(f"{trace.layer}: need at least one neuron and one timestep")
    return float(np.mean([s / trace.neurons for s in trace.spike_counts]))


def energy_report(op_mac: float, op_ac: float, reference: EnergyReport | float | None = None,
                  notes=()) -> EnergyReport:
    energy = op_mac * MAC_ENERGY + op_ac * AC_ENERGY
    ref = reference.energy_joules if isinstance(reference, EnergyReport) else reference
    benefit = None if ref is None or energy == 0 else ref / energy
    return EnergyReport(op_mac, op_ac, energy, ref, benefit, tuple(notes))


def count_ops(traces: list[LayerTrace], expected_layers=None, ann_mode: bool = False,
              reference: EnergyReport | float | None = None) -> EnergyReport:
    """Operation counts and energy for a set of layer traces.

    ``expected_layers`` (layer names, or a network with ``.layers``) guards
    against a partial profile.  In ``ann_mode`` every layer is charged
    ``M * C`` dense MACs once.
    """
    if hasattr(expected_layers, "layers"):
        expected_layers = [u.name for u in expected_layers.layers]
    if expected_layers is not None:
        missing = [name for name in expected_layers if name not in {t.layer for t in traces}]
        if missing:
            raise IncompleteProfileError(f"no trace for layers {missing}")
    op_mac = op_ac = 0
    for t in traces:
        dense = t.neurons * t.synapses
        if ann_mode:
            op_mac += dense
        elif t.role == "spiking":
            # M * C * F * T == C * sum_t S_t
            op_ac += t.synapses * sum(t.spike_counts)
        else:
            op_mac += dense * t.timesteps
    notes = ["synapses per neuron = in_channels * k^2 (no border correction)"]
    if ann_mode:
        notes.append("ANN mode: dense MAC count, one pass per layer")
    else:
        notes.append("input and output layers charged as dense MAC; spiking layers as AC")
    return energy_report(float(op_mac), float(op_ac), reference, notes)


def profile_inference(network, x, reference: EnergyReport | float | None = None,
                      ann_mode: bool = False):
    """Run one inference pass, count spikes per layer and timestep, and cost it.

    Returns ``(traces, report)``.  Pooling and upsampling have no weights and
    are not counted.
    """
    network.eval()
    record = ForwardRecord()
    with no_grad():
        network.forward(x, record=record)
    traces = []
    for i, layer in enumerate(network.layers):
        if layer.role == "output":
            drive = record.drives[layer.name]
            neurons = int(np.prod(drive.shape[1:]))
            traces.append(LayerTrace(layer.name, neurons, layer.synapses, [0] * drive.shape[0], "output"))
            continue
        spikes = record.spikes[layer.name]
        neurons = int(np.prod(spikes.shape[1:]))
        counts = [int(np.count_nonzero(s)) for s in spikes]
        role = "input" if i == 0 else "spiking"
        traces.append(LayerTrace(layer.name, neurons, layer.synapses, counts, role))
    report = count_ops(traces, [u.name for u in network.layers], ann_mode, reference)
    return traces, report


def merge_traces(runs: list[list[LayerTrace]]) -> list[LayerTrace]:
    """Pool traces of the same layers from several inference runs."""
    if not runs:
        raise ValueError("no traces to merge")
    merged = []
    for group in zip(*runs):
        first = group[0]
        if any(t.layer != first.layer or t.timesteps != first.timesteps for t in group):
            raise ValueError(f"traces for {first.layer} do not line up")
        counts = np.sum([t.spike_counts for t in group], axis=0).tolist()
        merged.append(LayerTrace(first.layer, sum(t.neurons for t in group), first.synapses,
                                 counts, first.role))
    return merged


def report_csv(traces: list[LayerTrace], report: EnergyReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "K", "C_syn", "T", "rate", "op_ac"])
    for t in traces:
        rate = "" if t.role == "output" else f"{mean_spiking_rate(t):.6f}"
        op_ac = t.synapses * sum(t.spike_counts) if t.role == "spiking" else 0
        w.writerow([t.layer, t.neurons, t.synapses, t.timesteps, rate, op_ac])
    w.writerow([])
    w.writerow(["op_mac", repr(report.op_mac)])
    w.writerow(["op_ac", repr(report.op_ac)])
    w.writerow(["joules", repr(report.energy_joules)])
    w.writerow(["benefit", "" if report.benefit is None else repr(report.benefit)])
    for note in report.notes:
        w.writerow(["note", note])
    return buf.getvalue()


def rate_table(traces: list[LayerTrace]) -> str:
    """Per-layer spiking rates laid out like a paper table (layer, rate, spiking input)."""
    lines = [f"{'Layer':<10}{'Spiking rate':>14}{'Spikes':>8}"]
    rates = []
    for i, t in enumerate(traces, start=1):
        if t.role == "output":
            lines.append(f"{'Layer ' + str(i):<10}{'-':>14}{'Yes':>8}")
            continue
        r = mean_spiking_rate(t)
        rates.append(r)
        lines.append(f"{'Layer ' + str(i):<10}{r:>14.4f}{'No' if t.role == 'input' else 'Yes':>8}")
    avg = float(np.mean(rates)) if rates else 0.0
    lines.append(f"{'Average':<10}{avg:>14.4f}{'-':>8}")
    return "\n".join(lines) + "\n"
