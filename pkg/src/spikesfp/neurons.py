"""Integrate-and-fire style neurons with an ArcTan surrogate gradient."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, Tensor, sigmoid, spike

__all__ = [
    "NeuronConfig",
    "LayerState",
    "fresh_state",
    "spike_step",
    "potential_step",
    "surrogate",
    "surrogate_grad",
    "plif_parameter",
]

KINDS = ("if", "lif", "plif")


@dataclass
class NeuronConfig:
    """Spiking neuron parameters.

    ``leak`` is the fixed decay for LIF and the initial decay for PLIF (whose
    decay is ``sigmoid(a)`` with a trainable scalar ``a``).  A threshold of
    ``-inf`` makes every neuron fire on every step; it is accepted as a test hook.
    """

    kind: str = "if"
    threshold: float = 1.0
    reset: float = 0.0
    leak: float = 0.5
    surrogate_slope: float = 1.0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"neuron kind must be one of {KINDS}, got {self.kind!r}")
        if not (self.threshold > self.reset or self.threshold == -math.inf):
            raise ValueError("threshold must exceed the reset potential")
        if not 0.0 < self.leak <= 1.0:
            raise ValueError("leak must lie in (0, 1]")
        if self.kind == "plif" and self.leak == 1.0:
            raise ValueError("PLIF leak is a sigmoid and cannot start at exactly 1")
        if self.surrogate_slope <= 0:
            raise ValueError("surrogate slope must be positive")


@dataclass
class LayerState:
    membrane: Tensor
    spikes: Tensor | None = None


def fresh_state(shape, config: NeuronConfig, dtype=np.float32) -> LayerState:
    return LayerState(Tensor(np.full(shape, config.reset, dtype=dtype)),
                      Tensor(np.zeros(shape, dtype=dtype)))


def surrogate(x, slope: float = 1.0):
    """The smooth stand-in for the Heaviside step: ``arctan(pi a x) / pi + 1/2``."""
    return np.arctan(np.pi * slope * np.asarray(x)) / np.pi + 0.5


def surrogate_grad(x, slope: float = 1.0):
    """Derivative of :func:`surrogate`, ``a / (1 + (pi a x)^2)``."""
    z = np.pi * slope * np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        return slope / (1.0 + z * z)


def plif_parameter(initial_leak: float = 0.5, dtype=np.float32) -> Tensor:
    """Trainable scalar ``a`` with ``sigmoid(a) == initial_leak``."""
    a = math.log(initial_leak / (1.0 - initial_leak))
    return Tensor(np.array(a, dtype=dtype), requires_grad=True, name="plif_a")


def _decay(config: NeuronConfig, leak):
    if config.kind == "if":
        return None
    if config.kind == "lif":
        return None if config.leak == 1.0 else config.leak
    if leak is None:
        raise ValueError("PLIF neurons need their trainable leak parameter")
    return sigmoid(leak) if leak.ndim == 0 or leak.size == 1 else leak


def spike_step(state: LayerState | None, drive: Tensor, config: NeuronConfig,
               leak: Tensor | None = None, smooth: bool = False):
    """Advance spiking neurons one timestep.

    ``u = decay * (u_prev * (1 - o_prev) + u_reset * o_prev) + drive`` with
    ``decay = 1`` for IF; the neuron fires where ``u >= u_th``.  ``leak`` is
    the raw PLIF parameter.  Returns ``(spikes, new_state)``.
    """
    decay = _decay(config, leak)
    if state is None:
        u = drive
        if config.reset != 0.0:
            base = config.reset if decay is None else decay * config.reset
            u = drive + base
    else:
        if state.membrane.shape != drive.shape:
            raise DimensionError(f"drive {drive.shape} does not match state {state.membrane.shape}")
        prev = state.membrane * (1.0 - state.spikes)
        if config.reset != 0.0:
            prev = prev + config.reset * state.spikes
        if decay is not None:
            prev = prev * decay
        u = prev + drive
    o = spike(u - config.threshold, slope=config.surrogate_slope, smooth=smooth)
    return o, LayerState(u, o)


def potential_step(state: LayerState | None, drive: Tensor, mode: str = "single"):
    """Non-spiking output neuron that emits its membrane potential.

    ``single``: output is the drive.  ``multi``: the membrane integrates every
    drive with no threshold and no reset, and is emitted as is.
    """
    if mode not in ("single", "multi"):
        raise ValueError(f"mode must be 'single' or 'multi', got {mode!r}")
    if mode == "single" or state is None:
        u = drive
    else:
        if state.membrane.shape != drive.shape:
            raise DimensionError(f"drive {drive.shape} does not match state {state.membrane.shape}")
        u = state.membrane + drive
    return u, LayerState(u, None)
