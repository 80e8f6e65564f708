"""Single- and multi-timestep spiking UNets for surface-normal regression.

Activations travel as ``(T, N, C, H, W)`` tensors.  A single-timestep network
sees the whole ``B x H x W`` input once (``T = 1``, ``C_in = B``); a
multi-timestep network sees one ``1 x H x W`` bin per step (``T = B``) with
the same weights at every step.  Convolutions and normalization run over all
``T * N`` frames at once; only the neuron recurrences loop over time.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor, no_grad
from .encoding import CvgriTensor
from .neurons import NeuronConfig, plif_parameter, potential_step, spike_step

__all__ = [
    "NetworkConfig",
    "NormalMap",
    "ConvUnit",
    "ForwardRecord",
    "SpikingUNet",
    "SpikingStack",
    "normalize_prediction",
    "normalize_array",
]


@dataclass
class NetworkConfig:
    bins: int = 8
    depth: int = 4  # encoder blocks; decoder blocks always match
    base_channels: int = 16
    upsample: str = "nearest"
    mode: str = "single"
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    kernel_size: int = 3
    norm_eps: float = 1e-5
    norm_momentum: float = 0.1
    per_step_norm: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.neuron, dict):
            self.neuron = NeuronConfig(**self.neuron)
        if self.mode not in ("single", "multi"):
            raise ValueError(f"mode must be 'single' or 'multi', got {self.mode!r}")
        if self.upsample not in ("nearest", "bilinear"):
            raise ValueError(f"upsample must be 'nearest' or 'bilinear', got {self.upsample!r}")
        if self.bins < 1 or self.depth < 1 or self.base_channels < 1:
            raise ValueError("bins, depth and base_channels must be positive")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")

    @property
    def decoder_blocks(self) -> int:
        return self.depth

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** d for d in range(self.depth + 1)]

    @property
    def in_channels(self) -> int:
        return self.bins if self.mode == "single" else 1

    @property
    def timesteps(self) -> int:
        return 1 if self.mode == "single" else self.bins

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "neuron":
                for k, v in asdict(self.neuron).items():
                    lines.append(f"neuron.{k}={v}")
            else:
                lines.append(f"{f.name}={getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith(("#", "[")):
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "NetworkConfig":
        types = {"bins": int, "depth": int, "base_channels": int, "kernel_size": int,
                 "norm_eps": float, "norm_momentum": float, "per_step_norm": _as_bool}
        neuron_types = {"threshold": float, "reset": float, "leak": float, "surrogate_slope": float}
        kwargs, neuron = {}, {}
        for key, value in raw.items():
            if key.startswith("neuron."):
                sub = key.split(".", 1)[1]
                neuron[sub] = neuron_types.get(sub, str)(value)
            elif key in {f.name for f in fields(cls)}:
                kwargs[key] = types.get(key, str)(value)
        if neuron:
            kwargs["neuron"] = NeuronConfig(**neuron)
        return cls(**kwargs)


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


@dataclass
class NormalMap:
    values: np.ndarray  # (3, H, W) or (N, 3, H, W)
    mask: np.ndarray  # valid pixels
    degenerate: np.ndarray | None = None


class ForwardRecord:
    """Per-layer tensors captured during one forward pass (numpy copies)."""

    def __init__(self):
        self.spikes: dict[str, np.ndarray] = {}
        self.drives: dict[str, np.ndarray] = {}
        self.outputs: dict[str, list[np.ndarray]] = {}
        self.inputs: dict[str, np.ndarray] = {}


class ConvUnit:
    """One weighted layer: convolution, then either norm + spiking neurons or a
    potential-assisted (non-spiking) output neuron."""

    def __init__(self, name: str, in_ch: int, out_ch: int, role: str, config: NetworkConfig,
                 rng: np.random.Generator, block: str = ""):
        self.name, self.in_ch, self.out_ch, self.role, self.block = name, in_ch, out_ch, role, block
        self.kernel_size = k = config.kernel_size
        dtype = np.dtype(config.dtype)
        fan_in = in_ch * k * k
        bound = math.sqrt(6.0 / fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_ch, in_ch, k, k)).astype(dtype),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = self.gain = self.shift = self.leak = None
        if role == "output":
            self.bias = Tensor(np.zeros(out_ch, dtype), requires_grad=True, name=f"{name}.bias")
        else:
            self.gain = Tensor(np.ones(out_ch, dtype), requires_grad=True, name=f"{name}.gain")
            self.shift = Tensor(np.zeros(out_ch, dtype), requires_grad=True, name=f"{name}.shift")
            self.running_mean = np.zeros(out_ch, dtype)
            self.running_var = np.ones(out_ch, dtype)
            if config.neuron.kind == "plif":
                self.leak = plif_parameter(config.neuron.leak, dtype)
                self.leak.name = f"{name}.plif_a"

    @property
    def synapses(self) -> int:
        """Fan-in per neuron (dense, ignoring border padding)."""
        return self.in_ch * self.kernel_size ** 2

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for t in (self.weight, self.bias, self.gain, self.shift, self.leak):
            if t is not None:
                params[t.name] = t
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        if self.role == "output":
            return {}
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def __call__(self, x: Tensor, config: NetworkConfig, training: bool, smooth: bool = False,
                 record: ForwardRecord | None = None) -> Tensor:
        drive = ad.conv2d(x, self.weight, self.bias)
        steps = drive.shape[0]
        if record is not None:
            record.inputs[self.name] = x.data.copy()
        if self.role == "output":
            state, outs = None, []
            mode = config.mode
            for t in range(steps):
                out, state = potential_step(state, drive[t], mode)
                outs.append(out)
            if record is not None:
                record.drives[self.name] = drive.data.copy()
                record.outputs[self.name] = [o.data.copy() for o in outs]
            return outs[-1]

        if training:
            drive, m, v = ad.channel_norm(drive, self.gain, self.shift, config.norm_eps,
                                          per_step=config.per_step_norm)
            mom = config.norm_momentum
            self.running_mean *= 1 - mom
            self.running_mean += mom * m
            self.running_var *= 1 - mom
            self.running_var += mom * v
        else:
            drive, _, _ = ad.channel_norm(drive, self.gain, self.shift, config.norm_eps,
                                          stats=(self.running_mean, self.running_var))
        if record is not None:
            record.drives[self.name] = drive.data.copy()
        state, spikes = None, []
        for t in range(steps):
            o, state = spike_step(state, drive[t], config.neuron, leak=self.leak, smooth=smooth)
            spikes.append(o)
        out = ad.stack(spikes, axis=0) if steps > 1 else ad.reshape(spikes[0], (1,) + spikes[0].shape)
        if record is not None:
            record.spikes[self.name] = out.data.copy()
        return out


class _Network:
    """Shared plumbing: parameter access, train/eval switch, input handling."""

    config: NetworkConfig
    layers: list[ConvUnit]

    def __init__(self):
        self.training = True

    def train(self) -> "_Network":
        self.training = True
        return self

    def eval(self) -> "_Network":
        self.training = False
        return self

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for layer in self.layers:
            params.update(layer.parameters())
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        bufs = {}
        for layer in self.layers:
            bufs.update(layer.buffers())
        return bufs

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: t.data.copy() for k, t in self.parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, bufs = self.parameters(), self.buffers()
        missing = (set(params) | set(bufs)) - set(state)
        unknown = set(state) - (set(params) | set(bufs))
        if missing or unknown:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unknown)}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise DimensionError(f"{k}: expected {t.shape}, got {state[k].shape}")
            t.data = np.asarray(state[k], dtype=t.dtype).copy()
        for k, b in bufs.items():
            b[...] = state[k]

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))

    def _frames(self, x) -> np.ndarray:
        """Input as ``(T, N, C_in, H, W)`` in the network dtype."""
        if isinstance(x, CvgriTensor):
            x = x.values
        if isinstance(x, Tensor):
            x = x.data
        x = np.asarray(x, dtype=self.config.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4:
            raise DimensionError(f"expected (B, H, W) or (N, B, H, W) input, got {x.shape}")
        if x.shape[1] != self.config.bins:
            raise DimensionError(f"input has {x.shape[1]} bins, network expects {self.config.bins}")
        if self.config.mode == "single":
            return x[None]
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3)[:, :, None])

    def predict(self, x) -> NormalMap:
        """Inference-mode forward pass followed by unit normalization."""
        with no_grad():
            raw = self.forward(x)
        return normalize_array(raw.data)


class SpikingUNet(_Network):
    """UNet of spiking conv layers with a potential-assisted prediction head.

    Layer order: two encoding-module layers, ``depth`` encoder blocks (max-pool
    then two layers, channels doubling), ``depth`` decoder blocks (upsample,
    concatenate the matching encoder output, two layers, channels halving) and
    one output layer.  With the default depth of 4 that is 19 weighted layers.
    """

    def __init__(self, config: NetworkConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or NetworkConfig()
        rng = np.random.default_rng(seed)
        ch = config.channels
        names = iter(f"layer{i:02d}" for i in range(1, 100))

        def unit(cin, cout, role="spiking", block=""):
            return ConvUnit(next(names), cin, cout, role, config, rng, block)

        self.stem = [unit(config.in_channels, ch[0], block="encoding"),
                     unit(ch[0], ch[0], block="encoding")]
        self.encoders = [[unit(ch[d - 1], ch[d], block=f"encoder{d}"),
                          unit(ch[d], ch[d], block=f"encoder{d}")]
                         for d in range(1, config.depth + 1)]
        self.decoders = [[unit(ch[d + 1] + ch[d], ch[d], block=f"decoder{config.depth - d}"),
                          unit(ch[d], ch[d], block=f"decoder{config.depth - d}")]
                         for d in reversed(range(config.depth))]
        self.head = unit(ch[0], 3, role="output", block="prediction")
        self.layers = (self.stem + [u for b in self.encoders for u in b]
                       + [u for b in self.decoders for u in b] + [self.head])

    def forward(self, x, record: ForwardRecord | None = None, smooth: bool = False) -> Tensor:
        """Raw (unnormalized) normals ``(N, 3, H, W)``."""
        cfg = self.config
        frames = self._frames(x)
        h, w = frames.shape[-2:]
        if h % 2 ** cfg.depth or w % 2 ** cfg.depth:
            raise DimensionError(f"spatial extent {h}x{w} not divisible by {2 ** cfg.depth}")
        run = dict(config=cfg, training=self.training, smooth=smooth, record=record)
        a = Tensor(frames)
        for u in self.stem:
            a = u(a, **run)
        skips = [a]
        for block in self.encoders:
            a = ad.max_pool2(a)
            for u in block:
                a = u(a, **run)
            skips.append(a)
        skips.pop()
        for block in self.decoders:
            a = ad.upsample2(a, cfg.upsample)
            a = ad.concat_channels(a, skips.pop())
            for u in block:
                a = u(a, **run)
        return self.head(a, **run)


class SpikingStack(_Network):
    """Plain stack of spiking conv layers ending in a potential-assisted layer.

    Used for gradient checks and small experiments; no pooling or skips.
    """

    def __init__(self, channels: list[int], config: NetworkConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or NetworkConfig()
        rng = np.random.default_rng(seed)
        if channels[0] != config.in_channels:
            raise ValueError(f"first channel count must equal the network input ({config.in_channels})")
        self.layers = []
        for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
            role = "output" if i == len(channels) - 2 else "spiking"
            self.layers.append(ConvUnit(f"layer{i + 1:02d}", cin, cout, role, config, rng))

    def forward(self, x, record: ForwardRecord | None = None, smooth: bool = False) -> Tensor:
        a = Tensor(self._frames(x))
        for u in self.layers:
            a = u(a, self.config, self.training, smooth=smooth, record=record)
        return a


def normalize_prediction(raw: Tensor, eps: float = 1e-8):
    """Differentiable per-pixel unit normalization over the channel axis (-3).

    Pixels with norm below ``eps`` become ``(0, 0, 1)``.  Returns
    ``(normals, degenerate_mask)``.
    """
    sq = (raw * raw).sum(axis=-3, keepdims=True)
    degenerate = sq.data < eps * eps
    safe = ad.where(degenerate, 1.0, sq)
    unit = raw / ad.sqrt(safe)
    up = np.zeros((3, 1, 1), dtype=raw.dtype)
    up[2] = 1.0
    out = ad.where(np.broadcast_to(degenerate, raw.shape), up, unit)
    return out, degenerate[..., 0, :, :]


def normalize_array(raw: np.ndarray, eps: float = 1e-8) -> NormalMap:
    raw = np.asarray(raw, dtype=np.float64)
    norm = np.sqrt((raw * raw).sum(axis=-3, keepdims=True))
    degenerate = norm < eps
    unit = raw / np.where(degenerate, 1.0, norm)
    up = np.zeros(raw.shape[-3:], dtype=raw.dtype)
    up[2] = 1.0
    unit = np.where(degenerate, up, unit)
    flag = degenerate[..., 0, :, :]
    return NormalMap(unit, ~flag, flag)
