"""Event-based shape from polarization with spiking UNets, in plain numpy."""

__version__ = "0.1.0"

from .autodiff import DimensionError, StaleTapeError, Tensor, backward, no_grad  # noqa: E402
from .encoding import ConfigurationError, build_cvgr, build_cvgri, build_voxel_grid  # noqa: E402
from .energy import EnergyReport, LayerTrace, count_ops, profile_inference  # noqa: E402
from .events import EventStream, Scene, SimulatorConfig, simulate_events  # noqa: E402
from .neurons import NeuronConfig  # noqa: E402
from .training import TrainConfig, angular_metrics, cosine_loss, train  # noqa: E402
from .unet import NetworkConfig, SpikingUNet  # noqa: E402
