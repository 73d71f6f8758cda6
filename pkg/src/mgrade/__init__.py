"""mGRADE: gated recurrence with learnable-delay temporal convolutions, in numpy."""

__version__ = "0.1.0"

from .model import NetworkConfig, NetworkParams, count_params, init_network, network_bwd, network_fwd

__all__ = ["NetworkConfig", "NetworkParams", "count_params", "init_network", "network_bwd",
           "network_fwd", "__version__"]
