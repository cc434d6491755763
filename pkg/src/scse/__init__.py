"""Concurrent spatial and channel squeeze & excitation for segmentation networks.

A small numpy autodiff engine, the cSE/sSE/scSE recalibration blocks, three
encoder/decoder segmentation families and the training/evaluation tooling
for ablating them on synthetic data.
"""

__version__ = "0.1.0"

from .se import (
    SEParams,
    SEVariant,
    channel_squeeze,
    cse_forward,
    init_se_params,
    network_se_overhead,
    scse_forward,
    se_param_count,
    sse_forward,
)
from .tensor import Tensor, backward, finite_diff_gradient
from .zoo import ArchSpec, Network, build_network, count_parameters, forward_segment, preset_spec

__all__ = [
    "ArchSpec",
    "Network",
    "SEParams",
    "SEVariant",
    "Tensor",
    "backward",
    "build_network",
    "channel_squeeze",
    "count_parameters",
    "cse_forward",
    "finite_diff_gradient",
    "forward_segment",
    "init_se_params",
    "network_se_overhead",
    "preset_spec",
    "scse_forward",
    "se_param_count",
    "sse_forward",
]
