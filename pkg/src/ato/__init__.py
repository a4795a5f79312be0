"""Joint training and structured channel pruning with a mask controller.

The target network is trained by a composite mirror-descent stepper whose
group penalty is switched on for channel groups the controller masks out, so
those groups reach exact zeros and can be sliced away without fine-tuning.
"""
from ._accel import USE_NUMBA
from .config import RunConfig, ConfigError
from .graph import ModelGraph, spec_parse, forward, backward, flops
from .zig import ZigPartition, build_partition, verify_zero_invariance
from .projectors import RegularizerConfig, prox_group, halfspace_group, project
from .optim import Schedule, RecipeSchedule, OptimizerState, step
from .controller import ControllerNet, MaskVector, cn_forward, cn_loss, cn_update
from .pipeline import train, compress, evaluate

__version__ = "0.1.0"
