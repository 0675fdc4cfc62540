"""Point cloud completion by learning multi-step point moving paths."""

__version__ = "0.1.0"

from ._accel import USE_NUMBA, backend_name  # noqa: E402
from .data import ShapePair, generate, occlude, read_cloud, resample, synth_shape, write_cloud  # noqa: E402
from .losses import Assignment, chamfer, emd_approx, emd_exact, pmd, total_loss  # noqa: E402
from .net import NetConfig, NetworkParams, StepTrace, forward, init_params, load_checkpoint, save_checkpoint  # noqa: E402
from .tensor import Tensor, backward  # noqa: E402
from .train import TrainConfig, train  # noqa: E402
