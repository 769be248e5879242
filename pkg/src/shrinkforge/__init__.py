"""shrinkforge: cost-aware channel pruning of small CNNs with knowledge distillation.

The numerical core is a small reverse-mode autodiff engine on numpy. A
student copy of a trained teacher is distilled under a penalty that splits
the network between a FLOP and a parameter regularizer; channels whose bn
scale collapses are then sliced out.
"""

__version__ = "0.1.0"

from .costs import cost_report, exact_flop_cost, exact_param_cost, red_metric, relaxed_cost  # noqa: E402
from .data import Dataset, load_idx, synth_generate  # noqa: E402
from .distill import DistillConfig, distill_loss, soften  # noqa: E402
from .network import (NetworkSpec, ParamStore, build, forward, load_checkpoint, resolve_spec,  # noqa: E402
                      save_checkpoint, tiny3, tiny6)
from .partition import make_plan, partition_penalty  # noqa: E402
from .pruner import prune  # noqa: E402
from .trainer import TrainConfig, train  # noqa: E402

__all__ = [
    "Dataset", "DistillConfig", "NetworkSpec", "ParamStore", "TrainConfig",
    "build", "cost_report", "distill_loss", "exact_flop_cost", "exact_param_cost", "forward", "load_checkpoint",
    "load_idx", "make_plan", "partition_penalty", "prune", "red_metric", "relaxed_cost", "resolve_spec",
    "save_checkpoint", "soften", "synth_generate", "tiny3", "tiny6", "train",
]
