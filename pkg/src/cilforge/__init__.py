"""Class-incremental learning on imbalanced data: balanced losses, margin losses and rehearsal."""

from .dataset import LabeledSet, SynthSpec, TaskDataset, TaskSequence, generate_longtail, split_scenario
from .losses import LossConfig, cil_balanced_loss, distribution_margin_loss, kd_loss, logit_balanced_loss
from .memory import MemoryBuffer, herding_select
from .metrics import average_accuracy, average_forgetting
from .model import Model
from .runner import RunConfig, RunReport, run_experiment

__version__ = "0.1.0"
