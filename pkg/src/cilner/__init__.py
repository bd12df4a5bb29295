"""Class-incremental sequence labeling on a small hand-differentiated tagger.

Training combines a debiased cross-entropy, distillation from the previous
model, and a prototype rehearsal loss; see :mod:`cilner.trainer`.
"""

from .errors import CilnerError, ConfigError, DataError, NumericalError
from .losses import ClassPartition, HyperParams, LossBreakdown
from .metrics import StepReport, average_macro_f1
from .model import TaggerModel, expand_classifier, forward, snapshot
from .prototypes import Prototype, PrototypeStore, compute_prototypes, store_and_freeze
from .schema import LabelSet, TaskDataset, TaskSchedule, TokenSequence, build_schedule, load_conll, slice_dataset
from .synthgen import SynthSpec, generate
from .trainer import RunState, TrainConfig, evaluate, run_experiment, train_task

__version__ = "0.1.0"
