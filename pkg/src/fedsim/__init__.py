"""fedsim: a deterministic federated-learning backdoor simulator.

Numpy-only building blocks for studying how personalized federated learning
behaves under black-box backdoor attacks: a small float64 training engine,
tagged parameter trees with sharing filters, dataset poisoning, robust
aggregation rules, seven training strategies, and head-retraining defenses.
"""

from .aggregation import (AddNoise, AggregatorSpec, NormClip, add_noise,
                          fedavg_aggregate, krum_select, multi_krum_aggregate,
                          norm_clip)
from .attacks import (BadNetTrigger, BlendedTrigger, EdgeCaseTrigger, PoisonSpec,
                      SigTrigger, AsrTestSet, apply_trigger, build_asr_testset,
                      poison_client_dataset)
from .data import (ClientShards, LabeledImage, PartitionSpec, SyntheticSpec,
                   generate_synthetic, load_idx_dataset, load_per_client_dirs,
                   partition, read_idx, split_3_1_1, to_batch, write_idx)
from .defense import TuningSpec, extract_features, simple_tune
from .errors import (ConfigError, CongruenceError, DataFormatError, FedsimError,
                     ModeError, ShapeError)
from .nn import (BatchNorm, Conv2D, Dense, Flatten, MaxPool2D, Network, ReLU,
                 SgdConfig, build_convnet, cross_entropy, sgd_step, softmax)
from .orchestrator import (ExperimentPlan, ExperimentResult, FineTunePosthoc,
                           IdxSource, MetricsLog, ModelSpec, PerClientDirsSource,
                           apply_posthoc, eval_asr, eval_clean, run_experiment,
                           sample_round)
from .params import (ModelUpdate, ParamTag, ParamTree, ShareFilter, apply_filter,
                     merge_into, tree_axpy, tree_from_bytes, tree_l2_distance,
                     tree_sub, tree_to_bytes)
from .strategies import (ClientState, DittoSpec, FedAvgSpec, FedBnSpec, FedEmSpec,
                         FedRepSpec, FineTuneSpec, PFedMeSpec, make_strategy,
                         posthoc_finetune)

__version__ = "0.1.0"
