"""CircuitGCL: scattering-based graph contrastive pretraining and
label-rebalanced parasitic estimation for circuit netlists.

The pipeline runs netlist -> circuit graph -> homogeneous operator ->
pretrained node embeddings -> downstream heads (coupling-capacitance
regression, ground-capacitance classification).  Each stage is importable
on its own; the `circuitgcl` console script drives the same code.
"""

from ._errors import (
    CheckpointError,
    CircuitGclError,
    ConfigError,
    ContractError,
    DimensionError,
    GraphFormatError,
    NetlistParseError,
    NumericError,
    TrainingError,
    UnknownNameError,
)
from .estimators import CouplingRegressor, GroundCapClassifier, ScatterEmbedder
from .graphs import (
    HomoGraph,
    homogenize,
    sample_link_subgraph,
    sample_node_subgraph,
)
from .losses import (
    GmmPrior,
    LossConfig,
    balanced_softmax_ce,
    bmc_loss,
    ce_loss,
    fit_gmm,
    focal_loss,
    gai_loss,
    mse_loss,
)
from .netlist import (
    CircuitGraph,
    LabelSpec,
    bin_ground_caps,
    coupling_dataset,
    denormalize_labels,
    ground_cap_dataset,
    in_range_mask,
    normalize_labels,
    parse_netlist,
    parse_spf_labels,
)
from .scatter import (
    EmbeddingMatrix,
    PretrainConfig,
    PretrainResult,
    encode,
    export_embeddings,
    load_checkpoint,
    normalize_embeddings,
    pretrain,
    save_checkpoint,
)
from .synth import SynthConfig, synth_generate
from .tasks import (
    EDGE_REGRESSION,
    NODE_CLASSIFICATION,
    MetricsReport,
    TaskConfig,
    TaskModel,
    classification_metrics,
    load_task_model,
    predict_edge,
    predict_edges,
    predict_node_class,
    predict_node_classes,
    regression_metrics,
    save_task_model,
    train_task,
)

__version__ = "0.1.0"

__all__ = [
    "balanced_softmax_ce",
    "bin_ground_caps",
    "bmc_loss",
    "ce_loss",
    "CheckpointError",
    "CircuitGclError",
    "CircuitGraph",
    "classification_metrics",
    "ConfigError",
    "ContractError",
    "coupling_dataset",
    "CouplingRegressor",
    "denormalize_labels",
    "DimensionError",
    "EDGE_REGRESSION",
    "EmbeddingMatrix",
    "encode",
    "export_embeddings",
    "fit_gmm",
    "focal_loss",
    "gai_loss",
    "GmmPrior",
    "GraphFormatError",
    "ground_cap_dataset",
    "GroundCapClassifier",
    "homogenize",
    "HomoGraph",
    "in_range_mask",
    "LabelSpec",
    "load_checkpoint",
    "load_task_model",
    "LossConfig",
    "MetricsReport",
    "mse_loss",
    "NetlistParseError",
    "NODE_CLASSIFICATION",
    "normalize_embeddings",
    "normalize_labels",
    "NumericError",
    "parse_netlist",
    "parse_spf_labels",
    "predict_edge",
    "predict_edges",
    "predict_node_class",
    "predict_node_classes",
    "pretrain",
    "PretrainConfig",
    "PretrainResult",
    "regression_metrics",
    "sample_link_subgraph",
    "sample_node_subgraph",
    "save_checkpoint",
    "save_task_model",
    "ScatterEmbedder",
    "synth_generate",
    "SynthConfig",
    "TaskConfig",
    "TaskModel",
    "train_task",
    "TrainingError",
    "UnknownNameError",
    "__version__",
]
