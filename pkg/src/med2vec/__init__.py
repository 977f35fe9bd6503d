"""Non-negative, interpretable embeddings of medical codes and visits."""

from .corpus import (
    Corpus,
    CorpusFormatError,
    GrouperMap,
    PatientRecord,
    SynthConfig,
    Visit,
    Vocabulary,
    generate_synthetic,
    group_targets,
    load_corpus,
    load_grouper,
    load_labels,
    save_corpus,
    save_grouper,
    save_labels,
    split_corpus,
    to_multi_hot,
)
from .estimator import Med2Vec
from .evaluation import (
    CodeEmbeddings,
    EvalReport,
    ProbeConfig,
    auc,
    auc_probe,
    code_cluster_nmi,
    kmeans,
    nearest_codes,
    nmi,
    recall_probe,
    topk_recall,
)
from .interpret import (
    CoordinateReport,
    InfluenceVector,
    classifier_influence,
    render_report,
    top_codes_for_coordinate,
    top_coords_for_visit_coordinate,
)
from .model import (
    Gradients,
    LossBreakdown,
    ModelParams,
    NonFiniteLossError,
    backward,
    code_loss,
    code_pair_prob,
    init_params,
    intermediate_rep,
    load_checkpoint,
    predict_neighbors,
    save_checkpoint,
    unified_loss,
    visit_loss,
    visit_rep,
)
from .trainer import (
    OptimizerState,
    TrainConfig,
    TrainingDivergedError,
    TrainLog,
    adadelta_step,
    make_batches,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "CorpusFormatError",
    "GrouperMap",
    "PatientRecord",
    "SynthConfig",
    "Visit",
    "Vocabulary",
    "generate_synthetic",
    "group_targets",
    "load_corpus",
    "load_grouper",
    "load_labels",
    "save_corpus",
    "save_grouper",
    "save_labels",
    "split_corpus",
    "to_multi_hot",
    "Med2Vec",
    "CodeEmbeddings",
    "EvalReport",
    "ProbeConfig",
    "auc",
    "auc_probe",
    "code_cluster_nmi",
    "kmeans",
    "nearest_codes",
    "nmi",
    "recall_probe",
    "topk_recall",
    "CoordinateReport",
    "InfluenceVector",
    "classifier_influence",
    "render_report",
    "top_codes_for_coordinate",
    "top_coords_for_visit_coordinate",
    "Gradients",
    "LossBreakdown",
    "ModelParams",
    "NonFiniteLossError",
    "backward",
    "code_loss",
    "code_pair_prob",
    "init_params",
    "intermediate_rep",
    "load_checkpoint",
    "predict_neighbors",
    "save_checkpoint",
    "unified_loss",
    "visit_loss",
    "visit_rep",
    "OptimizerState",
    "TrainConfig",
    "TrainingDivergedError",
    "TrainLog",
    "adadelta_step",
    "make_batches",
    "train",
]
